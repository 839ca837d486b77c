"""Event-based second-order correlation of click streams.

Timestamps are int64 nanoseconds. Histogram bin k covers lags
[k*bin, (k+1)*bin) of b - a, a from the start stream and b from the stop stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numba
import numpy as np
from sklearn.base import BaseEstimator

from .detection import ClickStream


class NormalizationError(ValueError):
    pass


@dataclass
class CorrelationHistogram:
    """Coincidence histogram, optionally normalized to g2.

    edges are lag bin edges in seconds (len(counts) + 1). ``exposure`` is the
    summed r_A*r_B*(T - tau_k)*bin over segments and directions, so that
    g2 = counts / exposure.
    """

    edges: np.ndarray
    counts: np.ndarray
    g2: np.ndarray | None = None
    err: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def lags(self) -> np.ndarray:
        """Left bin edges (s); the lag assigned to each bin."""
        return self.edges[:-1]

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def normalized(self) -> bool:
        return self.g2 is not None

    def __add__(self, other: "CorrelationHistogram") -> "CorrelationHistogram":
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("binning mismatch")
        meta = dict(self.meta)
        meta["merged"] = meta.get("merged", 1) + other.meta.get("merged", 1)
        return CorrelationHistogram(self.edges, self.counts + other.counts, meta=meta)

    def to_table(self) -> np.ndarray:
        """Columns lag_s, counts, g2, err."""
        g2 = self.g2 if self.g2 is not None else np.full(len(self.counts), np.nan)
        err = self.err if self.err is not None else np.full(len(self.counts), np.nan)
        return np.column_stack([self.lags, self.counts, g2, err])


@numba.njit(cache=True)
def _multistop(a, b, max_lag, bin_w, nbins, auto):
    hist = np.zeros(nbins, dtype=np.int64)
    lo = 0
    nb = b.size
    for i in range(a.size):
        ai = a[i]
        while lo < nb and b[lo] < ai:
            lo += 1
        j = lo
        while j < nb:
            d = b[j] - ai
            if d >= max_lag:
                break
            if not (auto and j == i):
                hist[d // bin_w] += 1
            j += 1
    return hist


@numba.njit(cache=True)
def _singlestop(a, b, max_lag, bin_w, nbins, auto):
    hist = np.zeros(nbins, dtype=np.int64)
    lo = 0
    nb = b.size
    for i in range(a.size):
        ai = a[i]
        if auto:
            j = i + 1
        else:
            while lo < nb and b[lo] < ai:
                lo += 1
            j = lo
        if j < nb:
            d = b[j] - ai
            if d < max_lag:
                hist[d // bin_w] += 1
    return hist


def _as_ns(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.int64)
    if x.size > 1 and np.any(x[1:] < x[:-1]):
        raise ValueError("click stream must be sorted")
    return x


def _grid(bin_width: float, max_lag: float) -> tuple[int, int, int]:
    if not max_lag > 0:
        raise ValueError("max_lag must be positive")
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    bw = int(round(bin_width * 1e9))
    if bw < 1:
        raise ValueError("bin_width below 1 ns timestamp resolution")
    nbins = int(np.ceil(round(max_lag * 1e9) / bw))
    return bw, nbins, nbins * bw


def multistop_cross(a, b=None, bin_width: float = 100e-9, max_lag: float = 20e-6,
                    two_sided: bool = False) -> CorrelationHistogram:
    """All-pairs coincidence histogram of stop stream ``b`` relative to ``a``.

    ``b=None`` (or the same array object) selects auto mode: self-pairs are
    excluded, a pair at positive lag is counted once and a pair of equal
    timestamps twice (both orders), so every bin has the same exposure. With
    ``two_sided`` the reverse direction is added (lags of a relative to b), so
    the histogram holds pairs at |lag| and its exposure doubles.
    """
    auto = b is None or b is a
    A = _as_ns(a)
    B = A if auto else _as_ns(b)
    bw, nbins, lag_ns = _grid(bin_width, max_lag)
    counts = _multistop(A, B, lag_ns, bw, nbins, auto)
    directions = 1
    if two_sided and not auto:
        counts = counts + _multistop(B, A, lag_ns, bw, nbins, False)
        directions = 2
    edges = np.arange(nbins + 1) * bw * 1e-9
    return CorrelationHistogram(edges, counts, meta={"mode": "multistop", "auto": auto,
                                                     "directions": directions, "biased": False})


def singlestop_cross(a, b=None, bin_width: float = 100e-9, max_lag: float = 20e-6) -> CorrelationHistogram:
    """First-stop histogram: only the first b click after each a click counts.

    Reproduces the pile-up bias of start-stop time-to-amplitude converters.
    """
    auto = b is None or b is a
    A = _as_ns(a)
    B = A if auto else _as_ns(b)
    bw, nbins, lag_ns = _grid(bin_width, max_lag)
    counts = _singlestop(A, B, lag_ns, bw, nbins, auto)
    edges = np.arange(nbins + 1) * bw * 1e-9
    return CorrelationHistogram(edges, counts, meta={"mode": "singlestop", "auto": auto,
                                                     "directions": 1, "biased": True})


def brute_force_counts(a, b, bin_width: float, max_lag: float, auto: bool = False) -> np.ndarray:
    """O(n^2) reference for :func:`multistop_cross` (small streams only)."""
    A = np.asarray(a, dtype=np.int64)
    B = np.asarray(b, dtype=np.int64)
    bw, nbins, lag_ns = _grid(bin_width, max_lag)
    d = B[None, :] - A[:, None]
    ok = (d >= 0) & (d < lag_ns)
    if auto:
        np.fill_diagonal(ok, False)
    return np.bincount((d[ok] // bw).astype(np.int64), minlength=nbins)[:nbins]


def exposure(edges, rate_a: float, rate_b: float, duration: float, directions: int = 1) -> np.ndarray:
    """Expected counts per bin for uncorrelated streams: r_A r_B times the bin integral of (T - tau)."""
    edges = np.asarray(edges, dtype=float)
    a = np.clip(edges[:-1], None, duration)
    b = np.clip(edges[1:], None, duration)
    # integral of (T - tau) over [a, b], zero beyond T
    overlap = (b - a) * (duration - 0.5 * (a + b))
    return directions * rate_a * rate_b * overlap


def normalize(hist: CorrelationHistogram, rate_a=None, rate_b=None, duration=None,
              segments=None) -> CorrelationHistogram:
    """g2_k = C_k / (r_A r_B bin (T - tau_k)), tau_k the bin center, with Poisson errors sqrt(max(C_k, 1)).

    For data pooled from several segments pass ``segments`` as a list of
    (r_A, r_B, T) tuples; exposures add. Using the bin center makes the
    edge correction exact for each bin.
    """
    directions = hist.meta.get("directions", 1)
    if segments is None:
        if rate_a is None or duration is None:
            raise NormalizationError("rates and duration required")
        rate_b = rate_a if rate_b is None else rate_b
        segments = [(rate_a, rate_b, duration)]
    den = np.zeros(len(hist.counts))
    for ra, rb, T in segments:
        if not (ra > 0 and rb > 0):
            raise NormalizationError("zero count rate: normalization undefined")
        if not T > hist.edges[-1]:
            raise NormalizationError("segment duration must exceed max_lag")
        den += exposure(hist.edges, ra, rb, T, directions)
    g2 = hist.counts / den
    # empty bins get the one-count error so weighted fits stay finite
    err = np.sqrt(np.maximum(hist.counts, 1)) / den
    meta = dict(hist.meta)
    meta.update(segments=[tuple(map(float, s)) for s in segments], corrected=False)
    return replace(hist, g2=g2, err=err, meta=meta)


def correlate(stream_a, stream_b=None, duration: float | None = None, bin_width: float = 100e-9,
              max_lag: float = 20e-6, two_sided: bool = False, single_stop: bool = False) -> CorrelationHistogram:
    """Histogram and normalize using rates measured from the same streams."""
    a = np.asarray(stream_a, dtype=np.int64)
    auto = stream_b is None
    b = a if auto else np.asarray(stream_b, dtype=np.int64)
    if duration is None:
        raise NormalizationError("duration required")
    if single_stop:
        hist = singlestop_cross(a, None if auto else b, bin_width, max_lag)
    else:
        hist = multistop_cross(a, None if auto else b, bin_width, max_lag, two_sided=two_sided)
    return normalize(hist, len(a) / duration, len(b) / duration, duration)


def correlate_channels(stream: ClickStream, pair=(0, 1), bin_width: float = 100e-9,
                       max_lag: float = 20e-6, two_sided: bool = True,
                       single_stop: bool = False) -> CorrelationHistogram:
    """Correlate two channels of a ClickStream; ``"total"`` names the merged stream."""
    def pick(c):
        return stream.total() if c == "total" else stream.channel(c)
    a, b = pick(pair[0]), pick(pair[1])
    same = pair[0] == pair[1]
    hist = correlate(a, None if same else b, stream.duration, bin_width, max_lag,
                     two_sided=two_sided and not same, single_stop=single_stop)
    labs = [c if isinstance(c, str) else stream.labels[c] for c in pair]
    hist.meta["pair"] = labs
    hist.meta["config_hash"] = stream.config_hash
    if same and not single_stop:
        hist.meta["note"] = "auto-correlation: lags below the dead time are suppressed"
    return hist


def background_correct(hist: CorrelationHistogram, p: float) -> CorrelationHistogram:
    """1 + (g2 - 1)/p^2 for background uncorrelated with the signal and itself."""
    if not 0 < p <= 1:
        raise ValueError(f"signal fraction must lie in (0, 1], got {p!r}")
    if hist.g2 is None:
        raise ValueError("histogram must be normalized first")
    meta = dict(hist.meta)
    meta.update(corrected=True, signal_fraction=float(p),
                validity="background uncorrelated with signal and with itself")
    return replace(hist, g2=1.0 + (hist.g2 - 1.0) / p ** 2, err=hist.err / p ** 2, meta=meta)


def sum_rule_residual(g_pp: CorrelationHistogram, g_pm: CorrelationHistogram,
                      g_tot: CorrelationHistogram) -> tuple[np.ndarray, float]:
    """Residual g_pp + g_pm - 2 g_tot and its max |residual|/sigma."""
    for h in (g_pm, g_tot):
        if not np.array_equal(h.edges, g_pp.edges):
            raise ValueError("binning mismatch")
    res = g_pp.g2 + g_pm.g2 - 2 * g_tot.g2
    sig = np.sqrt(g_pp.err ** 2 + g_pm.err ** 2 + 4 * g_tot.err ** 2)
    ok = sig > 0
    return res, float(np.max(np.abs(res[ok]) / sig[ok])) if ok.any() else 0.0


def sum_rule_check(streams, bin_width: float = 100e-9, max_lag: float = 20e-6):
    """Sum rule on one run split into two channels and their total.

    Several streams are treated as consecutive pieces of one run, so every
    histogram is normalized with the run-averaged channel rates. Returns the
    residual curve, max |residual|/sigma and the three normalized histograms
    (same-channel g_++, cross-channel g_+-, total g).
    """
    if isinstance(streams, ClickStream):
        streams = [streams]
    counts = {k: 0 for k in ("pp", "pm", "tot")}
    edges = None
    n_a = n_b = 0
    overlap = 0.0
    for s in streams:
        if s.duration <= max_lag:
            continue
        a, b, tot = s.channel(0), s.channel(1), s.total()
        n_a, n_b = n_a + len(a), n_b + len(b)
        ha = multistop_cross(a, None, bin_width, max_lag)
        hb = multistop_cross(b, None, bin_width, max_lag)
        hx = multistop_cross(a, b, bin_width, max_lag, two_sided=True)
        ht = multistop_cross(tot, None, bin_width, max_lag)
        edges = ha.edges
        counts["pp"] = counts["pp"] + ha.counts + hb.counts
        counts["pm"] = counts["pm"] + hx.counts
        counts["tot"] = counts["tot"] + ht.counts
        overlap = overlap + exposure(edges, 1.0, 1.0, s.duration)
    if edges is None:
        raise NormalizationError("no stream longer than max_lag")
    t_sum = sum(s.duration for s in streams if s.duration > max_lag)
    ra, rb = n_a / t_sum, n_b / t_sum
    if ra == 0 or rb == 0:
        raise NormalizationError("a channel has no clicks")
    dens = {"pp": (ra ** 2 + rb ** 2) * overlap, "pm": 2 * ra * rb * overlap, "tot": (ra + rb) ** 2 * overlap}
    hists = []
    for key in ("pp", "pm", "tot"):
        c, den = counts[key], dens[key]
        hists.append(CorrelationHistogram(edges, c, c / den, np.sqrt(np.maximum(c, 1)) / den,
                                          meta={"mode": "multistop", "pair": key, "corrected": False}))
    res, worst = sum_rule_residual(*hists)
    return res, worst, tuple(hists)


def contrast_at_zero(hist: CorrelationHistogram, n_bins: int = 1) -> tuple[float, float]:
    """Mean g2 - 1 over the first bins and its standard error."""
    c = hist.counts[:n_bins].sum()
    g = hist.g2[:n_bins].mean()
    rel = 1 / np.sqrt(c) if c > 0 else np.inf
    return float(g - 1), float(g * rel)


# ---------------------------------------------------------------- segmentation


@dataclass(frozen=True)
class Segment:
    t_start: float
    t_end: float
    n_atoms: int
    mean_rate: float


def _window_counts(t_ns: np.ndarray, duration: float, window: float) -> np.ndarray:
    nwin = int(np.floor(duration / window + 1e-9))
    edges = np.round(np.arange(nwin + 1) * window * 1e9).astype(np.int64)
    return np.diff(np.searchsorted(t_ns, edges))


def _refine_boundary(t_s, lo, hi, r1, r2):
    """Maximum-likelihood Poisson change time in [lo, hi] between rates r1 and r2."""
    if r1 <= 0 or r2 <= 0 or r1 == r2:
        return 0.5 * (lo + hi)
    ev = t_s[(t_s >= lo) & (t_s <= hi)]
    cand = np.concatenate([[lo], ev, [hi]])
    n_before = np.concatenate([[0], np.arange(len(ev)), [len(ev)]])
    # log L(c) = n1 log r1 - r1 (c-lo) + n2 log r2 - r2 (hi-c), events at c go to segment 2
    n = len(ev)
    ll = n_before * np.log(r1) - r1 * (cand - lo) + (n - n_before) * np.log(r2) - r2 * (hi - cand)
    return float(cand[int(np.argmax(ll))])


def segment_by_atom_number(t_ns, duration: float, single_atom_rate: float, background_rate: float,
                           window: float = 1e-3, smooth: int = 21, confirm: int = 3) -> list[Segment]:
    """Label the record with the instantaneous number of trapped atoms.

    Window counts are smoothed over ``smooth`` windows, converted to
    N = (rate - background)/single_atom_rate and classified with a +-0.5
    hysteresis band that needs ``confirm`` consecutive windows to switch.
    Change points are then refined at the event level by a two-rate Poisson
    likelihood within the smoothing span.
    """
    if not single_atom_rate > 0:
        raise ValueError("single_atom_rate must be positive")
    if background_rate < 0:
        raise ValueError("background_rate must be non-negative")
    if window < 1e-6 or window > duration:
        raise ValueError("window must lie between 1 us and the record duration")
    t_ns = _as_ns(t_ns)
    counts = _window_counts(t_ns, duration, window)
    nwin = len(counts)
    if smooth > 1:
        k = np.ones(smooth)
        num = np.convolve(counts, k, mode="same")
        den = np.convolve(np.ones(nwin), k, mode="same")
        rate = num / den / window
    else:
        rate = counts / window
    nhat = (rate - background_rate) / single_atom_rate

    labels = np.empty(nwin, dtype=np.int64)
    cur = max(int(np.rint(nhat[:confirm].mean())), 0)
    streak = 0
    for w in range(nwin):
        if abs(nhat[w] - cur) > 0.5:
            streak += 1
            if streak >= confirm:
                cur = max(int(np.rint(nhat[w])), 0)
                labels[w - confirm + 1:w + 1] = cur
                streak = 0
        else:
            streak = 0
        labels[w] = cur

    change = np.flatnonzero(np.diff(labels)) + 1
    bounds = [0.0]
    t_s = t_ns * 1e-9
    half = (smooth // 2 + confirm) * window
    levels = [int(labels[0])] + [int(labels[c]) for c in change]
    for i, c in enumerate(change):
        tc = c * window
        lo = max(tc - half, bounds[-1])
        hi = min(tc + half, duration if i + 1 == len(change) else change[i + 1] * window)
        r1 = background_rate + levels[i] * single_atom_rate
        r2 = background_rate + levels[i + 1] * single_atom_rate
        bounds.append(_refine_boundary(t_s, lo, hi, r1, r2))
    bounds.append(float(duration))

    segs = []
    for i, n in enumerate(levels):
        a, b = bounds[i], bounds[i + 1]
        if b <= a:
            continue
        m = np.searchsorted(t_s, b) - np.searchsorted(t_s, a)
        if segs and segs[-1].n_atoms == n:
            prev = segs.pop()
            a = prev.t_start
            m += round(prev.mean_rate * (prev.t_end - prev.t_start))
        segs.append(Segment(float(a), float(b), n, m / (b - a)))
    return segs


def split_by_segments(stream: ClickStream, segments, n_atoms: int, margin: float = 0.0) -> list[ClickStream]:
    """Sub-streams (time-shifted to start at 0) of every segment labelled ``n_atoms``."""
    out = []
    for s in segments:
        if s.n_atoms != n_atoms:
            continue
        a, b = s.t_start + margin, s.t_end - margin
        if b <= a:
            continue
        lo_ns, hi_ns = int(np.ceil(a * 1e9)), int(np.floor(b * 1e9))
        times = []
        for t in stream.times:
            sel = t[(t >= lo_ns) & (t < hi_ns)]
            times.append(sel - lo_ns)
        out.append(ClickStream(tuple(times), stream.labels, (hi_ns - lo_ns) * 1e-9, stream.config_hash))
    return out


def _pooled_parts(streams, pair, bin_width, max_lag, two_sided):
    """Per-stream (counts, n_a, n_b, T); streams not longer than max_lag are skipped."""
    parts = []
    for s in streams:
        if s.duration <= max_lag:
            continue
        a, b = s.channel(pair[0]), s.channel(pair[1])
        h = multistop_cross(a, b, bin_width, max_lag, two_sided=two_sided)
        parts.append((h, len(a), len(b), s.duration))
    return parts


def _normalize_parts(parts, normalization, two_sided):
    if normalization == "segment":
        parts = [p for p in parts if p[1] > 0 and p[2] > 0]
    if not parts:
        raise NormalizationError("no usable segments")
    total = replace(parts[0][0], meta=dict(parts[0][0].meta))
    for p in parts[1:]:
        total = total + p[0]
    if normalization == "pooled":
        t_sum = sum(p[3] for p in parts)
        ra, rb = sum(p[1] for p in parts) / t_sum, sum(p[2] for p in parts) / t_sum
        segs = [(ra, rb, p[3]) for p in parts]
    else:
        segs = [(p[1] / p[3], p[2] / p[3], p[3]) for p in parts]
    total.meta["directions"] = 2 if two_sided else 1
    out = normalize(total, segments=segs)
    out.meta["normalization"] = normalization
    return out


def correlate_pooled(streams, pair=(0, 1), bin_width: float = 100e-9, max_lag: float = 20e-6,
                     two_sided: bool = True, normalization: str = "segment") -> CorrelationHistogram:
    """Sum coincidences over several streams; exposures add segment by segment.

    ``normalization="segment"`` uses each stream's own rates, as for runs
    recorded under different conditions. ``"pooled"`` uses the rates of all
    streams together, treating them as pieces of one long run of identical
    atoms. Per-segment rates bias g2 by about 2 tau_c/T times the contrast,
    which matters once segments are only a few correlation times long.
    """
    if normalization not in ("segment", "pooled"):
        raise ValueError(f"normalization must be 'segment' or 'pooled', got {normalization!r}")
    parts = _pooled_parts(streams, pair, bin_width, max_lag, two_sided)
    return _normalize_parts(parts, normalization, two_sided)


def jackknife_pooled(streams, estimate, pair=(0, 1), bin_width: float = 100e-9, max_lag: float = 20e-6,
                     two_sided: bool = True, normalization: str = "pooled", n_blocks: int = 20):
    """Delete-a-block jackknife over independent streams.

    ``estimate`` maps a normalized histogram to a 1-d array of parameters.
    Histogram bins share clicks, so per-bin Poisson errors understate the
    uncertainty of fitted parameters; resampling whole streams does not.
    Returns the full-data estimate and the jackknife covariance.
    """
    parts = _pooled_parts(streams, pair, bin_width, max_lag, two_sided)
    full = np.atleast_1d(np.asarray(estimate(_normalize_parts(parts, normalization, two_sided)), float))
    blocks = [b for b in np.array_split(np.arange(len(parts)), min(n_blocks, len(parts))) if len(b)]
    if len(blocks) < 2:
        raise ValueError("jackknife needs at least two streams")
    reps = []
    for blk in blocks:
        drop = set(blk.tolist())
        sub = [p for i, p in enumerate(parts) if i not in drop]
        reps.append(np.atleast_1d(np.asarray(estimate(_normalize_parts(sub, normalization, two_sided)), float)))
    reps = np.array(reps)
    n = len(blocks)
    d = reps - reps.mean(axis=0)
    cov = (n - 1) / n * d.T @ d
    return full, cov


# ---------------------------------------------------------------- estimators


class MultiStopCorrelator(BaseEstimator):
    """Estimator wrapper: ``fit`` on a ClickStream computes the normalized histogram."""

    def __init__(self, pair=(0, 1), bin_width=100e-9, max_lag=20e-6, two_sided=True,
                 single_stop=False, signal_fraction=None):
        self.pair = pair
        self.bin_width = bin_width
        self.max_lag = max_lag
        self.two_sided = two_sided
        self.single_stop = single_stop
        self.signal_fraction = signal_fraction

    def fit(self, X: ClickStream, y=None):
        hist = correlate_channels(X, self.pair, self.bin_width, self.max_lag,
                                  two_sided=self.two_sided, single_stop=self.single_stop)
        if self.signal_fraction is not None:
            hist = background_correct(hist, self.signal_fraction)
        self.histogram_ = hist
        return self

    def transform(self, X: ClickStream) -> np.ndarray:
        return self.fit(X).histogram_.to_table()


class AtomNumberSegmenter(BaseEstimator):
    """Estimator wrapper around :func:`segment_by_atom_number`.

    ``fit`` takes a ClickStream (all channels pooled); ``predict`` maps times
    in seconds to atom numbers.
    """

    def __init__(self, single_atom_rate=5e3, background_rate=0.0, window=1e-3, smooth=21, confirm=3):
        self.single_atom_rate = single_atom_rate
        self.background_rate = background_rate
        self.window = window
        self.smooth = smooth
        self.confirm = confirm

    def fit(self, X: ClickStream, y=None):
        self.segments_ = segment_by_atom_number(X.total(), X.duration, self.single_atom_rate,
                                                self.background_rate, self.window, self.smooth,
                                                self.confirm)
        return self

    def predict(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        starts = np.array([s.t_start for s in self.segments_])
        idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(starts) - 1)
        return np.array([s.n_atoms for s in self.segments_])[idx]
