"""Detection chain: dipole projection, polarization analyzer, APDs.

Emission events from :mod:`motcorr.trajectory` are turned into per-channel
click timestamps (integer nanoseconds on the time-tagger grid).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .field import SQRT2, quantization_frames
from .trajectory import EmissionRecord

ANALYZER_LABELS = {"circular": ("l", "r"), "linear": ("v", "h"), "none": ("a", "b")}


@dataclass(frozen=True)
class DetectionGeometry:
    """Collection optics and detector parameters.

    Rates are in Hz, times in seconds. The default viewing direction lies in
    the xy-plane at 45 degrees to the x and y beams.
    """

    k_det: tuple = (1 / SQRT2, 1 / SQRT2, 0.0)
    solid_angle_fraction: float = 0.05
    quantum_efficiency: float = 0.47
    dark_rate: float = 10.0
    stray_rate: float = 0.0
    resolution: float = 100e-9
    dead_time: float = 700e-9

    def __post_init__(self):
        k = np.asarray(self.k_det, dtype=float)
        if k.shape != (3,) or not np.isclose(np.linalg.norm(k), 1.0, atol=1e-9):
            raise ValueError(f"k_det must be a unit 3-vector, got {self.k_det!r}")
        for name in ("solid_angle_fraction", "quantum_efficiency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")
        # peak dipole weight is 3/2 (viewing perpendicular to a linear dipole)
        if 1.5 * self.solid_angle_fraction * self.quantum_efficiency > 1.0:
            raise ValueError("solid_angle_fraction * quantum_efficiency must not exceed 2/3")
        for name in ("dark_rate", "stray_rate", "dead_time"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")

    @property
    def efficiency(self) -> float:
        return self.solid_angle_fraction * self.quantum_efficiency

    @property
    def resolution_ns(self) -> int:
        return int(round(self.resolution * 1e9))

    @property
    def dead_time_ns(self) -> int:
        return int(round(self.dead_time * 1e9))


@dataclass(frozen=True)
class AnalyzerConfig:
    """Polarization optics in front of the two APDs.

    circular: quarter-wave plate + polarizing splitter (channels l, r);
    linear: polarizing splitter (v, h); none: 50/50 non-polarizing splitter.
    """

    kind: str = "circular"

    def __post_init__(self):
        if self.kind not in ANALYZER_LABELS:
            raise ValueError(f"analyzer kind must be one of {sorted(ANALYZER_LABELS)}, got {self.kind!r}")

    @property
    def labels(self) -> tuple[str, str]:
        return ANALYZER_LABELS[self.kind]


def transverse_basis(k_det) -> tuple[np.ndarray, np.ndarray]:
    """(h, v) spanning the plane normal to k_det, with h x v = k_det.

    v is lab z projected off k_det (lab x when looking along z).
    """
    k = np.asarray(k_det, dtype=float)
    k = k / np.linalg.norm(k)
    ref = np.array([0.0, 0.0, 1.0]) if abs(k[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    v = ref - k * (ref @ k)
    v /= np.linalg.norm(v)
    h = np.cross(v, k)
    return h, v


def channel_vectors(k_det, analyzer: AnalyzerConfig) -> np.ndarray:
    """Polarization vectors accepted by channels A and B (rows)."""
    h, v = transverse_basis(k_det)
    if analyzer.kind == "circular":
        # l carries positive helicity about k_det
        return np.array([(h + 1j * v) / SQRT2, (h - 1j * v) / SQRT2])
    if analyzer.kind == "linear":
        return np.array([v + 0j, h + 0j])
    return np.zeros((2, 3), dtype=complex)


def emission_vectors(q, axes) -> np.ndarray:
    """Complex polarization of the emitted dipole, shape (n, 3)."""
    q = np.atleast_1d(np.asarray(q))
    frames = quantization_frames(np.atleast_2d(np.asarray(axes, dtype=float)))
    x, y, z = frames[:, 0], frames[:, 1], frames[:, 2]
    sign = q[:, None].astype(float)
    circ = -sign * (x + 1j * sign * y) / SQRT2
    return np.where(q[:, None] == 0, z + 0j, circ)


def channel_probabilities(q, axes, geom: DetectionGeometry, analyzer: AnalyzerConfig) -> np.ndarray:
    """Vectorized detection probabilities, shape (n, 3): (p_A, p_B, p_escape)."""
    eps = emission_vectors(q, axes)
    k = np.asarray(geom.k_det, dtype=float)
    eperp = eps - k * (eps @ k)[:, None]
    # dipole pattern (3/8pi)|eps_perp|^2 integrated over the collection solid angle
    scale = 1.5 * geom.efficiency
    if analyzer.kind == "none":
        w = scale * np.sum(np.abs(eperp) ** 2, axis=1)
        pa = pb = 0.5 * w
    else:
        ch = channel_vectors(k, analyzer)
        amp = eperp @ ch.conj().T
        pa, pb = scale * np.abs(amp[:, 0]) ** 2, scale * np.abs(amp[:, 1]) ** 2
    return np.stack([pa, pb, 1.0 - pa - pb], axis=1)


def project_emission(q: int, quant_axis, geom: DetectionGeometry,
                     analyzer: AnalyzerConfig) -> tuple[float, float, float]:
    """Probabilities that one photon of spherical index q lands in A, in B, or is lost."""
    if q not in (-1, 0, 1):
        raise ValueError(f"q must be -1, 0 or +1, got {q!r}")
    axis = np.asarray(quant_axis, dtype=float)
    if not np.isclose(np.linalg.norm(axis), 1.0, atol=1e-9):
        raise ValueError("quant_axis must be a unit vector")
    p = channel_probabilities([q], axis[None, :], geom, analyzer)[0]
    return float(p[0]), float(p[1]), float(p[2])


def config_hash(*parts) -> str:
    """Short stable digest of dataclass configs."""
    payload = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                         sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class ClickStream:
    """Per-channel click timestamps in integer nanoseconds.

    ``signal`` flags, per channel, which clicks came from the atom (kept for
    diagnostics; a real time tagger cannot tell).
    """

    times: tuple
    labels: tuple
    duration: float
    config_hash: str = ""
    signal: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = tuple(np.asarray(t, dtype=np.int64) for t in self.times)
        if len(self.times) != len(self.labels):
            raise ValueError("one label per channel required")
        if self.signal is not None:
            self.signal = tuple(np.asarray(s, dtype=bool) for s in self.signal)

    def channel(self, label) -> np.ndarray:
        if isinstance(label, (int, np.integer)):
            return self.times[label]
        try:
            return self.times[self.labels.index(label)]
        except ValueError:
            raise KeyError(f"unknown channel {label!r}; have {self.labels}") from None

    def seconds(self, label) -> np.ndarray:
        return self.channel(label) * 1e-9

    def rates(self) -> dict:
        return {lab: len(t) / self.duration for lab, t in zip(self.labels, self.times)}

    def total(self) -> np.ndarray:
        """All channels merged into one sorted stream."""
        return np.sort(np.concatenate(self.times), kind="stable")

    @property
    def n_clicks(self) -> int:
        return int(sum(len(t) for t in self.times))


@numba.njit(cache=True)
def _dead_time_mask(t, dead):
    keep = np.zeros(t.size, dtype=np.bool_)
    last = np.int64(0)
    have = False
    for i in range(t.size):
        if not have or t[i] - last >= dead:
            keep[i] = True
            last = t[i]
            have = True
    return keep


def dead_time_filter(t_ns, dead_ns: int) -> np.ndarray:
    """Non-paralyzable dead time: boolean mask of clicks that survive."""
    t = np.ascontiguousarray(t_ns, dtype=np.int64)
    if t.size and np.any(np.diff(t) < 0):
        raise ValueError("timestamps must be sorted")
    if dead_ns <= 0:
        return np.ones(t.size, dtype=bool)
    return _dead_time_mask(t, np.int64(dead_ns))


def background_rates(geom: DetectionGeometry, analyzer: AnalyzerConfig) -> tuple[float, float]:
    """Uncorrelated click rate per channel (dark counts plus half the stray light)."""
    per = geom.dark_rate + 0.5 * geom.stray_rate
    return per, per


def detect(record: EmissionRecord, geom: DetectionGeometry, analyzer: AnalyzerConfig,
           seed=None, duration: float | None = None) -> ClickStream:
    """Turn emissions into a two-channel click stream.

    Order of operations: Bernoulli channel assignment per photon, Poisson
    background, quantization to the tagger grid, then dead time per channel.
    """
    rng = np.random.default_rng(seed)
    T = record.duration if duration is None else duration
    t = np.asarray(record.t, dtype=float)
    if t.size and np.any(np.diff(t) < 0):
        raise ValueError("emission record must be sorted in time")
    if t.size:
        p = channel_probabilities(record.q, record.axis, geom, analyzer)
        u = rng.random(t.size)
        chan = np.where(u < p[:, 0], 0, np.where(u < p[:, 0] + p[:, 1], 1, -1))
    else:
        chan = np.zeros(0, dtype=int)
    res = geom.resolution_ns
    times, signal = [], []
    for c, rate in enumerate(background_rates(geom, analyzer)):
        sig = t[chan == c]
        nb = rng.poisson(rate * T) if rate > 0 and T > 0 else 0
        bg = rng.random(nb) * T
        ts = np.concatenate([sig, bg])
        flag = np.concatenate([np.ones(sig.size, bool), np.zeros(nb, bool)])
        ns = (np.floor(ts * 1e9 / res).astype(np.int64)) * res
        order = np.argsort(ns, kind="stable")
        ns, flag = ns[order], flag[order]
        keep = dead_time_filter(ns, geom.dead_time_ns)
        times.append(ns[keep])
        signal.append(flag[keep])
    return ClickStream(tuple(times), analyzer.labels, float(T),
                       config_hash(geom, analyzer), tuple(signal))


def signal_fraction(total_rate: float, background_rate: float) -> float:
    """p = S/(S+B) from the in-trap rate S+B and a no-atom calibration rate B."""
    if not total_rate > 0:
        raise ValueError("total rate must be positive")
    if background_rate < 0:
        raise ValueError("background rate must be non-negative")
    return float(np.clip((total_rate - background_rate) / total_rate, 0.0, 1.0))


def estimate_signal_fraction(stream: ClickStream, calibration: ClickStream) -> tuple[float, float]:
    """Signal fraction and its Poisson standard error from two runs."""
    n, T = stream.n_clicks, stream.duration
    nb, Tb = calibration.n_clicks, calibration.duration
    if n == 0:
        raise ValueError("stream has no clicks")
    tot, bg = n / T, nb / Tb
    p = signal_fraction(tot, bg)
    # dp = B/tot^2 dtot - dB/tot
    var = (bg / tot ** 2) ** 2 * (n / T ** 2) + (1 / tot) ** 2 * (nb / Tb ** 2)
    return p, float(np.sqrt(var))
