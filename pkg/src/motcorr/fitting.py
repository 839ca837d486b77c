"""Curve fits for correlation functions and derived physical quantities.

A small damped Gauss-Newton (Levenberg-Marquardt) solver is used for the
nonlinear models so that results are deterministic and iteration-bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin

from .atomic import KB, AtomSpec
from .trajectory import two_level_g2_oracle

MAX_ITER = 200
RTOL = 1e-10
LOG_SPAN = 25.0


class FitError(RuntimeError):
    """Raised when the solver does not converge; ``diagnostics`` holds the last state."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass
class LMResult:
    p: np.ndarray
    cov: np.ndarray
    chi2: float
    dof: int
    n_iter: int
    converged: bool


def levenberg_marquardt(resid, jac, p0, max_iter: int = MAX_ITER, rtol: float = RTOL,
                        lam0: float = 1e-3) -> LMResult:
    """Minimize sum(resid(p)**2). ``resid`` returns whitened residuals, ``jac`` their Jacobian."""
    p = np.asarray(p0, dtype=float).copy()
    r = resid(p)
    cost = r @ r
    lam = lam0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = jac(p)
        g = J.T @ r
        H = J.T @ J
        step_ok = False
        while lam < 1e16:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-300))
            try:
                dp = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            pn = p + dp
            # wild trial steps may overflow; they are rejected below
            with np.errstate(over="ignore", invalid="ignore"):
                rn = resid(pn)
                cn = rn @ rn
            if np.isfinite(cn) and cn <= cost:
                step_ok = True
                break
            lam *= 10
        if not step_ok:
            # no downhill step at any damping: a (numerical) minimum
            converged = True
            break
        small = np.all(np.abs(dp) <= rtol * (np.abs(p) + rtol))
        flat = cost - cn <= rtol * max(cost, 1e-300)
        p, r, cost = pn, rn, cn
        lam = max(lam / 10, 1e-12)
        if small or (flat and np.all(np.abs(dp) <= 1e-6 * (np.abs(p) + 1e-6))):
            converged = True
            break
    J = jac(p)
    try:
        cov = np.linalg.pinv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.full((len(p), len(p)), np.inf)
    dof = max(len(r) - len(p), 1)
    return LMResult(p, cov, float(cost), dof, it, converged)


def _sigma(err, y):
    err = np.asarray(err, dtype=float) if err is not None else np.ones_like(y)
    pos = err[err > 0]
    floor = pos.min() if pos.size else 1.0
    return np.where(err > 0, err, floor)


def _unpack_curve(curve, err=None):
    """Accept a CorrelationHistogram or (lags, g2[, err]) arrays; lags are bin centers."""
    if hasattr(curve, "g2"):
        return np.asarray(curve.centers, float), np.asarray(curve.g2, float), np.asarray(curve.err, float)
    lags, g2 = curve[0], curve[1]
    if err is None and len(curve) > 2:
        err = curve[2]
    return np.asarray(lags, float), np.asarray(g2, float), err


# ---------------------------------------------------------------- exponential


@dataclass
class ExpFit:
    """g2(tau) = baseline + A exp(-tau/tau_r); contrast is |A|, sign kept in A."""

    A: float
    tau_r: float
    baseline: float
    cov: np.ndarray
    chi2: float
    dof: int
    converged: bool = True
    n_iter: int = 0
    flags: list = field(default_factory=list)

    @property
    def contrast(self) -> float:
        return abs(self.A)

    @property
    def sigma_A(self) -> float:
        return float(np.sqrt(self.cov[0, 0]))

    @property
    def sigma_tau(self) -> float:
        return float(np.sqrt(self.cov[1, 1]))

    @property
    def chi2_red(self) -> float:
        return self.chi2 / self.dof

    @property
    def p_value(self) -> float:
        return float(stats.chi2.sf(self.chi2, self.dof))

    def __call__(self, tau):
        return self.baseline + self.A * np.exp(-np.asarray(tau) / self.tau_r)

    def to_dict(self) -> dict:
        return {"A": self.A, "tau_r": self.tau_r, "baseline": self.baseline,
                "sigma_A": self.sigma_A, "sigma_tau": self.sigma_tau, "chi2": self.chi2,
                "dof": self.dof, "converged": self.converged, "flags": list(self.flags),
                "cov": np.asarray(self.cov).tolist()}


def _seed_tau(x, y):
    """Lag where |g2-1| of the smoothed curve first falls to 1/e of its extremum."""
    w = max(len(y) // 50, 1)
    ys = np.convolve(y, np.ones(w) / w, mode="same") if w > 1 else y
    d = np.abs(ys - 1.0)
    i0 = int(np.argmax(d[: max(len(d) // 3, 1)]))
    below = np.flatnonzero(d[i0:] <= d[i0] / np.e)
    if below.size == 0:
        return x[-1] - x[0]
    return max(x[i0 + below[0]] - x[0], x[1] - x[0])


def _seed_amplitude(y, b0):
    """Largest excursion of the smoothed curve over its first third."""
    w = max(len(y) // 50, 1)
    ys = np.convolve(y, np.ones(w) / w, mode="valid") if w > 1 else y
    head = ys[: max(len(ys) // 3, 1)] - b0
    return float(head[np.argmax(np.abs(head))])


def fit_exponential(curve, fit_range=None, err=None, baseline: float | None = 1.0,
                    max_iter: int = MAX_ITER, rtol: float = RTOL) -> ExpFit:
    """Weighted fit of baseline + A exp(-tau/tau_r).

    The baseline is held fixed unless ``baseline=None``, in which case it is a
    third free parameter (useful when slow intensity fluctuations of a moving
    atom lift the tail above 1). The solver works in (A, log tau_r[, b]). Flat
    data gives A near zero with a large tau_r uncertainty instead of an error.
    """
    x, y, e = _unpack_curve(curve, err)
    if fit_range is not None:
        sel = (x >= fit_range[0]) & (x <= fit_range[1])
        x, y, e = x[sel], y[sel], (None if e is None else np.asarray(e)[sel])
    if len(x) < 10:
        raise ValueError("need at least 10 bins in the fit range")
    s = _sigma(e, y)
    free = baseline is None
    b0 = float(np.mean(y[-max(len(y) // 10, 1):])) if free else baseline
    A0 = _seed_amplitude(y, b0)
    if A0 == 0:
        A0 = 1e-3
    t0 = _seed_tau(x, y - b0 + 1.0)
    scale = t0

    # log(tau/scale) is confined to +-LOG_SPAN so tau can neither vanish nor overflow
    def tau_of(u):
        return scale * np.exp(np.clip(u, -LOG_SPAN, LOG_SPAN))

    def resid(p):
        b = p[2] if free else baseline
        return (b + p[0] * np.exp(-x / tau_of(p[1])) - y) / s

    def jac(p):
        tau = tau_of(p[1])
        ex = np.exp(-x / tau)
        inside = abs(p[1]) < LOG_SPAN
        cols = [ex / s, p[0] * ex * x / tau / s * inside]
        if free:
            cols.append(1.0 / s)
        return np.column_stack(cols)

    # a few tau starts guard against the clamp-edge minimum at tiny tau
    best = None
    for u0 in (0.0, -np.log(10.0), np.log(10.0)):
        p0 = [A0, u0, b0] if free else [A0, u0]
        r = levenberg_marquardt(resid, jac, p0, max_iter, rtol)
        if best is None or (r.converged, -r.chi2) > (best.converged, -best.chi2):
            best = r
    res = best
    A, u = res.p[:2]
    b = float(res.p[2]) if free else baseline
    tau = tau_of(u)
    # covariance in (A, tau[, b]): d tau / d u = tau
    Jt = np.diag([1.0, tau] + ([1.0] if free else []))
    cov = Jt @ res.cov @ Jt
    flags = []
    if abs(u) >= LOG_SPAN:
        # tau pinned at the clamp: no information on it
        cov[1, :] = cov[:, 1] = 0.0
        cov[1, 1] = np.inf
        flags.append("tau-at-bound")
    degenerate = abs(A) < 2 * np.sqrt(cov[0, 0])
    if degenerate:
        flags.append("degenerate")
    if not res.converged and not degenerate:
        raise FitError("exponential fit did not converge",
                       {"A": A, "tau_r": tau, "baseline": b, "chi2": res.chi2, "n_iter": res.n_iter})
    if not res.converged:
        flags.append("not-converged")
    if free:
        flags.append("free-baseline")
    return ExpFit(float(A), float(tau), b, cov, res.chi2, res.dof, res.converged, res.n_iter, flags)


# ---------------------------------------------------------------- Rabi


@dataclass
class RabiFit:
    """Two-level fit: omega and |delta| in rad/s, gamma held fixed."""

    omega: float
    delta: float
    gamma: float
    cov: np.ndarray
    chi2: float
    dof: int
    monotonic: bool
    converged: bool = True

    @property
    def quality(self) -> float:
        return self.chi2 / self.dof

    def __call__(self, tau):
        return two_level_g2_oracle(self.omega, self.delta, self.gamma, tau)

    def to_dict(self) -> dict:
        return {"omega": self.omega, "delta": self.delta, "gamma": self.gamma,
                "sigma_omega": float(np.sqrt(self.cov[0, 0])), "sigma_delta": float(np.sqrt(self.cov[1, 1])),
                "chi2": self.chi2, "dof": self.dof, "monotonic": self.monotonic,
                "converged": self.converged}


def _seed_omega(x, y, gamma):
    # first interior maximum of g2 sits near Omega' tau = pi
    if len(y) > 2:
        peaks = np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:]) & (y[1:-1] > 1.0)) + 1
        if peaks.size and x[peaks[0]] > 0:
            wp = np.pi / x[peaks[0]]
            return float(np.sqrt(wp ** 2 + gamma ** 2 / 16))
    return 0.5 * gamma


def fit_rabi(curve, gamma: float, err=None, delta0: float | None = None,
             max_iter: int = MAX_ITER, rtol: float = RTOL) -> RabiFit:
    """Fit the two-level g2 oracle over (Omega, |delta|); finite-difference Jacobian.

    Rates are angular frequencies in rad/s and lags are in seconds. Omega is
    the resonant Rabi frequency, Omega = Gamma sqrt(s/2) with s = I/I_sat.
    """
    x, y, e = _unpack_curve(curve, err)
    order = np.argsort(x)
    x, y = x[order], y[order]
    s = _sigma(None if e is None else np.asarray(e)[order], y)
    if len(x) < 4:
        raise ValueError("need at least 4 points")
    w0 = _seed_omega(x, y, gamma) / gamma
    d0 = 0.0 if delta0 is None else abs(delta0) / gamma

    def model(p):
        return two_level_g2_oracle(abs(p[0]) * gamma, abs(p[1]) * gamma, gamma, x)

    def resid(p):
        return (model(p) - y) / s

    def jac(p):
        J = np.empty((len(x), 2))
        base = resid(p)
        for k in range(2):
            h = 1e-6 * max(abs(p[k]), 1e-2)
            q = np.array(p, dtype=float)
            q[k] += h
            J[:, k] = (resid(q) - base) / h
        return J

    best = None
    # the last starts cover the weak-drive regime where the peak seed means nothing
    for start in ([w0, d0], [w0, d0 + 0.5], [2 * w0, d0], [0.3, d0], [0.05, d0]):
        res = levenberg_marquardt(resid, jac, start, max_iter, rtol)
        if best is None or res.chi2 < best.chi2 * (1 - 1e-9):
            best = res
    w, d = np.abs(best.p)
    cov = best.cov * gamma ** 2
    dense = np.linspace(x.min(), x.max(), 400)
    mono = bool(np.max(two_level_g2_oracle(w * gamma, d * gamma, gamma, dense)) <= 1 + 1e-3)
    # overdamped curves leave Omega and delta nearly degenerate; report the regime instead of failing
    if not best.converged and not mono:
        raise FitError("Rabi fit did not converge", {"p": best.p.tolist(), "chi2": best.chi2})
    return RabiFit(float(w * gamma), float(d * gamma), gamma, cov, best.chi2, best.dof, mono, best.converged)


# ---------------------------------------------------------------- N and Lambda scaling


@dataclass
class NScaling:
    slope: float
    slope_err: float
    tau_mean: float
    tau_chi2: float
    tau_p: float


def contrast_vs_N(N, fits) -> NScaling:
    """Log-log slope of contrast against N and a chi2 test of constant tau_r."""
    N = np.asarray(N, dtype=float)
    if len(np.unique(N)) < 3:
        raise ValueError("need at least 3 distinct N")
    c = np.array([f.contrast for f in fits])
    sc = np.array([f.sigma_A for f in fits])
    tau = np.array([f.tau_r for f in fits])
    st = np.array([f.sigma_tau for f in fits])
    pl = fit_power_law(N, c, sc, min_points=3)
    w = 1 / st ** 2
    tm = float(np.sum(w * tau) / np.sum(w))
    chi2 = float(np.sum(w * (tau - tm) ** 2))
    p = float(stats.chi2.sf(chi2, len(tau) - 1))
    return NScaling(pl.alpha, pl.alpha_err, tm, chi2, p)


@dataclass
class PowerLawFit:
    """y = prefactor * x**alpha fitted in log-log space."""

    alpha: float
    alpha_err: float
    prefactor: float
    x_range: tuple
    chi2_red: float

    def __call__(self, x):
        return self.prefactor * np.asarray(x, float) ** self.alpha

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "alpha_err": self.alpha_err, "prefactor": self.prefactor,
                "x_range": list(self.x_range), "chi2_red": self.chi2_red}


def fit_power_law(x, y, y_err=None, min_points: int = 4) -> PowerLawFit:
    """Weighted linear regression of log y on log x.

    The exponent uncertainty is scaled up by sqrt(chi2_red) when the scatter
    exceeds the quoted errors.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < min_points:
        raise ValueError(f"need at least {min_points} points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive x and y")
    ly = np.log(y)
    sl = np.ones_like(y) if y_err is None else np.asarray(y_err, float) / y
    if np.any(sl <= 0):
        raise ValueError("errors must be positive")
    X = np.column_stack([np.ones_like(x), np.log(x)])
    W = 1 / sl ** 2
    XtW = X.T * W
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ XtW @ ly
    r = ly - X @ beta
    dof = max(len(x) - 2, 1)
    chi2_red = float(np.sum(W * r ** 2) / dof)
    if y_err is None:
        cov = cov * chi2_red
    else:
        cov = cov * max(1.0, chi2_red)
    return PowerLawFit(float(beta[1]), float(np.sqrt(cov[1, 1])), float(np.exp(beta[0])),
                       (float(x.min()), float(x.max())), chi2_red)


# ---------------------------------------------------------------- temperature

SPEED_CONVENTIONS = ("rms1d", "mean3d", "rms3d")


def estimate_temperature(tau_r: float, spec: AtomSpec, convention: str = "rms1d") -> float:
    """Kinetic temperature (K) from tau_r * v = lambda/2.

    rms1d: v = sqrt(kT/m); mean3d: v = sqrt(8kT/(pi m)); rms3d: v = sqrt(3kT/m).
    """
    if not tau_r > 0:
        raise ValueError("tau_r must be positive")
    v = spec.wavelength / (2 * tau_r)
    mv2 = spec.mass * v ** 2 / KB
    if convention == "rms1d":
        return mv2
    if convention == "mean3d":
        return np.pi * mv2 / 8
    if convention == "rms3d":
        return mv2 / 3
    raise ValueError(f"unknown speed convention {convention!r}; use one of {SPEED_CONVENTIONS}")


# ---------------------------------------------------------------- estimators


class ExponentialRelaxation(RegressorMixin, BaseEstimator):
    """``fit(lags, g2, sigma=...)`` with lags as an (n,) or (n, 1) array in seconds."""

    def __init__(self, fit_range=None, baseline=1.0, max_iter=MAX_ITER, tol=RTOL):
        self.fit_range = fit_range
        self.baseline = baseline
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, sigma=None):
        x = np.asarray(X, float).reshape(-1)
        self.result_ = fit_exponential((x, np.asarray(y, float), sigma), self.fit_range,
                                       baseline=self.baseline, max_iter=self.max_iter, rtol=self.tol)
        self.A_, self.tau_r_ = self.result_.A, self.result_.tau_r
        return self

    def predict(self, X):
        return self.result_(np.asarray(X, float).reshape(-1))


class RabiOscillation(RegressorMixin, BaseEstimator):
    def __init__(self, gamma=1.0, max_iter=MAX_ITER, tol=RTOL):
        self.gamma = gamma
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, sigma=None):
        x = np.asarray(X, float).reshape(-1)
        self.result_ = fit_rabi((x, np.asarray(y, float), sigma), self.gamma,
                                max_iter=self.max_iter, rtol=self.tol)
        self.omega_, self.delta_ = self.result_.omega, self.result_.delta
        return self

    def predict(self, X):
        return self.result_(np.asarray(X, float).reshape(-1))


class PowerLaw(RegressorMixin, BaseEstimator):
    def __init__(self, min_points=4):
        self.min_points = min_points

    def fit(self, X, y, sigma=None):
        self.result_ = fit_power_law(np.asarray(X, float).reshape(-1), y, sigma, self.min_points)
        self.alpha_ = self.result_.alpha
        return self

    def predict(self, X):
        return self.result_(np.asarray(X, float).reshape(-1))
