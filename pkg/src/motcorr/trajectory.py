"""Monte Carlo wave-function simulation of a multilevel atom in the MOT field.

Internally time is measured in units of 1/Gamma and energies in hbar*Gamma.
Public functions take and return SI units (seconds, meters, rad/s).

The no-jump evolution over one step uses the exact propagator
exp(-i H_eff dt); jumps are triggered when the squared norm of the
unnormalized state drops below a uniform random threshold, which samples the
same waiting-time distribution as a per-step Bernoulli decision with
dp = Gamma*dt*rho_ee but without the first-order step error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .atomic import HBAR, KB, MU_B, AtomSpec, build_coupling_table
from .field import (FieldConfig, QuadrupoleField, field_vectors, quadrupole_B,
                    quantization_frames, _spherical_from_frame)


class StepSizeError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class TrapEnvironment:
    """Everything the internal dynamics sees besides the atom itself.

    larmor_dephasing is the decay rate (units of Gamma) of the J_z coherences
    in the local quantization frame; 0 keeps the evolution fully coherent.
    b_threshold (T): below this |B| the quantization axis falls back to lab z.
    """

    field: FieldConfig = FieldConfig()
    quadrupole: QuadrupoleField | None = QuadrupoleField()
    larmor_dephasing: float = 0.0
    b_threshold: float = 1e-7
    zeeman: bool = True

    def __post_init__(self):
        if self.larmor_dephasing < 0:
            raise ValueError("larmor_dephasing must be non-negative")


@dataclass(frozen=True)
class MotionModel:
    """Prescribed centre-of-mass motion.

    kind: 'static', 'ballistic' or 'langevin'. temperature in K, friction in
    1/s (langevin only). Initial positions are r0 plus a uniform offset in a
    cube of side ``spread`` (m). Ballistic velocities are redrawn from the
    Maxwell-Boltzmann distribution every ``persistence`` wavelengths of path.
    """

    kind: str = "static"
    r0: tuple = (0.0, 0.0, 0.0)
    temperature: float = 0.0
    friction: float = 0.0
    spread: float = 0.0
    persistence: float = 10.0

    def __post_init__(self):
        if self.kind not in ("static", "ballistic", "langevin"):
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if self.temperature < 0 or self.friction < 0 or self.spread < 0:
            raise ValueError("temperature, friction and spread must be non-negative")
        if self.kind == "langevin" and self.friction <= 0:
            raise ValueError("langevin motion needs a positive friction rate")

    @classmethod
    def from_light_shift(cls, light_shift: float, spec: AtomSpec, c_T: float = 1.0, **kw) -> "MotionModel":
        """Ballistic motion at T = c_T * Lambda, Lambda given in units of hbar*Gamma."""
        T = c_T * light_shift * HBAR * spec.gamma / KB
        kw.setdefault("kind", "ballistic")
        return cls(temperature=T, **kw)

    def thermal_speed(self, spec: AtomSpec) -> float:
        return float(np.sqrt(KB * self.temperature / spec.mass))


@dataclass
class AtomState:
    psi: np.ndarray
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def populations(self, spec: AtomSpec) -> tuple[float, float]:
        p = np.abs(self.psi) ** 2
        n = p.sum()
        return float(p[: spec.n_ground].sum() / n), float(p[spec.n_ground:].sum() / n)

    def mean_m(self, spec: AtomSpec) -> float:
        ops = _operators(spec)
        p = np.abs(self.psi) ** 2
        return float(p @ ops.m_all / p.sum())

    @classmethod
    def ground(cls, spec: AtomSpec, m: int = 0, r=(0.0, 0.0, 0.0), v=(0.0, 0.0, 0.0)) -> "AtomState":
        psi = np.zeros(spec.dim, dtype=complex)
        psi[m + spec.F_g] = 1.0
        return cls(psi, np.asarray(r, float).copy(), np.asarray(v, float).copy())


@dataclass
class EmissionRecord:
    """Spontaneous emissions of one or more atoms, sorted by time.

    t in seconds, q the emitted spherical component, axis the quantization
    axis at emission, r the atom position, mean_m the ground-state <m> just
    after the jump, atom the index of the emitting atom.
    """

    t: np.ndarray
    q: np.ndarray
    axis: np.ndarray
    r: np.ndarray
    mean_m: np.ndarray
    atom: np.ndarray
    duration: float
    truth: bool = True

    def __len__(self):
        return len(self.t)

    @classmethod
    def empty(cls, duration: float = 0.0) -> "EmissionRecord":
        return cls(np.zeros(0), np.zeros(0, np.int8), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros(0, np.int32), duration)

    def select(self, mask) -> "EmissionRecord":
        return replace(self, t=self.t[mask], q=self.q[mask], axis=self.axis[mask],
                       r=self.r[mask], mean_m=self.mean_m[mask], atom=self.atom[mask])

    @classmethod
    def merge(cls, records) -> "EmissionRecord":
        records = list(records)
        if not records:
            return cls.empty()
        t = np.concatenate([r.t for r in records])
        order = np.argsort(t, kind="stable")
        cat = lambda name: np.concatenate([getattr(r, name) for r in records])[order]
        return cls(t[order], cat("q"), cat("axis"), cat("r"), cat("mean_m"), cat("atom"),
                   max(r.duration for r in records))


class _Operators:
    """Index bookkeeping and jump operators for one AtomSpec."""

    def __init__(self, spec: AtomSpec):
        table = build_coupling_table(spec)
        F, Fe = spec.F_g, spec.F_e
        self.ng, self.ne, self.D = spec.n_ground, spec.n_excited, spec.dim
        self.m_g = np.arange(-F, F + 1, dtype=float)
        self.m_e = np.arange(-Fe, Fe + 1, dtype=float)
        self.m_all = np.concatenate([self.m_g, self.m_e])
        # L[q+1][m_g, m_e]: amplitude of |g m><e m+q|
        self.L = np.zeros((3, self.ng, self.ne))
        self.pairs = []
        for m in range(-F, F + 1):
            for q in (-1, 0, 1):
                amp = table.amplitudes[m + F, q + 1]
                self.L[q + 1, m + F, m + q + Fe] = amp
                self.pairs.append((q, m + F, self.ng + m + q + Fe, amp))
        self.pair_q = np.array([p[0] for p in self.pairs]) + 1
        self.pair_g = np.array([p[1] for p in self.pairs])
        self.pair_e = np.array([p[2] for p in self.pairs])
        self.pair_amp = np.array([p[3] for p in self.pairs])


_OPS_CACHE: dict = {}


def _operators(spec: AtomSpec) -> _Operators:
    key = (spec.F_g,)
    if key not in _OPS_CACHE:
        _OPS_CACHE[key] = _Operators(spec)
    return _OPS_CACHE[key]


def local_environment(spec: AtomSpec, env: TrapEnvironment, r: np.ndarray):
    """Spherical field components, quantization axes and |B| at positions r (n, 3)."""
    E = field_vectors(r, env.field)
    if env.quadrupole is not None:
        B = quadrupole_B(r, env.quadrupole)
        Bmag = np.linalg.norm(B, axis=-1)
    else:
        B = np.zeros_like(r)
        Bmag = np.zeros(len(r))
    axes = np.tile([0.0, 0.0, 1.0], (len(r), 1))
    strong = Bmag > env.b_threshold
    axes[strong] = B[strong] / Bmag[strong, None]
    frames = quantization_frames(axes)
    A = _spherical_from_frame(E, frames)
    return A, axes, Bmag


def effective_hamiltonian(spec: AtomSpec, env: TrapEnvironment, A: np.ndarray, Bmag: np.ndarray) -> np.ndarray:
    """Non-Hermitian H_eff in units of hbar*Gamma for a stack of local fields.

    A: (n, 3) spherical amplitudes (A_-1, A_0, A_+1); Bmag: (n,) in Tesla.
    """
    ops = _operators(spec)
    n = len(A)
    H = np.zeros((n, ops.D, ops.D), dtype=complex)
    ng = ops.ng
    omega0 = np.sqrt(env.field.intensity / 2.0)
    zeeman = (MU_B * Bmag / (HBAR * spec.gamma)) if env.zeeman else np.zeros(n)
    ig = np.arange(ng)
    ie = np.arange(ng, ops.D)
    H[:, ig, ig] = spec.g_ground * zeeman[:, None] * ops.m_g
    H[:, ie, ie] = -env.field.detuning - 0.5j + spec.g_excited * zeeman[:, None] * ops.m_e
    coupling = -0.5 * omega0 * A[:, ops.pair_q] * ops.pair_amp
    H[:, ops.pair_e, ops.pair_g] = coupling
    H[:, ops.pair_g, ops.pair_e] = coupling.conj()
    return H


def max_rabi_frequency(spec: AtomSpec, env: TrapEnvironment) -> float:
    """Upper bound on the local Rabi frequency, rad/s."""
    cfg = env.field
    if cfg.uniform_field is not None:
        peak = float(np.sum(np.abs(np.asarray(cfg.uniform_field)) ** 2)) * cfg.amplitude ** 2
    else:
        peak = 6.0 * cfg.amplitude ** 2 if cfg.is_mot00 else 9.0 * cfg.amplitude ** 2
    return spec.gamma * np.sqrt(cfg.intensity / 2.0 * peak)


@dataclass(frozen=True)
class EmissionEvent:
    t: float
    q: int
    axis: np.ndarray
    r: np.ndarray


def evolve_step(state: AtomState, spec: AtomSpec, env: TrapEnvironment, dt: float,
                rng: np.random.Generator) -> tuple[AtomState, EmissionEvent | None]:
    """Advance one atom by ``dt`` seconds with a per-step jump decision.

    The state is propagated with exp(-i H_eff dt), the jump probability is
    the norm lost in the step, and the emitted q is drawn from the jump
    weights of the propagated excited amplitudes. Position advances with the
    current velocity.
    """
    limit = 0.02 / max(spec.gamma, max_rabi_frequency(spec, env))
    if dt > limit * (1 + 1e-12):
        raise StepSizeError(f"dt={dt:.3e} s exceeds the step limit {limit:.3e} s")
    ops = _operators(spec)
    psi = np.asarray(state.psi, dtype=complex)
    if not np.all(np.isfinite(psi)):
        raise NumericalFailure("non-finite amplitudes in atom state")
    psi = psi / np.linalg.norm(psi)
    r = np.asarray(state.r, float)
    A, axes, Bmag = local_environment(spec, env, r[None, :])
    H = effective_hamiltonian(spec, env, A, Bmag)[0]
    new = linalg.expm(-1j * H * dt * spec.gamma) @ psi
    n2 = float(np.vdot(new, new).real)
    if not np.isfinite(n2):
        raise NumericalFailure("non-finite norm after propagation")
    event = None
    if rng.random() < 1.0 - n2:
        pe = new[ops.ng:]
        cand = np.einsum("qge,e->qg", ops.L, pe)
        w = np.sum(np.abs(cand) ** 2, axis=1)
        qi = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
        qi = min(qi, 2)
        g = cand[qi] / np.linalg.norm(cand[qi])
        new = np.concatenate([g, np.zeros(ops.ne, complex)])
        event = EmissionEvent(state.t + dt, qi - 1, axes[0].copy(), r.copy())
    else:
        new = new / np.sqrt(n2)
    if env.larmor_dephasing > 0:
        xi = rng.normal(0.0, np.sqrt(env.larmor_dephasing * dt * spec.gamma))
        new = new * np.exp(-1j * xi * ops.m_all)
    r_new = r + np.asarray(state.v, float) * dt
    return AtomState(new, r_new, np.asarray(state.v, float).copy(), state.t + dt), event


@dataclass
class SimulationResult:
    """Output of :func:`simulate_atoms`.

    records: one EmissionRecord per atom. sample_times (s) and the per-atom
    arrays rho_ee and mean_m (n_atoms, n_samples) hold the normalized state
    diagnostics at the requested sampling cadence.
    """

    records: list
    sample_times: np.ndarray
    rho_ee: np.ndarray
    mean_m: np.ndarray
    dt: float
    seed: int | None = None

    def merged(self, atoms=None) -> EmissionRecord:
        recs = self.records if atoms is None else [self.records[i] for i in atoms]
        return EmissionRecord.merge(recs)


def default_step(spec: AtomSpec, env: TrapEnvironment) -> float:
    """Default lockstep interval (s): min(0.1/Gamma, 0.25/max(Omega, |delta|)).

    Propagation is exact for any step; the step only sets how finely jump
    times are bracketed before interpolation.
    """
    w = max(max_rabi_frequency(spec, env), abs(env.field.detuning) * spec.gamma)
    return min(0.1 / spec.gamma, 0.25 / w)


def _initial_kinematics(spec, motion, n, rng):
    r0 = np.asarray(motion.r0, dtype=float)
    r = np.tile(r0, (n, 1))
    if motion.spread > 0:
        r = r + (rng.random((n, 3)) - 0.5) * motion.spread
    v = np.zeros((n, 3))
    if motion.kind != "static" and motion.temperature > 0:
        v = rng.normal(0.0, motion.thermal_speed(spec), (n, 3))
    return r, v


def simulate_atoms(spec: AtomSpec, env: TrapEnvironment, motion: MotionModel, duration: float,
                   n_atoms: int = 1, seed: int | None = 0, dt: float | None = None,
                   sample_every: float | None = None, initial_m: int | None = None,
                   motion_update: float = 1.0) -> SimulationResult:
    """Run ``n_atoms`` independent trajectories in lockstep.

    duration, dt and sample_every are in seconds. Atoms start in the ground
    manifold: in sublevel ``initial_m`` if given, otherwise in an equal-weight
    superposition (m = 0 sublevel for F = 0). The local field is re-evaluated
    every ``motion_update``/Gamma for moving atoms.
    """
    if duration < 0:
        raise ValueError("duration must be non-negative")
    rng = np.random.default_rng(seed)
    ops = _operators(spec)
    G = spec.gamma
    dt = default_step(spec, env) if dt is None else dt
    h = dt * G
    n_steps = int(np.round(duration / dt))
    T = duration * G

    psi = np.zeros((n_atoms, ops.D), dtype=complex)
    if initial_m is not None:
        psi[:, initial_m + spec.F_g] = 1.0
    else:
        psi[:, : ops.ng] = 1.0 / np.sqrt(ops.ng)
    thresh = rng.random(n_atoms)
    r, v = _initial_kinematics(spec, motion, n_atoms, rng)
    path = np.zeros(n_atoms)

    if sample_every is None:
        sample_stride = 0
        sample_times = np.zeros(0)
    else:
        sample_stride = max(1, int(np.round(sample_every / dt)))
        sample_times = np.arange(0, n_steps + 1, sample_stride) * dt
    rho_samples = np.zeros((n_atoms, len(sample_times)))
    m_samples = np.zeros((n_atoms, len(sample_times)))

    ev_t, ev_q, ev_atom, ev_axis, ev_r, ev_m = [], [], [], [], [], []
    moving = motion.kind != "static"
    per_atom = moving or motion.spread > 0
    seg_steps = max(1, int(np.round(motion_update / h))) if moving else max(1, int(np.round(0.5 / h)))
    lam = spec.wavelength
    vth = motion.thermal_speed(spec)

    def refresh():
        A, axes, Bmag = local_environment(spec, env, r)
        H = effective_hamiltonian(spec, env, A, Bmag)
        return H, axes

    H, axes = refresh()
    if per_atom:
        U = linalg.expm(-1j * H * h)
        eig = None
    else:
        U = linalg.expm(-1j * H[0] * h)
        eig = _EigenPropagator(H[0])

    def record_samples(col):
        p = np.abs(psi) ** 2
        norm = p.sum(axis=1)
        rho_samples[:, col] = p[:, ops.ng:].sum(axis=1) / norm
        m_samples[:, col] = p @ ops.m_all / norm

    sample_col = 0
    if sample_stride:
        record_samples(0)
        sample_col = 1

    n_prev = np.sum(np.abs(psi) ** 2, axis=1)
    step = 0
    while step < n_steps:
        seg_start = step
        seg_end = min(n_steps, step + seg_steps)
        while step < seg_end:
            psi = np.matmul(U, psi[:, :, None])[:, :, 0] if per_atom else psi @ U.T
            n2 = np.einsum("ij,ij->i", psi.real, psi.real) + np.einsum("ij,ij->i", psi.imag, psi.imag)
            jumped = np.nonzero(n2 < thresh)[0]
            if len(jumped):
                if not np.all(np.isfinite(n2[jumped])):
                    raise NumericalFailure("non-finite state norm")
                frac = np.log(n_prev[jumped] / thresh[jumped]) / np.log(n_prev[jumped] / n2[jumped])
                frac = np.clip(frac, 0.0, 1.0)
                t_jump = (step + frac) * h
                p = psi[jumped] / np.sqrt(n2[jumped])[:, None]
                cand = np.einsum("qge,ne->nqg", ops.L, p[:, ops.ng:])
                w = np.sum(np.abs(cand) ** 2, axis=2)
                cw = np.cumsum(w, axis=1)
                u = rng.random(len(jumped)) * cw[:, -1]
                qi = np.minimum((u[:, None] >= cw).sum(axis=1), 2)
                g = cand[np.arange(len(jumped)), qi]
                g /= np.linalg.norm(g, axis=1, keepdims=True)
                new = np.zeros((len(jumped), ops.D), dtype=complex)
                new[:, : ops.ng] = g
                # evolve the fresh state over the remainder of the step
                rest = (1.0 - frac) * h
                if eig is not None:
                    new = eig.propagate(new, rest)
                else:
                    new = np.matmul(linalg.expm(-1j * H[jumped] * rest[:, None, None]), new[:, :, None])[:, :, 0]
                psi[jumped] = new
                n2[jumped] = np.sum(np.abs(new) ** 2, axis=1)
                thresh[jumped] = rng.random(len(jumped))
                ev_t.append(t_jump)
                ev_q.append(qi - 1)
                ev_atom.append(jumped)
                ev_axis.append(axes[jumped] if per_atom else np.broadcast_to(axes[0], (len(jumped), 3)))
                ev_r.append(r[jumped].copy())
                ev_m.append(np.abs(g) ** 2 @ ops.m_g)
            n_prev = n2
            step += 1
            if sample_stride and step % sample_stride == 0:
                record_samples(sample_col)
                sample_col += 1
        # rescale norms to avoid underflow over long no-jump stretches
        small = n_prev < 1e-200
        if np.any(small):
            s = np.sqrt(n_prev[small])
            psi[small] /= s[:, None]
            thresh[small] /= n_prev[small]
            n_prev[small] = 1.0
        seg_h = (seg_end - seg_start) * h
        if env.larmor_dephasing > 0:
            xi = rng.normal(0.0, np.sqrt(env.larmor_dephasing * seg_h), n_atoms)
            psi *= np.exp(-1j * xi[:, None] * ops.m_all[None, :])
        if moving and step < n_steps:
            seg_t = seg_h / G
            if motion.kind == "ballistic":
                r += v * seg_t
                path += np.linalg.norm(v, axis=1) * seg_t
                redraw = path >= motion.persistence * lam
                if np.any(redraw):
                    v[redraw] = rng.normal(0.0, vth, (int(redraw.sum()), 3))
                    path[redraw] = 0.0
            else:
                decay = np.exp(-motion.friction * seg_t)
                r += v * seg_t
                v = v * decay + rng.normal(0.0, vth * np.sqrt(1 - decay ** 2), v.shape)
            H, axes = refresh()
            U = linalg.expm(-1j * H * h)

    records = []
    if ev_t:
        all_t = np.concatenate(ev_t) / G
        all_q = np.concatenate(ev_q).astype(np.int8)
        all_atom = np.concatenate(ev_atom).astype(np.int32)
        all_axis = np.concatenate(ev_axis)
        all_r = np.concatenate(ev_r)
        all_m = np.concatenate(ev_m)
    for i in range(n_atoms):
        if ev_t:
            sel = all_atom == i
            keep = all_t[sel] < duration
            records.append(EmissionRecord(all_t[sel][keep], all_q[sel][keep], all_axis[sel][keep],
                                          all_r[sel][keep], all_m[sel][keep], all_atom[sel][keep], duration))
        else:
            records.append(EmissionRecord.empty(duration))
    return SimulationResult(records, sample_times, rho_samples, m_samples, dt, seed)


class _EigenPropagator:
    """exp(-i H s) for a fixed H at arbitrary s, via eigendecomposition when well conditioned."""

    def __init__(self, H: np.ndarray):
        self.H = H
        w, V = np.linalg.eig(H)
        self.ok = np.linalg.cond(V) < 1e8
        if self.ok:
            self.w, self.V, self.Vinv = w, V, np.linalg.inv(V)

    def propagate(self, psi: np.ndarray, s: np.ndarray) -> np.ndarray:
        if self.ok:
            c = psi @ self.Vinv.T
            c *= np.exp(-1j * np.outer(s, self.w))
            return c @ self.V.T
        return np.stack([linalg.expm(-1j * self.H * si) @ p for p, si in zip(psi, s)])


def run_trajectory(spec: AtomSpec, env: TrapEnvironment, motion: MotionModel, duration: float,
                   seed: int | None = 0, dt: float | None = None, **kw) -> EmissionRecord:
    """Single-atom emission record; reproducible for a fixed seed."""
    if duration == 0:
        return EmissionRecord.empty(0.0)
    return simulate_atoms(spec, env, motion, duration, 1, seed, dt, **kw).records[0]


def orientation_series(result: SimulationResult, atom: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sampled <m> (ground plus excited analogue) versus time for one atom."""
    if not len(result.sample_times):
        raise ValueError("simulation was run without sample_every")
    return result.sample_times, result.mean_m[atom]


# --- two-level optical Bloch equations -------------------------------------------------

def _bloch_liouvillian(omega: float, delta: float) -> np.ndarray:
    """Liouvillian (units of Gamma) acting on column-stacked 2x2 density matrices, basis (g, e)."""
    H = np.array([[0.0, -omega / 2], [-omega / 2, -delta]], dtype=complex)
    s = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
    I = np.eye(2)
    sds = s.conj().T @ s
    return (-1j * (np.kron(I, H) - np.kron(H.T, I))
            + np.kron(s.conj(), s) - 0.5 * np.kron(I, sds) - 0.5 * np.kron(sds.T, I))


def steady_state_excited(omega: float, delta: float, gamma: float) -> float:
    """Closed-form rho_ee(inf) = (s/2)/(1+s), s = 2 Omega^2/Gamma^2 / (1 + 4 delta^2/Gamma^2)."""
    s = 2 * (omega / gamma) ** 2 / (1 + 4 * (delta / gamma) ** 2)
    return s / 2 / (1 + s)


def two_level_excited(omega: float, delta: float, gamma: float, tau) -> np.ndarray:
    """rho_ee(tau) from rho_gg(0)=1 by exact exponentiation of the Bloch Liouvillian."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0) or np.any(np.diff(tau) < 0):
        raise ValueError("tau grid must be non-negative and increasing")
    L = _bloch_liouvillian(omega / gamma, delta / gamma)
    rho0 = np.array([1.0, 0.0, 0.0, 0.0], dtype=complex)
    x = tau * gamma
    out = np.empty(len(x))
    steps = np.diff(x, prepend=0.0)
    uniform = len(x) > 2 and np.allclose(steps[1:], steps[1], rtol=1e-12, atol=0)
    if uniform:
        U = linalg.expm(L * steps[1])
        rho = linalg.expm(L * x[0]) @ rho0
        for i in range(len(x)):
            out[i] = rho[3].real
            rho = U @ rho
    else:
        for i, xi in enumerate(x):
            out[i] = (linalg.expm(L * xi) @ rho0)[3].real
    return out


def two_level_g2_oracle(omega: float, delta: float, gamma: float, tau) -> np.ndarray:
    """g2(tau) = rho_ee(tau)/rho_ee(inf) of a resonance-fluorescing two-level atom."""
    return two_level_excited(omega, delta, gamma, tau) / steady_state_excited(omega, delta, gamma)
