"""Light-field topography of a phase-stabilized six-beam MOT.

Positions are in meters. Field amplitudes use the convention that one unit
term of the interference pattern corresponds to the intensity of one beam, so
``|E|**2 * cfg.intensity`` is the local intensity in units of I0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, optimize

from .atomic import CESIUM_D2

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class FieldConfig:
    """Interference light field MOT_{phi,psi}.

    phi, psi: time phases of the standing waves (rad). k: wavenumber (1/m).
    amplitude: scale of every term. intensity: per-beam intensity in units of
    I0. detuning: laser detuning in units of Gamma (negative = red).
    uniform_field: if given, a spatially uniform complex field vector replaces
    the interference pattern (used for two-level benchmarks).
    """

    phi: float = 0.0
    psi: float = 0.0
    k: float = CESIUM_D2.k
    amplitude: float = 1.0
    intensity: float = 0.7
    detuning: float = -2.7
    uniform_field: tuple | None = None

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k!r}")
        if self.intensity < 0:
            raise ValueError("intensity must be non-negative")

    @property
    def wavelength(self) -> float:
        return 2 * np.pi / self.k

    @property
    def is_mot00(self) -> bool:
        return self.uniform_field is None and self.phi == 0.0 and self.psi == 0.0


@dataclass(frozen=True)
class FieldSample:
    E: np.ndarray
    intensity: float
    spherical_amplitudes: np.ndarray
    axis: np.ndarray
    linearity_defect: float


@dataclass(frozen=True)
class QuadrupoleField:
    """Anti-Helmholtz field B = b/2 * (-x, -y, 2z); ``gradient`` b is axial, in T/m."""

    gradient: float = 0.125
    center: tuple = (0.0, 0.0, 0.0)


def field_vectors(r, cfg: FieldConfig) -> np.ndarray:
    """Complex field at positions ``r`` of shape (..., 3)."""
    r = np.asarray(r, dtype=float)
    if cfg.uniform_field is not None:
        E0 = np.asarray(cfg.uniform_field, dtype=complex) * cfg.amplitude
        return np.broadcast_to(E0, r.shape).copy()
    kx, ky, kz = (cfg.k * r[..., i] for i in range(3))
    ephi = np.exp(1j * cfg.phi)
    epsi = np.exp(1j * cfg.psi)
    E = np.empty(r.shape, dtype=complex)
    E[..., 0] = np.sin(kz) + np.sin(ky) * epsi
    E[..., 1] = np.cos(kz) + np.cos(kx) * ephi
    E[..., 2] = np.sin(kx) * ephi + np.cos(ky) * epsi
    return E * cfg.amplitude


def quantization_frame(axis) -> np.ndarray:
    """Right-handed orthonormal frame (rows x_q, y_q, z_q) with z_q along ``axis``."""
    z = np.asarray(axis, dtype=float)
    n = np.linalg.norm(z)
    if not n > 0:
        raise ValueError("quantization axis must be non-zero")
    z = z / n
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = ref - z * (ref @ z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.array([x, y, z])


def quantization_frames(axes: np.ndarray) -> np.ndarray:
    """Vectorized :func:`quantization_frame` for axes of shape (n, 3)."""
    z = axes / np.linalg.norm(axes, axis=-1, keepdims=True)
    ref = np.zeros_like(z)
    use_x = np.abs(z[:, 0]) < 0.9
    ref[use_x, 0] = 1.0
    ref[~use_x, 1] = 1.0
    x = ref - z * np.sum(ref * z, axis=-1, keepdims=True)
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _spherical_from_frame(E: np.ndarray, frame: np.ndarray) -> np.ndarray:
    # A_q = e_q^* . E with e_{+-1} = -+(x_q +- i y_q)/sqrt2, e_0 = z_q
    ex = np.einsum("...i,...i->...", frame[..., 0, :], E)
    ey = np.einsum("...i,...i->...", frame[..., 1, :], E)
    ez = np.einsum("...i,...i->...", frame[..., 2, :], E)
    return np.stack([(ex + 1j * ey) / SQRT2, ez, -(ex - 1j * ey) / SQRT2], axis=-1)


def spherical_decompose(E, axis) -> np.ndarray:
    """Spherical components (A_-1, A_0, A_+1) of ``E`` about ``axis``.

    ``E = sum_q A_q e_q`` with e_{+1} = -(x+iy)/sqrt2, e_{-1} = (x-iy)/sqrt2,
    e_0 = axis, so a sigma+ field drives m -> m+1 through A_{+1}.
    """
    frame = quantization_frame(axis)
    return _spherical_from_frame(np.asarray(E, dtype=complex), frame)


def linearity_defect(E) -> np.ndarray:
    """|Im(E* x E)|, zero iff the polarization is linear."""
    E = np.asarray(E, dtype=complex)
    return np.linalg.norm(np.imag(np.cross(E.conj(), E)), axis=-1)


def field_at(r, cfg: FieldConfig, axis=(0.0, 0.0, 1.0)) -> FieldSample:
    E = field_vectors(np.asarray(r, dtype=float), cfg)
    axis = np.asarray(axis, dtype=float)
    A = spherical_decompose(E, axis)
    return FieldSample(
        E=E,
        intensity=float(np.sum(np.abs(E) ** 2)),
        spherical_amplitudes=A,
        axis=axis / np.linalg.norm(axis),
        linearity_defect=float(linearity_defect(E)),
    )


def polarization_direction(E) -> np.ndarray:
    """Real unit vector of a (locally) linear polarization, sign kept for real E."""
    E = np.asarray(E, dtype=complex)
    theta = 0.5 * np.angle(E @ E)
    v = np.real(E * np.exp(-1j * theta))
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def quadrupole_B(r, quad: QuadrupoleField) -> np.ndarray:
    d = np.asarray(r, dtype=float) - np.asarray(quad.center, dtype=float)
    scale = np.array([-0.5, -0.5, 1.0]) * quad.gradient
    return d * scale


def bistability_check(pol_dir, B_dir) -> tuple[float, bool]:
    """Angle beta (degrees) between polarization and B, and whether |90 - beta| < 45."""
    p = np.asarray(pol_dir, dtype=float)
    b = np.asarray(B_dir, dtype=float)
    npn, nb = np.linalg.norm(p), np.linalg.norm(b)
    if not (npn > 0 and nb > 0):
        raise ValueError("polarization and field directions must be non-zero")
    c = np.clip(p @ b / (npn * nb), -1.0, 1.0)
    beta = float(np.degrees(np.arccos(c)))
    return beta, abs(90.0 - beta) < 45.0


@dataclass(frozen=True)
class Antinode:
    position: np.ndarray
    intensity: float
    pol_dir: np.ndarray
    linearity_defect: float


@dataclass
class AntinodeSurvey:
    antinodes: list = field(default_factory=list)
    count_guaranteed: bool = False

    def __len__(self):
        return len(self.antinodes)

    def __iter__(self):
        return iter(self.antinodes)

    def __getitem__(self, i):
        return self.antinodes[i]


def find_antinodes(cfg: FieldConfig, resolution: int = 32, origin=(0.0, 0.0, 0.0)) -> AntinodeSurvey:
    """Local intensity maxima in the cubic unit cell [origin, origin + lambda)^3.

    Grid scan with periodic neighbourhood comparison, then local ascent.
    Maxima closer than lambda/100 are merged; output is sorted by position.
    The count of exactly 8 is only guaranteed for MOT00.
    """
    if resolution < 32:
        raise ValueError("resolution must be at least 32 points per wavelength")
    lam = cfg.wavelength
    origin = np.asarray(origin, dtype=float)
    survey = AntinodeSurvey(count_guaranteed=cfg.is_mot00)
    if cfg.amplitude == 0 or cfg.uniform_field is not None:
        return survey

    g = np.arange(resolution) / resolution * lam
    grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1) + origin
    intensity = np.sum(np.abs(field_vectors(grid, cfg)) ** 2, axis=-1)
    peak = intensity.max()
    if peak <= 0:
        return survey
    is_max = intensity == ndimage.maximum_filter(intensity, size=3, mode="wrap")
    is_max &= intensity > 1e-9 * peak
    # flat plateaus would flag every point; keep only isolated peaks
    is_max &= intensity > ndimage.minimum_filter(intensity, size=3, mode="wrap")

    def neg_intensity(x):
        return -float(np.sum(np.abs(field_vectors(x, cfg)) ** 2))

    found: list[Antinode] = []
    for idx in np.argwhere(is_max):
        x0 = grid[tuple(idx)]
        res = optimize.minimize(neg_intensity, x0, method="Nelder-Mead",
                                options={"xatol": lam * 1e-9, "fatol": 1e-14, "maxiter": 4000})
        x = origin + np.mod(res.x - origin, lam)
        if any(_periodic_distance(x, a.position, lam) < lam / 100 for a in found):
            continue
        E = field_vectors(x, cfg)
        found.append(Antinode(x, float(np.sum(np.abs(E) ** 2)), polarization_direction(E),
                              float(linearity_defect(E))))
    found.sort(key=lambda a: tuple(np.round((a.position - origin) / lam, 6)))
    survey.antinodes = found
    return survey


def _periodic_distance(a, b, period):
    d = np.mod(a - b + period / 2, period) - period / 2
    return float(np.linalg.norm(d))


def saturation_parameter(intensity, detuning, gamma=1.0):
    """s = (I/I0) / (1 + (2 delta / Gamma)^2)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return np.asarray(intensity) / (1.0 + (2.0 * np.asarray(detuning) / gamma) ** 2)


def light_shift_param(s_peak, delta, gamma) -> float:
    """Low-saturation ground-state light shift hbar*|delta|/2*s, in units of hbar*Gamma."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if np.any(np.asarray(s_peak) < 0):
        raise ValueError("s_peak must be non-negative")
    return abs(delta) / gamma / 2.0 * s_peak


def peak_intensity(cfg: FieldConfig) -> float:
    """Peak local intensity in units of I0."""
    if cfg.uniform_field is not None:
        return float(np.sum(np.abs(np.asarray(cfg.uniform_field)) ** 2)) * cfg.amplitude ** 2 * cfg.intensity
    survey = find_antinodes(cfg)
    if not len(survey):
        return 0.0
    return max(a.intensity for a in survey) * cfg.intensity


def light_shift_for(cfg: FieldConfig) -> float:
    """Light-shift parameter (units of hbar*Gamma) at the field's peak intensity."""
    s_peak = saturation_parameter(peak_intensity(cfg), cfg.detuning)
    return light_shift_param(float(s_peak), cfg.detuning, 1.0)


@dataclass(frozen=True)
class SurveyRow:
    position: np.ndarray
    intensity: float
    pol_dir: np.ndarray
    beta: float
    bistable: bool


def bistability_survey(cfg: FieldConfig, quad: QuadrupoleField,
                       cell_center: Sequence[float] = (50e-6, 50e-6, 50e-6),
                       resolution: int = 32) -> list[SurveyRow]:
    """Antinodes of the unit cell centred at ``cell_center`` and their bistability."""
    origin = np.asarray(cell_center, dtype=float) - cfg.wavelength / 2
    rows = []
    for a in find_antinodes(cfg, resolution=resolution, origin=origin):
        B = quadrupole_B(a.position, quad)
        beta, ok = bistability_check(a.pol_dir, B)
        rows.append(SurveyRow(a.position, a.intensity, a.pol_dir, beta, ok))
    return rows
