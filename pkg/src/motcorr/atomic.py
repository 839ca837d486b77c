"""Angular-momentum structure of an F -> F+1 cooling transition.

Squared Clebsch-Gordan coefficients <F m; 1 q | F+1, m+q>^2 are evaluated from
their closed forms. For the stretched coupling J = j1 + 1 every coefficient is
non-negative, so the square root of a table entry is also the signed amplitude
used in the atom-light Hamiltonian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

HBAR = 1.054571817e-34
KB = 1.380649e-23
MU_B = 9.2740100783e-24

QS = (-1, 0, 1)


@dataclass(frozen=True)
class AtomSpec:
    """Physical description of the atom.

    Defaults describe the Cs D2 cooling transition F=4 -> F'=5.
    ``gamma`` is the natural linewidth in rad/s, ``sat_intensity`` in W/m^2.
    ``g_ground``/``g_excited`` are the hyperfine Lande factors used for the
    linear Zeeman shifts.
    """

    F_g: int = 4
    F_e: int = 5
    gamma: float = 2 * np.pi * 5.2e6
    wavelength: float = 852.35e-9
    mass: float = 2.207e-25
    sat_intensity: float = 11.0
    g_ground: float = 0.25
    g_excited: float = 0.4

    def __post_init__(self):
        if int(self.F_g) != self.F_g or self.F_g < 0:
            raise ValueError(f"F_g must be a non-negative integer, got {self.F_g!r}")
        if self.F_e != self.F_g + 1:
            raise ValueError(
                f"only F -> F+1 transitions are supported (F_g={self.F_g}, F_e={self.F_e})"
            )
        for name in ("gamma", "wavelength", "mass"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.sat_intensity <= 0:
            raise ValueError("sat_intensity must be positive")

    @property
    def n_ground(self) -> int:
        return 2 * self.F_g + 1

    @property
    def n_excited(self) -> int:
        return 2 * self.F_e + 1

    @property
    def dim(self) -> int:
        return self.n_ground + self.n_excited

    @property
    def k(self) -> float:
        return 2 * np.pi / self.wavelength


CESIUM_D2 = AtomSpec()
TWO_LEVEL = AtomSpec(F_g=0, F_e=1)


def clebsch_gordan_sq(F_g: int, m: int, q: int) -> float:
    """|<F_g m; 1 q | F_g+1, m+q>|^2 for the F -> F+1 transition."""
    if q not in QS:
        raise ValueError(f"q must be -1, 0 or +1, got {q!r}")
    if F_g < 0 or abs(m) > F_g:
        raise ValueError(f"|m| must not exceed F_g (F_g={F_g}, m={m})")
    F = F_g
    if abs(m + q) > F + 1:
        raise ValueError(f"|m+q| must not exceed F_g+1 (m={m}, q={q})")
    if q == 1:
        return (F + m + 1) * (F + m + 2) / ((2 * F + 1) * (2 * F + 2))
    if q == -1:
        return (F - m + 1) * (F - m + 2) / ((2 * F + 1) * (2 * F + 2))
    return (F - m + 1) * (F + m + 1) / ((2 * F + 1) * (F + 1))


def stretched_state_ratio(F_g: int) -> float:
    """Coupling advantage of the stretched state, (2F+1)(F+1)."""
    if F_g < 0:
        raise ValueError("F_g must be non-negative")
    return clebsch_gordan_sq(F_g, F_g, 1) / clebsch_gordan_sq(F_g, F_g, -1)


@dataclass(frozen=True)
class CouplingTable:
    """Excitation strengths and decay branching of an F -> F+1 transition.

    ``strength[m + F_g, q + 1]`` is the squared coupling from ground sublevel m
    with spherical component q. ``branching[m' + F_e, q + 1]`` is the fraction
    of decays from excited sublevel m' that emit polarization q (landing in
    m' - q). Normalization puts the stretched sigma+ coupling at 1, and the
    same numbers are already normalized as branching ratios.
    """

    F_g: int
    strength: np.ndarray = field(repr=False)
    branching: np.ndarray = field(repr=False)

    def strength_at(self, m: int, q: int) -> float:
        return float(self.strength[m + self.F_g, q + 1])

    def branching_at(self, m_e: int, q: int) -> float:
        return float(self.branching[m_e + self.F_g + 1, q + 1])

    @cached_property
    def amplitudes(self) -> np.ndarray:
        """Signed coupling amplitudes (the non-negative square roots)."""
        return np.sqrt(self.strength)


def build_coupling_table(spec: AtomSpec) -> CouplingTable:
    F = spec.F_g
    strength = np.zeros((2 * F + 1, 3))
    branching = np.zeros((2 * F + 3, 3))
    for m in range(-F, F + 1):
        for q in QS:
            c = clebsch_gordan_sq(F, m, q)
            strength[m + F, q + 1] = c
            branching[m + q + F + 1, q + 1] = c
    strength.setflags(write=False)
    branching.setflags(write=False)
    return CouplingTable(F, strength, branching)
