"""Single-atom MOT fluorescence: quantum-trajectory simulation and photon-correlation analysis."""

__version__ = "0.1.0"

from .atomic import CESIUM_D2, TWO_LEVEL, AtomSpec, build_coupling_table, clebsch_gordan_sq, stretched_state_ratio
from .field import FieldConfig, QuadrupoleField, find_antinodes, spherical_decompose
from .trajectory import EmissionRecord, MotionModel, TrapEnvironment, run_trajectory, simulate_atoms
from .detection import AnalyzerConfig, ClickStream, DetectionGeometry, detect, project_emission
from .correlator import CorrelationHistogram, multistop_cross, normalize, singlestop_cross
from .fitting import estimate_temperature, fit_exponential, fit_power_law, fit_rabi

__all__ = [
    "AtomSpec", "CESIUM_D2", "TWO_LEVEL", "build_coupling_table", "clebsch_gordan_sq",
    "stretched_state_ratio", "FieldConfig", "QuadrupoleField", "find_antinodes",
    "spherical_decompose", "EmissionRecord", "MotionModel", "TrapEnvironment", "run_trajectory",
    "simulate_atoms", "AnalyzerConfig", "ClickStream", "DetectionGeometry", "detect",
    "project_emission", "CorrelationHistogram", "multistop_cross", "normalize", "singlestop_cross",
    "estimate_temperature", "fit_exponential", "fit_power_law", "fit_rabi",
]
