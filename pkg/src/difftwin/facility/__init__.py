from .articles import CATALOG, ArticleClass, article_class, phase_flows
from .sim import (
    LOSS_LOCATIONS,
    SENSOR_LOCATIONS,
    Facility,
    ScenarioSpec,
    SensorReading,
    poisson_instantiate,
)
from .truth import (
    FacilityParams,
    MagnetCurves,
    expected_chain_outputs,
    expected_mag_inputs,
    expected_mag_outputs,
    siever_split,
)

__all__ = [
    "CATALOG",
    "ArticleClass",
    "article_class",
    "phase_flows",
    "LOSS_LOCATIONS",
    "SENSOR_LOCATIONS",
    "Facility",
    "ScenarioSpec",
    "SensorReading",
    "poisson_instantiate",
    "FacilityParams",
    "MagnetCurves",
    "expected_chain_outputs",
    "expected_mag_inputs",
    "expected_mag_outputs",
    "siever_split",
]
