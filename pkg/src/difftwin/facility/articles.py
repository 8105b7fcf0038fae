"""Recyclable article catalog and scenario phase flows."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class ArticleClass:
    """One article type: mass, magnetic class, size class, phase flows."""

    name: str
    mass: float  # kg
    ferromagnetic: str  # "FM" | "NFM"
    size: str  # "S" | "M" | "L"
    flow_static: float  # kg/s
    flow_dyn_a: float
    flow_dyn_b: float

    def flow(self, phase: str) -> float:
        return {
            "static": self.flow_static,
            "dyn_a": self.flow_dyn_a,
            "dyn_b": self.flow_dyn_b,
        }[phase]


CATALOG = (
    ArticleClass("paper_roll", 0.0090, "NFM", "L", 0.0069, 0.0520, 0.0199),
    ArticleClass("plastic_bottle", 0.0180, "NFM", "L", 0.0275, 0.0012, 0.0348),
    ArticleClass("coffee_cup", 0.0093, "NFM", "M", 0.0068, 0.0003, 0.0087),
    ArticleClass("paper_ball", 0.0035, "NFM", "M", 0.0026, 0.0001, 0.0033),
    ArticleClass("fm_can", 0.0149, "FM", "M", 0.0226, 0.0356, 0.0226),
    ArticleClass("fm_cap", 0.0007, "FM", "S", 0.0011, 0.0001, 0.0013),
    ArticleClass("nfm_cap", 0.0005, "NFM", "S", 0.0007, 0.0012, 0.0008),
)

CLASS_INDEX = {a.name: i for i, a in enumerate(CATALOG)}


def article_class(name: str) -> ArticleClass:
    try:
        return CATALOG[CLASS_INDEX[name]]
    except KeyError as exc:
        raise ConfigError(f"unknown article class {name!r}") from exc


def phase_flows(phase: str) -> dict:
    """Mean mass flow per article class for a scenario phase."""
    return {a.name: a.flow(phase) for a in CATALOG}
