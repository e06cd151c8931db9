from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any, Mapping

from coopsim.core import ValidationError


@dataclass(frozen=True)
class PlannerConfig:
    """Planner constants. Scenario files override them by the keys in ``KEYS``."""

    w_d: float = 1.0
    w_c: float = 50.0
    d_min: float = 1.5
    t_pred: float = 4.0
    dtau: float = 0.1
    a_max: float = 3.0
    a_lat_max: float = 2.0
    j_max: float = 5.0
    v_min: float = 0.0
    epsilon: float = 0.1
    shifts: tuple[float, ...] = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)
    transition_length: float = 20.0
    behavior_horizon: float = 60.0
    dt: float = 0.1
    steps: int = 50
    envelope_ds: float = 0.5
    lateral_ds: float = 1.0
    lateral_samples: int = 40
    corridor_half_width: float = 2.0
    smooth_weight: float = 10.0
    ref_weight: float = 1.0
    slack_penalty: float = 1e4
    front_offset: float = 3.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shifts", tuple(float(s) for s in self.shifts))
        positive = (
            "w_d", "w_c", "d_min", "t_pred", "dtau", "a_max", "a_lat_max", "j_max", "epsilon",
            "transition_length", "behavior_horizon", "dt", "envelope_ds", "lateral_ds",
            "corridor_half_width", "ref_weight", "slack_penalty",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"planner.{name} must be positive, got {getattr(self, name)}")
        if self.v_min < 0 or self.smooth_weight < 0 or self.front_offset < 0:
            raise ValidationError("v_min, smooth_weight and front_offset must be non-negative")
        if self.steps < 2 or self.lateral_samples < 2:
            raise ValidationError("steps and lateral_samples must be at least 2")
        if 0.0 not in self.shifts:
            raise ValidationError("candidate shifts must include 0.0")

    @property
    def horizon(self) -> float:
        return self.dt * (self.steps - 1)

    @classmethod
    def from_table(cls, table: Mapping[str, Any], where: str = "planner") -> PlannerConfig:
        """Build from a scenario ``[planner]`` table whose keys carry unit suffixes."""
        unknown = set(table) - set(KEYS)
        if unknown:
            raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
        kwargs = {}
        for key, value in table.items():
            name = KEYS[key]
            kwargs[name] = tuple(value) if name == "shifts" else (int(value) if name in ("steps", "lateral_samples") else float(value))
        return cls(**kwargs)

    def to_table(self) -> dict[str, Any]:
        inv = {v: k for k, v in KEYS.items()}
        return {inv[f.name]: (list(getattr(self, f.name)) if f.name == "shifts" else getattr(self, f.name)) for f in fields(self)}


KEYS = {
    "w_d": "w_d",
    "w_c": "w_c",
    "d_min_m": "d_min",
    "t_pred_s": "t_pred",
    "dtau_s": "dtau",
    "a_max_mps2": "a_max",
    "a_lat_max_mps2": "a_lat_max",
    "j_max_mps3": "j_max",
    "v_min_mps": "v_min",
    "epsilon": "epsilon",
    "shifts_m": "shifts",
    "transition_length_m": "transition_length",
    "behavior_horizon_m": "behavior_horizon",
    "dt_s": "dt",
    "steps": "steps",
    "envelope_ds_m": "envelope_ds",
    "lateral_ds_m": "lateral_ds",
    "lateral_samples": "lateral_samples",
    "corridor_half_width_m": "corridor_half_width",
    "smooth_weight": "smooth_weight",
    "ref_weight": "ref_weight",
    "slack_penalty": "slack_penalty",
    "front_offset_m": "front_offset",
}
