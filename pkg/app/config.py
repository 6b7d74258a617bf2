"""
Toolkit Configuration
=====================
One strict settings document for every subcommand. Values come only from
defaults and the JSON file passed with --config; environment variables and
dotenv files are never read, so a run is fully described by its flags and
that file.

Example --config file:
    {
        "mesh": {"width": 8, "height": 8, "g_node": 4.0},
        "shaping": {"alpha": 1.5, "lambda": 0.5},
        "rl": {"episodes": 300, "batch_size": 16}
    }

Unknown keys at any level are rejected.
"""

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from app.pdn import (
    DEFAULT_C_NODE,
    DEFAULT_CAP_C,
    DEFAULT_CAP_ESL,
    DEFAULT_CAP_ESR,
    DEFAULT_F_MAX,
    DEFAULT_F_MIN,
    DEFAULT_G_NODE,
    DEFAULT_L_SEG,
    DEFAULT_POINTS,
    DEFAULT_R_SEG,
    CapacitorModel,
    FrequencyBand,
    MeshPdnSpec,
)

Range = Tuple[float, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# =============================================================================
# Sections
# =============================================================================

class MeshSettings(_Strict):
    width: int = Field(8, ge=1, description="Mesh columns")
    height: int = Field(8, ge=1, description="Mesh rows")
    r_seg: float = Field(DEFAULT_R_SEG, gt=0, description="Series resistance per segment (ohm)")
    l_seg: float = Field(DEFAULT_L_SEG, gt=0, description="Series inductance per segment (H)")
    c_node: float = Field(DEFAULT_C_NODE, gt=0, description="Shunt capacitance per node (F)")
    g_node: float = Field(DEFAULT_G_NODE, gt=0, description="Shunt conductance per node (S)")

    def to_spec(self) -> MeshPdnSpec:
        return MeshPdnSpec(**self.model_dump())

    @classmethod
    def from_spec(cls, spec: MeshPdnSpec) -> "MeshSettings":
        return cls(**spec.to_dict())


class CapacitorSettings(_Strict):
    c_val: float = Field(DEFAULT_CAP_C, gt=0, description="Capacitance (F)")
    esr: float = Field(DEFAULT_CAP_ESR, ge=0, description="Equivalent series resistance (ohm)")
    esl: float = Field(DEFAULT_CAP_ESL, ge=0, description="Equivalent series inductance (H)")

    def to_model(self) -> CapacitorModel:
        return CapacitorModel(**self.model_dump())

    @classmethod
    def from_model(cls, cap: CapacitorModel) -> "CapacitorSettings":
        return cls(**cap.to_dict())


class BandSettings(_Strict):
    f_min: float = Field(DEFAULT_F_MIN, gt=0, description="Lowest frequency (Hz)")
    f_max: float = Field(DEFAULT_F_MAX, gt=0, description="Highest frequency (Hz)")
    n_points: int = Field(DEFAULT_POINTS, ge=2, description="Log-spaced frequency points")
    spacing: Literal["log"] = "log"

    def to_band(self) -> FrequencyBand:
        return FrequencyBand(**self.model_dump())

    @classmethod
    def from_band(cls, band: FrequencyBand) -> "BandSettings":
        return cls(**band.to_dict())


class GenerationSettings(_Strict):
    """Instance distribution: grid, capacitor count, keep-out share and electrical ranges."""
    width: int = Field(6, ge=1)
    height: int = Field(6, ge=1)
    k_caps: int = Field(4, ge=1)
    keep_out_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    r_seg_range: Range = (0.5, 1.5)
    l_seg_range: Range = (5e-12, 2e-11)
    c_node_range: Range = (0.5e-12, 2e-12)
    g_node_range: Range = (2.0, 6.0)

    @model_validator(mode="after")
    def _ranges_ordered(self):
        for name in ("r_seg_range", "l_seg_range", "c_node_range", "g_node_range"):
            low, high = getattr(self, name)
            if not 0.0 < low <= high:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got ({low}, {high})")
        return self


class ShapingSettings(_Strict):
    alpha: float = Field(1.5, gt=0, description="Decay rate of the shaping potential")
    lambda_: float = Field(0.5, ge=0, alias="lambda", description="Dispersion weight")
    beta_init: float = Field(1.0, ge=0)
    beta_min: float = Field(0.0, ge=0)
    terminal_zeroed: bool = False

    @model_validator(mode="after")
    def _beta_order(self):
        if self.beta_init < self.beta_min:
            raise ValueError("beta_init must be >= beta_min")
        return self


class RlSettings(_Strict):
    episodes: int = Field(200, ge=0)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1.0, gt=0)
    gamma: float = Field(1.0, gt=0, le=1)
    baseline: Literal["none", "running_mean"] = "running_mean"
    baseline_decay: float = Field(0.99, ge=0, lt=1)
    eval_interval: int = Field(10, ge=1)
    eval_rollouts: int = Field(64, ge=1)


class BenchSettings(_Strict):
    mechanisms: List[str] = ["softmax", "psla_rank1"]
    lengths: List[int] = [512, 1024, 2048, 4096, 8192]
    d: int = Field(64, ge=1)
    reps: int = Field(9, ge=5)
    warmup: int = Field(2, ge=0)


# =============================================================================
# Root Settings
# =============================================================================

class ToolkitSettings(BaseSettings):
    model_config = SettingsConfigDict(extra="forbid")

    mesh: MeshSettings = MeshSettings()
    capacitor: CapacitorSettings = CapacitorSettings()
    band: BandSettings = BandSettings()
    generation: GenerationSettings = GenerationSettings()
    shaping: ShapingSettings = ShapingSettings()
    rl: RlSettings = RlSettings()
    bench: BenchSettings = BenchSettings()

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls,
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ):
        return (init_settings,)


def load_settings(path: Optional[Union[str, Path]] = None) -> ToolkitSettings:
    """Defaults, overridden by the JSON document at `path` when given."""
    if path is None:
        return ToolkitSettings()
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return ToolkitSettings(**data)
