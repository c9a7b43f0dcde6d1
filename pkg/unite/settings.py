"""Validated run settings loaded from the JSON run configuration."""
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from unite.errors import ConfigError

logger = logging.getLogger(__name__)

IrrepKey = Tuple[int, int]

HEAD_KINDS = ("energy", "dipole", "polarizability", "homo", "lumo", "gap", "r2", "density")

# Label key each head trains against when the config does not name one.
DEFAULT_TARGETS: Dict[str, str] = {
    "energy": "energy_hartree",
    "dipole": "dipole_au",
    "polarizability": "polarizability_au",
    "homo": "homo_hartree",
    "lumo": "lumo_hartree",
    "gap": "gap_hartree",
    "r2": "r2_au",
    "density": "density_coeffs",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSettings(_Section):
    """Network sizes. Channel lists are indexed by degree l = 0..4."""

    channels_even: List[int] = Field(default_factory=lambda: [128, 48, 24, 12, 6])
    channels_odd: List[int] = Field(default_factory=lambda: [24, 8, 4, 2, 0])
    conv_channels: int = Field(8, ge=1)
    attention_heads: int = Field(8, ge=1)
    morlet_count: int = Field(16, ge=1)
    morlet_gamma0: float = Field(0.3, gt=0)
    morlet_ratio: float = Field(1.08, gt=0)
    conv_steps: int = Field(4, ge=0)
    interaction_steps: int = Field(4, ge=0)
    mlp_hidden: Optional[int] = Field(None, ge=1)
    epsilon: float = Field(0.1, gt=0)
    norm_momentum: float = Field(0.9, ge=0, le=1)
    zero_init_gates: bool = True

    @field_validator("channels_even", "channels_odd")
    @classmethod
    def _five_degrees(cls, value: List[int]) -> List[int]:
        if len(value) != 5 or any(n < 0 for n in value):
            raise ValueError("channel lists need five non-negative counts (l = 0..4)")
        return value

    @model_validator(mode="after")
    def _matching_degrees(self) -> "ModelSettings":
        if any(n == 0 for n in self.channels_even[:3]):
            raise ValueError("p=+1 channels for l = 0, 1, 2 must be non-empty (matching layers read them)")
        return self

    @property
    def channels(self) -> Dict[IrrepKey, int]:
        """N_lp for every (l, p) with at least one channel, ordered by parity then degree."""
        out: Dict[IrrepKey, int] = {}
        for p, counts in ((1, self.channels_even), (-1, self.channels_odd)):
            for l, n in enumerate(counts):
                if n:
                    out[(l, p)] = n
        return out

    @property
    def total_channels(self) -> int:
        return sum(self.channels_even) + sum(self.channels_odd)

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.total_channels

    @classmethod
    def small(cls) -> "ModelSettings":
        """Reduced model used for gradient checks and fast tests."""
        return cls(
            channels_even=[8, 4, 2, 1, 1],
            channels_odd=[2, 1, 1, 1, 0],
            conv_channels=2,
            attention_heads=2,
            morlet_count=4,
            conv_steps=1,
            interaction_steps=1,
        )


class FeaturizerSettings(_Section):
    fmo_features: bool = False
    betas: List[float] = Field(default_factory=lambda: [4.0, 16.0, 64.0, 256.0])
    flush_threshold: float = Field(1e-12, ge=0)

    @property
    def n_channels(self) -> int:
        return 4 + (2 * len(self.betas) if self.fmo_features else 0)


class HeadSettings(_Section):
    kind: Literal["energy", "dipole", "polarizability", "homo", "lumo", "gap", "r2", "density"] = "energy"
    attention_kind: Literal["linear", "exponential"] = "exponential"
    target: Optional[str] = None

    @property
    def label_key(self) -> str:
        return self.target or DEFAULT_TARGETS[self.kind]

    @property
    def extensive(self) -> bool:
        return self.kind in ("energy", "polarizability", "r2")


class LossConfig(_Section):
    kind: Literal["plain", "energy_force", "geometry_pair", "density"] = "plain"
    c_e: float = Field(1.0, ge=0)
    c_f: float = Field(1000.0, ge=0)
    c_g: float = Field(10.0, ge=0)
    delta_learning: bool = False


class OptimizerConfig(_Section):
    max_lr: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-4, gt=0)
    schedule: Literal["warmup_cosine", "step_decay"] = "warmup_cosine"
    warmup_epochs: int = Field(50, ge=0)
    decay_factor: float = Field(0.5, gt=0, le=1)
    decay_fraction: float = Field(0.2, gt=0, le=1)


class TrainingSettings(_Section):
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    epochs: int = Field(500, ge=1)
    batch_size: int = Field(8, ge=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = 0
    force_step: float = Field(0.01, gt=0)

    @model_validator(mode="after")
    def _warmup_fits(self) -> "TrainingSettings":
        if self.optimizer.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        return self


class RunSettings(_Section):
    """Top-level run configuration with ``model``, ``featurizer``, ``training`` and ``head`` sections."""

    model: ModelSettings = Field(default_factory=ModelSettings)
    featurizer: FeaturizerSettings = Field(default_factory=FeaturizerSettings)
    training: TrainingSettings = Field(default_factory=TrainingSettings)
    head: HeadSettings = Field(default_factory=HeadSettings)

    @model_validator(mode="after")
    def _loss_matches_head(self) -> "RunSettings":
        kind = self.training.loss.kind
        if kind == "density" and self.head.kind != "density":
            raise ValueError("density loss requires the density head")
        if kind in ("energy_force", "geometry_pair") and self.head.kind != "energy":
            raise ValueError(f"{kind} loss requires the energy head")
        if self.training.loss.delta_learning and self.head.kind != "energy":
            raise ValueError("delta learning only applies to the energy head")
        return self

    @classmethod
    def load(cls, path) -> "RunSettings":
        """Read and validate a JSON run configuration.

        Raises:
            ConfigError: If the file is unreadable or fails validation.
        """
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunSettings":
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(f"invalid run configuration: {e}") from e

    def with_overrides(
        self,
        seed: Optional[int] = None,
        delta_learning: Optional[bool] = None,
        fmo_features: Optional[bool] = None,
    ) -> "RunSettings":
        """Copy with CLI flag values applied on top of the file values."""
        raw = self.model_dump()
        if seed is not None:
            raw["training"]["seed"] = seed
        if delta_learning:
            raw["training"]["loss"]["delta_learning"] = True
        if fmo_features:
            raw["featurizer"]["fmo_features"] = True
        return RunSettings.from_dict(raw)
