"""Pytest configuration and shared fixtures."""
import json
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pytest
import torch

from unite.featurizer import Geometry, featurize
from unite.graph import MoleculeFeatures
from unite.layers import EquivariantRep
from unite.settings import FeaturizerSettings, ModelSettings, RunSettings


@pytest.fixture(autouse=True)
def mock_config(monkeypatch, tmp_path):
    """Deterministic configuration for every test; CLI defaults read these attributes."""
    import config

    monkeypatch.setattr(config.config, "LOG_LEVEL", "INFO")
    monkeypatch.setattr(config.config, "THREADS", 1)
    monkeypatch.setattr(config.config, "SEED", 0)
    monkeypatch.setattr(config.config, "OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setattr(config.config, "CHECK_TOLERANCE_SCALE", 1.0)
    torch.set_num_threads(1)
    dtype = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)

    yield

    torch.set_default_dtype(dtype)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def rotation(rng) -> np.ndarray:
    """A fixed generic proper rotation."""
    from unite.o3 import random_rotation

    return random_rotation(rng)


# Dyadic coordinates keep displacements exact, so translated copies featurize bit-identically.

@pytest.fixture
def h2() -> Geometry:
    return Geometry((1, 1), np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.375]]))


@pytest.fixture
def water() -> Geometry:
    return Geometry((8, 1, 1), np.array([[0.0, 0.0, 0.0], [0.0, 1.5, 1.125], [0.0, -1.5, 1.125]]))


@pytest.fixture
def methane() -> Geometry:
    h = 1.25
    coords = [[0.0, 0.0, 0.0], [h, h, h], [-h, -h, h], [-h, h, -h], [h, -h, -h]]
    return Geometry((6, 1, 1, 1, 1), np.array(coords))


@pytest.fixture
def hydrogen_sulfide() -> Geometry:
    """Carries the d shell of sulfur."""
    return Geometry((16, 1, 1), np.array([[0.0, 0.0, 0.0], [0.0, 1.75, 1.75], [0.0, -1.75, 1.75]]))


@pytest.fixture
def square_h4() -> Geometry:
    """Half-filled degenerate pair: HOMO and LUMO coincide."""
    coords = [[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [1.5, 1.5, 0.0], [0.0, 1.5, 0.0]]
    return Geometry((1, 1, 1, 1), np.array(coords))


@pytest.fixture
def features_of() -> Callable[..., MoleculeFeatures]:
    """Featurize a geometry into a collatable MoleculeFeatures."""

    def build(geometry: Geometry, settings: Optional[FeaturizerSettings] = None) -> MoleculeFeatures:
        tensor, state = featurize(geometry, settings)
        return MoleculeFeatures(tensor, geometry, state.e_tb)

    return build


@pytest.fixture
def small_model_settings() -> ModelSettings:
    """Small model with live gates so that every path contributes."""
    return ModelSettings.small().model_copy(update={"zero_init_gates": False})


@pytest.fixture
def run_settings_for() -> Callable[..., RunSettings]:
    """Small-model run configuration for a head and loss, a few epochs long."""

    def build(head: str = "energy", loss: str = "plain", epochs: int = 3, **training) -> RunSettings:
        raw = {
            "model": ModelSettings.small().model_dump(),
            "head": {"kind": head},
            "training": {
                "epochs": epochs,
                "batch_size": 2,
                "validation_fraction": 0.25,
                "loss": {"kind": loss},
                "optimizer": {"warmup_epochs": 1, "max_lr": 1e-3},
                **training,
            },
        }
        return RunSettings.from_dict(raw)

    return build


@pytest.fixture
def channels():
    """Irrep channel counts of the small model."""
    return ModelSettings.small().channels


@pytest.fixture
def random_rep() -> Callable[..., EquivariantRep]:
    """Seeded Gaussian per-atom features for the given channel counts."""

    def build(channels, n_atoms: int, seed: int = 0) -> EquivariantRep:
        generator = torch.Generator().manual_seed(seed)
        return EquivariantRep({
            (l, p): torch.randn(n_atoms, n, 2 * l + 1, dtype=torch.float64, generator=generator)
            for (l, p), n in channels.items()
        })

    return build


@pytest.fixture
def toy_dataset(tmp_path) -> Path:
    """Four toy molecules with two conformers each, every label included."""
    from unite.tools import DatasetTool
    from unite.toy_data import make_toy_dataset

    path = tmp_path / "toy.jsonl"
    DatasetTool().write(path, make_toy_dataset(4, seed=1, conformers=2))
    return path


@pytest.fixture
def run_config(tmp_path, run_settings_for) -> Callable[..., Path]:
    """Write a small-model run configuration; validation reuses the training set so every element is fitted."""

    def build(head: str = "energy", loss: str = "plain", epochs: int = 2, **training) -> Path:
        training.setdefault("validation_fraction", 0.0)
        settings = run_settings_for(head, loss, epochs, **training)
        path = tmp_path / f"{head}_{loss}.json"
        path.write_text(json.dumps(settings.model_dump()))
        return path

    return build
