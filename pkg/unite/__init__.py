"""UNiTE: equivariant networks over atomic-orbital features of a toy tight-binding model."""
from unite.featurizer import Geometry, featurize
from unite.model import UniteModel, build_model
from unite.settings import RunSettings

__all__ = [
    "Geometry",
    "RunSettings",
    "UniteModel",
    "build_model",
    "featurize",
]
