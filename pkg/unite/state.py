"""State schema for the LangGraph training workflow."""
from typing import Any, Dict, List, Optional, TypedDict

from unite.model import UniteModel
from unite.settings import RunSettings
from unite.tools.dataset_tool import MoleculeRecord
from unite.training import Sample, TrainingResult


class TrainingState(TypedDict, total=False):
    """State carried between the nodes of the training workflow."""

    # Inputs
    config_path: str
    dataset_path: str
    output_dir: str
    overrides: Dict[str, Any]  # seed, delta_learning, fmo_features

    # Workflow data
    settings: Optional[RunSettings]
    records: List[MoleculeRecord]
    samples: List[Sample]
    model: Optional[UniteModel]
    result: Optional[TrainingResult]
    metrics: Dict[str, float]
    checkpoints: Dict[str, str]  # best / final manifest paths

    # Error handling
    errors: List[str]

    # Metadata
    metadata: Dict[str, Any]
