"""File tools for datasets, checkpoints and cube files."""
from unite.tools.checkpoint_tool import CheckpointTool
from unite.tools.cube_tool import CubeTool
from unite.tools.dataset_tool import DatasetTool, MoleculeRecord

__all__ = [
    "CheckpointTool",
    "CubeTool",
    "DatasetTool",
    "MoleculeRecord",
]
