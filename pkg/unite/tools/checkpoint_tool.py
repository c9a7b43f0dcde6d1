"""Checkpoints: a JSON manifest plus a little-endian float64 blob."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch

from unite.basis import ELEMENTS
from unite.errors import CheckpointError, ConfigError
from unite.model import UniteModel, build_model
from unite.settings import RunSettings

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f8")


class CheckpointTool:
    """Saves and restores models bit-exactly.

    The manifest records the run settings, the element list of the per-element
    tables and every state tensor (parameters, normalization statistics,
    element masks) in blob order with its shape and dtype.
    """

    def __init__(self):
        logger.debug("CheckpointTool initialized")

    def save(self, model: UniteModel, settings: RunSettings, path) -> Path:
        """
        Write ``<path>.json`` and ``<path>.bin``.

        Args:
            model: Model to store
            settings: Run settings the model was built from
            path: Target path without suffix

        Returns:
            Path of the manifest
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
        state = model.state_dict()
        entries = []
        chunks = []
        for name, tensor in state.items():
            entries.append({"name": name, "shape": list(tensor.shape), "dtype": str(tensor.dtype).replace("torch.", "")})
            chunks.append(tensor.detach().cpu().numpy().astype(BLOB_DTYPE).ravel())
        blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=BLOB_DTYPE)
        manifest: Dict[str, Any] = {
            "format_version": FORMAT_VERSION,
            "settings": settings.model_dump(),
            "n_input_channels": model.net.n_input_channels,
            "elements": list(ELEMENTS),
            "tensors": entries,
            "blob": blob_path.name,
        }
        blob_path.write_bytes(blob.astype(BLOB_DTYPE).tobytes())
        manifest_path.write_text(json.dumps(manifest, indent=2))
        logger.info(f"Saved checkpoint {manifest_path} ({blob.size} values)")
        return manifest_path

    def load(self, path) -> Tuple[UniteModel, RunSettings]:
        """
        Rebuild a model from a manifest and its blob.

        Args:
            path: Manifest path, or the shared prefix of manifest and blob

        Returns:
            (model in eval mode, run settings)

        Raises:
            CheckpointError: If files are missing or disagree with each other
        """
        manifest_path = Path(path).with_suffix(".json")
        try:
            manifest = json.loads(manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"cannot read manifest {manifest_path}: {e}") from e
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
        if manifest.get("elements") != list(ELEMENTS):
            raise CheckpointError(f"checkpoint element table {manifest.get('elements')} differs from {list(ELEMENTS)}")
        try:
            settings = RunSettings.from_dict(manifest["settings"])
        except (KeyError, ConfigError) as e:
            raise CheckpointError(f"checkpoint settings are invalid: {e}") from e

        blob_path = manifest_path.with_name(manifest["blob"])
        try:
            raw = blob_path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read blob {blob_path}: {e}") from e
        entries = manifest["tensors"]
        expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
        if len(raw) != BLOB_DTYPE.itemsize * expected:
            raise CheckpointError(f"blob holds {len(raw)} bytes, manifest needs {BLOB_DTYPE.itemsize * expected}")
        values = np.frombuffer(raw, dtype=BLOB_DTYPE)

        model = build_model(settings)
        state = model.state_dict()
        if [e["name"] for e in entries] != list(state):
            raise CheckpointError("checkpoint tensor names do not match the model built from its settings")
        restored, offset = {}, 0
        for entry in entries:
            target = state[entry["name"]]
            count = int(np.prod(entry["shape"], dtype=np.int64))
            if list(target.shape) != entry["shape"]:
                raise CheckpointError(f"shape mismatch for {entry['name']}: {entry['shape']} vs {list(target.shape)}")
            chunk = values[offset:offset + count].reshape(entry["shape"])
            restored[entry["name"]] = torch.from_numpy(chunk.copy()).to(target.dtype)
            offset += count
        model.load_state_dict(restored)
        model.eval()
        logger.info(f"Loaded checkpoint {manifest_path}")
        return model, settings
