"""JSON-lines dataset reading and writing."""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator, model_validator

from unite.errors import DatasetError, DomainError
from unite.featurizer import Geometry

logger = logging.getLogger(__name__)

LABEL_KEYS = (
    "energy_hartree",
    "forces_hartree_per_bohr",
    "dipole_au",
    "polarizability_au",
    "homo_hartree",
    "lumo_hartree",
    "gap_hartree",
    "r2_au",
    "density_coeffs",
)


class MoleculeRecord(BaseModel):
    """One dataset line: atoms, coordinates in Bohr, charge, optional labels and a conformer group id."""

    model_config = ConfigDict(extra="forbid")

    atoms: List[int] = Field(min_length=1)
    coords_bohr: List[List[float]]
    charge: int = 0
    labels: Dict[str, Any] = Field(default_factory=dict)
    molecule_id: Optional[str] = None

    _line: Optional[int] = PrivateAttr(default=None)

    @field_validator("coords_bohr")
    @classmethod
    def _three_components(cls, value: List[List[float]]) -> List[List[float]]:
        if any(len(row) != 3 for row in value):
            raise ValueError("every coordinate needs three components")
        return value

    @field_validator("labels")
    @classmethod
    def _known_labels(cls, value: Dict[str, Any]) -> Dict[str, Any]:
        unknown = sorted(set(value) - set(LABEL_KEYS))
        if unknown:
            raise ValueError(f"unknown label keys {unknown}")
        return value

    @model_validator(mode="after")
    def _coords_match_atoms(self) -> "MoleculeRecord":
        if len(self.coords_bohr) != len(self.atoms):
            raise ValueError(f"{len(self.coords_bohr)} coordinates for {len(self.atoms)} atoms")
        return self

    @property
    def line(self) -> Optional[int]:
        return self._line

    def geometry(self) -> Geometry:
        try:
            return Geometry(tuple(self.atoms), np.array(self.coords_bohr, dtype=np.float64), self.charge)
        except DomainError as e:
            raise DatasetError(str(e), self._line) from e

    def label(self, key: str) -> np.ndarray:
        """Label ``key`` as a float64 array.

        Raises:
            DatasetError: If the record lacks the label; names the line.
        """
        if key not in self.labels:
            raise DatasetError(f"missing label {key!r}", self._line)
        return np.asarray(self.labels[key], dtype=np.float64)

    @classmethod
    def from_geometry(cls, geometry: Geometry, labels: Optional[Dict[str, Any]] = None,
                      molecule_id: Optional[str] = None) -> "MoleculeRecord":
        return cls(
            atoms=list(geometry.atomic_numbers),
            coords_bohr=geometry.coords.tolist(),
            charge=geometry.charge,
            labels=labels or {},
            molecule_id=molecule_id,
        )


class DatasetTool:
    """Reads and writes JSON-lines molecule datasets."""

    def __init__(self):
        logger.debug("DatasetTool initialized")

    def read(self, path) -> List[MoleculeRecord]:
        """
        Parse every line of a dataset file.

        Args:
            path: JSON-lines file

        Returns:
            Records in file order, each remembering its 1-based line number

        Raises:
            DatasetError: On the first malformed line (blank lines included)
        """
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise DatasetError(f"cannot read dataset {path}: {e}") from e
        records = []
        for number, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                raise DatasetError("blank line", number)
            try:
                record = MoleculeRecord.model_validate(json.loads(raw))
            except json.JSONDecodeError as e:
                raise DatasetError(f"invalid JSON: {e.msg}", number) from e
            except ValidationError as e:
                raise DatasetError(f"invalid record: {e.errors()[0]['msg']}", number) from e
            record._line = number
            records.append(record)
        logger.info(f"Read {len(records)} records from {path}")
        return records

    def write(self, path, records: Iterable[MoleculeRecord]) -> int:
        """Write records one JSON object per line; returns the record count."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with path.open("w") as f:
            for record in records:
                f.write(json.dumps(record.model_dump(exclude_none=True)) + "\n")
                count += 1
        logger.info(f"Wrote {count} records to {path}")
        return count

    def record_hash(self, record: MoleculeRecord) -> str:
        """Content hash of atoms, coordinates and charge."""
        content = json.dumps([record.atoms, record.coords_bohr, record.charge])
        return hashlib.sha256(content.encode()).hexdigest()

    def molecule_id(self, record: MoleculeRecord) -> str:
        """Conformer group of a record; records without one form their own group."""
        return record.molecule_id or self.record_hash(record)[:16]

    def require_labels(self, records: Iterable[MoleculeRecord], key: str) -> None:
        """
        Check that every record carries ``key``.

        Raises:
            DatasetError: Naming the first record line without the label
        """
        for record in records:
            if key not in record.labels:
                raise DatasetError(f"missing label {key!r}", record.line)
