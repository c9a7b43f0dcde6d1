"""Gaussian cube files for scalar fields on a rectilinear grid."""
import logging
from pathlib import Path
from typing import Any, Dict, Sequence

import numpy as np

from unite.density import Grid

logger = logging.getLogger(__name__)

VALUES_PER_LINE = 6


class CubeTool:
    """Writes and reads cube files; values run with z fastest as in ``Grid.points``."""

    def write(
        self,
        path,
        grid: Grid,
        atomic_numbers: Sequence[int],
        coords: np.ndarray,
        values: np.ndarray,
        comment: str = "density",
    ) -> Path:
        """
        Write one field to ``path``.

        Args:
            path: Output file
            grid: Grid the values were sampled on
            atomic_numbers: Atoms of the molecule
            coords: Atom positions in Bohr
            values: Field samples, length grid.n_points
            comment: First header line

        Returns:
            The written path
        """
        values = np.asarray(values, dtype=np.float64).reshape(grid.shape)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [comment, "generated on a rectilinear grid, z fastest"]
        lines.append(f"{len(atomic_numbers):5d} " + " ".join(f"{x:12.6f}" for x in grid.origin))
        for n, axis in zip(grid.shape, grid.axes):
            lines.append(f"{n:5d} " + " ".join(f"{x:12.6f}" for x in axis))
        for z, xyz in zip(atomic_numbers, np.asarray(coords)):
            lines.append(f"{int(z):5d} {float(z):12.6f} " + " ".join(f"{x:12.6f}" for x in xyz))
        for row in values.reshape(-1, grid.shape[2]):
            for start in range(0, len(row), VALUES_PER_LINE):
                lines.append(" ".join(f"{v:13.5e}" for v in row[start:start + VALUES_PER_LINE]))
        path.write_text("\n".join(lines) + "\n")
        logger.info(f"Wrote cube {path} with {grid.shape[0]}x{grid.shape[1]}x{grid.shape[2]} voxels")
        return path

    def read(self, path) -> Dict[str, Any]:
        """
        Parse a cube file.

        Returns:
            Dictionary with origin, shape, axes, atomic_numbers, coords and values (shape ``shape``)
        """
        with Path(path).open() as f:
            f.readline()
            f.readline()
            header = f.readline().split()
            n_atoms = int(header[0])
            origin = np.array([float(x) for x in header[1:4]])
            shape, axes = [], []
            for _ in range(3):
                parts = f.readline().split()
                shape.append(int(parts[0]))
                axes.append([float(x) for x in parts[1:4]])
            numbers, coords = [], []
            for _ in range(n_atoms):
                parts = f.readline().split()
                numbers.append(int(parts[0]))
                coords.append([float(x) for x in parts[2:5]])
            data = np.array(f.read().split(), dtype=np.float64)
        return {
            "origin": origin,
            "shape": tuple(shape),
            "axes": np.array(axes),
            "atomic_numbers": numbers,
            "coords": np.array(coords).reshape(-1, 3),
            "values": data.reshape(shape),
        }
