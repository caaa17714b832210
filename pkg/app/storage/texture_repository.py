import logging
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from app.exceptions import ArtifactNotFoundException, InvalidArgumentException
from app.services.odf_histogram import WeightedOrientationSet
from app.services.orientation_space import OrientationGrid
from app.services.process_env import ProcessAction
from app.services.taylor_model import CrystalAggregate

logger = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"
GRID_HEADER = re.compile(r"J=(\d+)\s+seed=(-?\d+)\s+cv=(\S+)")


def _load_rows(path: Path, columns: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundException(str(path))
    try:
        rows = np.atleast_2d(np.loadtxt(path, comments="#", ndmin=2))
    except ValueError as exc:
        raise InvalidArgumentException(
            "Malformed numeric file", path=str(path), error=str(exc)
        ) from exc
    if rows.size == 0:
        return np.zeros((0, columns))
    if rows.shape[1] != columns:
        raise InvalidArgumentException(
            "Unexpected column count", path=str(path), got=rows.shape[1], expected=columns
        )
    return rows


class TextureRepository:
    """Text formats for textures, orientation grids, processing paths and snapshots."""

    def __init__(self, root: Path | str = ".") -> None:
        self.root = Path(root)

    def _resolve(self, path: Path | str) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    def save_texture(self, texture: WeightedOrientationSet, path: Path | str) -> Path:
        """One line per crystal: ``volume w x y z``."""
        target = self._resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        rows = np.column_stack([texture.volumes, texture.orientations])
        np.savetxt(target, rows, fmt=FLOAT_FMT)
        return target

    def load_texture(self, path: Path | str) -> WeightedOrientationSet:
        rows = _load_rows(self._resolve(path), 5)
        if len(rows) == 0:
            raise InvalidArgumentException("Texture file is empty", path=str(path))
        return WeightedOrientationSet(rows[:, 1:], rows[:, 0])

    def save_grid(self, grid: OrientationGrid, path: Path | str) -> Path:
        target = self._resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        header = f"J={grid.size} seed={grid.seed} cv={grid.cv:.17g}"
        np.savetxt(target, grid.orientations, fmt=FLOAT_FMT, header=header, comments="# ")
        logger.info(
            "Grid written path=%s J=%s cv=%.4f",
            target,
            grid.size,
            grid.cv,
            extra={"path": str(target), "J": grid.size, "cv": grid.cv},
        )
        return target

    def load_grid(self, path: Path | str) -> OrientationGrid:
        target = self._resolve(path)
        rows = _load_rows(target, 4)
        with target.open() as fh:
            match = GRID_HEADER.search(fh.readline())
        if match is None:
            raise InvalidArgumentException("Grid file lacks its header", path=str(target))
        if int(match.group(1)) != len(rows):
            raise InvalidArgumentException(
                "Grid header size does not match its rows",
                path=str(target),
                header=int(match.group(1)),
                rows=len(rows),
            )
        return OrientationGrid.from_orientations(rows, int(match.group(2)))

    def save_path(self, actions: Sequence[ProcessAction], path: Path | str) -> Path:
        """One line per step: ``f qw qx qy qz``."""
        target = self._resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        rows = np.array([[a.magnitude, *a.rotation] for a in actions]).reshape(-1, 5)
        np.savetxt(target, rows, fmt=FLOAT_FMT)
        return target

    def load_path(self, path: Path | str) -> list[ProcessAction]:
        rows = _load_rows(self._resolve(path), 5)
        return [ProcessAction(float(row[0]), row[1:].copy()) for row in rows]

    def save_aggregate(self, aggregate: CrystalAggregate, path: Path | str) -> Path:
        """Per crystal: ``volume q(4) Fp(9 row-major) r(24) accumulated_shear``."""
        target = self._resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        rows = np.column_stack(
            [
                aggregate.volumes,
                aggregate.orientations(),
                aggregate.Fp.reshape(aggregate.size, 9),
                aggregate.resistance,
                aggregate.accumulated_shear,
            ]
        )
        np.savetxt(
            target,
            rows,
            fmt=FLOAT_FMT,
            header=f"eq_strain={aggregate.eq_strain:.17g}",
            comments="# ",
        )
        return target
