"""On-disk cache of grid kernel matrices."""

import hashlib
import logging
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .config import default_data_dir
from .model import ModelSpec

logger = logging.getLogger(__name__)


class KernelCache:
    """Stores GridKernel matrices as .npy files keyed by (model, gamma, n_cells)."""

    def __init__(self, data_dir: Optional[Path] = None):
        """Initialize the cache.

        Args:
            data_dir: Base data directory. Defaults to ~/.fvqsd (or $FVQSD_HOME).
                     Matrices live in its kernels/ subdirectory.
        """
        if data_dir is None:
            data_dir = default_data_dir()

        self._data_dir = Path(data_dir)
        self._kernels_dir = self._data_dir / "kernels"

        self._kernels_dir.mkdir(parents=True, exist_ok=True)

    @property
    def data_dir(self) -> Path:
        """Get the base data directory."""
        return self._data_dir

    @property
    def kernels_dir(self) -> Path:
        """Get the directory holding cached matrices."""
        return self._kernels_dir

    def key_for(self, model: ModelSpec, gamma: float, n_cells: int) -> Optional[str]:
        """Cache key, or None for models without a stable identifier."""
        if model.key is None:
            return None
        text = f"{model.key}|gamma={float(gamma)!r}|n={int(n_cells)}"
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def path_for(self, model: ModelSpec, gamma: float, n_cells: int) -> Optional[Path]:
        key = self.key_for(model, gamma, n_cells)
        return None if key is None else self._kernels_dir / f"{key}.npy"

    def load(self, model: ModelSpec, gamma: float, n_cells: int) -> Optional[np.ndarray]:
        """Cached matrix, or None on a miss or an unreadable file."""
        path = self.path_for(model, gamma, n_cells)
        if path is None or not path.exists():
            return None
        try:
            matrix = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            logger.warning("ignoring unreadable kernel cache entry %s: %s", path.name, exc)
            return None
        if matrix.shape != (n_cells, n_cells):
            logger.warning("ignoring kernel cache entry %s with shape %s", path.name, matrix.shape)
            return None
        logger.debug("kernel cache hit for %s gamma=%g n=%d", model.key, gamma, n_cells)
        return matrix

    def store(self, model: ModelSpec, gamma: float, n_cells: int, matrix: np.ndarray) -> Optional[Path]:
        """Write a matrix; returns its path (None when the model cannot be keyed)."""
        path = self.path_for(model, gamma, n_cells)
        if path is None:
            return None
        tmp = path.with_name(f"{path.stem}.{os.getpid()}.tmp.npy")
        np.save(tmp, matrix, allow_pickle=False)
        os.replace(tmp, path)
        return path

    def is_cached(self, model: ModelSpec, gamma: float, n_cells: int) -> bool:
        path = self.path_for(model, gamma, n_cells)
        return path is not None and path.exists()

    def list_entries(self) -> list[str]:
        """Keys of all cached matrices."""
        return sorted(p.stem for p in self._kernels_dir.glob("*.npy") if ".tmp" not in p.name)

    def clear(self) -> int:
        """Delete every cached matrix. Returns the count removed."""
        removed = 0
        for path in self._kernels_dir.glob("*.npy"):
            path.unlink(missing_ok=True)
            removed += 1
        return removed
