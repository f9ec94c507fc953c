"""CSV outputs and the JSON run manifest.

Outputs are staged under hidden partial names and only renamed into place
after manifest.json has been written, so an output file never exists
without the manifest that regenerates it. Floats are written with repr and
the manifest carries no timestamps, which keeps repeated runs byte-identical.
"""

import csv
import json
import logging
import math
import os
from importlib import metadata
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .errors import FlemingViotError, GridError
from .gridref import GridDensity

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_VERSIONED_PACKAGES = ("numpy", "scipy", "POT")


def format_value(value: Any) -> str:
    """Text form of one CSV cell."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return " ".join(format_value(v) for v in value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """UTF-8 CSV with a header row and RFC-4180 quoting. Returns the row count."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
            count += 1
    return count


def density_rows(density: GridDensity) -> list[tuple[float, float]]:
    return list(zip(density.centers.tolist(), density.weights.tolist()))


def read_density(path: Path) -> GridDensity:
    """Read a (cell_center, weight) CSV back into a GridDensity."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["cell_center", "weight"]:
            raise GridError(f"{path} is not a density file (header {header})")
        weights = [float(row[1]) for row in reader if row]
    return GridDensity(np.asarray(weights))


def package_versions() -> dict[str, str]:
    versions = {"fleming-viot-qsd": __version__}
    for name in _VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    return value


class OutputWriter:
    """Stages output files in a directory and commits them with a manifest."""

    def __init__(self, out_dir: Path):
        self._out_dir = Path(out_dir)
        self._out_dir.mkdir(parents=True, exist_ok=True)
        self._staged: list[tuple[Path, Path]] = []

    @property
    def out_dir(self) -> Path:
        return self._out_dir

    @property
    def staged_names(self) -> list[str]:
        return [final.name for _, final in self._staged]

    def _partial_path(self, name: str) -> Path:
        return self._out_dir / f".{name}.partial"

    def stage_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
        """Write a CSV under its partial name. Returns the row count."""
        partial = self._partial_path(name)
        count = write_csv(partial, header, rows)
        self._staged.append((partial, self._out_dir / name))
        return count

    def stage_density(self, name: str, density: GridDensity) -> int:
        return self.stage_csv(name, ("cell_center", "weight"), density_rows(density))

    def commit(
        self,
        command: str,
        config: dict[str, Any],
        config_hash: str,
        seeds: Sequence[int],
        summary: Optional[dict[str, Any]] = None,
    ) -> Path:
        """Write manifest.json, then move every staged file into place."""
        manifest = {
            "command": command,
            "config": _jsonable(config),
            "config_hash": config_hash,
            "seeds": [int(s) for s in seeds],
            "outputs": self.staged_names,
            "versions": package_versions(),
            "summary": _jsonable(summary or {}),
        }
        path = self._out_dir / MANIFEST_NAME
        tmp = self._partial_path(MANIFEST_NAME)
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        for partial, final in self._staged:
            os.replace(partial, final)
        logger.info("wrote %s and %d output file(s) to %s", MANIFEST_NAME, len(self._staged), self._out_dir)
        self._staged = []
        return path

    def discard(self) -> None:
        """Remove staged files after a failure."""
        for partial, _ in self._staged:
            partial.unlink(missing_ok=True)
        self._staged = []


def read_manifest(out_dir: Path) -> dict[str, Any]:
    path = Path(out_dir) / MANIFEST_NAME
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FlemingViotError(f"no manifest in {out_dir}") from exc
