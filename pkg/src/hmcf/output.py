"""Run configuration and deterministic result files."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__

__all__ = ["RunConfig", "write_csv", "write_json", "to_jsonable", "resolve_output_dir", "OUTPUT_ENV"]

OUTPUT_ENV = "HMCF_OUTPUT_DIR"


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[float]]) -> Path:
    """CSV with a header row and 17 significant digits (lossless for doubles)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else format(float(v), ".17g") for v in row])
    return path


def resolve_output_dir(requested: str | None, default: str) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    return Path(env or requested or default)


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; stored as ``config.json`` beside its outputs."""

    command: str
    geometry: str | None = None
    field: str | None = None
    params: dict = dc_field(default_factory=dict)
    output_dir: str | None = None
    version: str = __version__

    def to_json(self) -> str:
        return dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    def write(self, directory: str | Path) -> Path:
        return write_json(Path(directory) / "config.json", asdict(self))
