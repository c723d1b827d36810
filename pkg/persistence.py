"""
CellBench - Persistence Module
Atomic writes of JSON documents and delimited tables, provenance blocks
"""

import hashlib
import json
import logging
import math
import platform
import shutil
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Union

import numpy as np
import pandas as pd
import scipy
import sklearn
import yaml

import streams

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

PathLike = Union[str, Path]


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays unwrapped, NaN and inf become null"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        return _clean(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Enum):
        return value.value
    return value


def dumps(document: Any) -> str:
    """Canonical JSON text: sorted keys, fixed indent, trailing newline"""
    return json.dumps(_clean(document), sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write(path: PathLike, write: Callable[[Path], None]):
    """Write to a temporary sibling then move it into place"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + '.tmp')
    try:
        write(temp_file)
        shutil.move(str(temp_file), str(path))
    except Exception:
        if temp_file.exists():
            temp_file.unlink()
        raise
    logger.debug(f"Wrote {path}")


def write_json(document: Any, path: PathLike):
    text = dumps(document)
    atomic_write(path, lambda p: p.write_text(text))


def read_json(path: PathLike) -> Any:
    with open(path, 'r') as f:
        return json.load(f)


def _separator(path: Path) -> str:
    return ',' if path.suffix.lower() == '.csv' else '\t'


def write_table(frame: pd.DataFrame, path: PathLike):
    """Delimited table; comma for .csv, tab otherwise"""
    path = Path(path)
    atomic_write(path, lambda p: frame.to_csv(p, sep=_separator(path), index=False))


def read_table(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    return pd.read_csv(path, sep=_separator(path))


def sidecar_path(path: PathLike) -> Path:
    """Metadata sidecar that sits next to a data file"""
    path = Path(path)
    return path.with_name(path.name + '.json')


def write_sidecar(path: PathLike, metadata: Dict[str, Any]):
    write_json(metadata, sidecar_path(path))


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(dumps(config).encode()).hexdigest()


def software_versions() -> Dict[str, str]:
    return {
        'cellbench': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pandas': pd.__version__,
        'scikit-learn': sklearn.__version__,
        'pyyaml': yaml.__version__,
    }


def provenance(config: Dict[str, Any], inputs: Optional[Dict[str, str]] = None,
               include_versions: bool = True) -> Dict[str, Any]:
    """Provenance block: config, its hash, input hashes, RNG stream, software"""
    block = {
        'config': config,
        'config_hash': config_hash(config),
        'inputs': dict(inputs or {}),
        'rng': streams.describe(),
    }
    if include_versions:
        block['software'] = software_versions()
    return block


class OutputDirectory:
    """Resolves output names under one directory and writes them atomically"""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        logger.info(f"Writing outputs to {self.root}")

    def path(self, name: PathLike) -> Path:
        name = Path(name)
        return name if name.is_absolute() else self.root / name

    def write_json(self, name: PathLike, document: Any) -> Path:
        target = self.path(name)
        write_json(document, target)
        return target

    def write_table(self, name: PathLike, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        write_table(frame, target)
        return target

    def write_sidecar(self, name: PathLike, metadata: Dict[str, Any]) -> Path:
        target = self.path(name)
        write_sidecar(target, metadata)
        return sidecar_path(target)
