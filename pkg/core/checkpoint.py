"""Checkpoint files: a numpy .npz archive plus a JSON `__meta__` entry."""

import io
import json
import logging
import os
import zipfile
from typing import Any, Dict, Tuple

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_KEY = "__meta__"


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_checkpoint(path: str, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> str:
    """Write arrays and metadata; readers never observe a partial file."""
    if META_KEY in arrays:
        raise CheckpointError(f"张量名 {META_KEY} 为保留字")
    meta = {"format_version": FORMAT_VERSION, **meta}
    buffer = io.BytesIO()
    encoded = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(buffer, **{META_KEY: encoded}, **arrays)
    _atomic_write(path, buffer.getvalue())
    logger.debug("检查点已写入 %s (%d 个张量)", path, len(arrays))
    return path


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not os.path.exists(path):
        raise CheckpointError(f"检查点不存在: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"检查点损坏: {e}") from e
    if META_KEY not in arrays:
        raise CheckpointError("检查点缺少元数据")
    try:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"检查点元数据损坏: {e}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"不支持的检查点版本: {meta.get('format_version')}")
    return arrays, meta
