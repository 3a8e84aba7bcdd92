"""Binary container for checkpoints and prepared datasets.

Layout (all integers little-endian):

    magic              9 bytes, b"FEEDRANK1"
    config_len         uint32
    config             JSON, UTF-8
    repeated records:
        name_len       uint32
        name           UTF-8
        dtype tag      uint8 (0 = float32, 1 = float64, 2 = int64)
        rank           uint32
        extents        uint32 * rank
        data           raw row-major little-endian values

Model checkpoints store every parameter as float32; the dataset cache uses
the integer/double tags for event lists and side-info weights. Writes are
deterministic, so save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"FEEDRANK1"

_TAG_BY_DTYPE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPE_BY_TAG = {tag: dt for dt, tag in _TAG_BY_DTYPE.items()}


class FormatError(ValueError):
    """The file is not a valid container (bad magic, truncation, bad record)."""


def write_container(path: str, config: dict, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        blob = json.dumps(config, separators=(",", ":")).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _TAG_BY_DTYPE:
                raise FormatError(f"record {name!r}: unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BI", _TAG_BY_DTYPE[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(dt, copy=False).tobytes())


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated container while reading {what}")
    return buf


def read_container(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}; not a container file")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            config = json.loads(_read_exact(fh, config_len, "config").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt config record") from exc
        arrays: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated container while reading record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            tag, rank = struct.unpack("<BI", _read_exact(fh, 5, f"record {name!r} header"))
            if tag not in _DTYPE_BY_TAG:
                raise FormatError(f"record {name!r}: unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"record {name!r} extents"))
            dt = _DTYPE_BY_TAG[tag]
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, count * dt.itemsize, f"record {name!r} data")
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return config, arrays


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, model, variant: str, meta: dict | None = None) -> None:
    """Write a model's parameters (as float32) plus its build config."""
    config = {
        "kind": "checkpoint",
        "variant": variant,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "model": model.config.to_dict(),
        "meta": meta or {},
    }
    arrays = {name: arr.astype("<f4") for name, arr in model.params.state_arrays().items()}
    write_container(path, config, arrays)


def load_checkpoint(path: str, dtype=np.float32):
    """Rebuild the model a checkpoint describes and load its parameters.

    Returns (model, variant, meta).
    """
    from .models import ModelConfig, build_model

    config, arrays = read_container(path)
    if config.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint file")
    model = build_model(config["variant"], config["num_users"], config["num_items"],
                        ModelConfig.from_dict(config["model"]), seed=0, dtype=dtype)
    model.params.load_arrays(arrays)
    return model, config["variant"], config.get("meta", {})
