"""ATKG tensor container.

Layout (little-endian): b"ATKG", u16 version, u16 + utf-8 module name, then
entries of (u16 + utf-8 tensor name, u32 rank, u32 dims..., float32 data),
closed by the CRC32 of every preceding byte.
"""

import logging
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

MAGIC = b"ATKG"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"name too long for checkpoint: {name[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def encode_tensors(module: str, tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), _encode_name(module)]
    for name, value in tensors.items():
        array = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        if not np.all(np.isfinite(array)):
            raise CheckpointError(f"tensor {name} has non-finite entries")
        parts.append(_encode_name(name))
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"{self.source}: truncated {what} at offset {self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def name(self, what: str) -> str:
        (length,) = struct.unpack("<H", self.take(2, what))
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{self.source}: {what} is not utf-8") from e


def decode_tensors(data: bytes, source: str = "<bytes>") -> tuple[str, dict]:
    if len(data) < len(MAGIC) + 2 + 2 + 4:
        raise CheckpointError(f"{source}: too short to be a checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: CRC mismatch")
    reader = _Reader(body, source)
    reader.take(4, "magic")
    (version,) = struct.unpack("<H", reader.take(2, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    module = reader.name("module name")
    tensors = {}
    while reader.offset < len(body):
        name = reader.name("tensor name")
        (rank,) = struct.unpack("<I", reader.take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        payload = reader.take(4 * count, f"data of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return module, tensors


def save_tensors(path: str | Path, module: str, tensors: dict) -> Path:
    """Write atomically: a partial file never replaces a good one."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    temp = target.with_name(target.name + ".tmp")
    temp.write_bytes(encode_tensors(module, tensors))
    os.replace(temp, target)
    logger.debug("Saved %d tensors for %s to %s", len(tensors), module, target)
    return target


def load_tensors(path: str | Path, expected_module: str | None = None) -> dict:
    target = Path(path)
    try:
        data = target.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {target}: {e}") from e
    module, tensors = decode_tensors(data, str(target))
    if expected_module is not None and module != expected_module:
        raise CheckpointError(f"{target}: holds module {module!r}, expected {expected_module!r}")
    return tensors


def optimizer_tensors(optimizer, named_parameters: dict, prefix: str) -> dict:
    """Adam moments and step counts keyed like the parameters they belong to."""
    tensors = {}
    for name, param in named_parameters.items():
        state = optimizer.state.get(param)
        if not state:
            continue
        tensors[f"{prefix}{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        tensors[f"{prefix}{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
        tensors[f"{prefix}{name}/step"] = np.array([float(state["step"])], dtype=np.float32)
    return tensors


def restore_optimizer(optimizer, named_parameters: dict, tensors: dict, prefix: str) -> None:
    for name, param in named_parameters.items():
        key = f"{prefix}{name}"
        if f"{key}/step" not in tensors:
            optimizer.state.pop(param, None)
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(tensors[f"{key}/step"][0]), dtype=torch.float32),
            "exp_avg": torch.as_tensor(tensors[f"{key}/exp_avg"], dtype=param.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(tensors[f"{key}/exp_avg_sq"], dtype=param.dtype).clone(),
        }
