"""Checkpoint file format.

Little-endian binary: magic 'RMAE', u32 version, u32 JSON config length,
config bytes, u32 parameter count, then per parameter: u32 name length,
name bytes (utf-8), u32 rank, u32 dims, f32 data. The config JSON is
emitted with sorted keys so identical runs produce identical bytes.
"""

import json
import struct

import numpy as np

from ..errors import BadMagicError, TruncatedFileError, VersionMismatchError

CKPT_MAGIC = b"RMAE"
CKPT_VERSION = 1


def save_checkpoint(path, config: dict, params: dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"checkpoint ends inside {what} ({len(buf)}/{n} bytes)")
    return buf


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CKPT_MAGIC:
            raise BadMagicError(f"expected {CKPT_MAGIC!r}, got {magic!r}")
        version, cfg_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CKPT_VERSION:
            raise VersionMismatchError(f"unsupported checkpoint version {version}")
        config = json.loads(_read_exact(fh, cfg_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            n_vals = int(np.prod(dims)) if rank else 1
            data = _read_exact(fh, 4 * n_vals, f"data of {name}")
            params[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    return config, params
