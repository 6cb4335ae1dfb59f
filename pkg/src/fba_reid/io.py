"""File formats: FBT1 tensors, checkpoint directories, binary PPM images."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np
import torch

FBT_MAGIC = b"FBT1"


class FormatError(ValueError):
    pass


def encode_fbt(array) -> bytes:
    a = np.asarray(array, dtype="<f4")
    a = np.ascontiguousarray(a).reshape(a.shape)  # ascontiguousarray promotes 0-d to 1-d
    if a.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = FBT_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes()


def decode_fbt(buf: bytes) -> np.ndarray:
    if buf[:4] != FBT_MAGIC:
        raise FormatError("bad FBT1 magic")
    rank = buf[4]
    off = 5 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated FBT1 header")
    shape = struct.unpack(f"<{rank}I", buf[5:off])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise FormatError(f"payload size {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def save_fbt(path, array) -> None:
    Path(path).write_bytes(encode_fbt(array))


def load_fbt(path) -> np.ndarray:
    return decode_fbt(Path(path).read_bytes())


def save_checkpoint(directory, state: dict[str, torch.Tensor], meta: dict) -> None:
    """Write each tensor as ``<name>.fbt`` plus ``index.json`` (shapes + meta)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {"tensors": {}, "meta": meta}
    for name, t in state.items():
        fname = f"{name}.fbt"
        save_fbt(d / fname, t.detach().cpu().float().numpy())
        index["tensors"][name] = {"file": fname, "shape": list(t.shape)}
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(directory) -> tuple[dict[str, torch.Tensor], dict]:
    d = Path(directory)
    try:
        index = json.loads((d / "index.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"no checkpoint index in {d}") from exc
    state = {}
    for name, entry in index["tensors"].items():
        arr = load_fbt(d / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"tensor {name}: shape {arr.shape} != indexed {entry['shape']}")
        state[name] = torch.from_numpy(arr.copy())
    return state, index["meta"]


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is (H, W, 3) uint8."""
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise FormatError("PPM writer expects an (H, W, 3) uint8 array")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PPM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    pos += 1  # single whitespace after maxval
    data = buf[pos : pos + w * h * 3]
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()
