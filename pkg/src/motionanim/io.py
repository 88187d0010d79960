"""On-disk formats: raw tensor container, named-tensor bundles, frame directories."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image

TENSOR_MAGIC = b"MATN"
BUNDLE_MAGIC = b"MABN"
BUNDLE_VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def _canonical_dtype(arr: np.ndarray) -> np.dtype:
    kind, size = arr.dtype.kind, arr.dtype.itemsize
    if kind == "f":
        return np.dtype("<f8") if size == 8 else np.dtype("<f4")
    if kind == "i":
        return np.dtype("<i8") if size == 8 else np.dtype("<i4")
    if kind in "ub" and size == 1:
        return np.dtype("u1")
    raise FormatError(f"unsupported dtype {arr.dtype}")


def _as_numpy(x: Any) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def save_tensor(path: str | Path, array: Any) -> None:
    """Write one array as: magic, dtype code (u1), ndim (u1), shape (u8 each), row-major body."""
    arr = _as_numpy(array)
    dt = _canonical_dtype(arr)
    arr = np.asarray(arr, dtype=dt, order="C")
    header = TENSOR_MAGIC + struct.pack("<BB", _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 6)
    offset = 6 + 8 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - offset != count * dt.itemsize:
        raise FormatError(f"{path}: body size does not match shape {shape}")
    return np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape).copy()


def save_bundle(path: str | Path, tensors: Mapping[str, Any], meta: Mapping[str, Any]) -> None:
    """Single-file container of named tensors plus a JSON metadata block.

    Layout: magic, u4 version, u8 header length, UTF-8 JSON header, then the
    tensor bodies back to back in the order listed in the header.
    """
    index = []
    bodies = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_numpy(tensors[name])
        dt = _canonical_dtype(arr)
        arr = np.asarray(arr, dtype=dt, order="C")
        body = arr.tobytes(order="C")
        index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(body)})
        bodies.append(body)
        offset += len(body)
    header = json.dumps({"version": BUNDLE_VERSION, "meta": meta, "tensors": index},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC + struct.pack("<IQ", BUNDLE_VERSION, len(header)))
        fh.write(header)
        for body in bodies:
            fh.write(body)


def load_bundle(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:4] != BUNDLE_MAGIC:
        raise FormatError(f"{path}: not a tensor bundle")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != BUNDLE_VERSION:
        raise FormatError(f"{path}: bundle version {version}, expected {BUNDLE_VERSION}")
    start = 16
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        lo = base + entry["offset"]
        arr = np.frombuffer(raw[lo:lo + entry["nbytes"]], dtype=dt)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]


def write_frames(directory: str | Path, frames: np.ndarray, fps: float = 4.0) -> Path:
    """Write a T x 3 x H x W array in [0,1] as frame_0000.png ... plus meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = _as_numpy(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise FormatError(f"expected T x 3 x H x W frames, got {frames.shape}")
    pixels = np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    for i, frame in enumerate(pixels):
        Image.fromarray(frame.transpose(1, 2, 0), mode="RGB").save(directory / f"frame_{i:04d}.png")
    t, _, h, w = frames.shape
    meta = {"fps": fps, "T": t, "H": h, "W": w}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return directory


def read_frames(directory: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no meta.json in {directory}")
    meta = json.loads(meta_path.read_text())
    frames = []
    for i in range(meta["T"]):
        with Image.open(directory / f"frame_{i:04d}.png") as img:
            frames.append(np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0)
    out = np.stack(frames)
    if out.shape[2:] != (meta["H"], meta["W"]):
        raise FormatError(f"{directory}: frames are {out.shape[2:]}, meta says {(meta['H'], meta['W'])}")
    return out, meta
