"""On-disk formats: the tensor container, LED stacks and parameter checkpoints.

Container layout::

    b"DPTC" | uint32 little-endian header length | UTF-8 JSON header | payload

The header holds ``dtype`` (one of f32, f64, c64, c128), ``shape``,
``order`` ("row-major"), ``units``, ``endianness`` ("little") and a free-form
``meta`` object. The payload is raw little-endian IEEE-754 data with complex
values stored as interleaved (re, im) pairs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"DPTC"
DTYPES = {"f32": "<f4", "f64": "<f8", "c64": "<c8", "c128": "<c16"}
_CODES = {np.dtype(v): k for k, v in DTYPES.items()}


class ContainerError(ValueError):
    """Malformed or inconsistent tensor container."""


def write_tensor(path, array, units: str = "", meta: Optional[dict] = None) -> None:
    """Write ``array`` to ``path`` in the tensor container format."""
    arr = np.asarray(array)
    if arr.dtype == np.bool_ or np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64)
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _CODES:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    header = {"dtype": _CODES[dt], "shape": list(arr.shape), "order": "row-major",
              "units": units, "endianness": "little", "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def _read_header(f, path) -> dict:
    if f.read(4) != MAGIC:
        raise ContainerError(f"{path}: not a tensor container (bad magic)")
    raw = f.read(4)
    if len(raw) != 4:
        raise ContainerError(f"{path}: truncated header length")
    (n,) = struct.unpack("<I", raw)
    try:
        header = json.loads(f.read(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: unreadable header ({e})") from None
    if header.get("dtype") not in DTYPES:
        raise ContainerError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if header.get("order") != "row-major" or header.get("endianness") != "little":
        raise ContainerError(f"{path}: only little-endian row-major payloads are supported")
    return header


def read_tensor(path, with_header: bool = False):
    """Read a container; returns the array (and header if requested)."""
    with open(path, "rb") as f:
        header = _read_header(f, path)
        dt = np.dtype(DTYPES[header["dtype"]])
        shape = tuple(header["shape"])
        expected = int(np.prod(shape)) * dt.itemsize
        payload = f.read()
    if len(payload) != expected:
        raise ContainerError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return (arr, header) if with_header else arr


@dataclass
class LedStack:
    """Per-LED images (intensities or complex fields) and their illumination wavevectors."""

    images: np.ndarray
    kill: np.ndarray  # (P, 3) rad/µm
    units: str = "a.u."
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.kill = np.asarray(self.kill, dtype=float).reshape(-1, 3)
        if self.images.ndim != 3 or len(self.images) != len(self.kill):
            raise ValueError(f"images {self.images.shape} do not match {len(self.kill)} LEDs")

    @property
    def n_leds(self) -> int:
        return len(self.kill)

    def subset(self, leds) -> "LedStack":
        return LedStack(self.images[leds], self.kill[leds], self.units, dict(self.meta))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "images.dpt", self.images, self.units, self.meta)
        write_tensor(d / "illumination.dpt", self.kill, "rad/um")

    @classmethod
    def load(cls, directory) -> "LedStack":
        d = Path(directory)
        for name in ("images.dpt", "illumination.dpt"):
            if not (d / name).exists():
                raise FileNotFoundError(f"missing {d / name}")
        images, h = read_tensor(d / "images.dpt", with_header=True)
        return cls(images, read_tensor(d / "illumination.dpt"), h["units"], h["meta"])


def save_checkpoint(directory, arrays: dict, meta: Optional[dict] = None) -> None:
    """One container per named array plus ``manifest.json`` listing names and shapes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(arrays.items()):
        fname = f"{i:03d}.dpt"
        write_tensor(d / fname, arr, meta={"name": name})
        entries.append({"name": name, "file": fname, "shape": list(np.shape(arr))})
    (d / "manifest.json").write_text(json.dumps({"tensors": entries, "meta": meta or {}}, indent=2))


def load_checkpoint(directory) -> tuple:
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, meta)``."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    arrays = {}
    for e in manifest["tensors"]:
        arr = read_tensor(d / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ContainerError(f"{e['name']}: shape {arr.shape} differs from manifest {e['shape']}")
        arrays[e["name"]] = arr
    return arrays, manifest.get("meta", {})
