"""MVV1 container format and dataset manifest I/O.

An MVV1 file is::

    8 bytes   magic  b"MVVOL1\\0\\0"
    4 bytes   little-endian unsigned header length
    N bytes   UTF-8 JSON header
    ...       raw little-endian voxel/parameter data

Volume headers carry ``{"dims": [nx, ny, nz], "dtype": "f32"|"f64",
"order": "x-fastest"}``.  Kernel files add ``"kind": "psf"`` and
``"center": [cx, cy, cz]``; network checkpoints use ``"kind": "netparams"``
with a layer table instead of dims.  Voxel data is serialized x-fastest
(x varies quickest in the stream).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .volume import Psf, Volume, VolumeError

MAGIC = b"MVVOL1\x00\x00"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    """Raised for malformed MVV1 files or manifests."""


def _write_container(path, header: dict, payload: bytes):
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read_container(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    return header, payload


def _dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return "f32"
    if dtype == np.float64:
        return "f64"
    raise FormatError(f"unsupported dtype {dtype}")


# ---------------------------------------------------------------------------
# volumes and kernels
# ---------------------------------------------------------------------------

def write_volume(path, vol: Volume, dtype=None, extra: dict | None = None):
    """Write a volume; ``dtype`` is "f32", "f64" or a numpy dtype (default:
    the in-memory dtype)."""
    if dtype is None:
        name = _dtype_name(vol.data.dtype)
    elif isinstance(dtype, str) and dtype in _DTYPES:
        name = dtype
    else:
        name = _dtype_name(dtype)
    header = {
        "dims": list(vol.dims),
        "dtype": name,
        "order": "x-fastest",
    }
    if extra:
        header.update(extra)
    data = np.asarray(vol.data, dtype=_DTYPES[header["dtype"]])
    _write_container(path, header, data.tobytes(order="F"))


def read_volume(path) -> Volume:
    header, payload = _read_container(path)
    if header.get("kind", "volume") not in ("volume", "psf"):
        raise FormatError(f"{path}: expected a volume, got kind={header.get('kind')!r}")
    dims = tuple(header["dims"])
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise FormatError(f"{path}: unknown dtype {header.get('dtype')!r}")
    if header.get("order") != "x-fastest":
        raise FormatError(f"{path}: unsupported order {header.get('order')!r}")
    n = int(np.prod(dims))
    expect = n * dtype.itemsize
    if len(payload) != expect:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    return Volume(np.ascontiguousarray(arr))


def write_psf(path, psf: Psf, dtype="f64"):
    extra = {"kind": "psf", "center": list(psf.center)}
    if psf.meta:
        extra["meta"] = psf.meta
    write_volume(path, Volume(psf.data), dtype=dtype, extra=extra)


def read_psf(path) -> Psf:
    header, _ = _read_container(path)
    if header.get("kind") != "psf":
        raise FormatError(f"{path}: not a psf file")
    vol = read_volume(path)
    psf = Psf(vol.data.astype(np.float64), meta=dict(header.get("meta", {})))
    if list(psf.center) != list(header["center"]):
        raise FormatError(f"{path}: center {header['center']} does not match dims")
    return psf


# ---------------------------------------------------------------------------
# network parameter checkpoints
# ---------------------------------------------------------------------------

def write_netparams(path, entries: list[tuple[str, np.ndarray]],
                    extra: dict | None = None):
    """Write named parameter arrays as one f64 blob with a layer table.

    ``entries`` order is preserved; ``extra`` lands in the header (seed,
    epoch counters, rng state and similar resume metadata).
    """
    table = []
    chunks = []
    offset = 0
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f8")
        table.append({
            "id": name,
            "shape": list(arr.shape),
            "offset": offset,
            "size": int(arr.size),
        })
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    header = {"kind": "netparams", "dtype": "f64", "layers": table}
    if extra:
        header.update(extra)
    _write_container(path, header, b"".join(chunks))


def read_netparams(path) -> tuple[list[tuple[str, np.ndarray]], dict]:
    """Return ``(entries, header)``; entries keep the stored order."""
    header, payload = _read_container(path)
    if header.get("kind") != "netparams":
        raise FormatError(f"{path}: not a netparams file")
    blob = np.frombuffer(payload, dtype="<f8")
    entries = []
    for row in header["layers"]:
        arr = blob[row["offset"]:row["offset"] + row["size"]]
        if arr.size != row["size"]:
            raise FormatError(f"{path}: truncated blob at layer {row['id']!r}")
        entries.append((row["id"], arr.reshape(row["shape"]).copy()))
    return entries, header


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

def write_manifest(path, manifest: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("samples", "split", "configs"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest missing {key!r}")
    ids = {s["id"] for s in manifest["samples"]}
    for part, listed in manifest["split"].items():
        unknown = set(listed) - ids
        if unknown:
            raise FormatError(f"{path}: split {part!r} references unknown ids {sorted(unknown)}")
    manifest["_dir"] = str(path.parent)
    return manifest


def manifest_sample(manifest: dict, sample_id: str) -> dict:
    for s in manifest["samples"]:
        if s["id"] == sample_id:
            return s
    raise KeyError(f"sample {sample_id!r} not in manifest")


def resolve(manifest: dict, relpath: str) -> Path:
    return Path(manifest["_dir"]) / relpath
