"""On-disk formats. Every format is a directory with a ``meta.json`` sidecar.

MEV (multi-echo volume)
    meta.json ``{"version": 1, "slices": S, "echoes_ms": [...], "height": H,
    "width": W, "dtype": "f32le"}``; data.bin holds little-endian binary32
    values, value (s, c, h, w) at index ((s*C + c)*H + h)*W + w.
T2F (T2 map)
    meta.json ``{"slices", "height", "width", "units": "ms"}``; data.bin is
    binary32 ms in (s, h, w) order; valid.bin one byte per pixel (0/1).
LBL (labels)
    meta.json ``{"slices", "height", "width", "dtype": "u8"}``; data.bin one
    byte per pixel, 0 background, 1 LV, 2 MYO, 3 RV.
CKPT (checkpoint)
    meta.json (model config, seed, epoch, ...) plus params.bin::

        0   8 bytes  magic b"MYOT2CK\\0"
        8   u32      format version (1)
        12  u32      parameter count P
        16  u64      name-table length in bytes (L)
        24  name table, P entries:
              u16 name length n, n bytes UTF-8 name, u8 ndim,
              ndim x u32 extents, u64 payload offset, u64 value count
        24+L zero padding to a multiple of 8 -> payload start
        payload: binary64 little-endian values, each parameter row-major at
                 payload start + its offset

All integers little-endian.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .relaxometry.volume import MultiEchoVolume, T2Map

CKPT_MAGIC = b"MYOT2CK\0"


class FormatError(ValueError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_meta(root: Path, required: tuple[str, ...]) -> dict:
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"{root}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: {exc}") from exc
    missing = [k for k in required if k not in meta]
    if missing:
        raise FormatError(f"{meta_path}: missing keys {missing}")
    return meta


def _read_bin(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"missing {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise FormatError(f"{path}: expected {count} values, found {data.size}")
    return data


def write_mev(root, volume: MultiEchoVolume) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    s, c, h, w = volume.voxels.shape
    _write_json(root / "meta.json", {"version": 1, "slices": s, "echoes_ms": list(volume.echoes_ms),
                                     "height": h, "width": w, "dtype": "f32le"})
    volume.voxels.astype("<f4").tofile(root / "data.bin")
    return root


def read_mev(root) -> MultiEchoVolume:
    root = Path(root)
    meta = _read_meta(root, ("version", "slices", "echoes_ms", "height", "width", "dtype"))
    if meta["version"] != 1 or meta["dtype"] != "f32le":
        raise FormatError(f"{root}: unsupported version/dtype {meta['version']}/{meta['dtype']}")
    s, h, w = int(meta["slices"]), int(meta["height"]), int(meta["width"])
    c = len(meta["echoes_ms"])
    data = _read_bin(root / "data.bin", "<f4", s * c * h * w)
    if not np.isfinite(data).all() or (data < 0).any():
        raise FormatError(f"{root}: voxels must be finite and nonnegative")
    return MultiEchoVolume(data.reshape(s, c, h, w).astype(np.float64), tuple(meta["echoes_ms"]))


def write_t2f(root, t2: T2Map) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    vals = t2.values if t2.values.ndim == 3 else t2.values[None]
    valid = t2.valid if t2.valid.ndim == 3 else t2.valid[None]
    s, h, w = vals.shape
    _write_json(root / "meta.json", {"slices": s, "height": h, "width": w, "units": "ms"})
    vals.astype("<f4").tofile(root / "data.bin")
    valid.astype(np.uint8).tofile(root / "valid.bin")
    return root


def read_t2f(root) -> T2Map:
    root = Path(root)
    meta = _read_meta(root, ("slices", "height", "width", "units"))
    if meta["units"] != "ms":
        raise FormatError(f"{root}: units must be 'ms'")
    shape = (int(meta["slices"]), int(meta["height"]), int(meta["width"]))
    n = int(np.prod(shape))
    vals = _read_bin(root / "data.bin", "<f4", n).reshape(shape).astype(np.float64)
    valid = _read_bin(root / "valid.bin", "u1", n).reshape(shape)
    if valid.max(initial=0) > 1:
        raise FormatError(f"{root}: valid.bin must hold 0/1 bytes")
    return T2Map(vals, valid.astype(bool))


def write_lbl(root, labels: np.ndarray) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lab = np.asarray(labels)
    if lab.ndim == 2:
        lab = lab[None]
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 3:
        raise FormatError("labels must lie in 0..3")
    s, h, w = lab.shape
    _write_json(root / "meta.json", {"slices": s, "height": h, "width": w, "dtype": "u8"})
    lab.astype(np.uint8).tofile(root / "data.bin")
    return root


def read_lbl(root) -> np.ndarray:
    root = Path(root)
    meta = _read_meta(root, ("slices", "height", "width"))
    shape = (int(meta["slices"]), int(meta["height"]), int(meta["width"]))
    lab = _read_bin(root / "data.bin", "u1", int(np.prod(shape))).reshape(shape)
    if lab.max(initial=0) > 3:
        raise FormatError(f"{root}: label values must lie in 0..3")
    return lab


def write_ckpt(root, params: dict[str, np.ndarray], meta: dict) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    table = bytearray()
    payload = bytearray()
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        table += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", len(payload), arr.size)
        payload += arr.tobytes()
    head = CKPT_MAGIC + struct.pack("<IIQ", 1, len(params), len(table))
    pad = (-(len(head) + len(table))) % 8
    (root / "params.bin").write_bytes(bytes(head + table + b"\0" * pad + payload))
    _write_json(root / "meta.json", meta)
    return root


def read_ckpt(root) -> tuple[dict, dict[str, np.ndarray]]:
    root = Path(root)
    meta = _read_meta(root, ())
    path = root / "params.bin"
    if not path.is_file():
        raise FormatError(f"missing {path}")
    blob = path.read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count, table_len = struct.unpack_from("<IIQ", blob, 8)
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 24
    entries = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 1)
            pos += 1 + 4 * ndim
            offset, size = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            entries.append((name, shape, offset, size))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt name table ({exc})") from exc
    if pos != 24 + table_len:
        raise FormatError(f"{path}: name table length mismatch")
    start = pos + (-pos) % 8
    params = {}
    for name, shape, offset, size in entries:
        lo = start + offset
        if int(np.prod(shape)) != size or lo + 8 * size > len(blob):
            raise FormatError(f"{path}: parameter {name!r} is truncated or misshapen")
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=lo)
        params[name] = arr.reshape(shape).astype(np.float64)
    return meta, params


# ---------------------------------------------------------------------------
# dataset layout: <root>/<subject>/{mev,lbl,t2f}/


def write_sample(root, sample) -> Path:
    root = Path(root)
    write_mev(root / "mev", sample.volume)
    write_lbl(root / "lbl", sample.labels)
    write_t2f(root / "t2f", sample.t2_truth)
    return root


def read_sample(root):
    from .synth import Sample

    root = Path(root)
    return Sample(read_mev(root / "mev"), read_lbl(root / "lbl"), read_t2f(root / "t2f"))


def list_subjects(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root}: not a directory")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "mev").is_dir())
