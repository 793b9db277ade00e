"""Binary scan/label files, PLY export, metrics logs, datasets and checkpoints on disk."""
from __future__ import annotations

import json
import os
import tempfile
import time
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .adapter import MAGIC as ADAPTER_MAGIC
from .nn import MLP, pack_layers, unpack_layers
from .policy import MAGIC as Q_MAGIC
from .rangeview import PointCloud

SCAN_RECORD = 16
LABEL_RECORD = 4
BACKBONE_MAGIC = b"LGB1"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------- atomic writes

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------- scans and labels

def scan_to_bytes(cloud: PointCloud) -> bytes:
    rec = np.empty((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.intensity
    return rec.tobytes()


def scan_from_bytes(data: bytes, frame_id=None) -> PointCloud:
    if len(data) % SCAN_RECORD:
        off = len(data) - len(data) % SCAN_RECORD
        raise DataError(f"scan size {len(data)} is not a multiple of {SCAN_RECORD}; "
                        f"truncated record at byte offset {off}")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    bad = np.flatnonzero(~np.isfinite(rec).all(axis=1))
    if bad.size:
        shown = ", ".join(str(i) for i in bad[:10])
        more = f" (+{bad.size - 10} more)" if bad.size > 10 else ""
        raise DataError(f"non-finite values in scan records {shown}{more}")
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64), frame_id=frame_id)


def read_scan_bin(path, frame_id=None) -> PointCloud:
    """Read consecutive little-endian float32 (x, y, z, intensity) records."""
    return scan_from_bytes(Path(path).read_bytes(), frame_id)


def write_scan_bin(cloud: PointCloud, path) -> None:
    atomic_write_bytes(path, scan_to_bytes(cloud))


def read_labels(path, n_points: int) -> np.ndarray:
    """Semantic labels from 32-bit records; the high 16 bits (instance ids) are dropped."""
    data = Path(path).read_bytes()
    if len(data) % LABEL_RECORD:
        raise DataError(f"label file size {len(data)} is not a multiple of {LABEL_RECORD}")
    n = len(data) // LABEL_RECORD
    if n != n_points:
        raise DataError(f"label count mismatch: expected {n_points}, got {n}")
    raw = np.frombuffer(data, dtype="<u4")
    return (raw & 0xFFFF).astype(np.int64)


def write_labels(labels, path, instance=None) -> None:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
        raise ValueError("labels must fit in 16 bits")
    raw = lab.astype(np.uint32)
    if instance is not None:
        raw |= np.asarray(instance, dtype=np.uint32) << 16
    atomic_write_bytes(path, raw.astype("<u4").tobytes())


# ---------------------------------------------------------------- PLY

def _ply_fmt(arr: np.ndarray) -> tuple[str, str]:
    if np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.bool_):
        return "int", "%d"
    return "float", "%.9g"


def write_ply(cloud: PointCloud, scalars: Mapping[str, np.ndarray], path) -> None:
    """ASCII PLY with x, y, z followed by one property per named scalar array."""
    n = len(cloud)
    cols = []
    for name, arr in scalars.items():
        arr = np.asarray(arr)
        if arr.shape != (n,):
            raise ValueError(f"scalar '{name}' has shape {arr.shape}, expected ({n},)")
        if not name.isidentifier():
            raise ValueError(f"bad property name {name!r}")
        cols.append((name, arr))
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    fmts = ["%.9g"] * 3
    for name, arr in cols:
        kind, fmt = _ply_fmt(arr)
        header.append(f"property {kind} {name}")
        fmts.append(fmt)
    header.append("end_header")
    lines = header
    if n:
        table = [cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]] + [a for _, a in cols]
        row_fmt = " ".join(fmts)
        lines = lines + [row_fmt % tuple(v) for v in zip(*table)]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------- metrics

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


class MetricsWriter:
    """Line-delimited JSON records; every record carries a wall-clock ``ts`` field.

    The file is rewritten atomically after each record so readers never see a partial line.
    """

    def __init__(self, path, run_id: str, config_hash: str):
        self.path = Path(path)
        self.run_id = run_id
        self.config_hash = config_hash
        self.lines: list[str] = []

    def write(self, kind: str, **payload) -> dict:
        rec = {"kind": kind, "run_id": self.run_id, "config_hash": self.config_hash, **_jsonable(payload),
               "ts": time.time()}
        self.lines.append(json.dumps(rec, sort_keys=True))
        atomic_write_text(self.path, "\n".join(self.lines) + "\n")
        return rec


def read_metrics(path, drop_ts: bool = True) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            if drop_ts:
                rec.pop("ts", None)
            out.append(rec)
    return out


# ---------------------------------------------------------------- datasets

def _frame_name(fid) -> str:
    return f"{int(fid):06d}" if isinstance(fid, (int, np.integer)) else str(fid)


def save_dataset(clouds: Sequence[PointCloud], root, meta: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for c in clouds:
        name = _frame_name(c.frame_id if c.frame_id is not None else len(frames))
        write_scan_bin(c, root / f"{name}.bin")
        if c.labels is not None:
            write_labels(c.labels, root / f"{name}.label")
        frames.append(name)
    manifest = {"frames": frames, "corrupted": any(c.corrupted for c in clouds), **(meta or {})}
    atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest.json in {root}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"bad manifest {path}: {exc}") from exc


def load_dataset(root) -> tuple[list[PointCloud], dict]:
    root = Path(root)
    manifest = load_manifest(root)
    clouds = []
    for name in manifest["frames"]:
        c = read_scan_bin(root / f"{name}.bin", frame_id=int(name) if name.isdigit() else name)
        lab = root / f"{name}.label"
        if lab.is_file():
            c.labels = read_labels(lab, len(c))
        c.corrupted = bool(manifest.get("corrupted", False))
        clouds.append(c)
    return clouds, manifest


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state, root, manifest: dict) -> Path:
    """Write adapter.bin, backbone.bin, q.bin and manifest.json into ``root``."""
    root = Path(root)
    atomic_write_bytes(root / "adapter.bin", state.adapter.to_bytes())
    atomic_write_bytes(root / "backbone.bin", pack_layers(state.backbone.layers, BACKBONE_MAGIC))
    atomic_write_bytes(root / "q.bin", pack_layers(state.q.net.layers, Q_MAGIC))
    atomic_write_text(root / "manifest.json", json.dumps(_jsonable(manifest), indent=1, sort_keys=True) + "\n")
    return root


def _copy_into(dst_layers, src_layers, what: str) -> None:
    if len(dst_layers) != len(src_layers):
        raise DataError(f"{what}: expected {len(dst_layers)} layers, found {len(src_layers)}")
    for d, s in zip(dst_layers, src_layers):
        if d.W.shape != s.W.shape:
            raise DataError(f"{what}: layer shape {s.W.shape} does not match config {d.W.shape}")
        d.W[...] = s.W
        d.b[...] = s.b


def load_checkpoint(root, state) -> dict:
    """Fill a freshly initialised ``state`` (built from the same config) with saved weights."""
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        _copy_into(state.adapter.layers, unpack_layers((root / "adapter.bin").read_bytes(), ADAPTER_MAGIC), "adapter")
        _copy_into(state.backbone.layers, unpack_layers((root / "backbone.bin").read_bytes(), BACKBONE_MAGIC),
                   "backbone")
        _copy_into(state.q.net.layers, unpack_layers((root / "q.bin").read_bytes(), Q_MAGIC), "q")
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load checkpoint {root}: {exc}") from exc
    state.q.target = state.q.net.copy()
    return manifest


def load_backbone(path) -> MLP:
    return MLP(unpack_layers(Path(path).read_bytes(), BACKBONE_MAGIC))

