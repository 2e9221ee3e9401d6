"""Preprocessing (b-value snapping, repeat averaging, b0 normalization, masking),
subject splits, and the on-disk container, CSV and PGM formats."""

from __future__ import annotations

import csv
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .protocol import NOMINAL_B_VALUES

log = logging.getLogger(__name__)

MAGIC_LEN = 16
KINDS = {"volume": b"MICROFITVOL v001", "maps": b"MICROFITMAP v001", "checkpoint": b"MICROFITCKPTv001",
         "table": b"MICROFITTAB v001"}
_DTYPES = {"f4": "<f4", "u1": "|u1", "i4": "<i4"}


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# preprocessing


def snap_bvalues(measured, nominal=NOMINAL_B_VALUES) -> np.ndarray:
    """Index of the nearest nominal b for each measured estimate; ties go to the lower value."""
    measured = np.atleast_1d(np.asarray(measured, dtype=float))
    nominal = np.asarray(nominal, dtype=float)
    dist = np.abs(measured[:, None] - nominal[None, :])
    # argmin returns the first minimum, i.e. the lower nominal on a tie
    return np.argmin(dist, axis=1)


def average_repeats(volumes, assignment, n_groups: int | None = None, axis: int = 1) -> np.ndarray:
    """Average volumes sharing a nominal b-value along ``axis``; one slab per group, in group order."""
    volumes = np.asarray(volumes, dtype=float)
    assignment = np.asarray(assignment)
    if volumes.shape[axis] != assignment.size:
        raise PipelineError("assignment length does not match the number of volumes")
    n_groups = int(assignment.max()) + 1 if n_groups is None else n_groups
    slabs = []
    for g in range(n_groups):
        sel = np.nonzero(assignment == g)[0]
        if sel.size == 0:
            raise PipelineError(f"no volumes assigned to b-value group {g}")
        slabs.append(np.take(volumes, sel, axis=axis).mean(axis=axis))
    return np.stack(slabs, axis=axis)


def normalize_b0(signals) -> tuple[np.ndarray, np.ndarray]:
    """Divide rows by their b0 entry and cap at 1.

    Returns ``(normalized_rows, kept)`` where ``kept`` marks rows whose b0 was
    positive; the others are discarded.
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=float))
    kept = signals[:, 0] > 0
    # a subnormal b0 overflows to inf, which the cap then handles
    with np.errstate(over="ignore"):
        out = signals[kept] / signals[kept, 0:1]
    np.minimum(out, 1.0, out=out)
    n_drop = int((~kept).sum())
    if n_drop:
        log.info("discarded %d zero-b0 voxel(s)", n_drop)
    return out, kept


@dataclass
class SignalTable:
    """Voxels x b-values signal matrix plus where each row came from."""

    signals: np.ndarray
    b_values: tuple
    subject: np.ndarray
    voxel: np.ndarray
    spatial_shape: dict = field(default_factory=dict)
    sp: str = ""
    mask: str = ""

    def __post_init__(self):
        self.signals = np.atleast_2d(np.asarray(self.signals, dtype=float))
        self.b_values = tuple(float(b) for b in self.b_values)
        self.subject = np.asarray(self.subject, dtype=object)
        self.voxel = np.asarray(self.voxel, dtype=np.int64)
        n = self.signals.shape[0]
        if self.signals.shape[1] != len(self.b_values):
            raise PipelineError("signal columns do not match b-values")
        if self.subject.shape != (n,) or self.voxel.shape != (n,):
            raise PipelineError("provenance arrays must have one entry per row")

    def __len__(self):
        return self.signals.shape[0]

    @property
    def subjects(self) -> list:
        return list(dict.fromkeys(self.subject.tolist()))

    def select(self, rows) -> "SignalTable":
        return SignalTable(self.signals[rows], self.b_values, self.subject[rows], self.voxel[rows],
                           dict(self.spatial_shape), self.sp, self.mask)

    def for_subjects(self, ids) -> "SignalTable":
        ids = set(ids)
        return self.select(np.array([s in ids for s in self.subject], dtype=bool))

    def with_signals(self, signals) -> "SignalTable":
        return SignalTable(signals, self.b_values, self.subject.copy(), self.voxel.copy(),
                           dict(self.spatial_shape), self.sp, self.mask)

    @classmethod
    def concat(cls, tables) -> "SignalTable":
        tables = list(tables)
        if not tables:
            raise PipelineError("nothing to concatenate")
        b = tables[0].b_values
        if any(t.b_values != b for t in tables):
            raise PipelineError("tables have different b-values")
        shapes = {}
        for t in tables:
            shapes.update(t.spatial_shape)
        return cls(np.concatenate([t.signals for t in tables]), b,
                   np.concatenate([t.subject for t in tables]), np.concatenate([t.voxel for t in tables]),
                   shapes, tables[0].sp, tables[0].mask)

    def unflatten(self, values, subject: str, fill=np.nan) -> np.ndarray:
        """Scatter per-row ``values`` (N,) or (N, k) of one subject back onto its grid."""
        values = np.asarray(values, dtype=float)
        rows = self.subject == subject
        shape = tuple(self.spatial_shape[subject])
        tail = values.shape[1:]
        out = np.full((int(np.prod(shape)),) + tail, fill, dtype=float)
        out[self.voxel[rows]] = values[rows]
        return out.reshape(shape + tail)


def mask_and_flatten(volume, mask, subject: str = "subject", b_values=None, sp: str = "",
                     mask_name: str = "mask") -> SignalTable:
    """Rows are the masked voxels of ``volume`` [S x b x H x W] in raster order."""
    data = getattr(volume, "data", volume)
    b_values = getattr(volume, "b_values", b_values)
    data = np.asarray(data, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if data.ndim != 4:
        raise PipelineError("volume must be [slices x b-values x height x width]")
    spatial = (data.shape[0],) + data.shape[2:]
    if mask.shape != spatial:
        raise PipelineError(f"mask shape {mask.shape} does not match volume grid {spatial}")
    if not mask.any():
        raise PipelineError("mask is empty")
    if b_values is None:
        raise PipelineError("b-values required")
    flat_idx = np.flatnonzero(mask.ravel())
    rows = np.moveaxis(data, 1, -1).reshape(-1, data.shape[1])[flat_idx]
    return SignalTable(rows, b_values, np.full(flat_idx.size, subject, dtype=object), flat_idx,
                       {subject: spatial}, sp, mask_name)


def preprocess_volume(volume, mask_name: str = "gland", measured_b=None, nominal=NOMINAL_B_VALUES,
                      subject: str | None = None) -> SignalTable:
    """Mask, flatten, drop zero voxels, average repeats, normalize by b0 (capped at 1).

    ``measured_b`` holds per-volume b estimates when ``volume`` has repeated
    acquisitions; they are snapped to ``nominal`` and averaged.
    """
    meta = getattr(volume, "meta", {})
    subject = subject or meta.get("subject", "subject")
    data = np.asarray(getattr(volume, "data", volume), dtype=float)
    masks = getattr(volume, "masks", {})
    if mask_name not in masks:
        raise PipelineError(f"volume has no mask {mask_name!r}")
    if measured_b is not None:
        assign = snap_bvalues(measured_b, nominal)
        data = average_repeats(data, assign, n_groups=len(nominal), axis=1)
        b_values = tuple(nominal)
    else:
        b_values = tuple(getattr(volume, "b_values"))
    table = mask_and_flatten(data, masks[mask_name], subject, b_values, meta.get("sp", ""), mask_name)
    return preprocess_table(table)


def preprocess_table(table: SignalTable) -> SignalTable:
    """Drop all-zero rows and b0-normalize; idempotent."""
    nonzero = np.any(table.signals != 0, axis=1)
    t = table.select(nonzero)
    norm, kept = normalize_b0(t.signals)
    t = t.select(kept)
    t.signals = norm
    return t


@dataclass(frozen=True)
class SubjectSplit:
    train: tuple
    validation: tuple
    test: tuple

    def __post_init__(self):
        sets = [set(self.train), set(self.validation), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise PipelineError("split sets overlap")

    def to_dict(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}


def make_split(cohort, policy: str = "chronological", counts=(5, 2, 2)) -> SubjectSplit:
    """Partition subjects by acquisition order into train / validation / test."""
    if policy != "chronological":
        raise PipelineError(f"unknown split policy {policy!r}")
    ordered = sorted(cohort, key=lambda s: s.acquisition_order)
    ids = [s.subject_id for s in ordered]
    if len(ids) == 0:
        raise PipelineError("empty cohort")
    if len(ids) == 1:
        warnings.warn("single-subject cohort: everything goes to training", stacklevel=2)
        return SubjectSplit(tuple(ids), (), ())
    n_tr, n_va, n_te = counts
    if len(ids) != n_tr + n_va + n_te:
        # scale counts to the cohort size, keeping at least one validation subject
        n = len(ids)
        n_va = max(1, round(n * counts[1] / sum(counts)))
        n_te = max(0, round(n * counts[2] / sum(counts))) if n > 2 else 0
        n_tr = n - n_va - n_te
    return SubjectSplit(tuple(ids[:n_tr]), tuple(ids[n_tr:n_tr + n_va]), tuple(ids[n_tr + n_va:]))


# ---------------------------------------------------------------------------
# container format: 16-byte magic, uint64 LE header length, JSON header, payload


def write_container(path, kind: str, header: dict, arrays: dict) -> None:
    magic = KINDS[kind]
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == bool or arr.dtype == np.uint8:
            code = "u1"
        elif np.issubdtype(arr.dtype, np.integer):
            code = "i4"
        else:
            code = "f4"
        raw = np.ascontiguousarray(arr.astype(_DTYPES[code])).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    full = dict(header, arrays=entries)
    text = json.dumps(full, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for raw in blobs:
            fh.write(raw)


def read_container(path, kind: str | None = None):
    """Return ``(kind, header, arrays)``."""
    blob = Path(path).read_bytes()
    magic = blob[:MAGIC_LEN]
    found = next((k for k, m in KINDS.items() if m == magic), None)
    if found is None:
        raise PipelineError(f"{path}: not a microfit container")
    if kind is not None and found != kind:
        raise PipelineError(f"{path}: expected a {kind} container, found {found}")
    (hlen,) = struct.unpack("<Q", blob[MAGIC_LEN:MAGIC_LEN + 8])
    start = MAGIC_LEN + 8
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    payload = start + hlen
    arrays = {}
    for e in header.pop("arrays"):
        raw = blob[payload + e["offset"]: payload + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        if e["dtype"] == "u1":
            arrays[e["name"]] = arr.astype(bool)
        else:
            arrays[e["name"]] = arr.astype(np.float64 if e["dtype"] == "f4" else np.int64)
    return found, header, arrays


def save_volumes(path, volumes: dict, header: dict | None = None) -> None:
    """Write subject -> VolumeGrid into one volume container."""
    arrays, subjects = {}, []
    for sid, vol in volumes.items():
        arrays[f"{sid}/signal"] = vol.data
        for mname, m in vol.masks.items():
            arrays[f"{sid}/mask/{mname}"] = m
        subjects.append({"id": sid, "dims": list(vol.data.shape), "b_values": list(vol.b_values),
                         "masks": sorted(vol.masks), "meta": _jsonable(vol.meta)})
    write_container(path, "volume", dict(header or {}, subjects=subjects), arrays)


def load_volumes(path):
    from .phantom import VolumeGrid

    _, header, arrays = read_container(path, "volume")
    vols = {}
    for s in header["subjects"]:
        sid = s["id"]
        masks = {m: arrays[f"{sid}/mask/{m}"] for m in s["masks"]}
        vols[sid] = VolumeGrid(arrays[f"{sid}/signal"], tuple(s["b_values"]), masks, s["meta"])
    return header, vols


def save_table(path, table: SignalTable, header: dict | None = None) -> None:
    h = dict(header or {}, b_values=list(table.b_values), subject=table.subject.tolist(), sp=table.sp,
             mask=table.mask, spatial_shape={k: list(v) for k, v in table.spatial_shape.items()})
    write_container(path, "table", h, {"signals": table.signals, "voxel": table.voxel})


def load_table(path) -> tuple[dict, SignalTable]:
    _, h, arrays = read_container(path, "table")
    t = SignalTable(arrays["signals"], tuple(h["b_values"]), np.array(h["subject"], dtype=object),
                    arrays["voxel"], {k: tuple(v) for k, v in h["spatial_shape"].items()}, h["sp"], h["mask"])
    return h, t


def write_csv(path, table: SignalTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([repr(b) for b in table.b_values])
        for row in table.signals:
            w.writerow([f"{v:.9g}" for v in row])


def read_csv(path) -> tuple[tuple, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return tuple(float(b) for b in rows[0]), np.array([[float(v) for v in r] for r in rows[1:]])


def write_pgm(path, image, lo: float, hi: float) -> None:
    """8-bit binary PGM of ``image`` windowed to [lo, hi]; NaN renders black."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise PipelineError("PGM export needs a 2-D image")
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    px = np.where(np.isfinite(img), np.round(scaled * 255), 0).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise PipelineError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def tile_slices(vol3d) -> np.ndarray:
    """Lay slices of (S, H, W) side by side."""
    return np.concatenate(list(np.asarray(vol3d)), axis=1)


# display windows of the exported maps
DEFAULT_WINDOWS = {"k": (0.6, 1.4), "f_ic": (0.0, 0.4), "d_k": (0.0, 3.0), "f_ees": (0.0, 1.0),
                   "r_um": (0.0, 15.0), "d_ees": (0.5, 3.0)}


def parse_window(text: str) -> tuple[str, tuple]:
    """``"fic=0:0.4"`` -> ("f_ic", (0.0, 0.4))."""
    try:
        name, rng = text.split("=")
        lo, hi = (float(v) for v in rng.split(":"))
    except ValueError:
        raise PipelineError(f"bad window {text!r}; expected name=lo:hi") from None
    aliases = {"fic": "f_ic", "fees": "f_ees", "r": "r_um", "dees": "d_ees", "dk": "d_k"}
    if not lo < hi:
        raise PipelineError(f"window {text!r}: lo must be < hi")
    return aliases.get(name, name), (lo, hi)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_maps(path, table: SignalTable, params, param_names, header: dict | None = None, ssr=None) -> None:
    """Per-voxel parameters with the table's provenance so maps can be rebuilt on the grid."""
    params = np.atleast_2d(np.asarray(params, dtype=float))
    if params.shape[0] != len(table):
        raise PipelineError("one parameter row per table row required")
    subjects = table.subjects
    code = {s: i for i, s in enumerate(subjects)}
    h = dict(header or {}, param_names=list(param_names), subjects=subjects, b_values=list(table.b_values),
             sp=table.sp, mask=table.mask, spatial_shape={k: list(v) for k, v in table.spatial_shape.items()})
    arrays = {"params": params, "voxel": table.voxel,
              "subject_index": np.array([code[s] for s in table.subject], dtype=np.int32)}
    if ssr is not None:
        arrays["ssr"] = np.asarray(ssr, dtype=float)
    write_container(path, "maps", h, arrays)


def load_maps(path) -> tuple[dict, dict]:
    """Returns ``(header, arrays)``; ``arrays["subject"]`` holds subject ids per row."""
    _, h, arrays = read_container(path, "maps")
    arrays["subject"] = np.array([h["subjects"][i] for i in arrays["subject_index"]], dtype=object)
    return h, arrays


def map_volume(header: dict, arrays: dict, subject: str, column: int) -> np.ndarray:
    shape = tuple(header["spatial_shape"][subject])
    out = np.full(int(np.prod(shape)), np.nan)
    rows = arrays["subject"] == subject
    out[arrays["voxel"][rows]] = arrays["params"][rows, column]
    return out.reshape(shape)
