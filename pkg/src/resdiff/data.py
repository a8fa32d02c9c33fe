"""Sample records, the CRIF tensor file format, and dataset directory IO.

A record pairs a 1-channel brightfield condition with a 5-channel
fluorescence target (DNA, RNA, ER, AGP, Mito) and two binary boundary
channels (nuclei, cells); instance maps ride along as metric-time ground
truth.  Pixels live in [0, 1] on disk, are mapped to [-1, 1] for the
diffusion arithmetic and to [0, 255] for image metrics.

CRIF container: magic "CRIF", u16 version, u16 channels, u32 height,
u32 width (all little-endian), then a float32 payload in [c][y][x] order.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .boundaries import FOUR_CONN, instance_count

FLUOR_CHANNELS = ("DNA", "RNA", "ER", "AGP", "Mito")
SEG_CHANNELS = ("nuclei", "cells")
TARGET_CHANNELS = FLUOR_CHANNELS + SEG_CHANNELS
VALUE_RANGE = (0.0, 1.0)

CRIF_MAGIC = b"CRIF"
CRIF_VERSION = 1

RECORD_FILES = ("bf.crif", "if.crif", "seg.crif")
INSTANCE_FILES = ("nuclei.inst.crif", "cells.inst.crif")


@dataclass
class SampleRecord:
    record_id: str
    bf: np.ndarray  # (1, H, W) float32 in [0, 1]
    fluor: np.ndarray  # (5, H, W) float32, FLUOR_CHANNELS order
    seg: np.ndarray  # (2, H, W) float32 binary, SEG_CHANNELS order
    nuclei: np.ndarray | None = None  # (H, W) int32 instance labels
    cells: np.ndarray | None = None
    plate: str = ""
    well: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.bf.shape[1], self.bf.shape[2]

    def validate(self) -> None:
        if self.bf.shape[0] != 1 or self.fluor.shape[0] != 5 or self.seg.shape[0] != 2:
            raise ValueError(f"{self.record_id}: bad channel counts "
                             f"{self.bf.shape[0]}/{self.fluor.shape[0]}/{self.seg.shape[0]}")
        shapes = {self.bf.shape[1:], self.fluor.shape[1:], self.seg.shape[1:]}
        for inst in (self.nuclei, self.cells):
            if inst is not None:
                shapes.add(inst.shape)
        if len(shapes) != 1:
            raise ValueError(f"{self.record_id}: inconsistent spatial sizes {sorted(shapes)}")
        for name, a in (("bf", self.bf), ("if", self.fluor), ("seg", self.seg)):
            if not np.isfinite(a).all():
                raise ValueError(f"{self.record_id}: non-finite values in {name}")


def to_unit(x: np.ndarray, lo: float = VALUE_RANGE[0], hi: float = VALUE_RANGE[1]) -> np.ndarray:
    """Map declared-range pixels to the [-1, 1] diffusion range."""
    return (2.0 * (x - lo) / (hi - lo) - 1.0).astype(np.float32)


def from_unit(x: np.ndarray, lo: float = VALUE_RANGE[0], hi: float = VALUE_RANGE[1]) -> np.ndarray:
    """Map [-1, 1] samples back to the declared range, clipping overshoot."""
    return (lo + (hi - lo) * (np.clip(x, -1.0, 1.0) + 1.0) / 2.0).astype(np.float32)


def to_255(x: np.ndarray, lo: float = VALUE_RANGE[0], hi: float = VALUE_RANGE[1]) -> np.ndarray:
    """Map declared-range pixels to the [0, 255] metric range (float, not quantized)."""
    return (x - lo) * (255.0 / (hi - lo))


def target_stack(rec: SampleRecord) -> np.ndarray:
    """(7, H, W) target: fluorescence channels then boundary channels."""
    return np.concatenate([rec.fluor, rec.seg], axis=0)


def training_pairs(records: list[SampleRecord]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(to_unit(target_stack(r)), to_unit(r.bf)) for r in records]


# --- CRIF IO -----------------------------------------------------------------


def write_crif(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"CRIF arrays are (C, H, W), got shape {array.shape}")
    c, h, w = a.shape
    with open(path, "wb") as f:
        f.write(CRIF_MAGIC)
        f.write(struct.pack("<HHII", CRIF_VERSION, c, h, w))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_crif(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CRIF_MAGIC:
            raise ValueError(f"{path}: not a CRIF file (magic {magic!r})")
        version, c, h, w = struct.unpack("<HHII", f.read(12))
        if version != CRIF_VERSION:
            raise ValueError(f"{path}: unsupported CRIF version {version}")
        payload = f.read(4 * c * h * w)
    if len(payload) != 4 * c * h * w:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()


def _read_instances(path) -> np.ndarray:
    return np.rint(read_crif(path)[0]).astype(np.int32)


def export_png(path, channel: np.ndarray, lo: float = VALUE_RANGE[0], hi: float = VALUE_RANGE[1]) -> None:
    """16-bit grayscale PNG of one channel for human viewing."""
    scaled = np.clip((channel - lo) / (hi - lo), 0.0, 1.0)
    Image.fromarray(np.round(scaled * 65535.0).astype(np.uint16)).save(path)


def export_record_pngs(directory, arrays: dict[str, np.ndarray]) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, channel in arrays.items():
        export_png(os.path.join(directory, f"{name}.png"), channel)


# --- dataset directories ------------------------------------------------------


def save_record(root, split: str, rec: SampleRecord) -> None:
    rec.validate()
    d = os.path.join(root, split, rec.record_id)
    os.makedirs(d, exist_ok=True)
    write_crif(os.path.join(d, "bf.crif"), rec.bf)
    write_crif(os.path.join(d, "if.crif"), rec.fluor)
    write_crif(os.path.join(d, "seg.crif"), rec.seg)
    if rec.nuclei is not None:
        write_crif(os.path.join(d, "nuclei.inst.crif"), rec.nuclei.astype(np.float32))
    if rec.cells is not None:
        write_crif(os.path.join(d, "cells.inst.crif"), rec.cells.astype(np.float32))


def write_manifest(root, rows: list[dict]) -> None:
    cols = ("id", "split", "plate", "well", "height", "width")
    with open(os.path.join(root, "manifest.tsv"), "w") as f:
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join(str(r[c]) for c in cols) + "\n")


def read_manifest(root) -> list[dict]:
    path = os.path.join(root, "manifest.tsv")
    if not os.path.exists(path):
        raise ValueError(f"no manifest.tsv under {root}")
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        rows = [dict(zip(header, line.rstrip("\n").split("\t"))) for line in f if line.strip()]
    return rows


def save_dataset(root, splits: dict[str, list[SampleRecord]]) -> None:
    rows = []
    for split, records in splits.items():
        for rec in records:
            save_record(root, split, rec)
            h, w = rec.size
            rows.append({"id": rec.record_id, "split": split, "plate": rec.plate,
                         "well": rec.well, "height": h, "width": w})
    write_manifest(root, rows)


def _check_instance_map(record_id: str, name: str, m: np.ndarray) -> None:
    labels = np.unique(m)
    expected = np.arange(0, labels.max() + 1) if labels.max() > 0 else np.array([0])
    if not np.array_equal(np.union1d(labels, [0]), expected):
        warnings.warn(f"{record_id}/{name}: labels are not contiguous 0..K")
    for k in labels[labels > 0]:
        _, parts = ndimage.label(m == k, structure=FOUR_CONN)
        if parts > 1:
            warnings.warn(f"{record_id}/{name}: instance {k} is not 4-connected")


def load_directory(root, split: str | None = None, check_instances: bool = True) -> list[SampleRecord]:
    """Load records per the manifest; per-record problems are collected and raised together.

    Instance maps get a warning-only audit (contiguous labels, 4-connected
    instances); disable with check_instances=False when loading in bulk.
    """
    rows = read_manifest(root)
    if split is not None:
        rows = [r for r in rows if r["split"] == split]
    records, problems = [], []
    for r in rows:
        d = os.path.join(root, r["split"], r["id"])
        missing = [f for f in RECORD_FILES if not os.path.exists(os.path.join(d, f))]
        if missing:
            problems.append(f"{r['id']}: missing {', '.join(missing)}")
            continue
        try:
            rec = SampleRecord(
                record_id=r["id"],
                bf=read_crif(os.path.join(d, "bf.crif")),
                fluor=read_crif(os.path.join(d, "if.crif")),
                seg=read_crif(os.path.join(d, "seg.crif")),
                plate=r.get("plate", ""),
                well=r.get("well", ""),
            )
            for attr, fname in zip(("nuclei", "cells"), INSTANCE_FILES):
                p = os.path.join(d, fname)
                if os.path.exists(p):
                    setattr(rec, attr, _read_instances(p))
            rec.validate()
        except ValueError as e:
            problems.append(str(e))
            continue
        if check_instances:
            for attr in ("nuclei", "cells"):
                m = getattr(rec, attr)
                if m is not None:
                    _check_instance_map(rec.record_id, attr, m)
        records.append(rec)
    if problems:
        raise ValueError("bad records: " + "; ".join(problems))
    return records


def exclusion_filter(
    records: list[SampleRecord], threshold: float | None = None
) -> tuple[list[SampleRecord], list[str]]:
    """Drop records whose fluorescence channels are all essentially black.

    The default threshold keeps a record if any of the 5 channels has a pixel
    at or above 1/255 of the declared range.
    """
    lo, hi = VALUE_RANGE
    if threshold is None:
        threshold = lo + (hi - lo) / 255.0
    kept, excluded = [], []
    for rec in records:
        if rec.fluor.max() < threshold:
            excluded.append(rec.record_id)
        else:
            kept.append(rec)
    return kept, excluded


def load_predictions(root) -> dict[str, np.ndarray]:
    """Read sampled 7-channel tensors written by the sample command."""
    if not os.path.isdir(root):
        raise ValueError(f"prediction directory {root} does not exist")
    preds = {}
    for rid in sorted(os.listdir(root)):
        p = os.path.join(root, rid, "pred.crif")
        if os.path.isfile(p):
            preds[rid] = read_crif(p)
    return preds
