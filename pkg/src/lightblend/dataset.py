"""On-disk training datasets: manifest records, loading, validation.

A dataset directory holds ``manifest.tsv`` plus, per tuple, five PNGs
(input composite, mask, target background, target image, panorama
thumbnail) and the binary panorama of the target lighting. Synthesized
datasets share the layout and fill the ``provenance`` column.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .envmap import EnvMap, load_envmap

MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = [
    "id",
    "subject_id",
    "subject",
    "env_a",
    "env_b",
    "rot_a",
    "rot_b",
    "fov_deg",
    "yaw",
    "pitch",
    "size",
    "seed",
    "x_a",
    "mask",
    "y_b",
    "x_b",
    "z_thumb",
    "z_env",
    "provenance",
]


@dataclass
class TupleRecord:
    """One manifest row; file names are relative to the dataset root."""

    id: str
    subject_id: int
    subject: dict
    env_a: int
    env_b: int
    rot_a: float
    rot_b: float
    fov_deg: float
    yaw: float
    pitch: float
    size: int
    seed: int
    x_a: str
    mask: str
    y_b: str
    x_b: str
    z_thumb: str
    z_env: str
    provenance: str = ""

    def to_row(self) -> list[str]:
        vals = []
        for col in MANIFEST_COLUMNS:
            v = getattr(self, col)
            if col == "subject":
                v = json.dumps(v, separators=(",", ":"), sort_keys=True)
            elif isinstance(v, float):
                v = repr(v)
            vals.append(str(v))
        return vals

    @classmethod
    def from_row(cls, row: list[str]) -> "TupleRecord":
        kv = dict(zip(MANIFEST_COLUMNS, row))
        return cls(
            id=kv["id"],
            subject_id=int(kv["subject_id"]),
            subject=json.loads(kv["subject"]),
            env_a=int(kv["env_a"]),
            env_b=int(kv["env_b"]),
            rot_a=float(kv["rot_a"]),
            rot_b=float(kv["rot_b"]),
            fov_deg=float(kv["fov_deg"]),
            yaw=float(kv["yaw"]),
            pitch=float(kv["pitch"]),
            size=int(kv["size"]),
            seed=int(kv["seed"]),
            x_a=kv["x_a"],
            mask=kv["mask"],
            y_b=kv["y_b"],
            x_b=kv["x_b"],
            z_thumb=kv["z_thumb"],
            z_env=kv["z_env"],
            provenance=kv.get("provenance", ""),
        )


def write_manifest(root: str | Path, records: list[TupleRecord]) -> Path:
    path = Path(root) / MANIFEST_NAME
    lines = ["\t".join(MANIFEST_COLUMNS)]
    lines.extend("\t".join(r.to_row()) for r in records)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(root: str | Path) -> list[TupleRecord]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    if header != MANIFEST_COLUMNS:
        raise ValueError(f"unexpected manifest columns in {path}: {header}")
    return [TupleRecord.from_row(line.split("\t")) for line in lines[1:] if line]


def manifest_hash(root: str | Path) -> str:
    data = (Path(root) / MANIFEST_NAME).read_bytes()
    return hashlib.sha256(data).hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class LoadedTuple:
    """All per-tuple images as float32 arrays in [0, 1]."""

    record: TupleRecord
    x_a: np.ndarray
    mask: np.ndarray
    y_b: np.ndarray
    x_b: np.ndarray
    z_thumb: np.ndarray


def load_tuple(root: str | Path, record: TupleRecord) -> LoadedTuple:
    root = Path(root)
    return LoadedTuple(
        record=record,
        x_a=imgio.load_image(root / record.x_a),
        mask=imgio.load_mask(root / record.mask),
        y_b=imgio.load_image(root / record.y_b),
        x_b=imgio.load_image(root / record.x_b),
        z_thumb=imgio.load_image(root / record.z_thumb),
    )


def load_tuple_env(root: str | Path, record: TupleRecord) -> EnvMap:
    return load_envmap(Path(root) / record.z_env)


@dataclass
class DatasetArrays:
    """Whole dataset stacked for in-memory training, float32 in [0, 1]."""

    x_a: np.ndarray
    mask: np.ndarray
    y_b: np.ndarray
    x_b: np.ndarray
    z_thumb: np.ndarray
    records: list[TupleRecord] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return self.x_a.shape[0]


def load_arrays(root: str | Path) -> DatasetArrays:
    records = read_manifest(root)
    loaded = [load_tuple(root, r) for r in records]
    return DatasetArrays(
        x_a=np.stack([t.x_a for t in loaded]),
        mask=np.stack([t.mask for t in loaded]),
        y_b=np.stack([t.y_b for t in loaded]),
        x_b=np.stack([t.x_b for t in loaded]),
        z_thumb=np.stack([t.z_thumb for t in loaded]),
        records=records,
    )


def validate_dataset(root: str | Path, max_tuples: int | None = None) -> list[str]:
    """Check every persisted tuple against the dataset invariants.

    Returns a list of problem descriptions; an empty list means the
    dataset is valid. Checked per tuple: all files exist and load, images
    are in [0, 1] at the declared size, the mask is a single channel in
    [0, 1], the target equals the target background wherever the mask is
    zero, and the stored panorama is a valid envmap.
    """
    root = Path(root)
    problems: list[str] = []
    records = read_manifest(root)
    if max_tuples is not None:
        records = records[:max_tuples]
    for rec in records:
        try:
            t = load_tuple(root, rec)
        except Exception as exc:  # noqa: BLE001 - report, keep scanning
            problems.append(f"{rec.id}: failed to load ({exc})")
            continue
        s = rec.size
        for name, img, chans in (
            ("x_a", t.x_a, 3),
            ("y_b", t.y_b, 3),
            ("x_b", t.x_b, 3),
            ("z_thumb", t.z_thumb, 3),
        ):
            if img.shape != (s, s, chans):
                problems.append(f"{rec.id}: {name} has shape {img.shape}")
        if t.mask.shape != (s, s):
            problems.append(f"{rec.id}: mask has shape {t.mask.shape}")
        if t.mask.min() < 0.0 or t.mask.max() > 1.0:
            problems.append(f"{rec.id}: mask outside [0, 1]")
        bg_region = t.mask == 0.0
        if not np.array_equal(t.x_b[bg_region], t.y_b[bg_region]):
            problems.append(f"{rec.id}: target differs from background where mask is 0")
        try:
            load_tuple_env(root, rec)
        except Exception as exc:  # noqa: BLE001
            problems.append(f"{rec.id}: bad envmap ({exc})")
    return problems
