"""On-disk dataset of synthetic shapes: binary records plus a JSON manifest.

Record layout (little-endian throughout):

    magic      4 bytes  b"SHR1"
    version    uint32   currently 1
    meta_len   uint32, meta UTF-8 JSON (shape id, mm per unit, config echo)
    mode_count uint32, weights float64 x mode_count
    n_samples  uint32
    points     float64 x (n_samples * 3), row-major
    distances  float64 x n_samples
    n_views    uint32
    per view:
        id_len   uint16, id UTF-8
        rotation float64 x 9 (row-major), translation float64 x 3, scale float64
        height   uint32, width uint32
        mask     uint8 x (height * width), values 0/1, row-major

The manifest (manifest.json) lists ids, file names, train/test split, view
transforms and the full generation config; masks can additionally be dumped
as binary PGM (P5) for eyeballing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .shapes import (
    AnalyticShape,
    ProbeView,
    SdfSamples,
    ShapeError,
    ShapeFamilyConfig,
    generate_shape,
    long_axis_views,
    sample_sdf,
    slice_to_mask,
)

RECORD_MAGIC = b"SHR1"
RECORD_VERSION = 1


@dataclass
class ShapeRecord:
    shape_id: str
    weights: np.ndarray
    samples: SdfSamples
    views: list[ProbeView]
    masks: list[np.ndarray]  # one (H, W) uint8 array per view
    mm_per_unit: float
    family: ShapeFamilyConfig | None = None  # generator config, when synthetic

    def analytic_shape(self) -> AnalyticShape:
        if self.family is None:
            raise ShapeError(f"record {self.shape_id} carries no generator config")
        return AnalyticShape(config=self.family, weights=self.weights)

    def mask_for(self, view_id: str) -> np.ndarray:
        for v, m in zip(self.views, self.masks):
            if v.view_id == view_id:
                return m
        raise KeyError(view_id)

    def view_for(self, view_id: str) -> ProbeView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(view_id)


def save_record(path, rec: ShapeRecord, meta: dict | None = None) -> None:
    head = {"shape_id": rec.shape_id, "mm_per_unit": rec.mm_per_unit, **(meta or {})}
    if rec.family is not None:
        head["family"] = asdict(rec.family)
    meta_blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<I", RECORD_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        w = np.asarray(rec.weights, dtype="<f8")
        fh.write(struct.pack("<I", w.size))
        fh.write(w.tobytes())
        pts = np.asarray(rec.samples.points, dtype="<f8")
        dst = np.asarray(rec.samples.distances, dtype="<f8")
        fh.write(struct.pack("<I", len(dst)))
        fh.write(pts.tobytes())
        fh.write(dst.tobytes())
        fh.write(struct.pack("<I", len(rec.views)))
        for view, mask in zip(rec.views, rec.masks):
            vid = view.view_id.encode("utf-8")
            fh.write(struct.pack("<H", len(vid)))
            fh.write(vid)
            fh.write(np.asarray(view.rotation, dtype="<f8").tobytes())
            fh.write(np.asarray(view.translation, dtype="<f8").tobytes())
            fh.write(struct.pack("<d", view.scale))
            fh.write(struct.pack("<II", view.height, view.width))
            fh.write(np.asarray(mask, dtype=np.uint8).tobytes())


def load_record(path) -> ShapeRecord:
    blob = Path(path).read_bytes()
    if blob[:4] != RECORD_MAGIC:
        raise ShapeError(f"{path}: bad record magic {blob[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != RECORD_VERSION:
        raise ShapeError(f"{path}: unsupported record version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (m,) = struct.unpack_from("<I", blob, off)
    off += 4
    weights = np.frombuffer(blob, "<f8", m, off).copy()
    off += 8 * m
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    points = np.frombuffer(blob, "<f8", 3 * n, off).reshape(n, 3).copy()
    off += 24 * n
    distances = np.frombuffer(blob, "<f8", n, off).copy()
    off += 8 * n
    (n_views,) = struct.unpack_from("<I", blob, off)
    off += 4
    views, masks = [], []
    for _ in range(n_views):
        (id_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        vid = blob[off : off + id_len].decode("utf-8")
        off += id_len
        rot = np.frombuffer(blob, "<f8", 9, off).reshape(3, 3).copy()
        off += 72
        trans = np.frombuffer(blob, "<f8", 3, off).copy()
        off += 24
        (scale,) = struct.unpack_from("<d", blob, off)
        off += 8
        h, w = struct.unpack_from("<II", blob, off)
        off += 8
        mask = np.frombuffer(blob, np.uint8, h * w, off).reshape(h, w).copy()
        off += h * w
        views.append(ProbeView(view_id=vid, rotation=rot, translation=trans, scale=scale, height=h, width=w))
        masks.append(mask)
    fam = meta.get("family")
    return ShapeRecord(
        shape_id=meta["shape_id"],
        weights=weights,
        samples=SdfSamples(points=points, distances=distances),
        views=views,
        masks=masks,
        mm_per_unit=float(meta["mm_per_unit"]),
        family=ShapeFamilyConfig(**_tupled(fam)) if fam else None,
    )


def save_pgm(path, mask: np.ndarray) -> None:
    """Binary PGM (P5) dump, foreground 255."""
    mask = np.asarray(mask)
    header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + (mask.astype(np.uint8) * 255).tobytes())


def load_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ShapeError(f"{path}: not a binary PGM")
    parts = blob.split(b"\n", 3)
    w, h = (int(t) for t in parts[1].split())
    data = np.frombuffer(parts[3], np.uint8, h * w).reshape(h, w)
    return (data > 127).astype(np.uint8)


@dataclass
class DatasetConfig:
    """Generation settings for one dataset directory."""

    count: int = 200
    samples_per_shape: int = 2000
    seed: int = 7
    test_fraction: float = 0.1
    view_angles_deg: tuple = (0.0, 60.0, 90.0)
    view_ids: tuple = ("a2c", "a3c", "a4c")
    mask_resolution: int = 64
    weight_sampler: str = "normal"  # or "uniform"
    family: ShapeFamilyConfig | None = None

    def resolved_family(self) -> ShapeFamilyConfig:
        return self.family or ShapeFamilyConfig()


@dataclass
class Dataset:
    root: Path
    config: DatasetConfig
    records: dict[str, ShapeRecord]
    split: dict[str, str]  # id -> "train" | "test"
    views: list[ProbeView]

    @property
    def train_ids(self) -> list[str]:
        return sorted(i for i, s in self.split.items() if s == "train")

    @property
    def test_ids(self) -> list[str]:
        return sorted(i for i, s in self.split.items() if s == "test")


def draw_weights(cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    fam = cfg.resolved_family()
    if cfg.weight_sampler == "normal":
        w = rng.normal(size=fam.mode_count)
    elif cfg.weight_sampler == "uniform":
        w = rng.uniform(-1.0, 1.0, size=fam.mode_count)
    else:
        raise ShapeError(f"unknown weight sampler {cfg.weight_sampler!r}")
    return np.clip(w, -fam.weight_clamp, fam.weight_clamp)


def generate_dataset(root, cfg: DatasetConfig, progress=None) -> Dataset:
    """Generate records + manifest under ``root``; deterministic in cfg.seed."""
    if cfg.count < 1:
        raise ShapeError("dataset must contain at least one shape")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    fam = cfg.resolved_family()
    views = long_axis_views(
        angles_deg=cfg.view_angles_deg,
        ids=cfg.view_ids,
        height=cfg.mask_resolution,
        width=cfg.mask_resolution,
    )
    rng = np.random.default_rng(cfg.seed)
    records: dict[str, ShapeRecord] = {}
    for i in range(cfg.count):
        shape_id = f"s{i:04d}"
        weights = draw_weights(cfg, rng)
        shape = generate_shape(weights, fam)
        samples = sample_sdf(shape, cfg.samples_per_shape, "mixed", rng)
        masks = [slice_to_mask(shape, v) for v in views]
        rec = ShapeRecord(
            shape_id=shape_id,
            weights=weights,
            samples=samples,
            views=views,
            masks=masks,
            mm_per_unit=fam.mm_per_unit,
            family=fam,
        )
        save_record(root / f"{shape_id}.rec", rec)
        records[shape_id] = rec
        if progress:
            progress(i + 1, cfg.count)
    # seed-deterministic split: shuffle ids, last fraction goes to test
    ids = sorted(records)
    perm = np.random.default_rng(cfg.seed + 1).permutation(len(ids))
    n_test = int(round(cfg.test_fraction * len(ids)))
    test_set = {ids[j] for j in perm[: n_test]}
    split = {i: ("test" if i in test_set else "train") for i in ids}
    manifest = {
        "format_version": 1,
        "config": _config_dict(cfg),
        "mm_per_unit": fam.mm_per_unit,
        "views": [
            {
                "id": v.view_id,
                "rotation": v.rotation.tolist(),
                "translation": v.translation.tolist(),
                "scale": v.scale,
                "height": v.height,
                "width": v.width,
            }
            for v in views
        ],
        "shapes": [
            {"id": i, "file": f"{i}.rec", "split": split[i], "weights": records[i].weights.tolist()}
            for i in ids
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return Dataset(root=root, config=cfg, records=records, split=split, views=views)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg_d = dict(manifest["config"])
    fam_d = cfg_d.pop("family", None)
    cfg = DatasetConfig(**{**cfg_d, "family": ShapeFamilyConfig(**_tupled(fam_d)) if fam_d else None})
    records = {}
    split = {}
    for entry in manifest["shapes"]:
        records[entry["id"]] = load_record(root / entry["file"])
        split[entry["id"]] = entry["split"]
    views = [
        ProbeView(
            view_id=v["id"],
            rotation=np.array(v["rotation"]),
            translation=np.array(v["translation"]),
            scale=v["scale"],
            height=v["height"],
            width=v["width"],
        )
        for v in manifest["views"]
    ]
    return Dataset(root=root, config=cfg, records=records, split=split, views=views)


def _config_dict(cfg: DatasetConfig) -> dict:
    d = asdict(cfg)
    if cfg.family is not None:
        d["family"] = asdict(cfg.family)
    return d


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
