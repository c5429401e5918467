"""Evaluation metrics: SDF-value errors, point-cloud distances, mask overlap.

Chamfer and Hausdorff run on exact KD-tree nearest neighbors; Dice/IoU work
on binary masks with the both-empty pair defined as perfect agreement.
Physical units use the dataset's mm-per-unit scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .render import ProbeParams, hard_dice_iou, render_hard_mask


class MetricError(ValueError):
    pass


def surface_sdf_errors(model, z, points: np.ndarray, gt_distances: np.ndarray, mm_scale: float = 1.0) -> tuple[float, float]:
    """(MAE, RMSE) of decoder values against clamped ground-truth distances."""
    if len(points) == 0:
        raise MetricError("need at least one sample")
    f = model.evaluate_np(z, points)
    target = np.clip(gt_distances, -model.cfg.clamp, model.cfg.clamp)
    err = f - target
    mae = float(np.mean(np.abs(err))) * mm_scale
    rmse = float(np.sqrt(np.mean(err * err))) * mm_scale
    return mae, rmse


def chamfer(a: np.ndarray, b: np.ndarray, squared: bool = False) -> float:
    """Symmetric mean nearest-neighbor distance between point clouds."""
    if len(a) == 0 or len(b) == 0:
        raise MetricError("point clouds must be non-empty")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    if squared:
        return float(0.5 * ((d_ab**2).mean() + (d_ba**2).mean()))
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Max of the two directed max-min distances."""
    if len(a) == 0 or len(b) == 0:
        raise MetricError("point clouds must be non-empty")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(max(d_ab.max(), d_ba.max()))


def dice_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> tuple[float, float]:
    """(Dice, IoU) of two equal-shape binary masks; both-empty -> (1, 1)."""
    a, b = np.asarray(mask_a), np.asarray(mask_b)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return hard_dice_iou(a, b)


def projected_dice(model, z, probe: ProbeParams, gt_mask: np.ndarray, alpha_eval: float = 1e4) -> tuple[float, float]:
    """Hard-rendered full-resolution mask overlap against a reference mask."""
    h, w = gt_mask.shape
    pred = render_hard_mask(model, z, probe, h, w, alpha_eval)
    return dice_iou(pred, gt_mask)


@dataclass
class MetricReport:
    """Table row in published column order: MAE, RMSE, HD, CD, Dice, IoU."""

    mae_mm: float
    rmse_mm: float
    hd_mm: float
    cd_mm: float
    dice: float
    iou: float
    n_sdf_samples: int = 0
    n_surface_points: int = 0
    config: dict | None = None

    def __post_init__(self):
        if self.mae_mm > self.rmse_mm + 1e-12:
            raise MetricError(f"MAE {self.mae_mm} exceeds RMSE {self.rmse_mm}")
        for v, name in ((self.dice, "dice"), (self.iou, "iou")):
            if not (0.0 <= v <= 1.0):
                raise MetricError(f"{name} out of [0, 1]: {v}")
        if self.iou > self.dice + 1e-12:
            raise MetricError(f"IoU {self.iou} exceeds Dice {self.dice}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @staticmethod
    def csv_header() -> str:
        return "mae_mm,rmse_mm,hd_mm,cd_mm,dice,iou"

    def to_csv_row(self) -> str:
        return f"{self.mae_mm},{self.rmse_mm},{self.hd_mm},{self.cd_mm},{self.dice},{self.iou}"


def surface_points_from_mesh(mesh, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Area-weighted random surface samples from a triangle mesh."""
    rng = rng or np.random.default_rng(0)
    t = mesh.vertices[mesh.faces]
    areas = 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)
    probs = areas / areas.sum()
    pick = rng.choice(len(areas), size=n, p=probs)
    r1, r2 = rng.uniform(size=(2, n))
    sq = np.sqrt(r1)
    bary = np.stack([1 - sq, sq * (1 - r2), sq * r2], axis=1)
    return np.einsum("nk,nkj->nj", bary, t[pick])


def evaluate_reconstruction(
    model,
    z: np.ndarray,
    record,
    probes: list[ProbeParams] | None = None,
    grid_res: int = 64,
    n_surface: int = 4000,
    seed: int = 0,
    config_echo: dict | None = None,
) -> MetricReport:
    """Full metric row for one reconstructed shape against its record.

    SDF-value errors are measured at the record's sample points (matching
    the supervision signal); CD/HD compare mesh surface samples against the
    analytic surface points recovered from the record's shape weights.
    """
    from .meshing import extract_mesh

    mm = record.mm_per_unit
    mae, rmse = surface_sdf_errors(model, z, record.samples.points, record.samples.distances, mm_scale=mm)
    mesh = extract_mesh(model, z, grid_res=grid_res, mm_per_unit=mm)
    rng = np.random.default_rng(seed)
    pred_pts = surface_points_from_mesh(mesh, n_surface, rng)
    gt_pts = _record_surface_points(record, n_surface, rng)
    cd = chamfer(pred_pts, gt_pts) * mm
    hd = hausdorff(pred_pts, gt_pts) * mm
    dices, ious = [], []
    if probes is None:
        probes = [ProbeParams.from_view(v, trainable=False) for v in record.views]
    for probe, mask in zip(probes, record.masks):
        d, i = projected_dice(model, z, probe, mask)
        dices.append(d)
        ious.append(i)
    return MetricReport(
        mae_mm=mae,
        rmse_mm=rmse,
        hd_mm=hd,
        cd_mm=cd,
        dice=float(np.mean(dices)),
        iou=float(np.mean(ious)),
        n_sdf_samples=len(record.samples.distances),
        n_surface_points=n_surface,
        config=config_echo,
    )


def _record_surface_points(record, n: int, rng: np.random.Generator) -> np.ndarray:
    # records store the generating mode weights; rebuild the analytic surface
    shape = record.analytic_shape()
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return shape.radius(dirs)[:, None] * dirs
