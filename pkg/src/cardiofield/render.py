"""Differentiable silhouette rendering with learnable probe transforms.

A probe is a rigid+scale plane transform (axis-angle rotation, translation,
log-scale), all on the autodiff tape. Sampled plane pixels map to 3D, the
decoder is queried there, and a scaled sigmoid turns signed distances into
soft mask probabilities; a BCE + soft-Dice loss drives test-time adaptation
of the latent code and the probe parameters in an 8:2 alternation while the
decoder weights stay frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .autodiff import Tensor
from .optim import Adam
from .shapes import ProbeView


class OptimizationAborted(RuntimeError):
    """TTO hit non-finite numbers; carries the last good state."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


# -- axis-angle rotation on the tape ------------------------------------------

_TAYLOR_SWITCH = 1e-4  # switch to series below this squared angle


def _coef_a(s: np.ndarray) -> np.ndarray:
    # sin(sqrt(s)) / sqrt(s)
    s_safe = np.maximum(s, _TAYLOR_SWITCH)
    th = np.sqrt(s_safe)
    closed = np.sin(th) / th
    series = 1.0 - s / 6.0 + s * s / 120.0
    return np.where(s < _TAYLOR_SWITCH, series, closed)


def _coef_a_deriv(s: np.ndarray) -> np.ndarray:
    s_safe = np.maximum(s, _TAYLOR_SWITCH)
    th = np.sqrt(s_safe)
    closed = (th * np.cos(th) - np.sin(th)) / (2.0 * s_safe * th)
    series = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0
    return np.where(s < _TAYLOR_SWITCH, series, closed)


def _coef_b(s: np.ndarray) -> np.ndarray:
    # (1 - cos(sqrt(s))) / s
    s_safe = np.maximum(s, _TAYLOR_SWITCH)
    closed = (1.0 - np.cos(np.sqrt(s_safe))) / s_safe
    series = 0.5 - s / 24.0 + s * s / 720.0
    return np.where(s < _TAYLOR_SWITCH, series, closed)


def _coef_b_deriv(s: np.ndarray) -> np.ndarray:
    s_safe = np.maximum(s, _TAYLOR_SWITCH)
    th = np.sqrt(s_safe)
    closed = (th * np.sin(th) + 2.0 * np.cos(th) - 2.0) / (2.0 * s_safe * s_safe)
    series = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
    return np.where(s < _TAYLOR_SWITCH, series, closed)


def axis_angle_matrix(rot_vec: Tensor) -> Tensor:
    """Exponential map: 3-vector -> rotation matrix, smooth through zero."""
    wx, wy, wz = rot_vec[0], rot_vec[1], rot_vec[2]
    zero = Tensor(0.0)
    k = ad.stack(
        [
            ad.stack([zero, -wz, wy]),
            ad.stack([wz, zero, -wx]),
            ad.stack([-wy, wx, zero]),
        ]
    )
    s = (rot_vec * rot_vec).sum()
    a = ad.custom_unary(s, _coef_a, _coef_a_deriv, "rot_coef_a")
    b = ad.custom_unary(s, _coef_b, _coef_b_deriv, "rot_coef_b")
    return Tensor(np.eye(3)) + a * k + b * ad.matmul(k, k)


def rotation_to_axis_angle(mat: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(mat).as_rotvec()


class ProbeParams:
    """Learnable per-view transform: x = exp(log_scale) * R(rot) @ p + t."""

    def __init__(self, rot_vec, translation, log_scale, view_id="view", trainable=True):
        self.view_id = view_id
        self.rot_vec = Tensor(np.asarray(rot_vec, float), requires_grad=trainable, name=f"{view_id}.rot")
        self.translation = Tensor(np.asarray(translation, float), requires_grad=trainable, name=f"{view_id}.trans")
        self.log_scale = Tensor(float(log_scale), requires_grad=trainable, name=f"{view_id}.log_scale")
        self.trainable = trainable

    @classmethod
    def from_view(cls, view: ProbeView, trainable: bool = True) -> "ProbeParams":
        return cls(
            rot_vec=rotation_to_axis_angle(view.rotation),
            translation=view.translation.copy(),
            log_scale=np.log(view.scale),
            view_id=view.view_id,
            trainable=trainable,
        )

    def parameters(self) -> list[Tensor]:
        return [self.rot_vec, self.translation, self.log_scale]

    def rotation(self) -> Tensor:
        return axis_angle_matrix(self.rot_vec)

    def to_view(self, height: int, width: int) -> ProbeView:
        with ad.no_grad():
            rot = self.rotation().data
        return ProbeView(
            view_id=self.view_id,
            rotation=rot,
            translation=self.translation.data.copy(),
            scale=float(np.exp(self.log_scale.data)),
            height=height,
            width=width,
        )

    def state(self) -> dict:
        return {
            "rot_vec": self.rot_vec.data.tolist(),
            "translation": self.translation.data.tolist(),
            "log_scale": float(self.log_scale.data),
        }

    def snapshot(self) -> tuple:
        return (self.rot_vec.data.copy(), self.translation.data.copy(), self.log_scale.data.copy())

    def restore(self, snap: tuple) -> None:
        self.rot_vec.data, self.translation.data, self.log_scale.data = (
            snap[0].copy(),
            snap[1].copy(),
            snap[2].copy(),
        )


def pixel_to_3d(probe: ProbeParams, pixels: np.ndarray) -> Tensor:
    """Map (n, 2) normalized plane coordinates through the probe transform."""
    pixels = np.atleast_2d(np.asarray(pixels, float))
    p3 = np.concatenate([pixels, np.zeros((len(pixels), 1))], axis=1)
    rot = probe.rotation()
    scale = ad.exp(probe.log_scale)
    return scale * ad.matmul(Tensor(p3), rot.transpose()) + probe.translation


def perturb_view(view: ProbeView, rot_deg: float, trans: float, rng: np.random.Generator) -> ProbeView:
    """Compose a random small rotation/translation onto a view (test protocol)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    delta = Rotation.from_rotvec(axis * np.deg2rad(rot_deg)).as_matrix()
    shift = rng.normal(size=3)
    shift = shift / np.linalg.norm(shift) * trans
    return ProbeView(
        view_id=view.view_id,
        rotation=delta @ view.rotation,
        translation=view.translation + shift,
        scale=view.scale,
        height=view.height,
        width=view.width,
    )


# -- rendering ----------------------------------------------------------------


def render_logits(model, z, probe: ProbeParams, pixels: np.ndarray, alpha: float) -> Tensor:
    """-alpha * f at the mapped pixels (logit of the inside probability)."""
    pts = pixel_to_3d(probe, pixels)
    f = model.evaluate(z, pts)
    return (-alpha) * f


def render_mask(model, z, probe: ProbeParams, pixels: np.ndarray, alpha: float) -> Tensor:
    """Soft mask probabilities 1 / (1 + exp(alpha * f)) at sampled pixels."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return ad.sigmoid(render_logits(model, z, probe, pixels, alpha))


def render_full_probs(model, z, probe: ProbeParams, height: int, width: int, alpha: float) -> np.ndarray:
    """Full-resolution probability image (no tape)."""
    view = probe.to_view(height, width)
    with ad.no_grad():
        f = model.evaluate(z, view.to_3d(view.pixel_centers())).data
    probs = 1.0 / (1.0 + np.exp(np.clip(alpha * f, -700, 700)))
    return probs.reshape(height, width)


def render_hard_mask(model, z, probe: ProbeParams, height: int, width: int, alpha_eval: float = 1e4) -> np.ndarray:
    """Binarized render: probability > 0.5 at the hard-sigmoid limit."""
    return (render_full_probs(model, z, probe, height, width, alpha_eval) > 0.5).astype(np.uint8)


@dataclass
class RenderConfig:
    """Loss weights, sampling counts and the sharpness schedule."""

    alpha_start: float = 20.0
    alpha_end: float = 150.0
    pixels_per_step: int = 4096
    bce_weight: float = 1.0
    dice_weight: float = 0.5
    boundary_fraction: float = 0.5
    dice_smooth: float = 1e-6

    def alpha_at(self, step: int, total_steps: int) -> float:
        if total_steps <= 1:
            return self.alpha_end
        t = step / (total_steps - 1)
        return self.alpha_start + (self.alpha_end - self.alpha_start) * t


def render_loss_parts(
    preds: list[Tensor], gts: list[np.ndarray], cfg: RenderConfig
) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Weighted BCE + soft Dice per view; returns (view-mean total, sub-terms)."""
    if len(preds) != len(gts):
        raise ValueError("one ground-truth sample set per view required")
    total = Tensor(0.0)
    parts = []
    eps = 1e-12
    for probs, gt in zip(preds, gts):
        y = Tensor(np.asarray(gt, float))
        p = probs * (1.0 - 2.0 * eps) + eps  # keep log() finite at hard 0/1
        bce = -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)).mean()
        inter = (probs * y).sum()
        dice_loss = 1.0 - (2.0 * inter + cfg.dice_smooth) / (probs.sum() + y.sum() + cfg.dice_smooth)
        parts.append((bce, dice_loss))
        total = total + cfg.bce_weight * bce + cfg.dice_weight * dice_loss
    return total / float(len(preds)), parts


def render_loss(preds: list[Tensor], gts: list[np.ndarray], cfg: RenderConfig) -> Tensor:
    """Mean over views of weighted BCE + soft Dice on sampled pixels."""
    return render_loss_parts(preds, gts, cfg)[0]


# -- pixel sampling -------------------------------------------------------------


class PixelSampler:
    """Uniform pixels plus a guaranteed share near the GT mask boundary."""

    def __init__(self, mask: np.ndarray, boundary_fraction: float = 0.5, dilate: int = 2):
        self.h, self.w = mask.shape
        self.boundary_fraction = boundary_fraction
        m = mask.astype(bool)
        edge = m ^ ndimage.binary_erosion(m)
        band = ndimage.binary_dilation(edge, iterations=dilate) if edge.any() else edge
        self.boundary_idx = np.flatnonzero(band)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        n_b = int(round(self.boundary_fraction * n)) if len(self.boundary_idx) else 0
        flat = np.concatenate(
            [
                rng.choice(self.boundary_idx, size=n_b, replace=True) if n_b else [],
                rng.integers(0, self.h * self.w, size=n - n_b),
            ]
        ).astype(np.intp)
        return flat

    def to_plane(self, flat: np.ndarray) -> np.ndarray:
        ys, xs = np.divmod(flat, self.w)
        px = -1.0 + (2.0 * xs + 1.0) / self.w
        py = -1.0 + (2.0 * ys + 1.0) / self.h
        return np.stack([px, py], axis=1)


# -- phase-1 test-time optimization ---------------------------------------------


@dataclass
class TtoConfig:
    steps: int = 1500
    lr_latent: float = 5e-4
    lr_probe: float = 5e-3
    cycle: int = 10
    latent_steps_per_cycle: int = 8
    latent_norm_cap: float = 10.0
    eval_every: int = 100
    alpha_eval: float = 1e4
    seed: int = 0
    render: RenderConfig = field(default_factory=RenderConfig)


@dataclass
class TtoShapeResult:
    z: np.ndarray
    probes: list[ProbeParams]
    loss_curve: list[tuple]  # (step, loss, phase)
    dice_history: list[tuple]  # (step, mean_dice, per-view dice tuple)
    final_dice: list[float]
    final_iou: list[float]
    update_counts: dict
    aborted: bool = False

    def report(self, config_echo: dict | None = None, build_id: str | None = None) -> dict:
        return {
            "build_id": build_id,
            "config": config_echo or {},
            "loss_curve": [(s, l, p) for s, l, p in self.loss_curve],
            "dice_history": [(s, d, list(pv)) for s, d, pv in self.dice_history],
            "final_dice": self.final_dice,
            "final_iou": self.final_iou,
            "probes": {p.view_id: p.state() for p in self.probes},
            "update_counts": self.update_counts,
            "aborted": self.aborted,
        }


def hard_dice_iou(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    a, b = pred.astype(bool), gt.astype(bool)
    inter = float(np.logical_and(a, b).sum())
    sa, sb = float(a.sum()), float(b.sum())
    union = sa + sb - inter
    if sa + sb == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (sa + sb)
    iou = inter / union if union else 1.0
    return dice, iou


def tto_shape(
    model,
    z_init: np.ndarray,
    masks: list[np.ndarray],
    probes: list[ProbeParams],
    cfg: TtoConfig | None = None,
) -> TtoShapeResult:
    """Alternating latent/probe adaptation against observed masks.

    Decoder weights are left untouched; within every ``cycle`` steps the
    first ``latent_steps_per_cycle`` update the code (probes frozen) and the
    remainder update the probes (code frozen).
    """
    cfg = cfg or TtoConfig()
    if not masks or len(masks) != len(probes):
        raise ValueError("need one probe per mask and at least one view")
    rng = np.random.default_rng(cfg.seed)
    z = Tensor(np.asarray(z_init, float).copy(), requires_grad=True, name="latent")
    opt_z = Adam([z], lr=cfg.lr_latent)
    opt_p = Adam([p for probe in probes for p in probe.parameters()], lr=cfg.lr_probe)
    samplers = [PixelSampler(m, cfg.render.boundary_fraction) for m in masks]
    per_view = max(1, cfg.render.pixels_per_step // len(masks))
    heights = [m.shape[0] for m in masks]
    widths = [m.shape[1] for m in masks]

    def eval_dice() -> tuple[float, tuple]:
        per = []
        for probe, mask, h, w in zip(probes, masks, heights, widths):
            pred = render_hard_mask(model, z.data, probe, h, w, cfg.alpha_eval)
            per.append(hard_dice_iou(pred, mask)[0])
        return float(np.mean(per)), tuple(per)

    loss_curve: list[tuple] = []
    dice_history: list[tuple] = []
    counts = {"latent": 0, "probe": 0}
    last_good = (z.data.copy(), [p.snapshot() for p in probes])

    for step in range(cfg.steps):
        alpha = cfg.render.alpha_at(step, cfg.steps)
        phase = "latent" if (step % cfg.cycle) < cfg.latent_steps_per_cycle else "probe"
        try:
            preds, gts = [], []
            for sampler, probe, mask in zip(samplers, probes, masks):
                flat = sampler.draw(per_view, rng)
                pixels = sampler.to_plane(flat)
                preds.append(render_mask(model, z, probe, pixels, alpha))
                gts.append(mask.reshape(-1)[flat])
            loss = render_loss(preds, gts, cfg.render)
            loss.backward()
        except ad.NonFiniteError as exc:
            z.data, snaps = last_good[0], last_good[1]
            for probe, snap in zip(probes, snaps):
                probe.restore(snap)
            mean_d, per_d = eval_dice()
            result = TtoShapeResult(
                z=z.data.copy(),
                probes=probes,
                loss_curve=loss_curve,
                dice_history=dice_history + [(step, mean_d, per_d)],
                final_dice=list(per_d),
                final_iou=[hard_dice_iou(render_hard_mask(model, z.data, p, h, w, cfg.alpha_eval), m)[1]
                           for p, m, h, w in zip(probes, masks, heights, widths)],
                update_counts=counts,
                aborted=True,
            )
            raise OptimizationAborted(f"non-finite loss at step {step}: {exc}", result) from exc
        if phase == "latent":
            opt_z.step()
            counts["latent"] += 1
            norm = np.linalg.norm(z.data)
            if norm > cfg.latent_norm_cap:
                z.data *= cfg.latent_norm_cap / norm
        else:
            opt_p.step()
            counts["probe"] += 1
        opt_z.zero_grad()
        opt_p.zero_grad()
        last_good = (z.data.copy(), [p.snapshot() for p in probes])
        loss_curve.append((step, float(loss.data), phase))
        if step % cfg.eval_every == 0 or step == cfg.steps - 1:
            mean_d, per_d = eval_dice()
            dice_history.append((step, mean_d, per_d))

    final_dice, final_iou = [], []
    for probe, mask, h, w in zip(probes, masks, heights, widths):
        pred = render_hard_mask(model, z.data, probe, h, w, cfg.alpha_eval)
        d, i = hard_dice_iou(pred, mask)
        final_dice.append(d)
        final_iou.append(i)
    return TtoShapeResult(
        z=z.data.copy(),
        probes=probes,
        loss_curve=loss_curve,
        dice_history=dice_history,
        final_dice=final_dice,
        final_iou=final_iou,
        update_counts=counts,
    )
