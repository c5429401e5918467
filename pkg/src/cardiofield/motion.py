"""Temporal extension: neural velocity field, latent smoothing, mesh transport.

One mesh is extracted at the anchor frame and its vertices are advected
frame-to-frame by a learned velocity field (one explicit Euler step per
frame), then snapped back onto each frame's implicit surface along the
field gradient. Topology is locked by construction: the face list never
changes and vertices keep their indices, giving dense correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .meshing import TriangleMesh, extract_mesh
from .optim import Adam
from .render import ProbeParams, RenderConfig, hard_dice_iou, render_hard_mask, render_loss, render_mask


# -- velocity field ------------------------------------------------------------


@dataclass(frozen=True)
class VelocityConfig:
    hidden: tuple = (64, 64, 64)  # 4 weight layers total
    posenc_x: int = 6
    posenc_t: int = 4
    include_input: bool = True


class VelocityNet:
    """MLP over [encoded x, encoded t] predicting a 3-vector velocity.

    The output layer starts at zero so the initial field is exactly static.
    """

    def __init__(self, cfg: VelocityConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg or VelocityConfig()
        rng = rng or np.random.default_rng(0)
        self.pe_x = nn.PosEncConfig(self.cfg.posenc_x, self.cfg.include_input)
        self.pe_t = nn.PosEncConfig(self.cfg.posenc_t, self.cfg.include_input)
        in_dim = self.pe_x.output_dim(3) + self.pe_t.output_dim(1)
        self.mlp = nn.mlp_init([in_dim, *self.cfg.hidden, 3], activation="relu", rng=rng, final_zero=True, name="vel")

    def evaluate(self, x, t) -> Tensor:
        """x: (n, 3) points (Tensor or array); t: scalar or (n,) times in [0, 1]."""
        xt = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        n = xt.shape[0]
        t_arr = np.full((n, 1), float(t)) if np.isscalar(t) else np.asarray(t, float).reshape(n, 1)
        feats = ad.concat([self.pe_x.apply(xt), self.pe_t.apply(Tensor(t_arr))], axis=1)
        return nn.mlp_forward(self.mlp, feats)

    def evaluate_np(self, x: np.ndarray, t) -> np.ndarray:
        with ad.no_grad():
            return self.evaluate(x, t).data

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return self.mlp.named_parameters("vel")


# -- bidirectional latent smoother ----------------------------------------------


@dataclass(frozen=True)
class SmootherConfig:
    hidden: int = 32


class LatentSmoother:
    """Forward+backward recurrent pass over the code sequence, residual merge.

    The merge projection starts at zero, so the smoother is the identity at
    initialization; each output depends on the whole input sequence once
    trained.
    """

    def __init__(self, latent_dim: int, cfg: SmootherConfig | None = None, rng: np.random.Generator | None = None):
        cfg = cfg or SmootherConfig()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.latent_dim = latent_dim
        self.fwd = nn.recurrent_cell_init(latent_dim, cfg.hidden, rng, name="smooth.fwd")
        self.bwd = nn.recurrent_cell_init(latent_dim, cfg.hidden, rng, name="smooth.bwd")
        self.merge_w = Tensor(np.zeros((2 * cfg.hidden, latent_dim)), requires_grad=True, name="smooth.merge.w")
        self.merge_b = Tensor(np.zeros(latent_dim), requires_grad=True, name="smooth.merge.b")

    def apply(self, codes: list[Tensor]) -> list[Tensor]:
        t_len = len(codes)
        if t_len == 0:
            raise ValueError("need at least one code")
        rows = [c.reshape((1, -1)) for c in codes]
        h = Tensor(np.zeros((1, self.cfg.hidden)))
        hs_f = []
        for r in rows:
            h = self.fwd.step(h, r)
            hs_f.append(h)
        h = Tensor(np.zeros((1, self.cfg.hidden)))
        hs_b = [None] * t_len
        for i in range(t_len - 1, -1, -1):
            h = self.bwd.step(h, rows[i])
            hs_b[i] = h
        out = []
        for r, hf, hb in zip(rows, hs_f, hs_b):
            resid = ad.matmul(ad.concat([hf, hb], axis=1), self.merge_w) + self.merge_b
            out.append((r + resid).reshape((-1,)))
        return out

    def apply_np(self, codes: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return np.stack([z.data for z in self.apply([Tensor(c) for c in codes])])

    def parameters(self) -> list[Tensor]:
        return self.fwd.parameters() + self.bwd.parameters() + [self.merge_w, self.merge_b]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.fwd.named_parameters("smooth.fwd"))
        out.update(self.bwd.named_parameters("smooth.bwd"))
        out["smooth.merge.w"] = self.merge_w
        out["smooth.merge.b"] = self.merge_b
        return out


# -- vertex transport ------------------------------------------------------------


def propagate_vertices(vertices: np.ndarray, vel: VelocityNet, t: float) -> np.ndarray:
    """One explicit Euler step: x + v(x, t), order-preserving."""
    if len(vertices) == 0:
        raise ValueError("no vertices to propagate")
    return vertices + vel.evaluate_np(vertices, t)


@dataclass
class AlignConfig:
    max_iterations: int = 3
    tolerance: float = 1e-3  # stop once |f| is below this
    grad_floor: float = 1e-6  # vertices with weaker gradients are left in place


@dataclass
class AlignmentReport:
    iterations_used: int
    residuals: np.ndarray  # |f| per vertex after alignment
    flagged: np.ndarray  # indices left unmoved due to degenerate gradients

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if len(self.residuals) else 0.0


def radial_align(model, z: np.ndarray, vertices: np.ndarray, cfg: AlignConfig | None = None) -> tuple[np.ndarray, AlignmentReport]:
    """Project vertices onto the zero-level set along the field gradient.

    Applies x <- x - f * grad/|grad| up to max_iterations times, stopping per
    vertex once |f| < tolerance. Vertices whose gradient norm falls below
    grad_floor are frozen and reported.
    """
    cfg = cfg or AlignConfig()
    x = np.array(vertices, float, copy=True)
    flagged = np.zeros(len(x), dtype=bool)
    iters = 0
    for it in range(cfg.max_iterations):
        f = model.evaluate_np(z, x)
        active = (np.abs(f) >= cfg.tolerance) & ~flagged
        if not active.any():
            break
        iters = it + 1
        grad = model.spatial_grad(z, x[active])
        norm = np.linalg.norm(grad, axis=1)
        weak = norm < cfg.grad_floor
        idx = np.flatnonzero(active)
        flagged[idx[weak]] = True
        ok = ~weak
        step = f[active][ok, None] * grad[ok] / norm[ok, None]
        x[idx[ok]] -= step
    residuals = np.abs(model.evaluate_np(z, x))
    return x, AlignmentReport(iterations_used=iters, residuals=residuals, flagged=np.flatnonzero(flagged))


# -- transport loss -----------------------------------------------------------------


@dataclass
class TransportConfig:
    smooth_weight: float = 1e-3
    detach_weights: bool = True  # boundary weights act as constants


def transport_loss(
    model,
    vel: VelocityNet,
    z_t,
    z_next,
    t: float,
    t_next: float,
    samples_t: np.ndarray,
    samples_next: np.ndarray,
    uniform_samples: np.ndarray,
    cfg: TransportConfig | None = None,
) -> tuple[Tensor, dict]:
    """Bidirectional surface-transport consistency plus velocity smoothness.

    Points near the frame-t surface advected by v(x, t) must land on the
    frame-(t+1) zero set and vice versa (backward transport subtracts the
    next frame's velocity); each squared residual is weighted by
    exp(-|f|) evaluated at the sample's own frame.
    """
    cfg = cfg or TransportConfig()
    zt = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    zn = z_next if isinstance(z_next, Tensor) else Tensor(z_next)

    def weights(z_ref, pts):
        if cfg.detach_weights:
            with ad.no_grad():
                f = model.evaluate(z_ref.detach(), pts).data
            return Tensor(np.exp(-np.abs(f)))
        return ad.exp(-ad.absolute(model.evaluate(z_ref, pts)))

    w_t = weights(zt, samples_t)
    adv = Tensor(samples_t) + vel.evaluate(samples_t, t)
    f_fwd = model.evaluate(zn, adv)
    term_fwd = (w_t * f_fwd * f_fwd).mean()

    w_n = weights(zn, samples_next)
    back = Tensor(samples_next) - vel.evaluate(samples_next, t_next)
    f_bwd = model.evaluate(zt, back)
    term_bwd = (w_n * f_bwd * f_bwd).mean()

    v_uni_t = vel.evaluate(uniform_samples, t)
    v_uni_n = vel.evaluate(uniform_samples, t_next)
    smooth = 0.5 * ((v_uni_t * v_uni_t).sum(axis=1).mean() + (v_uni_n * v_uni_n).sum(axis=1).mean())

    total = term_fwd + term_bwd + cfg.smooth_weight * smooth
    parts = {
        "forward": float(term_fwd.data),
        "backward": float(term_bwd.data),
        "smooth": float(smooth.data),
    }
    return total, parts


def sample_surface_points(
    model,
    z: np.ndarray,
    n: int,
    rng: np.random.Generator,
    jitter: float = 0.02,
    align_cfg: AlignConfig | None = None,
) -> np.ndarray:
    """Near-surface samples of the current implicit shape via projection."""
    align_cfg = align_cfg or AlignConfig(max_iterations=3, tolerance=1e-4)
    seeds = rng.uniform(-1.0, 1.0, size=(n, 3))
    projected, _ = radial_align(model, z, seeds, align_cfg)
    return np.clip(projected + rng.normal(scale=jitter, size=(n, 3)), -1.0, 1.0)


# -- phase-2 shape-motion optimization ------------------------------------------------


@dataclass
class FrameSequence:
    """Per-frame observations: masks plus shared view geometry."""

    masks: list[list[np.ndarray]]  # [frame][view] binary masks
    timestamps: np.ndarray  # (T,) strictly increasing, in [0, 1]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, float)
        if len(self.masks) != len(self.timestamps):
            raise ValueError("one timestamp per frame required")
        if len(self.timestamps) and (
            np.any(np.diff(self.timestamps) <= 0)
            or self.timestamps[0] < 0.0
            or self.timestamps[-1] > 1.0
        ):
            raise ValueError("timestamps must be strictly increasing within [0, 1]")

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)


@dataclass
class MotionConfig:
    steps: int = 2000
    lr_latent: float = 5e-4
    lr_velocity: float = 1e-3
    lr_smoother: float = 1e-3
    train_smoother: bool = True
    transport_weight: float = 0.5  # scales the transport term next to the render loss
    n_surface_samples: int = 256
    n_uniform_samples: int = 64
    pixels_per_step: int = 4096
    alpha: float = 150.0  # phase-2 renders at the annealed sharp endpoint
    grid_res: int = 64
    latent_norm_cap: float = 10.0
    seed: int = 0
    render: RenderConfig = field(default_factory=RenderConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    velocity: VelocityConfig = field(default_factory=VelocityConfig)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)


@dataclass
class PropagatedMesh:
    faces: np.ndarray  # locked topology
    frame_vertices: list[np.ndarray]  # one (n, 3) array per frame
    mm_per_unit: float | None = None

    def mesh_at(self, t_idx: int) -> TriangleMesh:
        return TriangleMesh(self.frame_vertices[t_idx], self.faces, self.mm_per_unit)

    def volumes(self) -> np.ndarray:
        return np.array([self.mesh_at(i).volume() for i in range(len(self.frame_vertices))])


@dataclass
class MotionResult:
    codes: np.ndarray  # (T, L) smoothed per-frame codes
    raw_codes: np.ndarray  # (T, L) before smoothing
    velocity: VelocityNet
    smoother: LatentSmoother
    mesh: PropagatedMesh
    loss_curve: list[tuple]  # (step, frame, render, transport)
    align_reports: list[AlignmentReport]
    per_frame_dice: list[list[float]]

    def volume_csv(self) -> str:
        vols = self.mesh.volumes()
        lines = ["frame,volume"]
        lines += [f"{i},{v!r}" for i, v in enumerate(vols)]
        return "\n".join(lines) + "\n"


def tto_motion(
    model,
    frames: FrameSequence,
    anchor_code: np.ndarray,
    probes: list[ProbeParams],
    cfg: MotionConfig | None = None,
) -> MotionResult:
    """Joint per-frame latent + velocity-field optimization, then propagation.

    Probes stay frozen. Each step draws a random frame, renders it with its
    smoothed code against that frame's masks, and adds the weighted
    bidirectional transport loss on an adjacent frame pair. Afterwards one
    anchor mesh is extracted and carried through all frames by Euler steps
    plus radial alignment.
    """
    cfg = cfg or MotionConfig()
    t_len = frames.n_frames
    if t_len == 0:
        raise ValueError("empty frame sequence")
    rng = np.random.default_rng(cfg.seed)
    latent_dim = len(anchor_code)
    codes = [Tensor(np.array(anchor_code, float), requires_grad=True, name=f"z[{i}]") for i in range(t_len)]
    vel = VelocityNet(cfg.velocity, np.random.default_rng(cfg.seed + 1))
    smoother = LatentSmoother(latent_dim, cfg.smoother, np.random.default_rng(cfg.seed + 2))

    loss_curve: list[tuple] = []
    if t_len > 1:
        opt_z = Adam(codes, lr=cfg.lr_latent)
        opt_v = Adam(vel.parameters(), lr=cfg.lr_velocity)
        opt_s = Adam(smoother.parameters(), lr=cfg.lr_smoother) if cfg.train_smoother else None
        samplers = _frame_samplers(frames, cfg)
        per_view = max(1, cfg.pixels_per_step // len(probes))
        for step in range(cfg.steps):
            fi = int(rng.integers(t_len))
            pair = (fi, fi + 1) if fi < t_len - 1 else (fi - 1, fi)
            smoothed = smoother.apply(codes)
            # render loss on the sampled frame at its smoothed code
            preds, gts = [], []
            for v, (sampler, probe) in enumerate(zip(samplers[fi], probes)):
                flat = sampler.draw(per_view, rng)
                pixels = sampler.to_plane(flat)
                preds.append(render_mask(model, smoothed[fi], probe, pixels, cfg.alpha))
                gts.append(frames.masks[fi][v].reshape(-1)[flat])
            l_render = render_loss(preds, gts, cfg.render)
            # transport on the adjacent pair
            ta, tb = frames.timestamps[pair[0]], frames.timestamps[pair[1]]
            with ad.no_grad():
                za_np, zb_np = smoothed[pair[0]].data, smoothed[pair[1]].data
            s_a = sample_surface_points(model, za_np, cfg.n_surface_samples, rng)
            s_b = sample_surface_points(model, zb_np, cfg.n_surface_samples, rng)
            uni = rng.uniform(-1, 1, size=(cfg.n_uniform_samples, 3))
            l_trans, _ = transport_loss(
                model, vel, smoothed[pair[0]], smoothed[pair[1]], ta, tb, s_a, s_b, uni, cfg.transport
            )
            total = l_render + cfg.transport_weight * l_trans
            total.backward()
            opt_z.step()
            opt_v.step()
            if opt_s:
                opt_s.step()
            opt_z.zero_grad()
            opt_v.zero_grad()
            if opt_s:
                opt_s.zero_grad()
            for z in codes:
                norm = np.linalg.norm(z.data)
                if norm > cfg.latent_norm_cap:
                    z.data *= cfg.latent_norm_cap / norm
            if step % 50 == 0 or step == cfg.steps - 1:
                loss_curve.append((step, fi, float(l_render.data), float(l_trans.data)))

    raw = np.stack([z.data for z in codes])
    smoothed_np = smoother.apply_np(raw) if t_len > 1 else raw.copy()

    anchor_mesh = extract_mesh(model, smoothed_np[0], grid_res=cfg.grid_res)
    frame_vertices = [anchor_mesh.vertices.copy()]
    align_reports: list[AlignmentReport] = []
    verts = anchor_mesh.vertices.copy()
    for i in range(1, t_len):
        drifted = propagate_vertices(verts, vel, float(frames.timestamps[i - 1]))
        verts, report = radial_align(model, smoothed_np[i], drifted, cfg.align)
        align_reports.append(report)
        frame_vertices.append(verts.copy())
    mesh = PropagatedMesh(faces=anchor_mesh.faces.copy(), frame_vertices=frame_vertices)

    per_frame_dice = []
    for i in range(t_len):
        row = []
        for v, probe in enumerate(probes):
            gt = frames.masks[i][v]
            pred = render_hard_mask(model, smoothed_np[i], probe, gt.shape[0], gt.shape[1])
            row.append(hard_dice_iou(pred, gt)[0])
        per_frame_dice.append(row)

    return MotionResult(
        codes=smoothed_np,
        raw_codes=raw,
        velocity=vel,
        smoother=smoother,
        mesh=mesh,
        loss_curve=loss_curve,
        align_reports=align_reports,
        per_frame_dice=per_frame_dice,
    )


def _frame_samplers(frames: FrameSequence, cfg: MotionConfig):
    from .render import PixelSampler

    return [
        [PixelSampler(mask, cfg.render.boundary_fraction) for mask in frame_masks]
        for frame_masks in frames.masks
    ]
