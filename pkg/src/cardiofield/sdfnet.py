"""Latent-conditioned signed-distance network and the multi-view mask encoder.

The decoder is an MLP over [code, positional-encoded x] with a tanh-bounded
output (slope one at zero, saturating at +-clamp), trained against exact SDF
samples with an L1 term plus squared-norm code regularization. Codes either
come from the mask encoder (shared strided CNN per view, cross-view attention
restricted to a vertical pixel window, pooling head) or are free per-shape
variables (auto-decoder).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .optim import Adam


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SdfNetConfig:
    latent_dim: int = 64
    hidden: tuple = (64, 64, 64, 64)
    clamp: float = 0.2
    posenc_frequencies: int = 6
    posenc_include_input: bool = True

    def posenc(self) -> nn.PosEncConfig:
        return nn.PosEncConfig(self.posenc_frequencies, self.posenc_include_input)

    def point_feature_dim(self) -> int:
        return self.posenc().output_dim(3) if self.posenc_frequencies else 3


class ConditionalSdf:
    """MLP signed-distance decoder conditioned on a per-shape latent code."""

    def __init__(self, cfg: SdfNetConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        dims = [cfg.latent_dim + cfg.point_feature_dim(), *cfg.hidden, 1]
        self.mlp = nn.mlp_init(dims, activation="relu", rng=rng, name="sdf")

    # -- evaluation --------------------------------------------------------

    def eval_rows(self, z_rows: Tensor, x: Tensor) -> Tensor:
        """f for per-row codes: z_rows (n, L), x (n, 3) -> (n,)."""
        feats = self.cfg.posenc().apply(x) if self.cfg.posenc_frequencies else x
        h = ad.concat([z_rows, feats], axis=1)
        raw = nn.mlp_forward(self.mlp, h).reshape((-1,))
        delta = self.cfg.clamp
        return delta * ad.tanh(raw * (1.0 / delta))

    def evaluate(self, z, x) -> Tensor:
        """f(z, x) for one code z (L,) over points x (n, 3); on the tape."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        n = x.shape[0]
        z_rows = ad.broadcast_to(z.reshape((1, -1)), (n, z.shape[-1]))
        return self.eval_rows(z_rows, x)

    def evaluate_np(self, z: np.ndarray, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Plain-array evaluation (no tape), chunked for big grids."""
        x = np.atleast_2d(x)
        out = np.empty(len(x))
        with ad.no_grad():
            for lo in range(0, len(x), chunk):
                out[lo : lo + chunk] = self.evaluate(z, x[lo : lo + chunk]).data
        return out

    def spatial_grad(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Exact tape gradient of f w.r.t. each query point, (n, 3)."""
        xt = Tensor(np.atleast_2d(x), requires_grad=True)
        f = self.evaluate(z, xt)
        f.sum().backward()  # rows are independent, so sum() gives per-row grads
        return xt.grad

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return self.mlp.named_parameters("sdf")

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters().items():
            if t.data.shape != tensors[name].shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {t.data.shape}")
            t.data = tensors[name].copy()


# -- windowed cross-view attention -------------------------------------------


@dataclass
class EcaConfig:
    """Vertical-window cross-view attention settings."""

    window_halfheight: int | None = None  # None -> H' // 8
    temperature: float | None = None  # None -> sqrt(C)
    anchor: int = 0

    def resolve(self, channels: int, height: int) -> tuple[int, float]:
        r = self.window_halfheight if self.window_halfheight is not None else height // 8
        tau = self.temperature if self.temperature is not None else math.sqrt(channels)
        if not (0 <= r < height):
            raise ValueError(f"window half-height {r} out of range for H'={height}")
        if not (tau > 0 and math.isfinite(tau)):
            raise ValueError(f"temperature must be finite positive, got {tau}")
        return r, tau


@dataclass
class QkvParams:
    q: nn.Conv2dParams
    k: nn.Conv2dParams
    v: nn.Conv2dParams

    def parameters(self) -> list[Tensor]:
        return self.q.parameters() + self.k.parameters() + self.v.parameters()

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for tag, p in (("q", self.q), ("k", self.k), ("v", self.v)):
            out.update(p.named_parameters(f"{prefix}.{tag}"))
        return out


def eca_attend(anchor_feat: Tensor, aux_feats: list[Tensor], qkv: QkvParams, cfg: EcaConfig) -> Tensor:
    """Residual windowed cross-view attention.

    anchor_feat and every aux feature are (B, C, H, W). Each anchor pixel
    attends to same-column pixels of each auxiliary view within +-r rows;
    softmax normalizes per (pixel, view); the weighted values are added to
    the anchor feature.
    """
    shape = anchor_feat.shape
    for f in aux_feats:
        if f.shape != shape:
            raise ad.ShapeError(f"aux feature shape {f.shape} != anchor {shape}")
    b, c, h, w = shape
    r, tau = cfg.resolve(c, h)
    offsets = list(range(-r, r + 1))
    q = nn.conv2d_forward(qkv.q, anchor_feat)
    out = anchor_feat
    ys = np.arange(h)
    for aux in aux_feats:
        k = nn.conv2d_forward(qkv.k, aux)
        v = nn.conv2d_forward(qkv.v, aux)
        scores = []
        for d in offsets:
            k_d = ad.shift2d(k, -d, 0)  # k_d(y, x) = k(y + d, x)
            s = (q * k_d).sum(axis=1) * (1.0 / tau)  # (B, H, W)
            valid = ((ys + d >= 0) & (ys + d < h)).astype(np.float64)
            s = s + Tensor((valid[:, None] - 1.0) * 1e30)  # -1e30 outside image
            scores.append(s)
        weights = ad.softmax(ad.stack(scores, axis=0), axis=0)  # (D, B, H, W)
        gathered = ad.stack([ad.shift2d(v, -d, 0) for d in offsets], axis=0)  # (D, B, C, H, W)
        w_exp = weights.reshape((len(offsets), b, 1, h, w))
        out = out + (ad.broadcast_to(w_exp, gathered.shape) * gathered).sum(axis=0)
    return out


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int = 64
    channels: tuple = (64, 128, 256, 512)  # two backbone + two fusion blocks
    mask_resolution: int = 64
    eca: EcaConfig = field(default_factory=EcaConfig)


class MaskEncoder:
    """Shared-backbone multi-view mask encoder with windowed cross attention."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c0, c1, c2, c3 = cfg.channels
        self.cfg = cfg
        self.backbone = [
            nn.conv2d_init(1, c0, rng=rng, name="enc.b0"),
            nn.conv2d_init(c0, c1, rng=rng, name="enc.b1"),
        ]
        self.qkv = QkvParams(
            q=nn.conv2d_init(c1, c1, kernel=1, stride=1, pad=0, rng=rng, name="enc.q"),
            k=nn.conv2d_init(c1, c1, kernel=1, stride=1, pad=0, rng=rng, name="enc.k"),
            v=nn.conv2d_init(c1, c1, kernel=1, stride=1, pad=0, rng=rng, name="enc.v"),
        )
        self.fusion = [
            nn.conv2d_init(c1, c2, rng=rng, name="enc.f0"),
            nn.conv2d_init(c2, c3, rng=rng, name="enc.f1"),
        ]
        self.head = nn.mlp_init([c3, cfg.latent_dim], activation="none", rng=rng, name="enc.head")

    def featurize(self, masks: Tensor) -> Tensor:
        """(B, V, H, W) binary masks -> per-view features (B, V, C, H', W')."""
        b, v, h, w = masks.shape
        x = masks.reshape((b * v, 1, h, w))
        for blk in self.backbone:
            x = ad.relu(nn.conv2d_forward(blk, x))
        _, c, hp, wp = x.shape
        return x.reshape((b, v, c, hp, wp))

    def encode_batch(self, masks: np.ndarray) -> Tensor:
        """(B, V, H, W) masks -> (B, L) codes; V = 1 skips attention."""
        masks = np.asarray(masks, dtype=np.float64)
        if masks.ndim != 4 or masks.shape[1] < 1:
            raise ValueError(f"expected (B, V, H, W) masks with V >= 1, got {masks.shape}")
        feats = self.featurize(Tensor(masks))
        b, v, c, hp, wp = feats.shape
        anchor = self.cfg.eca.anchor
        f0 = feats[:, anchor]
        if v > 1:
            aux = [feats[:, i] for i in range(v) if i != anchor]
            fused = eca_attend(f0, aux, self.qkv, self.cfg.eca)
        else:
            fused = f0
        x = fused
        for blk in self.fusion:
            x = ad.relu(nn.conv2d_forward(blk, x))
        pooled = x.mean(axis=(2, 3))  # (B, C3)
        return nn.mlp_forward(self.head, pooled)

    def encode(self, masks) -> Tensor:
        """List/array of V masks (H, W) -> one latent code (L,)."""
        masks = np.asarray(masks, dtype=np.float64)
        if masks.ndim != 3 or len(masks) < 1:
            raise ValueError("encode() expects a non-empty list of (H, W) masks")
        return self.encode_batch(masks[None])[0]

    def parameters(self) -> list[Tensor]:
        out = []
        for blk in self.backbone + self.fusion:
            out.extend(blk.parameters())
        out.extend(self.qkv.parameters())
        out.extend(self.head.parameters())
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.backbone):
            out.update(blk.named_parameters(f"enc.backbone.{i}"))
        out.update(self.qkv.named_parameters("enc.qkv"))
        for i, blk in enumerate(self.fusion):
            out.update(blk.named_parameters(f"enc.fusion.{i}"))
        out.update(self.head.named_parameters("enc.head"))
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters().items():
            t.data = tensors[name].copy()


# -- pretraining ---------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_shapes: int = 24
    points_per_shape: int = 160
    lr_net: float = 1e-3
    lr_codes: float = 1e-3
    lr_final_scale: float = 1.0  # <1 enables linear decay toward lr * scale
    reg_weight: float = 1e-4  # code-norm penalty weight
    code_init_std: float = 0.01
    code_norm_cap: float = 10.0
    seed: int = 0
    log_every: int = 50


@dataclass
class PretrainResult:
    model: ConditionalSdf
    codes: np.ndarray  # (n_train, L) final per-shape codes
    code_ids: list[str]
    encoder: MaskEncoder | None
    log: list[tuple]  # (step, l1, reg, total); reg is raw mean |z|^2
    final_l1: float

    @property
    def mean_code(self) -> np.ndarray:
        return self.codes.mean(axis=0)

    def code_for(self, shape_id: str) -> np.ndarray:
        return self.codes[self.code_ids.index(shape_id)]

    def log_csv(self) -> str:
        lines = ["step,l1,reg,total"]
        lines += [f"{s},{l1!r},{reg!r},{tot!r}" for s, l1, reg, tot in self.log]
        return "\n".join(lines) + "\n"


def pretrain(
    model: ConditionalSdf,
    dataset,
    cfg: PretrainConfig,
    encoder: MaskEncoder | None = None,
) -> PretrainResult:
    """L1-plus-regularizer training on exact SDF samples.

    ``dataset`` is a ``dataset.Dataset``; only its train split is used.
    With an encoder, codes come from each shape's masks end-to-end;
    otherwise codes are free auto-decoder variables.
    """
    ids = dataset.train_ids
    if not ids:
        raise ValueError("dataset has no training shapes")
    rng = np.random.default_rng(cfg.seed)
    records = [dataset.records[i] for i in ids]
    pts = [r.samples.points for r in records]
    dst = [np.clip(r.samples.distances, -model.cfg.clamp, model.cfg.clamp) for r in records]
    mask_stack = None
    if encoder is not None:
        mask_stack = np.stack([np.stack(r.masks).astype(np.float64) for r in records])

    latent_dim = model.cfg.latent_dim
    codes = Tensor(rng.normal(0.0, cfg.code_init_std, (len(ids), latent_dim)), requires_grad=True, name="codes")
    opt_net = Adam(model.parameters(), lr=cfg.lr_net)
    if mask_stack is not None:
        opt_codes = Adam(encoder.parameters(), lr=cfg.lr_codes)
    else:
        opt_codes = Adam([codes], lr=cfg.lr_codes)

    log: list[tuple] = []
    b = min(cfg.batch_shapes, len(ids))
    p = cfg.points_per_shape
    for step in range(cfg.steps):
        if cfg.lr_final_scale != 1.0:
            frac = step / max(cfg.steps - 1, 1)
            decay = 1.0 + (cfg.lr_final_scale - 1.0) * frac
            opt_net.lr = cfg.lr_net * decay
            opt_codes.lr = cfg.lr_codes * decay
        sel = rng.choice(len(ids), size=b, replace=False)
        pt_idx = [rng.integers(0, len(dst[s]), size=p) for s in sel]
        x = np.concatenate([pts[s][ix] for s, ix in zip(sel, pt_idx)])
        target = np.concatenate([dst[s][ix] for s, ix in zip(sel, pt_idx)])
        if mask_stack is not None:
            z_b = encoder.encode_batch(mask_stack[sel])  # (b, L)
        else:
            z_b = ad.gather_rows(codes, sel)
        z_rows = ad.gather_rows(z_b, np.repeat(np.arange(b), p))
        try:
            f = model.eval_rows(z_rows, Tensor(x))
            l1 = ad.absolute(f - Tensor(target)).mean()
            reg = (z_b * z_b).sum(axis=1).mean()
            total = l1 + cfg.reg_weight * reg
            total.backward()
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"pretraining diverged at step {step}: {exc}") from exc
        opt_net.step()
        opt_codes.step()
        opt_net.zero_grad()
        opt_codes.zero_grad()
        if mask_stack is None:
            _cap_rows(codes, cfg.code_norm_cap)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append((step, float(l1.data), float(reg.data), float(total.data)))

    if mask_stack is not None:
        with ad.no_grad():
            final_codes = np.concatenate(
                [encoder.encode_batch(mask_stack[lo : lo + 16]).data for lo in range(0, len(ids), 16)]
            )
    else:
        final_codes = codes.data.copy()
    return PretrainResult(
        model=model,
        codes=final_codes,
        code_ids=list(ids),
        encoder=encoder if mask_stack is not None else None,
        log=log,
        final_l1=log[-1][1],
    )


def fit_code(
    model: ConditionalSdf,
    points: np.ndarray,
    distances: np.ndarray,
    steps: int = 400,
    lr: float = 1e-2,
    reg_weight: float = 1e-4,
    init: np.ndarray | None = None,
    batch: int = 1024,
    seed: int = 0,
) -> np.ndarray:
    """Auto-decoder inference: optimize one code against SDF samples (frozen net)."""
    rng = np.random.default_rng(seed)
    target_all = np.clip(distances, -model.cfg.clamp, model.cfg.clamp)
    z = Tensor(
        init.copy() if init is not None else np.zeros(model.cfg.latent_dim),
        requires_grad=True,
        name="code",
    )
    opt = Adam([z], lr=lr)
    for _ in range(steps):
        ix = rng.integers(0, len(points), size=min(batch, len(points)))
        f = model.evaluate(z, points[ix])
        loss = ad.absolute(f - Tensor(target_all[ix])).mean() + reg_weight * (z * z).sum()
        loss.backward()
        opt.step()
        opt.zero_grad()
    return z.data.copy()


def sdf_mae(model: ConditionalSdf, z: np.ndarray, points: np.ndarray, distances: np.ndarray) -> float:
    """Mean |f - clamped target| in cube units."""
    f = model.evaluate_np(z, points)
    target = np.clip(distances, -model.cfg.clamp, model.cfg.clamp)
    return float(np.mean(np.abs(f - target)))


def _cap_rows(codes: Tensor, cap: float) -> None:
    norms = np.linalg.norm(codes.data, axis=1, keepdims=True)
    scale = np.minimum(1.0, cap / np.maximum(norms, 1e-12))
    codes.data = codes.data * scale
