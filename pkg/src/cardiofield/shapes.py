"""Parametric family of LV-like closed shapes with exact signed distances.

A shape is star-shaped about the origin: its surface is {r(u) * u : |u| = 1}
where the radial function r combines a truncated prolate-ellipsoid profile
(flattened toward the basal +z side), and m smooth deformation modes scaled
by per-shape weights. Signed distance is the exact Euclidean distance to the
surface (Gauss-Newton projection on the sphere, multi-start seeded), so it is
1-Lipschitz by construction; the sign comes from the star-shape containment
test |x| < r(x/|x|).

All geometry lives in normalized [-1, 1]^3 coordinates with a stored
mm-per-unit scale for physical reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

CUBE_HALF = 1.0  # shapes live in [-1, 1]^3
CUBE_SIZE = 2.0


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeFamilyConfig:
    """Generator settings for one analytic shape family."""

    mode_count: int = 6
    mean_radius: float = 0.52
    long_axis_ratio: float = 1.45  # polar semi-axis / equatorial semi-axis
    cap_flatten: float = 0.18  # basal flattening strength toward +z
    mode_scales: tuple = (0.07, 0.05, 0.04, 0.04, 0.04, 0.03)
    weight_clamp: float = 3.0
    mm_per_unit: float = 60.0

    def __post_init__(self):
        if len(self.mode_scales) < self.mode_count:
            raise ShapeError(
                f"need {self.mode_count} mode scales, got {len(self.mode_scales)}"
            )

    @classmethod
    def sphere(cls, radius: float = 0.8, pulse_scale: float = 0.1) -> "ShapeFamilyConfig":
        """Pure-sphere configuration: mode 0 is a uniform radial offset."""
        return cls(
            mode_count=1,
            mean_radius=radius,
            long_axis_ratio=1.0,
            cap_flatten=0.0,
            mode_scales=(pulse_scale,),
            weight_clamp=1.5,
        )


# deformation mode basis: smooth low-order polynomials on the unit sphere
def _mode_values(u: np.ndarray, m: int) -> np.ndarray:
    """(n, 3) unit directions -> (n, m) mode basis values."""
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    cols = [
        np.ones_like(ux),  # uniform inflation
        0.5 * (3.0 * uz * uz - 1.0),  # elongation
        ux * ux - uy * uy,  # cross-section ellipticity
        2.0 * ux * uy,  # cross-section shear
        uz,  # apex/base asymmetry
        ux,  # lateral bulge
    ]
    return np.stack(cols[:m], axis=1)


def _mode_grads(u: np.ndarray, m: int) -> np.ndarray:
    """Cartesian gradients of the mode basis, (n, m, 3)."""
    n = len(u)
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    z = np.zeros(n)
    grads = [
        np.stack([z, z, z], axis=1),
        np.stack([z, z, 3.0 * uz], axis=1),
        np.stack([2.0 * ux, -2.0 * uy, z], axis=1),
        np.stack([2.0 * uy, 2.0 * ux, z], axis=1),
        np.stack([z, z, np.ones(n)], axis=1),
        np.stack([np.ones(n), z, z], axis=1),
    ]
    return np.stack(grads[:m], axis=1)


@dataclass(frozen=True)
class AnalyticShape:
    """One member of the family: radial surface function plus exact SDF."""

    config: ShapeFamilyConfig
    weights: np.ndarray  # (mode_count,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)

    # -- radial surface function -----------------------------------------

    def radius(self, u: np.ndarray) -> np.ndarray:
        """Surface radius along unit directions u (n, 3) -> (n,)."""
        cfg = self.config
        u = np.atleast_2d(u)
        a = cfg.mean_radius
        b = cfg.mean_radius * cfg.long_axis_ratio
        g = (u[:, 0] ** 2 + u[:, 1] ** 2) / (a * a) + u[:, 2] ** 2 / (b * b)
        r = 1.0 / np.sqrt(g)
        if cfg.cap_flatten != 0.0:
            r = r * (1.0 - cfg.cap_flatten * (0.5 * (1.0 + u[:, 2])) ** 6)
        scales = np.asarray(cfg.mode_scales[: cfg.mode_count])
        r = r + _mode_values(u, cfg.mode_count) @ (scales * self.weights)
        return r

    def _radius_and_grad(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Radius and its Cartesian gradient (before tangential projection)."""
        cfg = self.config
        a = cfg.mean_radius
        b = cfg.mean_radius * cfg.long_axis_ratio
        g = (u[:, 0] ** 2 + u[:, 1] ** 2) / (a * a) + u[:, 2] ** 2 / (b * b)
        r_ell = g ** (-0.5)
        dg = np.stack(
            [2.0 * u[:, 0] / (a * a), 2.0 * u[:, 1] / (a * a), 2.0 * u[:, 2] / (b * b)],
            axis=1,
        )
        grad = -0.5 * g[:, None] ** (-1.5) * dg
        r = r_ell
        if cfg.cap_flatten != 0.0:
            t = 0.5 * (1.0 + u[:, 2])
            flat = 1.0 - cfg.cap_flatten * t**6
            dflat_duz = -cfg.cap_flatten * 3.0 * t**5
            grad = grad * flat[:, None]
            grad[:, 2] += r_ell * dflat_duz
            r = r_ell * flat
        scales = np.asarray(cfg.mode_scales[: cfg.mode_count])
        coef = scales * self.weights
        r = r + _mode_values(u, cfg.mode_count) @ coef
        grad = grad + np.einsum("nmk,m->nk", _mode_grads(u, cfg.mode_count), coef)
        return r, grad

    # -- containment and distance ----------------------------------------

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Exact star-shape containment: |x| < r(x/|x|)."""
        x = np.atleast_2d(x)
        nrm = np.linalg.norm(x, axis=1)
        u = np.where(nrm[:, None] > 1e-12, x / np.maximum(nrm, 1e-12)[:, None], [[0.0, 0.0, 1.0]])
        return nrm < self.radius(u)

    def project_to_surface(self, x: np.ndarray, iters: int = 18) -> np.ndarray:
        """Nearest surface point for each query (multi-start Gauss-Newton)."""
        return self._project(np.atleast_2d(x), iters)[0]

    def signed_distance(self, x: np.ndarray, iters: int = 18) -> np.ndarray:
        """Exact signed Euclidean distance, negative inside."""
        x = np.atleast_2d(x)
        _, dist = self._project(x, iters)
        sign = np.where(self.contains(x), -1.0, 1.0)
        return sign * dist

    def _project(self, x: np.ndarray, iters: int) -> tuple[np.ndarray, np.ndarray]:
        """Refine from several seeds, keep the per-point closest result.

        Multiple starts guard against Gauss-Newton landing in a non-global
        basin near the medial axis; distances must never be overestimated or
        the 1-Lipschitz guarantee breaks.
        """
        best_s = None
        best_d = None
        for u in self._seeds(x):
            s, d = self._refine(x, u, iters)
            if best_d is None:
                best_s, best_d = s, d
            else:
                better = d < best_d
                best_d = np.where(better, d, best_d)
                best_s = np.where(better[:, None], s, best_s)
        return best_s, best_d

    def _seeds(self, x: np.ndarray, extra: int = 3) -> list[np.ndarray]:
        """Starting directions: the query direction plus nearest bank dirs."""
        nrm = np.linalg.norm(x, axis=1)
        u0 = np.where(nrm[:, None] > 1e-12, x / np.maximum(nrm, 1e-12)[:, None], [[0.0, 0.0, 1.0]])
        bank = _dir_bank()
        surf = self.radius(bank)[:, None] * bank  # (K, 3)
        d_bank = np.linalg.norm(x[:, None, :] - surf[None, :, :], axis=2)  # (n, K)
        order = np.argsort(d_bank, axis=1)[:, :extra]
        return [u0] + [bank[order[:, j]] for j in range(extra)]

    def _refine(self, x: np.ndarray, u: np.ndarray, iters: int) -> tuple[np.ndarray, np.ndarray]:
        """Gauss-Newton with backtracking: min |x - r(u) u| over the sphere.

        The backtracking pass only ever accepts steps that reduce the
        residual, so the returned distance never exceeds the seed distance.
        """
        dist = np.linalg.norm(x - self.radius(u)[:, None] * u, axis=1)
        for _ in range(iters):
            r, grad = self._radius_and_grad(u)
            grad_t = grad - (grad * u).sum(axis=1, keepdims=True) * u  # tangential
            e1, e2 = _tangent_basis(u)
            res = x - r[:, None] * u
            j1 = (grad_t * e1).sum(axis=1)[:, None] * u + r[:, None] * e1
            j2 = (grad_t * e2).sum(axis=1)[:, None] * u + r[:, None] * e2
            a11 = (j1 * j1).sum(axis=1) + 1e-12
            a12 = (j1 * j2).sum(axis=1)
            a22 = (j2 * j2).sum(axis=1) + 1e-12
            b1 = (j1 * res).sum(axis=1)
            b2 = (j2 * res).sum(axis=1)
            det = a11 * a22 - a12 * a12
            d1 = (a22 * b1 - a12 * b2) / det
            d2 = (a11 * b2 - a12 * b1) / det
            step = (d1[:, None] * e1 + d2[:, None] * e2)
            moved = False
            for alpha in (1.0, 0.4, 0.15, 0.05):
                cand = u + alpha * step
                cand /= np.linalg.norm(cand, axis=1, keepdims=True)
                d_cand = np.linalg.norm(x - self.radius(cand)[:, None] * cand, axis=1)
                better = d_cand < dist
                if better.any():
                    u = np.where(better[:, None], cand, u)
                    dist = np.where(better, d_cand, dist)
                    moved = True
            if not moved:
                break
        return self.radius(u)[:, None] * u, dist

    def analytic_volume(self, n_theta: int = 256, n_phi: int = 256) -> float:
        """Volume via (1/3) * integral of r^3 over the sphere (quadrature)."""
        # Gauss-Legendre in cos(theta), trapezoid in phi
        nodes, wts = np.polynomial.legendre.leggauss(n_theta)
        phi = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
        ct = nodes
        st = np.sqrt(1.0 - ct**2)
        u = np.stack(
            [
                np.outer(st, np.cos(phi)).ravel(),
                np.outer(st, np.sin(phi)).ravel(),
                np.repeat(ct, n_phi),
            ],
            axis=1,
        )
        r3 = self.radius(u) ** 3
        w = np.repeat(wts, n_phi) * (2.0 * np.pi / n_phi)
        return float((r3 * w).sum() / 3.0)


_DIR_BANK: np.ndarray | None = None


def _dir_bank(k: int = 96) -> np.ndarray:
    """Fibonacci-sphere direction bank used to seed the projection."""
    global _DIR_BANK
    if _DIR_BANK is None:
        i = np.arange(k) + 0.5
        phi = np.pi * (3.0 - np.sqrt(5.0)) * i
        z = 1.0 - 2.0 * i / k
        s = np.sqrt(1.0 - z * z)
        _DIR_BANK = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    return _DIR_BANK


def _tangent_basis(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangent pairs for unit vectors u (vectorized)."""
    ref = np.zeros_like(u)
    smallest = np.abs(u).argmin(axis=1)
    ref[np.arange(len(u)), smallest] = 1.0
    e1 = ref - (ref * u).sum(axis=1, keepdims=True) * u
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    return e1, e2


def generate_shape(weights, config: ShapeFamilyConfig | None = None) -> AnalyticShape:
    """Instantiate one family member; weights are in +-weight_clamp std units."""
    config = config or ShapeFamilyConfig()
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (config.mode_count,):
        raise ShapeError(f"expected {config.mode_count} mode weights, got shape {w.shape}")
    if np.any(np.abs(w) > config.weight_clamp + 1e-12):
        raise ShapeError(f"mode weights exceed clamp {config.weight_clamp}: {w}")
    return AnalyticShape(config=config, weights=w)


# -- SDF sampling -----------------------------------------------------------


@dataclass
class SdfSamples:
    points: np.ndarray  # (n, 3)
    distances: np.ndarray  # (n,)


# DeepSDF-style perturbation scales, as fractions of the cube size
NEAR_SURFACE_SIGMAS = (0.0025, 0.025)


def sample_sdf(
    shape: AnalyticShape,
    n: int,
    strategy: str = "mixed",
    rng: np.random.Generator | None = None,
    near_fraction: float = 0.8,
) -> SdfSamples:
    """Draw SDF supervision points: near-surface + uniform mixture."""
    if n <= 0:
        raise ShapeError("sample count must be positive")
    if strategy not in ("near-surface", "uniform", "mixed"):
        raise ShapeError(f"unknown sampling strategy {strategy!r}")
    rng = rng or np.random.default_rng(0)
    if strategy == "near-surface":
        n_near, n_uni = n, 0
    elif strategy == "uniform":
        n_near, n_uni = 0, n
    else:
        n_near = int(round(near_fraction * n))
        n_uni = n - n_near
    chunks = []
    if n_near:
        u = _random_directions(rng, n_near)
        base = shape.radius(u)[:, None] * u
        half = n_near // 2
        sig = np.full(n_near, NEAR_SURFACE_SIGMAS[1] * CUBE_SIZE)
        sig[:half] = NEAR_SURFACE_SIGMAS[0] * CUBE_SIZE
        pts = base + rng.normal(size=(n_near, 3)) * sig[:, None]
        chunks.append(np.clip(pts, -CUBE_HALF, CUBE_HALF))
    if n_uni:
        chunks.append(rng.uniform(-CUBE_HALF, CUBE_HALF, size=(n_uni, 3)))
    points = np.concatenate(chunks, axis=0)
    distances = shape.signed_distance(points)
    return SdfSamples(points=points, distances=distances)


def _random_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# -- probe views and mask slicing --------------------------------------------


@dataclass(frozen=True)
class ProbeView:
    """Rigid+scale plane transform mapping image coords to 3D.

    A pixel at normalized plane coordinates p = (x, y) maps to
    scale * R @ [x, y, 0] + translation. Rows of the image index y,
    columns index x; both span [-1, 1] at pixel centers.
    """

    view_id: str
    rotation: np.ndarray  # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)
    scale: float
    height: int = 64
    width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-9) or np.linalg.det(self.rotation) < 0:
            raise ShapeError(f"view {self.view_id}: rotation not a proper rotation")
        if self.scale <= 0:
            raise ShapeError(f"view {self.view_id}: scale must be positive")

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) normalized plane coordinates of all pixel centers."""
        xs = -1.0 + (2.0 * np.arange(self.width) + 1.0) / self.width
        ys = -1.0 + (2.0 * np.arange(self.height) + 1.0) / self.height
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def to_3d(self, pixels: np.ndarray) -> np.ndarray:
        """Map (n, 2) plane coords to (n, 3) world points."""
        p3 = np.concatenate([pixels, np.zeros((len(pixels), 1))], axis=1)
        return self.scale * (p3 @ self.rotation.T) + self.translation


def long_axis_views(
    angles_deg=(0.0, 60.0, 90.0),
    ids=("a2c", "a3c", "a4c"),
    height: int = 64,
    width: int = 64,
    scale: float = 1.0,
) -> list[ProbeView]:
    """Apical-analog planes sharing the z (long) axis at the given rotations.

    In-plane x spans the short axis, in-plane y runs along the long axis.
    """
    views = []
    for view_id, deg in zip(ids, angles_deg):
        phi = np.deg2rad(deg)
        c0 = np.array([np.cos(phi), np.sin(phi), 0.0])  # image x
        c1 = np.array([0.0, 0.0, 1.0])  # image y = long axis
        c2 = np.cross(c0, c1)  # plane normal
        rot = np.stack([c0, c1, c2], axis=1)
        views.append(
            ProbeView(view_id=view_id, rotation=rot, translation=np.zeros(3), scale=scale, height=height, width=width)
        )
    return views


def slice_to_mask(shape: AnalyticShape, view: ProbeView) -> np.ndarray:
    """Rasterize the view plane: pixel is 1 iff its 3D point is inside."""
    if view.height < 8 or view.width < 8:
        raise ShapeError("mask resolution must be at least 8x8")
    pts = view.to_3d(view.pixel_centers())
    inside = shape.contains(pts)
    return inside.reshape(view.height, view.width).astype(np.uint8)
