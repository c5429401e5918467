"""Isosurface extraction and triangle-mesh utilities.

Marching cubes runs on a dense grid of decoder values (scikit-image,
Lewiner tables, linear edge interpolation); faces are reoriented so normals
align with the field gradient (outward for signed distances).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure


class NoSurface(Exception):
    """The zero-level set does not cross the sampled grid."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray  # (m, 3) int
    mm_per_unit: float | None = None

    def copy_with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(vertices=np.asarray(vertices, float), faces=self.faces, mm_per_unit=self.mm_per_unit)

    def volume(self) -> float:
        """Enclosed volume by the divergence theorem (orientation-agnostic)."""
        v = self.vertices
        t = v[self.faces]  # (m, 3, 3)
        signed = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])) / 6.0
        return float(abs(signed.sum()))

    def area(self) -> float:
        t = self.vertices[self.faces]
        return float(0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum())

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges()) + len(self.faces)

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two faces."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool((counts == 2).all())

    def drop_degenerate_faces(self, area_eps: float = 1e-14) -> "TriangleMesh":
        t = self.vertices[self.faces]
        areas = 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)
        return TriangleMesh(self.vertices, self.faces[areas > area_eps], self.mm_per_unit)

    def save_obj(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(obj_block(self.vertices) + obj_face_block(self.faces))


def obj_block(vertices: np.ndarray) -> str:
    return "".join(f"v {x:.9f} {y:.9f} {z:.9f}\n" for x, y, z in vertices)


def obj_face_block(faces: np.ndarray) -> str:
    return "".join(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in faces)


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(t) for t in line.split()[1:4]])
        elif line.startswith("f "):
            faces.append([int(t.split("/")[0]) - 1 for t in line.split()[1:4]])
    return TriangleMesh(np.array(verts), np.array(faces, int))


def sample_grid(model, z, grid_res: int, bounds: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Dense decoder values on a grid_res^3 lattice (index order x, y, z)."""
    axis = np.linspace(bounds[0], bounds[1], grid_res)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    return model.evaluate_np(z, pts).reshape(grid_res, grid_res, grid_res)


def marching_cubes_volume(values: np.ndarray, bounds: tuple[float, float] = (-1.0, 1.0)) -> TriangleMesh:
    """Triangulate the zero crossing of a sampled scalar field.

    Raises NoSurface when the field does not change sign. Faces are oriented
    so normals point along +gradient (outward when negative means inside).
    """
    if values.min() > 0.0 or values.max() < 0.0:
        raise NoSurface("field does not cross zero on the grid")
    spacing = (bounds[1] - bounds[0]) / (values.shape[0] - 1)
    verts, faces, _, _ = measure.marching_cubes(values, level=0.0, spacing=(spacing,) * 3)
    verts = verts + bounds[0]
    mesh = TriangleMesh(vertices=verts, faces=faces.astype(np.int64)).drop_degenerate_faces()
    return _orient_outward(mesh)


def _orient_outward(mesh: TriangleMesh) -> TriangleMesh:
    """Flip winding if needed so normals point outward (along +gradient).

    For a closed level set of a negative-inside field, outward orientation
    is exactly the one with positive signed volume.
    """
    t = mesh.vertices[mesh.faces]
    signed = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0
    if signed < 0:
        mesh = TriangleMesh(mesh.vertices, mesh.faces[:, [0, 2, 1]], mesh.mm_per_unit)
    return mesh


def extract_mesh(
    model,
    z: np.ndarray,
    grid_res: int = 64,
    bounds: tuple[float, float] = (-1.0, 1.0),
    mm_per_unit: float | None = None,
) -> TriangleMesh:
    """Marching cubes on the decoder's zero-level set."""
    if grid_res < 16:
        raise ValueError(f"grid resolution must be >= 16, got {grid_res}")
    values = sample_grid(model, z, grid_res, bounds)
    mesh = marching_cubes_volume(values, bounds)
    mesh.mm_per_unit = mm_per_unit
    return mesh
