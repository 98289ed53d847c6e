"""Mesh topology, the linear mesh-to-pose map, Procrustes alignment and metrics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "MeshTopology",
    "MeshToPoseMap",
    "MetricReport",
    "apply_map",
    "evaluate",
    "f_score",
    "mpjpe",
    "mpve",
    "pa_mpjpe",
    "procrustes_align",
]


def _face_edges(faces: np.ndarray) -> set[tuple[int, int]]:
    out = set()
    for a, b, c in faces:
        for i, j in ((a, b), (b, c), (c, a)):
            out.add((min(i, j), max(i, j)))
    return out


@dataclass(frozen=True, eq=False)
class MeshTopology:
    V: int
    edges: np.ndarray  # (E, 2) int
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "faces", faces)
        for name, idx in (("edges", edges), ("faces", faces)):
            if idx.size and (idx.min() < 0 or idx.max() >= self.V):
                raise ValueError(f"{name} reference vertices outside [0, {self.V})")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loop edge")
        missing = _face_edges(faces) - {(min(i, j), max(i, j)) for i, j in edges}
        if missing:
            raise ValueError(f"face edges absent from the edge list: {sorted(missing)[:5]}")

    @classmethod
    def from_faces(cls, V: int, faces) -> "MeshTopology":
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        edges = np.array(sorted(_face_edges(faces)), dtype=np.int64).reshape(-1, 2)
        return cls(V, edges, faces)

    @cached_property
    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.V, self.V), dtype=bool)
        adj[self.edges[:, 0], self.edges[:, 1]] = True
        adj[self.edges[:, 1], self.edges[:, 0]] = True
        return adj

    def __eq__(self, other):
        return (
            isinstance(other, MeshTopology)
            and self.V == other.V
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.faces, other.faces)
        )


@dataclass(frozen=True, eq=False)
class MeshToPoseMap:
    """Joint regressor: ``pose = M @ vertices`` applied to each coordinate column."""

    M: np.ndarray  # (J, V)

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        if M.ndim != 2:
            raise ValueError(f"regressor must be a (J, V) matrix, got shape {M.shape}")
        object.__setattr__(self, "M", M)

    @property
    def J(self) -> int:
        return self.M.shape[0]

    @property
    def V(self) -> int:
        return self.M.shape[1]

    @classmethod
    def convex(cls, groups, V: int, weights=None) -> "MeshToPoseMap":
        """Each joint the (default uniform) convex combination of a group of vertices."""
        M = np.zeros((len(groups), V))
        for j, grp in enumerate(groups):
            w = np.full(len(grp), 1.0 / len(grp)) if weights is None else np.asarray(weights[j], float)
            M[j, list(grp)] = w / w.sum()
        return cls(M)

    def is_convex(self) -> bool:
        return bool(np.all(self.M >= 0) and np.allclose(self.M.sum(axis=1), 1.0))

    def __call__(self, vertices):
        return apply_map(self, vertices)


def apply_map(f: MeshToPoseMap, vertices) -> np.ndarray:
    vertices = getattr(vertices, "vertices", vertices)
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape[-2] != f.V:
        raise ValueError(f"regressor expects {f.V} vertices, mesh has {vertices.shape[-2]}")
    return f.M @ vertices


def procrustes_align(pred, gt, return_params: bool = False):
    """Similarity transform of ``pred`` closest to ``gt`` in Frobenius norm.

    Returns ``s * pred @ R.T + t`` with ``det(R) = +1``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"expected matching (J, 3) arrays, got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 3:
        raise ValueError("Procrustes alignment needs at least 3 points")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    X = pred - mu_p
    Y = gt - mu_g
    U, S, Vt = np.linalg.svd(X.T @ Y)
    tol = 1e-12 * max(S[0], 1e-300)
    if np.sum(S > tol) < 2:
        logger.warning("rank-deficient configuration in Procrustes alignment (singular values %s)", S)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    norm_x = np.sum(X**2)
    s = float(np.trace(np.diag(S) @ D) / norm_x) if norm_x > 0 else 0.0
    t = mu_g - s * R @ mu_p
    aligned = s * pred @ R.T + t
    if return_params:
        return aligned, (s, R, t)
    return aligned


def _check_pair(pred, gt):
    pred = np.asarray(getattr(pred, "vertices", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "vertices", gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def mpve(pred_mesh, gt_mesh) -> float:
    pred, gt = _check_pair(pred_mesh, gt_mesh)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def mpjpe(pred_pose, gt_pose) -> float:
    pred, gt = _check_pair(pred_pose, gt_pose)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def pa_mpjpe(pred_pose, gt_pose) -> float:
    pred, gt = _check_pair(pred_pose, gt_pose)
    return mpjpe(procrustes_align(pred, gt), gt)


def f_score(pred_points, gt_points, threshold: float) -> float:
    """Harmonic mean of precision and recall at a distance threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("f_score needs non-empty point sets")
    dist = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=-1)
    precision = float(np.mean(dist.min(axis=1) < threshold))
    recall = float(np.mean(dist.min(axis=0) < threshold))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    mpve: float
    mpjpe: float
    pa_mpjpe: float
    f_at_small: float
    f_at_large: float

    def to_json(self, path, **extra) -> None:
        Path(path).write_text(json.dumps({**asdict(self), **extra}, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def write_csv(path, reports, index_name="instance") -> None:
        fields = ["mpve", "mpjpe", "pa_mpjpe", "f_at_small", "f_at_large"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([index_name, *fields])
            for idx, rep in reports:
                w.writerow([idx, *(repr(float(getattr(rep, k))) for k in fields)])


def evaluate(pred_mesh, gt_mesh, f: MeshToPoseMap, thresholds=(0.05, 0.15)) -> MetricReport:
    pred, gt = _check_pair(pred_mesh, gt_mesh)
    pj, gj = apply_map(f, pred), apply_map(f, gt)
    return MetricReport(
        mpve=mpve(pred, gt),
        mpjpe=mpjpe(pj, gj),
        pa_mpjpe=pa_mpjpe(pj, gj),
        f_at_small=f_score(pred, gt, thresholds[0]),
        f_at_large=f_score(pred, gt, thresholds[1]),
    )
