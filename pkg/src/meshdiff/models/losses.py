"""Diffusion reconstruction loss, mesh geometry losses and their gradients.

Geometry losses accept ``(V, 3)`` meshes or ``(B, V, 3)`` batches sharing one
topology; batched calls return per-sample values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..diffusion import MeshSample, NoiseSchedule, forward_sample
from ..geometry import MeshToPoseMap, MeshTopology

logger = logging.getLogger(__name__)

TARGET_MODES = ("epsilon", "step_difference")
_EDGE_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_v: float = 1.0
    lambda_j: float = 1.0
    lambda_n: float = 0.1
    lambda_e: float = 1.0

    def __post_init__(self):
        for name in ("lambda_v", "lambda_j", "lambda_n", "lambda_e"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


class GeometryLosses(NamedTuple):
    L_v: float | np.ndarray
    L_j: float | np.ndarray
    L_n: float | np.ndarray
    L_e: float | np.ndarray


def _verts(x):
    return np.asarray(getattr(x, "vertices", x), dtype=np.float64)


def face_normals(gt: np.ndarray, topo: MeshTopology):
    """Unit ground-truth face normals and a mask of non-degenerate faces."""
    F = topo.faces
    n = np.cross(gt[..., F[:, 1], :] - gt[..., F[:, 0], :], gt[..., F[:, 2], :] - gt[..., F[:, 0], :])
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    valid = norm[..., 0] > 1e-12
    return n / np.where(norm > 1e-12, norm, 1.0), valid


def degenerate_faces(gt, topo: MeshTopology) -> int:
    _, valid = face_normals(_verts(gt), topo)
    return int(np.sum(~valid))


def _face_edge_vectors(x, topo):
    F = topo.faces
    a, b, c = x[..., F[:, 0], :], x[..., F[:, 1], :], x[..., F[:, 2], :]
    return np.stack([b - a, c - b, a - c], axis=-2)  # (..., F, 3 edges, 3)


def geometry_losses(h0_hat, gt, topo: MeshTopology, f: MeshToPoseMap) -> GeometryLosses:
    return geometry_losses_and_grad(h0_hat, gt, topo, f, need_grad=False)[0]


def geometry_losses_and_grad(h0_hat, gt, topo: MeshTopology, f: MeshToPoseMap, need_grad: bool = True):
    """Losses and, if requested, their gradients with respect to ``h0_hat``."""
    x, y = _verts(h0_hat), _verts(gt)
    if x.shape != y.shape or x.shape[-2] != topo.V:
        raise ValueError(f"meshes {x.shape} / {y.shape} do not match topology with V={topo.V}")
    V, J = topo.V, f.J

    dv = x - y
    L_v = np.mean(np.abs(dv), axis=(-2, -1))
    dj = f.M @ dv
    L_j = np.mean(np.abs(dj), axis=(-2, -1))

    n_gt, valid = face_normals(y, topo)
    skipped = int(np.sum(~valid))
    if skipped:
        logger.warning("skipped %d degenerate ground-truth faces in the normal loss", skipped)
    e = _face_edge_vectors(x, topo)
    e_len = np.maximum(np.linalg.norm(e, axis=-1, keepdims=True), _EDGE_FLOOR)
    e_hat = e / e_len
    dots = np.sum(e_hat * n_gt[..., None, :], axis=-1)  # (..., F, 3)
    w = valid[..., None].astype(np.float64)
    count = np.sum(np.broadcast_to(w, dots.shape), axis=(-2, -1))
    count = np.maximum(count, 1.0)
    L_n = np.sum(np.abs(dots) * w, axis=(-2, -1)) / count

    E = topo.edges
    pe = x[..., E[:, 1], :] - x[..., E[:, 0], :]
    ge = y[..., E[:, 1], :] - y[..., E[:, 0], :]
    pl = np.linalg.norm(pe, axis=-1)
    gl = np.linalg.norm(ge, axis=-1)
    L_e = np.sum(np.abs(pl - gl), axis=-1) / max(len(E), 1)

    losses = GeometryLosses(*(float(v) if np.ndim(v) == 0 else v for v in (L_v, L_j, L_n, L_e)))
    if not need_grad:
        return losses, None

    g_v = np.sign(dv) / (V * 3)
    g_j = f.M.T @ (np.sign(dj) / (J * 3))

    cnt = np.asarray(count)[..., None, None, None]
    de = np.sign(dots)[..., None] * (n_gt[..., None, :] - dots[..., None] * e_hat) / e_len
    de = de * w[..., None] / cnt  # (..., F, 3, 3)
    g_n = np.zeros_like(x)
    F = topo.faces
    # edges (b - a), (c - b), (a - c)
    for col, (plus, minus) in enumerate(((1, 0), (2, 1), (0, 2))):
        _scatter(g_n, F[:, plus], de[..., col, :])
        _scatter(g_n, F[:, minus], -de[..., col, :])

    pe_hat = pe / np.maximum(pl, _EDGE_FLOOR)[..., None]
    dpe = np.sign(pl - gl)[..., None] * pe_hat / max(len(E), 1)
    g_e = np.zeros_like(x)
    _scatter(g_e, E[:, 1], dpe)
    _scatter(g_e, E[:, 0], -dpe)
    return losses, GeometryLosses(g_v, g_j, g_n, g_e)


def _scatter(out, idx, vals):
    # out[..., idx, :] += vals with repeated indices accumulated
    if out.ndim == 2:
        np.add.at(out, idx, vals)
    else:
        np.add.at(out, (slice(None), idx), vals)


def step_difference_target(h0, z, k, sched: NoiseSchedule):
    a0, a1 = sched.alphas[k - 1], sched.alphas[k]
    return (np.sqrt(a0) - np.sqrt(a1)) * h0 + (np.sqrt(1 - a0) - np.sqrt(1 - a1)) * z


def step_difference_to_eps(pred, hk, k, sched: NoiseSchedule):
    """Noise implied by a predicted ``h_{k-1} - h_k`` together with ``h_k``."""
    a0, a1 = sched.alphas[k - 1], sched.alphas[k]
    ca, cb = np.sqrt(a0) - np.sqrt(a1), np.sqrt(1 - a0) - np.sqrt(1 - a1)
    r, s = np.sqrt(a1), np.sqrt(1 - a1)
    return (pred - ca * hk / r) / (cb - ca * s / r)


def diffusion_loss(model, h0: MeshSample, k: int, z, sched: NoiseSchedule, context=None, target_mode="epsilon") -> float:
    if target_mode not in TARGET_MODES:
        raise ValueError(f"target_mode must be one of {TARGET_MODES}")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != h0.vertices.shape:
        raise ValueError(f"noise shape {z.shape} != sample shape {h0.vertices.shape}")
    hk = forward_sample(h0, k, sched, z)
    pred = model.evaluate(hk.vertices, k, context)
    if target_mode == "epsilon":
        target = z
    else:
        target = step_difference_target(h0.vertices, z, k, sched)
    return float(np.sum((target - pred) ** 2))


def total_loss(parts, weights: LossWeights) -> float:
    """``L_Diff + sum of weighted geometry terms``; ``parts`` is (L_diff, L_v, L_j, L_n, L_e)."""
    L_diff, L_v, L_j, L_n, L_e = parts
    return (
        L_diff
        + weights.lambda_v * L_v
        + weights.lambda_j * L_j
        + weights.lambda_n * L_n
        + weights.lambda_e * L_e
    )
