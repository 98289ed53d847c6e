"""Procedural articulated meshes, context features and noisy pose priors.

Each template is a kinematic tree. Every joint carries a triangular ring of
three vertices in the plane normal to its bone; neighbouring rings are joined
by quad strips (two triangles per side) and leaf and root rings are capped.
The joint regressor takes each joint as its ring centroid, so ``f(mesh)``
reproduces the forward-kinematics joint positions exactly.

The context stands in for an image feature: one token per joint holding the
orthographic x/y projection of that joint (depth is dropped) plus a fixed
joint-index code, perturbed by seeded noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .diffusion import MeshSample
from .flatio import write_flat
from .geometry import MeshToPoseMap, MeshTopology
from .guidance import PriorDistribution

__all__ = [
    "TEMPLATES",
    "Dataset",
    "PoseSampler",
    "PriorSpec",
    "ProblemInstance",
    "build_dataset",
    "dataset_from_manifest",
    "generate_instance",
    "generate_prior",
    "template_skeleton",
]

RING = 3
INDEX_CODE = 6


@dataclass(frozen=True)
class Skeleton:
    name: str
    parents: tuple[int, ...]  # parents[0] == -1
    offsets: np.ndarray  # (n, 3) rest bone vector from parent, in the parent's frame
    radii: np.ndarray  # (n,)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_pose_params(self) -> int:
        return 3 * self.n_joints


def _chain():
    parents = (-1, 0, 1, 2, 3)
    offsets = np.array([[0, 0.0, 0]] + [[0, 0.4, 0]] * 4)
    radii = np.array([0.12, 0.11, 0.10, 0.09, 0.08])
    return Skeleton("chain", parents, offsets, radii)


def _biped():
    names = [
        ("pelvis", -1, (0, 0, 0), 0.14),
        ("spine", 0, (0, 0.25, 0), 0.13),
        ("chest", 1, (0, 0.25, 0), 0.14),
        ("head", 2, (0, 0.3, 0), 0.10),
        ("l_hip", 0, (0.12, -0.08, 0), 0.08),
        ("l_knee", 4, (0, -0.42, 0), 0.07),
        ("l_ankle", 5, (0, -0.4, 0), 0.05),
        ("r_hip", 0, (-0.12, -0.08, 0), 0.08),
        ("r_knee", 7, (0, -0.42, 0), 0.07),
        ("r_ankle", 8, (0, -0.4, 0), 0.05),
        ("l_shoulder", 2, (0.18, 0.18, 0), 0.06),
        ("l_elbow", 10, (0.28, 0, 0), 0.05),
        ("l_wrist", 11, (0.25, 0, 0), 0.04),
        ("r_shoulder", 2, (-0.18, 0.18, 0), 0.06),
        ("r_elbow", 13, (-0.28, 0, 0), 0.05),
        ("r_wrist", 14, (-0.25, 0, 0), 0.04),
    ]
    return Skeleton(
        "biped",
        tuple(p for _, p, _, _ in names),
        np.array([o for _, _, o, _ in names], dtype=float),
        np.array([r for *_, r in names]),
    )


def _hand():
    parents = [-1]
    offsets = [(0.0, 0.0, 0.0)]
    radii = [0.06]
    bases = [(-0.09, 0.05, 0.02), (-0.04, 0.16, 0), (0.0, 0.17, 0), (0.04, 0.16, 0), (0.08, 0.14, 0)]
    lengths = [(0.06, 0.05, 0.04), (0.07, 0.045, 0.03), (0.075, 0.05, 0.035), (0.07, 0.045, 0.03), (0.055, 0.035, 0.025)]
    for base, segs in zip(bases, lengths):
        parent = 0
        for i, length in enumerate(segs):
            parents.append(parent)
            offsets.append(base if i == 0 else (0.0, length, 0.0))
            radii.append(0.018 - 0.003 * i)
            parent = len(parents) - 1
    return Skeleton("hand", tuple(parents), np.array(offsets, dtype=float), np.array(radii) * 1.0)


TEMPLATES = {"chain": _chain, "biped": _biped, "hand": _hand}


def template_skeleton(name: str) -> Skeleton:
    try:
        return TEMPLATES[name]()
    except KeyError:
        raise ValueError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}") from None


def _ring_basis(direction):
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _local_bone_dirs(sk: Skeleton):
    dirs = np.zeros((sk.n_joints, 3))
    for j in range(sk.n_joints):
        o = sk.offsets[j]
        if np.linalg.norm(o) > 0:
            dirs[j] = o
        else:
            # root: align the ring with its first child bone
            kids = [c for c, p in enumerate(sk.parents) if p == j]
            dirs[j] = sk.offsets[kids[0]] if kids else np.array([0.0, 1.0, 0.0])
    return dirs


def topology_for(sk: Skeleton) -> MeshTopology:
    faces = []
    children = {j: [c for c, p in enumerate(sk.parents) if p == j] for j in range(sk.n_joints)}
    for j, p in enumerate(sk.parents):
        if p >= 0:
            for m in range(RING):
                a, b = RING * p + m, RING * p + (m + 1) % RING
                c, d = RING * j + (m + 1) % RING, RING * j + m
                faces.append((a, b, c))
                faces.append((a, c, d))
        if p < 0 or not children[j]:
            faces.append((RING * j, RING * j + 1, RING * j + 2))
    return MeshTopology.from_faces(RING * sk.n_joints, faces)


def regressor_for(sk: Skeleton) -> MeshToPoseMap:
    groups = [range(RING * j, RING * j + RING) for j in range(sk.n_joints)]
    return MeshToPoseMap.convex(groups, RING * sk.n_joints)


def forward_kinematics(sk: Skeleton, pose_params, scale: float = 1.0):
    """Joint positions ``(n, 3)`` and global rotations ``(n, 3, 3)``."""
    theta = np.asarray(pose_params, dtype=np.float64).reshape(sk.n_joints, 3)
    local = Rotation.from_rotvec(theta).as_matrix()
    G = np.zeros((sk.n_joints, 3, 3))
    P = np.zeros((sk.n_joints, 3))
    for j, p in enumerate(sk.parents):
        if p < 0:
            G[j] = local[j]
        else:
            G[j] = G[p] @ local[j]
            P[j] = P[p] + G[j] @ (scale * sk.offsets[j])
    return P, G


def pose_mesh(sk: Skeleton, pose_params, scale: float = 1.0) -> np.ndarray:
    P, G = forward_kinematics(sk, pose_params, scale)
    dirs = _local_bone_dirs(sk)
    verts = np.zeros((RING * sk.n_joints, 3))
    angles = 2 * np.pi * np.arange(RING) / RING
    for j in range(sk.n_joints):
        u, w = _ring_basis(dirs[j])
        ring = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * w
        verts[RING * j : RING * j + RING] = P[j] + scale * sk.radii[j] * ring @ G[j].T
    return verts


def _index_code(n_joints: int) -> np.ndarray:
    j = np.arange(n_joints)[:, None]
    freqs = np.array([1.0, 2.0, 4.0])[None, :] * np.pi / n_joints
    return np.concatenate([np.sin(j * freqs), np.cos(j * freqs)], axis=1)


def make_context(joints: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    proj = joints[:, :2] + noise * rng.standard_normal((joints.shape[0], 2))
    return np.concatenate([proj, _index_code(joints.shape[0])], axis=1)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    template: str
    topology: MeshTopology
    gt_mesh: MeshSample
    f: MeshToPoseMap
    context: np.ndarray  # (J, 2 + INDEX_CODE)
    pose_params: np.ndarray
    scale: float
    seed: int

    @property
    def V(self) -> int:
        return self.topology.V

    @property
    def gt_pose(self) -> np.ndarray:
        return self.f.M @ self.gt_mesh.vertices


def generate_instance(template: str, pose_params=None, scale: float = 1.0, seed: int = 0, context_noise: float = 0.01):
    sk = template_skeleton(template)
    if scale <= 0:
        raise ValueError("scale must be positive")
    if pose_params is None:
        pose_params = np.zeros(sk.n_pose_params)
    pose_params = np.asarray(pose_params, dtype=np.float64)
    if pose_params.shape != (sk.n_pose_params,):
        raise ValueError(f"{template} expects {sk.n_pose_params} pose parameters, got {pose_params.shape}")
    verts = pose_mesh(sk, pose_params, scale)
    f = regressor_for(sk)
    rng = np.random.default_rng(seed)
    ctx = make_context(f.M @ verts, rng, context_noise)
    return ProblemInstance(template, topology_for(sk), MeshSample(verts, 0), f, ctx, pose_params, float(scale), int(seed))


@dataclass(frozen=True, eq=False)
class PriorSpec:
    joint_noise_sigma: float = 0.05
    bias: np.ndarray | float = 0.0
    N: int = 25

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("PriorSpec.N must be >= 1")
        if self.joint_noise_sigma < 0:
            raise ValueError("joint_noise_sigma must be >= 0")


def generate_prior(instance: ProblemInstance, spec: PriorSpec, seed: int) -> PriorDistribution:
    rng = np.random.default_rng(seed)
    pose = instance.gt_pose
    bias = np.broadcast_to(np.asarray(spec.bias, dtype=np.float64), pose.shape)
    z = rng.standard_normal((spec.N,) + pose.shape)
    return PriorDistribution(pose + bias + spec.joint_noise_sigma * z, spec.joint_noise_sigma)


@dataclass(frozen=True)
class PoseSampler:
    """Independent Gaussian joint rotations; the root rotation is scaled separately."""

    std: float = 0.3
    root_std: float = 0.15

    def __call__(self, rng: np.random.Generator, n_params: int) -> np.ndarray:
        theta = self.std * rng.standard_normal(n_params)
        theta[:3] *= self.root_std / self.std if self.std > 0 else 0.0
        return theta


@dataclass
class Dataset:
    instances: list[ProblemInstance]
    train: list[int]
    test: list[int]
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)

    def split(self, name: str) -> list[ProblemInstance]:
        return [self.instances[i] for i in getattr(self, name)]

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def write_meshes(self, path) -> None:
        """Mesh then pose per instance in the flat layout (single template only)."""
        first = self.instances[0]
        if any(inst.V != first.V for inst in self.instances):
            raise ValueError("flat mesh dump needs a single vertex count")
        rec = np.stack([np.concatenate([i.gt_mesh.vertices.ravel(), i.gt_pose.ravel()]) for i in self.instances])
        write_flat(path, rec, first.V, first.f.J, 0)


def build_dataset(
    num_instances: int,
    templates=("chain",),
    pose_sampler: PoseSampler = PoseSampler(),
    seed: int = 0,
    scale: float = 1.0,
    test_fraction: float = 0.2,
    context_noise: float = 0.01,
) -> Dataset:
    if num_instances < 1:
        raise ValueError("num_instances must be >= 1")
    templates = [templates] if isinstance(templates, str) else list(templates)
    for t in templates:
        template_skeleton(t)
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(num_instances, dtype=np.uint32)]
    chosen = [templates[i % len(templates)] for i in range(num_instances)]
    n_test = int(round(test_fraction * num_instances)) if num_instances > 1 else 0
    order = np.random.default_rng(seed).permutation(num_instances)
    test = sorted(int(i) for i in order[:n_test])
    train = sorted(int(i) for i in order[n_test:])
    manifest = {
        "seed": int(seed),
        "num_instances": int(num_instances),
        "templates": chosen,
        "seeds": seeds,
        "pose_sampler": asdict(pose_sampler),
        "scale": float(scale),
        "context_noise": float(context_noise),
        "test_fraction": float(test_fraction),
        "split": {"train": train, "test": test},
    }
    return dataset_from_manifest(manifest)


def dataset_from_manifest(manifest) -> Dataset:
    if not isinstance(manifest, dict):
        manifest = json.loads(Path(manifest).read_text())
    sampler = PoseSampler(**manifest["pose_sampler"])
    instances = []
    for template, s in zip(manifest["templates"], manifest["seeds"]):
        rng = np.random.default_rng([s, 1])
        theta = sampler(rng, template_skeleton(template).n_pose_params)
        instances.append(generate_instance(template, theta, manifest["scale"], s, manifest["context_noise"]))
    split = manifest["split"]
    if set(split["train"]) & set(split["test"]):
        raise ValueError("train and test splits overlap")
    return Dataset(instances, list(split["train"]), list(split["test"]), dict(manifest))
