"""Scene data model: anchors, child Gaussians, the multi-resolution voxel grid,
point-cloud initialization and gradient-driven densification.

Anchors live at centers of occupied voxels on a 3-level grid (level 0 is the
coarsest). Each anchor owns k child Gaussians parameterized relative to its
voxel: world mean = x + offset * l, world scale = sigmoid(s_hat) * l, which
confines every child scale to (0, l).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInput

N_LEVELS = 3
BOUNDS_MARGIN = 0.05
MIN_EXTENT = 1e-6

# child Gaussian defaults used at anchor creation
INIT_OPACITY = 0.1
INIT_COLOR = (0.5, 0.5, 0.5)
# Children of every level start at the same world-space sigma, half the
# finest voxel size. Initializing at half the OWN voxel size instead makes
# coarse-level children several voxels fat, which inflates every rendered
# silhouette by the coarse sigma and wrecks instance-mask accuracy.
INIT_SCALE_FRACTION_FINEST = 0.5


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def quat_to_matrix(q):
    """Rotation matrices from unit quaternions (w, x, y, z). q shape (..., 4)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass
class Hyperparams:
    """Scene-level knobs. Loss weights, kernel temperature, grid geometry and
    the thresholds used by clustering / query growth / export."""

    lambda_in: float = 0.5
    lambda_is: float = 2.5
    lambda_ic: float = 0.25
    lambda_d: float = 50.0
    lambda_prop: float = 0.01
    tau: float = 0.05
    k: int = 5
    top_resolution: int = 200
    level_scale: int = 4
    grow_weight_threshold: float = 0.90
    text_margin: float = 0.1
    sim_opacity_min: float = 0.02
    densify_grad_percentile: float = 90.0
    cluster_weight_threshold: float = 0.90
    language_dim: int = 512

    def __post_init__(self):
        for name in ("lambda_in", "lambda_is", "lambda_ic", "lambda_d", "lambda_prop"):
            if getattr(self, name) < 0:
                raise InvalidInput(f"{name} must be >= 0")
        if self.tau <= 0:
            raise InvalidInput("tau must be > 0")
        for name in ("grow_weight_threshold", "cluster_weight_threshold",
                     "text_margin", "sim_opacity_min"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise InvalidInput(f"{name} must lie in (0, 1)")
        if self.k < 1 or self.top_resolution < 1 or self.level_scale < 1:
            raise InvalidInput("k, top_resolution and level_scale must be >= 1")
        if not 0 < self.densify_grad_percentile <= 100:
            raise InvalidInput("densify_grad_percentile must lie in (0, 100]")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ChildGaussian:
    """One Gaussian owned by an anchor, in voxel-relative parameterization."""

    offset: np.ndarray            # (3,) unitless, scaled by voxel size
    rel_scale: np.ndarray         # (3,) pre-squash logits
    rotation: np.ndarray          # (4,) unit quaternion (w, x, y, z)
    opacity: float
    color: np.ndarray             # (3,) in [0, 1]


@dataclass
class Anchor:
    """Voxel-centered semantic carrier with k child Gaussians."""

    position: np.ndarray          # (3,) world units, exact voxel center
    voxel_size: float
    level: int
    feature: np.ndarray           # (3,)
    children: list
    language_feature: np.ndarray | None = None


class MultiResGrid:
    """Three-level voxel hash over an axis-aligned box.

    Voxels are cubes; the top (level 0, coarsest) edge is max bounds extent /
    top_resolution and each finer level divides it by level_scale. Occupancy
    maps integer voxel coordinates to anchor ids, at most one per cell.
    """

    def __init__(self, bounds_min, bounds_max, top_resolution: int, level_scale: int):
        self.bounds_min = np.asarray(bounds_min, dtype=float).copy()
        self.bounds_max = np.asarray(bounds_max, dtype=float).copy()
        if np.any(self.bounds_max <= self.bounds_min):
            raise InvalidInput("grid bounds must have positive extent on every axis")
        self.top_resolution = int(top_resolution)
        self.level_scale = int(level_scale)
        self.occupancy: list[dict[tuple[int, int, int], int]] = [{} for _ in range(N_LEVELS)]

    @property
    def top_voxel_size(self) -> float:
        return float(np.max(self.bounds_max - self.bounds_min)) / self.top_resolution

    def voxel_size(self, level: int) -> float:
        return self.top_voxel_size / self.level_scale ** level

    def axis_counts(self, level: int) -> np.ndarray:
        extent = self.bounds_max - self.bounds_min
        top = np.maximum(np.ceil(extent / self.top_voxel_size - 1e-12).astype(int), 1)
        return top * self.level_scale ** level

    def voxel_index(self, points, level: int, clip: bool = True) -> np.ndarray:
        """Integer voxel coordinates of points at a level. With clip=True,
        coordinates are clamped into the grid (points on the upper boundary
        fall into the last voxel)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ijk = np.floor((pts - self.bounds_min) / self.voxel_size(level)).astype(int)
        if clip:
            ijk = np.clip(ijk, 0, self.axis_counts(level) - 1)
        return ijk

    def in_range(self, ijk, level: int) -> np.ndarray:
        ijk = np.atleast_2d(ijk)
        counts = self.axis_counts(level)
        return np.all((ijk >= 0) & (ijk < counts), axis=1)

    def voxel_center(self, ijk, level: int) -> np.ndarray:
        return self.bounds_min + (np.asarray(ijk, dtype=float) + 0.5) * self.voxel_size(level)

    def copy(self) -> "MultiResGrid":
        g = MultiResGrid(self.bounds_min, self.bounds_max, self.top_resolution, self.level_scale)
        g.occupancy = [dict(level_map) for level_map in self.occupancy]
        return g


class Scene:
    """Anchors plus grid plus hyperparameters, stored as flat arrays.

    Anchor id is the row index; anchor order is the canonical id order used
    by the scene file format. Mutating operations (densify, removal) return
    new Scene values.
    """

    def __init__(self, grid: MultiResGrid, hyper: Hyperparams):
        self.grid = grid
        self.hyper = hyper
        k = hyper.k
        self.positions = np.zeros((0, 3))
        self.voxel_sizes = np.zeros(0)
        self.levels = np.zeros(0, dtype=int)
        self.features = np.zeros((0, 3))
        self.language_features = np.zeros((0, hyper.language_dim))
        self.has_language = np.zeros(0, dtype=bool)
        self.child_offsets = np.zeros((0, k, 3))
        self.child_rel_scales = np.zeros((0, k, 3))
        self.child_rotations = np.zeros((0, k, 4))
        self.child_opacities = np.zeros((0, k))
        self.child_colors = np.zeros((0, k, 3))
        self.version = 0

    # ---- basic accessors -------------------------------------------------

    @property
    def n_anchors(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.hyper.k

    @property
    def n_children(self) -> int:
        return self.n_anchors * self.k

    def anchor(self, i: int) -> Anchor:
        children = [
            ChildGaussian(
                offset=self.child_offsets[i, c].copy(),
                rel_scale=self.child_rel_scales[i, c].copy(),
                rotation=self.child_rotations[i, c].copy(),
                opacity=float(self.child_opacities[i, c]),
                color=self.child_colors[i, c].copy(),
            )
            for c in range(self.k)
        ]
        lang = self.language_features[i].copy() if self.has_language[i] else None
        return Anchor(
            position=self.positions[i].copy(),
            voxel_size=float(self.voxel_sizes[i]),
            level=int(self.levels[i]),
            feature=self.features[i].copy(),
            children=children,
            language_feature=lang,
        )

    def set_features(self, features: np.ndarray) -> None:
        features = np.asarray(features, dtype=float)
        if features.shape != (self.n_anchors, 3):
            raise InvalidInput("feature array must be (n_anchors, 3)")
        self.features = features.copy()
        self.version += 1

    # ---- derived per-child geometry, flattened anchor-major ---------------

    def child_anchor_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_anchors), self.k)

    def child_means(self) -> np.ndarray:
        """World-space means, shape (A*k, 3): x + offset * l."""
        mu = self.positions[:, None, :] + self.child_offsets * self.voxel_sizes[:, None, None]
        return mu.reshape(-1, 3)

    def child_scales(self) -> np.ndarray:
        """World-space scales, shape (A*k, 3): sigmoid(s_hat) * l."""
        s = sigmoid(self.child_rel_scales) * self.voxel_sizes[:, None, None]
        return s.reshape(-1, 3)

    def child_covariances(self) -> np.ndarray:
        """World-space covariances R diag(s)^2 R^T, shape (A*k, 3, 3)."""
        q = self.child_rotations.reshape(-1, 4)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        R = quat_to_matrix(q / norms)
        s2 = self.child_scales() ** 2
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def flat_opacities(self) -> np.ndarray:
        return self.child_opacities.reshape(-1)

    def flat_colors(self) -> np.ndarray:
        return self.child_colors.reshape(-1, 3)

    def copy(self) -> "Scene":
        out = Scene(self.grid.copy(), self.hyper)
        for name in ("positions", "voxel_sizes", "levels", "features",
                     "language_features", "has_language", "child_offsets",
                     "child_rel_scales", "child_rotations", "child_opacities",
                     "child_colors"):
            setattr(out, name, getattr(self, name).copy())
        out.version = self.version
        return out

    # ---- construction ------------------------------------------------------

    def _spawn_anchors(self, cells: list[tuple[int, tuple[int, int, int]]],
                       rng: np.random.Generator) -> list[int]:
        """Append one anchor per (level, ijk) cell. Cells must be unoccupied.
        Returns the new anchor ids."""
        if not cells:
            return []
        k = self.k
        n_new = len(cells)
        levels = np.array([lvl for lvl, _ in cells], dtype=int)
        ijks = np.array([ijk for _, ijk in cells], dtype=int)
        sizes = np.array([self.grid.voxel_size(lvl) for lvl in levels])
        centers = self.grid.bounds_min + (ijks + 0.5) * sizes[:, None]

        new_ids = list(range(self.n_anchors, self.n_anchors + n_new))
        self.positions = np.vstack([self.positions, centers])
        self.voxel_sizes = np.concatenate([self.voxel_sizes, sizes])
        self.levels = np.concatenate([self.levels, levels])
        self.features = np.vstack([self.features, rng.uniform(0.0, 1.0, size=(n_new, 3))])
        self.language_features = np.vstack(
            [self.language_features, np.zeros((n_new, self.hyper.language_dim))])
        self.has_language = np.concatenate([self.has_language, np.zeros(n_new, dtype=bool)])

        self.child_offsets = np.vstack([self.child_offsets, np.zeros((n_new, k, 3))])
        # sigmoid(s_hat) * l == INIT_SCALE_FRACTION_FINEST * finest voxel size
        frac = (INIT_SCALE_FRACTION_FINEST
                / self.grid.level_scale ** (N_LEVELS - 1 - levels))
        s_hat = np.log(frac / (1.0 - frac))
        rel = np.repeat(s_hat[:, None, None], k, axis=1)
        self.child_rel_scales = np.vstack(
            [self.child_rel_scales, np.broadcast_to(rel, (n_new, k, 3)).copy()])
        quats = np.zeros((n_new, k, 4))
        quats[..., 0] = 1.0
        self.child_rotations = np.vstack([self.child_rotations, quats])
        self.child_opacities = np.vstack(
            [self.child_opacities, np.full((n_new, k), INIT_OPACITY)])
        self.child_colors = np.vstack(
            [self.child_colors, np.full((n_new, k, 3), INIT_COLOR)])

        for anchor_id, (lvl, ijk) in zip(new_ids, cells):
            self.grid.occupancy[lvl][tuple(int(v) for v in ijk)] = anchor_id
        self.version += 1
        return new_ids

    # ---- integrity ---------------------------------------------------------

    def validate(self, atol: float = 1e-9) -> None:
        """Raise if any structural invariant is broken. Intended for tests and
        post-mutation sanity checks."""
        seen = set()
        for lvl, level_map in enumerate(self.grid.occupancy):
            for ijk, anchor_id in level_map.items():
                if anchor_id in seen:
                    raise AssertionError("anchor referenced by two voxels")
                seen.add(anchor_id)
                if not 0 <= anchor_id < self.n_anchors:
                    raise AssertionError("occupancy references missing anchor")
                if self.levels[anchor_id] != lvl:
                    raise AssertionError("level mismatch between grid and anchor")
                center = self.grid.voxel_center(np.array(ijk), lvl)
                if not np.allclose(center, self.positions[anchor_id], atol=atol):
                    raise AssertionError("anchor is not at its voxel center")
        if len(seen) != self.n_anchors:
            raise AssertionError("grid occupancy does not cover all anchors")
        qn = np.linalg.norm(self.child_rotations, axis=-1)
        if not np.all(np.abs(qn - 1.0) < 1e-6):
            raise AssertionError("non-unit child quaternion")
        s = sigmoid(self.child_rel_scales) * self.voxel_sizes[:, None, None]
        if not (np.all(s > 0) and np.all(s < self.voxel_sizes[:, None, None])):
            raise AssertionError("child scale escaped (0, voxel_size)")

    # ---- scene file (JSON) ---------------------------------------------------

    def to_dict(self) -> dict:
        anchors = []
        for i in range(self.n_anchors):
            entry = {
                "x": self.positions[i].tolist(),
                "l": float(self.voxel_sizes[i]),
                "level": int(self.levels[i]),
                "f": self.features[i].tolist(),
                "children": [
                    {
                        "o": self.child_offsets[i, c].tolist(),
                        "s_hat": self.child_rel_scales[i, c].tolist(),
                        "q": self.child_rotations[i, c].tolist(),
                        "alpha": float(self.child_opacities[i, c]),
                        "c": self.child_colors[i, c].tolist(),
                    }
                    for c in range(self.k)
                ],
            }
            if self.has_language[i]:
                entry["f_clip"] = self.language_features[i].tolist()
            anchors.append(entry)
        return {
            "bounds": {"min": self.grid.bounds_min.tolist(),
                       "max": self.grid.bounds_max.tolist()},
            "hyper": self.hyper.to_dict(),
            "anchors": anchors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        hyper = Hyperparams.from_dict(d["hyper"])
        grid = MultiResGrid(d["bounds"]["min"], d["bounds"]["max"],
                            hyper.top_resolution, hyper.level_scale)
        scene = cls(grid, hyper)
        anchors = d["anchors"]
        n = len(anchors)
        k = hyper.k
        scene.positions = np.array([a["x"] for a in anchors], dtype=float).reshape(n, 3)
        scene.voxel_sizes = np.array([a["l"] for a in anchors], dtype=float)
        scene.levels = np.array([a["level"] for a in anchors], dtype=int)
        scene.features = np.array([a["f"] for a in anchors], dtype=float).reshape(n, 3)
        scene.language_features = np.zeros((n, hyper.language_dim))
        scene.has_language = np.zeros(n, dtype=bool)
        scene.child_offsets = np.zeros((n, k, 3))
        scene.child_rel_scales = np.zeros((n, k, 3))
        scene.child_rotations = np.zeros((n, k, 4))
        scene.child_opacities = np.zeros((n, k))
        scene.child_colors = np.zeros((n, k, 3))
        for i, a in enumerate(anchors):
            if len(a["children"]) != k:
                raise InvalidInput("every anchor must carry exactly k children")
            if "f_clip" in a:
                vec = np.asarray(a["f_clip"], dtype=float)
                if vec.shape != (hyper.language_dim,):
                    raise InvalidInput("language feature dimension mismatch")
                scene.language_features[i] = vec
                scene.has_language[i] = True
            for c, ch in enumerate(a["children"]):
                scene.child_offsets[i, c] = ch["o"]
                scene.child_rel_scales[i, c] = ch["s_hat"]
                scene.child_rotations[i, c] = ch["q"]
                scene.child_opacities[i, c] = ch["alpha"]
                scene.child_colors[i, c] = ch["c"]
        # rebuild occupancy from positions
        for i in range(n):
            lvl = int(scene.levels[i])
            ijk = grid.voxel_index(scene.positions[i], lvl)[0]
            key = tuple(int(v) for v in ijk)
            if key in grid.occupancy[lvl]:
                raise InvalidInput("two anchors share a voxel in scene file")
            grid.occupancy[lvl][key] = i
        return scene

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---- operations -------------------------------------------------------------


def compute_bounds(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tight AABB of the points, expanded by 5% per axis. Degenerate axes are
    widened to a minimum extent with a warning."""
    bmin = points.min(axis=0).astype(float)
    bmax = points.max(axis=0).astype(float)
    extent = bmax - bmin
    degenerate = extent < MIN_EXTENT
    if np.any(degenerate):
        warnings.warn("degenerate point bounds: expanding zero-extent axes")
        bmin = np.where(degenerate, bmin - MIN_EXTENT / 2, bmin)
        bmax = np.where(degenerate, bmax + MIN_EXTENT / 2, bmax)
        extent = bmax - bmin
    margin = BOUNDS_MARGIN * extent / 2
    return bmin - margin, bmax + margin


def voxelize_points(points, hyper: Hyperparams, rng=None, bounds=None) -> Scene:
    """Build a scene by voxelizing a point cloud at all three grid levels.

    Every voxel containing at least one point receives an anchor at its exact
    center, with k freshly initialized children and a random feature drawn
    from the given rng.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0 or points.shape[1] != 3:
        raise InvalidInput("points must be a non-empty (N, 3) array")
    rng = _as_rng(rng)
    if bounds is None:
        bmin, bmax = compute_bounds(points)
    else:
        bmin, bmax = (np.asarray(b, dtype=float) for b in bounds)
    grid = MultiResGrid(bmin, bmax, hyper.top_resolution, hyper.level_scale)
    scene = Scene(grid, hyper)
    cells = []
    cell_points = []
    for lvl in range(N_LEVELS):
        ijk = grid.voxel_index(points, lvl)
        keys = [tuple(int(v) for v in r) for r in ijk]
        by_cell: dict[tuple, list[int]] = {}
        for idx, key in enumerate(keys):
            by_cell.setdefault(key, []).append(idx)
        for key in sorted(by_cell):
            cells.append((lvl, key))
            cell_points.append(by_cell[key])
    new_ids = scene._spawn_anchors(cells, rng)
    # children start on the input points of their voxel, not at its center:
    # coarse-level voxel centers can sit well off the sampled geometry and
    # centered children would both escape supervision and bloat silhouettes
    k = hyper.k
    for anchor_id, point_ids in zip(new_ids, cell_points):
        picks = rng.choice(len(point_ids), size=k, replace=True)
        chosen = points[np.asarray(point_ids)[picks]]
        scene.child_offsets[anchor_id] = (
            (chosen - scene.positions[anchor_id]) / scene.voxel_sizes[anchor_id])
    return scene


def gaussian_params(anchor: Anchor, child_index: int) -> tuple[np.ndarray, np.ndarray]:
    """World mean and scale of one child: mu = x + o*l, s = sigmoid(s_hat)*l."""
    child = anchor.children[child_index]
    mu = anchor.position + np.asarray(child.offset, dtype=float) * anchor.voxel_size
    s = sigmoid(child.rel_scale) * anchor.voxel_size
    return mu, s


def covariance_from(q, s) -> np.ndarray:
    """Covariance R(q) diag(s)^2 R(q)^T. Non-unit quaternions are normalized
    with a warning."""
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise InvalidInput("zero quaternion")
    if abs(norm - 1.0) > 1e-6:
        warnings.warn("non-unit quaternion normalized in covariance_from")
        q = q / norm
    R = quat_to_matrix(q)
    return R @ np.diag(s ** 2) @ R.T


def densify(scene: Scene, grad_signal, threshold: float, rng=None) -> Scene:
    """Spawn new anchors where child Gaussians accumulate large gradients.

    For every child whose signal exceeds the threshold, a new anchor is
    proposed at the center of the voxel containing the child's world mean, at
    each of the three levels. Proposals into occupied (or out-of-grid) voxels
    are silently cancelled. Returns a new scene; the input is untouched.
    """
    signal = np.asarray(grad_signal, dtype=float).reshape(-1)
    if signal.shape[0] != scene.n_children:
        raise InvalidInput("grad_signal must cover every child Gaussian")
    rng = _as_rng(rng)
    out = scene.copy()
    hot = signal > threshold
    if not np.any(hot):
        return out
    mu = scene.child_means()[hot]
    cells = set()
    for lvl in range(N_LEVELS):
        ijk = out.grid.voxel_index(mu, lvl, clip=False)
        ok = out.grid.in_range(ijk, lvl)
        for row in ijk[ok]:
            key = tuple(int(v) for v in row)
            if key not in out.grid.occupancy[lvl]:
                cells.add((lvl, key))
    out._spawn_anchors(sorted(cells), rng)
    return out
