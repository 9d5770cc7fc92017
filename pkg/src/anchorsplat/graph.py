"""Sparse anchor graph: intra-/inter-voxel edges, Gaussian-kernel weights,
Dirichlet energy with analytic gradient, and standalone smoothing.

Anchors of every level are binned into top-layer voxels (optionally scaled
for query graphs); intra edges form a clique inside each bin, inter edges
connect all anchor pairs across 26-neighboring bins. The edge weight
exp(-|F_i - F_j|^2 / (2 tau^2)) favors feature-similar neighbors and keeps
propagation from bleeding across object boundaries.
"""

from __future__ import annotations

from itertools import product
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .scene import Scene

EDGE_INTRA = 0
EDGE_INTER = 1
_KIND_NAMES = {EDGE_INTRA: "intra", EDGE_INTER: "inter"}


def edge_weight(f_i, f_j, tau: float):
    """Gaussian kernel affinity exp(-|f_i - f_j|^2 / (2 tau^2))."""
    if tau <= 0:
        raise InvalidInput("tau must be positive")
    diff = np.asarray(f_i, dtype=float) - np.asarray(f_j, dtype=float)
    sq = np.sum(diff * diff, axis=-1)
    return np.exp(-sq / (2.0 * tau * tau))


class AnchorGraph:
    """Undirected edge list over anchors with cached kernel weights."""

    def __init__(self, edges_i, edges_j, kinds, tau: float, voxel_size_scale: float):
        self.i = np.asarray(edges_i, dtype=int)
        self.j = np.asarray(edges_j, dtype=int)
        self.kinds = np.asarray(kinds, dtype=int)
        self.tau = float(tau)
        self.voxel_size_scale = float(voxel_size_scale)
        self.weights = np.zeros(self.i.shape[0])
        self._weight_version = -1

    @property
    def n_edges(self) -> int:
        return self.i.shape[0]

    def refresh_weights(self, features: np.ndarray) -> np.ndarray:
        """Recompute cached weights from the given anchor features."""
        self.weights = edge_weight(features[self.i], features[self.j], self.tau)
        return self.weights

    def neighbors_of(self, anchor_ids) -> np.ndarray:
        """All anchors sharing an edge with the given set, minus the set."""
        n = int(max(self.i.max(), self.j.max())) + 1 if self.n_edges else 0
        member = np.zeros(n, dtype=bool)
        ids = np.asarray(list(anchor_ids), dtype=int)
        member[ids[ids < n]] = True
        mi, mj = member[self.i], member[self.j]
        out = np.concatenate([self.j[mi & ~mj], self.i[mj & ~mi]])
        return np.unique(out)

    def dump(self, path) -> None:
        """Debug format: one line per edge, "i j kind w"."""
        lines = [f"{a} {b} {_KIND_NAMES[k]} {w:.17g}"
                 for a, b, k, w in zip(self.i, self.j, self.kinds, self.weights)]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def build_graph(scene: Scene, voxel_size_scale: float = 1.0) -> AnchorGraph:
    """Bin anchors into (scaled) top-layer voxels and connect intra-bin
    cliques plus all pairs across 26-neighbor bins."""
    if scene.n_anchors == 0:
        raise InvalidInput("cannot build a graph over an empty scene")
    side = scene.grid.top_voxel_size * voxel_size_scale
    ijk = np.floor((scene.positions - scene.grid.bounds_min) / side).astype(int)

    bins: dict[tuple[int, int, int], np.ndarray] = {}
    order = np.lexsort((ijk[:, 2], ijk[:, 1], ijk[:, 0]))
    sorted_ijk = ijk[order]
    change = np.flatnonzero(np.any(np.diff(sorted_ijk, axis=0) != 0, axis=1)) + 1
    starts = np.concatenate([[0], change, [len(order)]])
    for s, e in zip(starts[:-1], starts[1:]):
        bins[tuple(int(v) for v in sorted_ijk[s])] = order[s:e]

    src_parts, dst_parts, kind_parts = [], [], []
    for members in bins.values():
        if members.size > 1:
            ii, jj = np.triu_indices(members.size, k=1)
            src_parts.append(members[ii])
            dst_parts.append(members[jj])
            kind_parts.append(np.full(ii.size, EDGE_INTRA))
    neighbor_offsets = [d for d in product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    for key, members in bins.items():
        for off in neighbor_offsets:
            other = (key[0] + off[0], key[1] + off[1], key[2] + off[2])
            if other <= key:
                continue  # visit each unordered bin pair once
            others = bins.get(other)
            if others is None:
                continue
            a = np.repeat(members, others.size)
            b = np.tile(others, members.size)
            src_parts.append(np.minimum(a, b))
            dst_parts.append(np.maximum(a, b))
            kind_parts.append(np.full(a.size, EDGE_INTER))

    if src_parts:
        src = np.concatenate(src_parts)
        dst = np.concatenate(dst_parts)
        kinds = np.concatenate(kind_parts)
    else:
        src = dst = kinds = np.zeros(0, dtype=int)
    graph = AnchorGraph(src, dst, kinds, scene.hyper.tau, voxel_size_scale)
    graph.refresh_weights(scene.features)
    return graph


def dirichlet_energy(graph: AnchorGraph, F: np.ndarray, weights=None):
    """Smoothness energy over ordered pairs, sum_{i,j} w_ij |F_i - F_j|^2
    (each undirected edge counted twice), and its gradient with the weights
    held constant: grad_i = 4 * sum_j w_ij (F_i - F_j).

    Weights default to the kernel evaluated at F; pass `weights` to freeze
    them externally.
    """
    F = np.asarray(F, dtype=float)
    if weights is None:
        weights = graph.refresh_weights(F)
    diff = F[graph.i] - F[graph.j]
    sq = np.sum(diff * diff, axis=1)
    energy = float(2.0 * np.sum(weights * sq))
    grad = np.empty_like(F)
    contrib = 4.0 * weights[:, None] * diff
    n = F.shape[0]
    for ch in range(F.shape[1]):
        grad[:, ch] = (np.bincount(graph.i, weights=contrib[:, ch], minlength=n)
                       - np.bincount(graph.j, weights=contrib[:, ch], minlength=n))
    return energy, grad


def propagate(graph: AnchorGraph, F: np.ndarray, max_iters: int = 100,
              step: float = 0.05, rel_tol: float = 1e-8):
    """Gradient descent on the Dirichlet energy with backtracking halving.

    Weights are re-evaluated from the current features every iteration, so
    the evolving affinity keeps the smoothing edge-preserving. Returns the
    smoothed features and the energy trajectory (one entry per accepted
    step, starting with the initial energy).
    """
    if step <= 0:
        raise InvalidInput("step must be positive")
    F = np.asarray(F, dtype=float).copy()
    energy, grad = dirichlet_energy(graph, F)
    trajectory = [energy]
    for _ in range(max_iters):
        gnorm = np.linalg.norm(grad)
        if gnorm == 0:
            break
        s = step
        accepted = False
        for _ in range(30):
            candidate = F - s * grad
            cand_energy, cand_grad = dirichlet_energy(graph, candidate)
            if cand_energy <= energy:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        F, prev = candidate, energy
        energy, grad = cand_energy, cand_grad
        trajectory.append(energy)
        if prev > 0 and (prev - energy) / prev < rel_tol:
            break
        if prev == 0:
            break
    return F, trajectory
