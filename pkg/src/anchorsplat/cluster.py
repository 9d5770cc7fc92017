"""Instance localization: union-find clustering over strong graph edges,
instance-map matching against ground-truth masks, and language feature
attachment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import AnchorGraph
from .losses import MaskSet, mean_mask_feature
from .render import Camera, render
from .scene import Scene


class UnionFind:
    """Disjoint sets over integer ids with path compression and union by rank."""

    def __init__(self, n: int):
        self.parent = np.arange(n)
        self.rank = np.zeros(n, dtype=int)

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return int(root)

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return
        if self.rank[ri] < self.rank[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        if self.rank[ri] == self.rank[rj]:
            self.rank[ri] += 1

    def compress_all(self) -> None:
        for i in range(len(self.parent)):
            self.find(i)

    def labels(self) -> np.ndarray:
        """Component label per element, numbered by first appearance."""
        self.compress_all()
        roots = self.parent
        _, labels = np.unique(roots, return_inverse=True)
        order = {}
        out = np.empty_like(labels)
        for i, lab in enumerate(labels):
            if lab not in order:
                order[lab] = len(order)
            out[i] = order[lab]
        return out


@dataclass
class InstanceCluster:
    anchor_ids: np.ndarray
    mean_feature: np.ndarray
    language_feature: np.ndarray | None = None
    best_matches: dict = field(default_factory=dict)   # view id -> (mask idx, score)

    @property
    def size(self) -> int:
        return len(self.anchor_ids)


def find_clusters(graph: AnchorGraph, scene: Scene,
                  weight_threshold: float | None = None) -> list[InstanceCluster]:
    """Union all edges with weight >= threshold and emit the connected
    components, skipping single-anchor components."""
    if weight_threshold is None:
        weight_threshold = scene.hyper.cluster_weight_threshold
    uf = UnionFind(scene.n_anchors)
    strong = graph.weights >= weight_threshold
    for a, b in zip(graph.i[strong], graph.j[strong]):
        uf.union(int(a), int(b))
    labels = uf.labels()
    clusters = []
    for lab in range(labels.max() + 1 if scene.n_anchors else 0):
        members = np.flatnonzero(labels == lab)
        if members.size <= 1:
            continue
        clusters.append(InstanceCluster(
            anchor_ids=members,
            mean_feature=scene.features[members].mean(axis=0)))
    return clusters


def iou_binary(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def matching_score(instance_map, mask, cluster_mean, mask_mean) -> float:
    """Overlap score discounted by feature distance:
    IoU * (1 - clamp(|cluster_mean - mask_mean|_1, 0, 1))."""
    l1 = float(np.sum(np.abs(np.asarray(cluster_mean) - np.asarray(mask_mean))))
    return iou_binary(instance_map, mask) * (1.0 - min(l1, 1.0))


def attach_language(scene: Scene, clusters: list[InstanceCluster],
                    cameras: list[Camera], masksets: list[MaskSet],
                    embeddings: list[list[np.ndarray]]) -> Scene:
    """Attach language features to cluster anchors.

    For each cluster and view, the cluster's binary instance map is scored
    against every mask; the best mask per view contributes its embedding,
    weighted by its score, and the normalized weighted mean is written to all
    member anchors. Clusters invisible in every view are left untouched and
    flagged via cluster.best_matches being empty.

    embeddings[view][mask_index] is the language vector of that mask.
    """
    out = scene.copy()
    feature_maps = [render(scene, cam, mode="feature").feature for cam in cameras]
    for cluster in clusters:
        accum = None
        for v, (cam, ms) in enumerate(zip(cameras, masksets)):
            imap = render(scene, cam, mode="instance",
                          subset=cluster.anchor_ids).instance
            if not imap.any():
                continue
            best_idx, best_score = -1, 0.0
            for m_idx, mask in enumerate(ms.masks):
                mask_mean = mean_mask_feature(feature_maps[v], mask)
                s = matching_score(imap, mask, cluster.mean_feature, mask_mean)
                if s > best_score:
                    best_idx, best_score = m_idx, s
            if best_idx < 0:
                continue
            cluster.best_matches[v] = (best_idx, best_score)
            vec = np.asarray(embeddings[v][best_idx], dtype=float)
            accum = best_score * vec if accum is None else accum + best_score * vec
        if accum is not None and np.linalg.norm(accum) > 0:
            lang = accum / np.linalg.norm(accum)
            cluster.language_feature = lang
            out.language_features[cluster.anchor_ids] = lang
            out.has_language[cluster.anchor_ids] = True
    out.version += 1
    return out


def cluster_report(clusters: list[InstanceCluster]) -> list[dict]:
    return [
        {
            "id": idx,
            "size": int(c.size),
            "anchor_ids": c.anchor_ids.tolist(),
            "mean_feature": c.mean_feature.tolist(),
            "best_matches": {str(v): {"mask": int(m), "score": float(s)}
                             for v, (m, s) in c.best_matches.items()},
            "has_language": c.language_feature is not None,
        }
        for idx, c in enumerate(clusters)
    ]


def save_cluster_report(clusters, path) -> None:
    Path(path).write_text(json.dumps(cluster_report(clusters)))
