"""Interactive selection: click queries via depth unprojection plus region
growing, text queries via language similarity, object removal with artifact
localization, and particle export for simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import InstanceCluster
from .errors import (
    InvalidInput,
    LanguageFeaturesMissing,
    NoGeometryAtPixel,
    WholeSceneRemoval,
)
from .graph import AnchorGraph, build_graph, edge_weight
from .render import Camera, render, render_depth
from .scene import Scene

QUERY_VOXEL_SCALE = 2.0

# Replacement anchors mark the region to inpaint after a removal, so they are
# spawned opaque and wide enough that their binary render blankets the hole;
# the faint defaults used for fresh scene anchors would render below the
# instance threshold and leave the artifact mask empty.
REPLACEMENT_OPACITY = 0.5
REPLACEMENT_SCALE_FRACTION = 0.7


@dataclass
class Selection:
    seeds: np.ndarray
    grown: np.ndarray
    query: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seeds = np.unique(np.asarray(self.seeds, dtype=int))
        self.grown = np.unique(np.asarray(self.grown, dtype=int))

    @property
    def anchor_ids(self) -> np.ndarray:
        return self.grown


def unproject_click(pixel, camera: Camera, depth_map: np.ndarray) -> np.ndarray:
    """Lift a clicked pixel to a world point using the rendered depth map."""
    px, py = int(pixel[0]), int(pixel[1])
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise InvalidInput("pixel outside the image")
    depth = float(depth_map[py, px])
    if depth <= 0:
        raise NoGeometryAtPixel(f"no rendered geometry at pixel ({px}, {py})")
    return camera.unproject((px, py), depth)


def grow_region(graph: AnchorGraph, seeds, threshold: float) -> np.ndarray:
    """Breadth-first closure over edges with weight strictly above the
    threshold. Deterministic and order-independent (fixed point of the
    closure)."""
    seeds = np.unique(np.atleast_1d(np.asarray(seeds, dtype=int)))
    strong = graph.weights > threshold
    if not np.any(strong):
        return seeds
    # symmetric CSR over the strong edges only
    src = np.concatenate([graph.i[strong], graph.j[strong]])
    dst = np.concatenate([graph.j[strong], graph.i[strong]])
    n = int(max(src.max(), dst.max(), seeds.max())) + 1
    order = np.argsort(src, kind="stable")
    src, dst = src[order], dst[order]
    indptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n))])

    selected = np.zeros(n, dtype=bool)
    selected[seeds] = True
    frontier = seeds
    while frontier.size:
        counts = indptr[frontier + 1] - indptr[frontier]
        total = int(counts.sum())
        if total == 0:
            break
        base = np.repeat(indptr[frontier], counts)
        gather = base + (np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts))
        neighbors = np.unique(dst[gather])
        fresh = neighbors[~selected[neighbors]]
        selected[fresh] = True
        frontier = fresh
    return np.flatnonzero(selected)


def click_query(scene: Scene, point, graph: AnchorGraph | None = None) -> Selection:
    """Seed at the anchor nearest to the clicked world point (ties broken by
    lowest id) and grow over the doubled-voxel query graph."""
    if scene.n_anchors == 0:
        raise InvalidInput("scene has no anchors")
    point = np.asarray(point, dtype=float)
    dist = np.linalg.norm(scene.positions - point, axis=1)
    seed = int(np.argmin(dist))  # argmin returns the lowest index on ties
    if graph is None:
        graph = build_graph(scene, voxel_size_scale=QUERY_VOXEL_SCALE)
    grown = grow_region(graph, [seed], scene.hyper.grow_weight_threshold)
    return Selection(seeds=np.array([seed]), grown=grown,
                     query={"kind": "click", "point": point.tolist()})


def text_query(scene: Scene, clusters: list[InstanceCluster], query_embedding,
               graph: AnchorGraph | None = None) -> Selection:
    """Seed every cluster whose language feature is within the similarity
    margin of the best cluster, then grow like a click query."""
    carriers = [c for c in clusters if c.language_feature is not None]
    if not carriers:
        raise LanguageFeaturesMissing("no cluster carries a language feature")
    q = np.asarray(query_embedding, dtype=float)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise InvalidInput("zero query embedding")
    sims = np.array([
        float(np.dot(q, c.language_feature)
              / (qn * np.linalg.norm(c.language_feature)))
        for c in carriers])
    eps = sims.max()
    chosen = [c for c, s in zip(carriers, sims) if s > eps - scene.hyper.text_margin]
    seeds = np.concatenate([c.anchor_ids for c in chosen])
    if graph is None:
        graph = build_graph(scene, voxel_size_scale=QUERY_VOXEL_SCALE)
    grown = grow_region(graph, seeds, scene.hyper.grow_weight_threshold)
    return Selection(seeds=seeds, grown=grown,
                     query={"kind": "text", "max_similarity": float(eps)})


def similarity_select(scene: Scene, seed_feature, threshold: float | None = None) -> np.ndarray:
    """Graph-free fallback: pick every anchor whose feature kernel affinity
    to the seed feature exceeds the growth threshold."""
    if threshold is None:
        threshold = scene.hyper.grow_weight_threshold
    w = edge_weight(scene.features, np.asarray(seed_feature, dtype=float),
                    scene.hyper.tau)
    return np.flatnonzero(w > threshold)


def remove_object(scene: Scene, selection: Selection,
                  cameras: list[Camera] | None = None,
                  n_new: int | None = 8, rng=None):
    """Delete the selected anchors, spawn replacement anchors inside the
    freed region, and localize the artifact area per view.

    Replacements go to the formerly occupied top-level voxel centers nearest
    the removed object's centroid (all of them when n_new is None). The
    artifact mask renders the replacements together with the removed set's
    graph neighbors. Returns (edited scene, list of artifact masks, info).
    """
    removed = np.unique(np.asarray(selection.grown, dtype=int))
    if removed.size == 0:
        raise InvalidInput("empty selection")
    if removed.size >= scene.n_anchors:
        raise WholeSceneRemoval("selection covers the whole scene")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng

    # neighbors in the training graph, before anything moves
    neighbor_old = build_graph(scene, voxel_size_scale=1.0).neighbors_of(removed)

    keep = np.setdiff1d(np.arange(scene.n_anchors), removed)
    new_id = np.full(scene.n_anchors, -1, dtype=int)
    new_id[keep] = np.arange(keep.size)

    out = Scene(scene.grid.copy(), scene.hyper)
    for name in ("positions", "features", "language_features", "child_offsets",
                 "child_rel_scales", "child_rotations", "child_opacities",
                 "child_colors"):
        setattr(out, name, getattr(scene, name)[keep].copy())
    out.voxel_sizes = scene.voxel_sizes[keep].copy()
    out.levels = scene.levels[keep].copy()
    out.has_language = scene.has_language[keep].copy()
    out.grid.occupancy = [
        {ijk: int(new_id[a]) for ijk, a in level.items() if new_id[a] >= 0}
        for level in scene.grid.occupancy
    ]
    out.version = scene.version + 1

    # freed top-level cells, ordered by distance to the removed centroid
    centroid = scene.positions[removed].mean(axis=0)
    cells = {tuple(int(v) for v in row)
             for row in scene.grid.voxel_index(scene.positions[removed], 0)}
    free = [c for c in sorted(cells) if c not in out.grid.occupancy[0]]
    free.sort(key=lambda c: float(np.linalg.norm(
        out.grid.voxel_center(np.array(c), 0) - centroid)))
    if n_new is not None:
        free = free[:n_new]
    new_ids = out._spawn_anchors([(0, c) for c in free], rng)
    if new_ids:
        sl = slice(new_ids[0], new_ids[-1] + 1)
        out.child_opacities[sl] = REPLACEMENT_OPACITY
        frac = REPLACEMENT_SCALE_FRACTION
        out.child_rel_scales[sl] = np.log(frac / (1.0 - frac))

    surviving_neighbors = (new_id[neighbor_old] if neighbor_old.size
                           else np.zeros(0, dtype=int))
    artifact_ids = np.concatenate([np.asarray(new_ids, dtype=int),
                                   surviving_neighbors[surviving_neighbors >= 0]])
    masks = []
    if cameras:
        for cam in cameras:
            masks.append(render(out, cam, mode="instance",
                                subset=artifact_ids).instance)
    info = {"removed": removed.tolist(), "replacements": list(new_ids),
            "neighbors": [int(new_id[a]) for a in neighbor_old if new_id[a] >= 0]}
    return out, masks, info


# simulation-side material constants recorded in export metadata
OBJECT_YOUNG = 2e8
OBJECT_POISSON = 0.4
BOUNDARY_YOUNG = 2e6
BOUNDARY_POISSON = 0.3


def export_selection(scene: Scene, selection: Selection,
                     alpha_min: float | None = None) -> str:
    """Particle export: one line per child Gaussian above the opacity floor,
    "x y z | 6 covariance entries (upper triangle) | alpha | r g b | tag".
    Selected anchors' children are tagged object, the rest boundary."""
    if alpha_min is None:
        alpha_min = scene.hyper.sim_opacity_min
    member = np.zeros(scene.n_anchors, dtype=bool)
    if selection.grown.size:
        member[selection.grown] = True

    mu = scene.child_means()
    cov = scene.child_covariances()
    alpha = scene.flat_opacities()
    color = scene.flat_colors()
    anchor_of = scene.child_anchor_ids()

    lines = [
        "# particle export for MLS-MPM style simulation",
        f"# object E={OBJECT_YOUNG:g} nu={OBJECT_POISSON:g}; "
        f"boundary E={BOUNDARY_YOUNG:g} nu={BOUNDARY_POISSON:g}",
        f"# alpha_min={alpha_min:g}",
    ]
    for idx in range(mu.shape[0]):
        if alpha[idx] <= alpha_min:
            continue
        tag = "object" if member[anchor_of[idx]] else "boundary"
        c = cov[idx]
        lines.append(
            f"{mu[idx, 0]:.9g} {mu[idx, 1]:.9g} {mu[idx, 2]:.9g} | "
            f"{c[0, 0]:.9g} {c[0, 1]:.9g} {c[0, 2]:.9g} "
            f"{c[1, 1]:.9g} {c[1, 2]:.9g} {c[2, 2]:.9g} | "
            f"{alpha[idx]:.9g} | "
            f"{color[idx, 0]:.9g} {color[idx, 1]:.9g} {color[idx, 2]:.9g} | {tag}")
    return "\n".join(lines) + "\n"


def save_selection(selection: Selection, path) -> None:
    import json
    Path(path).write_text(json.dumps({
        "seeds": selection.seeds.tolist(),
        "grown": selection.grown.tolist(),
        "query": selection.query,
    }))


def load_selection(path) -> Selection:
    import json
    d = json.loads(Path(path).read_text())
    return Selection(seeds=np.array(d["seeds"], dtype=int),
                     grown=np.array(d["grown"], dtype=int),
                     query=d.get("query", {}))
