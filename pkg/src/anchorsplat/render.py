"""CPU splatting renderer.

Gaussians are projected with a local affine (EWA-style) approximation and
composited front to back per pixel. Rendering semantics, shared with the
naive reference renderer in the test suite:

  * Gaussians are sorted globally by view-space depth of their means.
  * t = alpha * exp(-0.5 * d^2) with d^2 the 2D Mahalanobis distance,
    truncated to 0 beyond 3 sigma (d^2 > 9).
  * a Gaussian contributes omega = t * T only while the accumulated
    transmittance T is still >= 1/255; afterwards the ray is terminated.

Pixel (ix, iy) samples the continuous image plane at exactly (ix, iy).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .scene import Scene

NEAR_PLANE = 0.01
COV2D_REG = 0.3          # pixel^2, added to every projected covariance
FOOTPRINT_SIGMA = 3.0    # truncation radius in standard deviations
TRANSMITTANCE_CUTOFF = 1.0 / 255.0
INSTANCE_THRESHOLD = 0.5


class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera rigid
    transform x_cam = R @ x_world + t."""

    def __init__(self, fx, fy, cx, cy, width, height, rotation=None, translation=None):
        if fx <= 0 or fy <= 0:
            raise InvalidInput("focal lengths must be positive")
        self.fx, self.fy, self.cx, self.cy = float(fx), float(fy), float(cx), float(cy)
        self.width, self.height = int(width), int(height)
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        self.translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidInput("rotation must be 3x3 and translation length 3")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise InvalidInput("rotation part must be orthonormal")

    def world_to_cam(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.rotation.T + self.translation

    def cam_to_world(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.translation) @ self.rotation

    def project_points(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and view-space depth of world points."""
        cam = self.world_to_cam(points)
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def unproject(self, pixel, depth: float) -> np.ndarray:
        """World point of a pixel at the given view-space depth."""
        px, py = pixel
        cam = np.array([(px - self.cx) / self.fx * depth,
                        (py - self.cy) / self.fy * depth,
                        depth])
        return self.cam_to_world(cam)[0]

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at `eye` looking toward `target`, +z forward, +y down."""
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward = forward / np.linalg.norm(forward)
        up = np.asarray(up, dtype=float)
        right = np.cross(forward, up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise InvalidInput("up vector parallel to view direction")
        right /= nr
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        t = -R @ eye
        cx = (width - 1) / 2 if cx is None else cx
        cy = (height - 1) / 2 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, rotation=R, translation=t)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   rotation=np.array(d["rotation"]), translation=np.array(d["translation"]))


def save_cameras(cameras, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras]))


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]


CULLED = None


def project_gaussian(camera: Camera, mu, cov):
    """Project one Gaussian. Returns (mean2d, cov2d, z) or None when culled
    (behind the near plane, or 3-sigma footprint outside the viewport)."""
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    cam = camera.world_to_cam(mu)[0]
    z = cam[2]
    if z <= NEAR_PLANE:
        return CULLED
    x, y = cam[0], cam[1]
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy
    J = np.array([[camera.fx / z, 0.0, -camera.fx * x / z ** 2],
                  [0.0, camera.fy / z, -camera.fy * y / z ** 2]])
    JW = J @ camera.rotation
    cov2d = JW @ cov @ JW.T + COV2D_REG * np.eye(2)
    radius = FOOTPRINT_SIGMA * np.sqrt(max(np.linalg.eigvalsh(cov2d)))
    if (u + radius < 0 or u - radius > camera.width - 1
            or v + radius < 0 or v - radius > camera.height - 1):
        return CULLED
    return np.array([u, v]), cov2d, float(z)


def _project_all(camera: Camera, mu, cov):
    """Vectorized projection of all Gaussians. Returns arrays (indices into
    the input kept after culling, sorted by ascending depth)."""
    cam = camera.world_to_cam(mu)
    z = cam[:, 2]
    keep = z > NEAR_PLANE
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return (np.zeros(0, dtype=int),) + tuple(np.zeros((0,)) for _ in range(6))
    x, y, z = cam[idx, 0], cam[idx, 1], cam[idx, 2]
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy

    # cov2d = (J R) cov (J R)^T with the projection Jacobian at each mean
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / z ** 2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / z ** 2
    JW = np.einsum("nij,jk->nik", J, camera.rotation)
    c2 = np.einsum("nij,njk,nlk->nil", JW, cov[idx], JW)
    a = c2[:, 0, 0] + COV2D_REG
    b = c2[:, 0, 1]
    c = c2[:, 1, 1] + COV2D_REG

    # closed-form max eigenvalue of [[a, b], [b, c]]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid ** 2 - (a * c - b * b), 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(mid + disc)

    vis = ((u + radius >= 0) & (u - radius <= camera.width - 1)
           & (v + radius >= 0) & (v - radius <= camera.height - 1))
    idx, u, v, z = idx[vis], u[vis], v[vis], z[vis]
    a, b, c, radius = a[vis], b[vis], c[vis], radius[vis]

    order = np.argsort(z, kind="stable")
    return idx[order], u[order], v[order], z[order], a[order], b[order], c[order], radius[order]


class BlendRecords:
    """Per-pixel blend lists stored as flat parallel arrays, ordered by
    (pixel, ascending depth). `gaussian` indexes the scene's flattened
    anchor-major child array."""

    def __init__(self, width, height, pixel, gaussian, t, omega, z):
        self.width, self.height = width, height
        self.pixel = pixel          # iy * width + ix
        self.gaussian = gaussian
        self.t = t
        self.omega = omega
        self.z = z

    def at(self, ix: int, iy: int) -> list[tuple[int, float, float, float]]:
        mask = self.pixel == iy * self.width + ix
        return list(zip(self.gaussian[mask].tolist(), self.t[mask].tolist(),
                        self.omega[mask].tolist(), self.z[mask].tolist()))


@dataclass
class RenderTargets:
    color: np.ndarray | None = None       # (H, W, 3)
    feature: np.ndarray | None = None     # (H, W, 3)
    depth: np.ndarray | None = None       # (H, W)
    instance: np.ndarray | None = None    # (H, W) bool
    records: BlendRecords | None = None


def _blend_pairs(camera: Camera, mu, cov, alpha):
    """Core rasterization: returns (pixel, gaussian, t, omega, z) flat arrays
    for every surviving (gaussian, pixel) contribution, ordered by pixel then
    depth. `gaussian` indexes the input arrays."""
    W, H = camera.width, camera.height
    idx, u, v, z, a, b, c, radius = _project_all(camera, mu, cov)
    empty = (np.zeros(0, dtype=int), np.zeros(0, dtype=int),
             np.zeros(0), np.zeros(0), np.zeros(0))
    if idx.size == 0:
        return empty

    # integer pixel bounding boxes, clipped to the viewport
    x0 = np.maximum(np.ceil(u - radius).astype(int), 0)
    x1 = np.minimum(np.floor(u + radius).astype(int), W - 1)
    y0 = np.maximum(np.ceil(v - radius).astype(int), 0)
    y1 = np.minimum(np.floor(v + radius).astype(int), H - 1)
    wx = x1 - x0 + 1
    wy = y1 - y0 + 1
    ok = (wx > 0) & (wy > 0)
    idx, u, v, z, a, b, c = idx[ok], u[ok], v[ok], z[ok], a[ok], b[ok], c[ok]
    x0, y0, wx, wy = x0[ok], y0[ok], wx[ok], wy[ok]
    if idx.size == 0:
        return empty

    counts = wx * wy
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    total = int(counts.sum())
    g = np.repeat(np.arange(idx.size), counts)              # row into the kept arrays
    within = np.arange(total) - np.repeat(offsets, counts)
    dx = within % np.repeat(wx, counts)
    dy = within // np.repeat(wx, counts)
    ix = x0[g] + dx
    iy = y0[g] + dy

    # Mahalanobis distance through the inverse 2x2 covariance
    det = a[g] * c[g] - b[g] ** 2
    rx = ix - u[g]
    ry = iy - v[g]
    d2 = (c[g] * rx ** 2 - 2 * b[g] * rx * ry + a[g] * ry ** 2) / det
    t = alpha[idx[g]] * np.exp(-0.5 * d2)
    live = (d2 <= FOOTPRINT_SIGMA ** 2) & (t > 0)
    g, ix, iy, t = g[live], ix[live], iy[live], t[live]

    pixel = iy * W + ix
    # order by pixel, then by the global depth rank (g is already depth-sorted)
    order = np.lexsort((g, pixel))
    pixel, g, t = pixel[order], g[order], t[order]

    # per-pixel exclusive transmittance in log space
    log_keep = np.log1p(-np.minimum(t, 1.0 - 1e-12))
    cs = np.cumsum(log_keep)
    excl = cs - log_keep                                    # sum of predecessors overall
    starts = np.concatenate([[0], np.flatnonzero(np.diff(pixel)) + 1])
    seg_base = np.repeat(excl[starts], np.diff(np.concatenate([starts, [pixel.size]])))
    T_before = np.exp(excl - seg_base)
    included = T_before >= TRANSMITTANCE_CUTOFF
    omega = t * T_before

    pixel, g = pixel[included], g[included]
    t, omega = t[included], omega[included]
    return pixel, idx[g], t, omega, z[g]


def render(scene: Scene, camera: Camera, mode: str = "color",
           want_records: bool = False, subset=None) -> RenderTargets:
    """Render the scene into the requested target.

    mode: "color" | "feature" | "depth" | "instance". Feature mode replaces
    child colors with the owning anchor's feature. Instance mode blends 1 for
    children of `subset` anchors and 0 for the rest, then thresholds at 0.5.
    """
    if mode not in ("color", "feature", "depth", "instance"):
        raise InvalidInput(f"unknown render mode {mode!r}")
    if mode == "instance" and subset is None:
        raise InvalidInput("instance mode needs an anchor subset")
    H, W = camera.height, camera.width
    out = RenderTargets()

    mu = scene.child_means()
    cov = scene.child_covariances()
    alpha = scene.flat_opacities()
    pixel, gauss, t, omega, z = _blend_pairs(camera, mu, cov, alpha)

    if want_records:
        out.records = BlendRecords(W, H, pixel, gauss, t, omega, z)

    anchor_of = scene.child_anchor_ids()
    npix = H * W
    if mode == "color":
        vals = scene.flat_colors()[gauss]
        img = np.stack([np.bincount(pixel, weights=omega * vals[:, ch], minlength=npix)
                        for ch in range(3)], axis=1)
        out.color = img.reshape(H, W, 3)
    elif mode == "feature":
        vals = scene.features[anchor_of[gauss]]
        img = np.stack([np.bincount(pixel, weights=omega * vals[:, ch], minlength=npix)
                        for ch in range(3)], axis=1)
        out.feature = img.reshape(H, W, 3)
    elif mode == "instance":
        member = np.zeros(scene.n_anchors, dtype=bool)
        subset = np.asarray(list(subset), dtype=int)
        if subset.size:
            member[subset] = True
        vals = member[anchor_of[gauss]].astype(float)
        blend = np.bincount(pixel, weights=omega * vals, minlength=npix)
        out.instance = (blend >= INSTANCE_THRESHOLD).reshape(H, W)
    elif mode == "depth":
        wsum = np.bincount(pixel, weights=omega, minlength=npix)
        zsum = np.bincount(pixel, weights=omega * z, minlength=npix)
        depth = np.zeros(npix)
        hit = wsum > 0
        depth[hit] = zsum[hit] / wsum[hit]
        out.depth = depth.reshape(H, W)
    return out


def render_depth(scene: Scene, camera: Camera) -> np.ndarray:
    return render(scene, camera, mode="depth").depth


def blend_weight_matrix(scene: Scene, camera: Camera):
    """Pixel-by-anchor sparse matrix W with W[p, a] = sum of blend weights of
    anchor a's children at pixel p, plus the raw per-child pair arrays.

    The rendered feature map is the linear map (W @ features).reshape(H, W, 3),
    which the objective module differentiates through.
    """
    from scipy import sparse

    mu = scene.child_means()
    cov = scene.child_covariances()
    alpha = scene.flat_opacities()
    pixel, gauss, t, omega, z = _blend_pairs(camera, mu, cov, alpha)
    anchor = scene.child_anchor_ids()[gauss]
    npix = camera.height * camera.width
    W = sparse.coo_matrix((omega, (pixel, anchor)),
                          shape=(npix, scene.n_anchors)).tocsr()
    records = BlendRecords(camera.width, camera.height, pixel, gauss, t, omega, z)
    return W, records
