"""Scene primitives: anisotropic 3D Gaussians, pinhole cameras, datasets.

Conventions used throughout the package:
  * quaternions are (w, x, y, z) and store the camera-to-world / body-to-world
    rotation; they are normalized on construction.
  * camera space looks down +z, so depth of a point is its camera-space z.
  * pixel (ix, iy) has its center at (ix + 0.5, iy + 0.5) in image coordinates.
  * colors and opacities live in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

# Screen-space covariance regularizer: added to both diagonal entries after
# projection so every splat covers at least a fraction of a pixel.
COV2D_REG = 0.3


# ---------------------------------------------------------------------------
# quaternions


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidParameterError("quaternion norm too small to normalize")
    return q / n

def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (..., 4) wxyz -> rotation matrix (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def random_unit_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return normalize_quat(q)


def rot_to_quat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix (3, 3) -> unit quaternion wxyz (w >= 0)."""
    rot = np.asarray(rot, dtype=np.float64)
    tr = np.trace(rot)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (rot[2, 1] - rot[1, 2]) / s,
                      (rot[0, 2] - rot[2, 0]) / s,
                      (rot[1, 0] - rot[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + rot[i, i] - rot[j, j] - rot[k, k], 1e-12)) * 2.0
        q = np.empty(4)
        q[0] = (rot[k, j] - rot[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (rot[j, i] + rot[i, j]) / s
        q[1 + k] = (rot[k, i] + rot[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return normalize_quat(q)


# ---------------------------------------------------------------------------
# gaussians


@dataclass
class Gaussian3D:
    """A single anisotropic Gaussian primitive."""

    mean: np.ndarray      # (3,)
    quat: np.ndarray      # (4,) wxyz, unit
    scale: np.ndarray     # (3,) positive stddevs along local axes
    opacity: float        # [0, 1]
    color: np.ndarray     # (3,) rgb in [0, 1]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.quat = normalize_quat(np.asarray(self.quat, dtype=np.float64).reshape(4))
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.mean)):
            raise InvalidParameterError("gaussian mean must be finite")
        if np.any(self.scale <= 0.0) or not np.all(np.isfinite(self.scale)):
            raise InvalidParameterError("gaussian scales must be positive finite")
        if not (0.0 <= self.opacity <= 1.0):
            raise InvalidParameterError("opacity must lie in [0, 1]")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise InvalidParameterError("color channels must lie in [0, 1]")

    def covariance(self) -> np.ndarray:
        return covariance_from_rs(self.quat, self.scale)


class GaussianSet:
    """Structure-of-arrays collection of Gaussians.

    Arrays are float64 and owned by the set. Validation mirrors Gaussian3D.
    """

    __slots__ = ("means", "quats", "scales", "opacities", "colors")

    def __init__(self, means, quats, scales, opacities, colors, validate: bool = True):
        self.means = np.asarray(means, dtype=np.float64)
        self.quats = np.asarray(quats, dtype=np.float64)
        self.scales = np.asarray(scales, dtype=np.float64)
        self.opacities = np.asarray(opacities, dtype=np.float64)
        self.colors = np.asarray(colors, dtype=np.float64)
        n = len(self.means)
        shapes = (self.means.shape, self.quats.shape, self.scales.shape,
                  self.opacities.shape, self.colors.shape)
        if shapes != ((n, 3), (n, 4), (n, 3), (n,), (n, 3)):
            raise InvalidInputError(f"inconsistent gaussian array shapes: {shapes}")
        if validate:
            self.quats = normalize_quat(self.quats)
            if not np.all(np.isfinite(self.means)):
                raise InvalidParameterError("gaussian means must be finite")
            if np.any(self.scales <= 0.0) or not np.all(np.isfinite(self.scales)):
                raise InvalidParameterError("gaussian scales must be positive finite")
            if np.any(self.opacities < 0.0) or np.any(self.opacities > 1.0):
                raise InvalidParameterError("opacities must lie in [0, 1]")
            if np.any(self.colors < 0.0) or np.any(self.colors > 1.0):
                raise InvalidParameterError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianSet":
        gs = list(gaussians)
        return cls(
            np.stack([g.mean for g in gs]) if gs else np.zeros((0, 3)),
            np.stack([g.quat for g in gs]) if gs else np.zeros((0, 4)),
            np.stack([g.scale for g in gs]) if gs else np.zeros((0, 3)),
            np.array([g.opacity for g in gs]),
            np.stack([g.color for g in gs]) if gs else np.zeros((0, 3)),
        )

    @classmethod
    def concatenate(cls, sets) -> "GaussianSet":
        sets = list(sets)
        if not sets:
            raise InvalidInputError("cannot concatenate zero gaussian sets")
        return cls(
            np.concatenate([s.means for s in sets]),
            np.concatenate([s.quats for s in sets]),
            np.concatenate([s.scales for s in sets]),
            np.concatenate([s.opacities for s in sets]),
            np.concatenate([s.colors for s in sets]),
            validate=False,
        )

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.quats[i], self.scales[i],
                          float(self.opacities[i]), self.colors[i])

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.means.copy(), self.quats.copy(), self.scales.copy(),
                           self.opacities.copy(), self.colors.copy(), validate=False)

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(self.means[idx], self.quats[idx], self.scales[idx],
                           self.opacities[idx], self.colors[idx], validate=False)

    def allclose(self, other: "GaussianSet", atol: float = 0.0) -> bool:
        return (np.allclose(self.means, other.means, atol=atol)
                and np.allclose(self.quats, other.quats, atol=atol)
                and np.allclose(self.scales, other.scales, atol=atol)
                and np.allclose(self.opacities, other.opacities, atol=atol)
                and np.allclose(self.colors, other.colors, atol=atol))


def covariance_from_rs(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """World-space covariance R S S^T R^T from unit quaternion and scales.

    Broadcasts: (..., 4) and (..., 3) -> (..., 3, 3).
    """
    rot = quat_to_rot(quat)
    scale = np.asarray(scale, dtype=np.float64)
    rs = rot * scale[..., None, :]
    return rs @ np.swapaxes(rs, -1, -2)


def gaussian_density_at(g: Gaussian3D, x: np.ndarray) -> float:
    """Unnormalized density exp(-0.5 d^T Sigma^-1 d) at world point x."""
    d = np.asarray(x, dtype=np.float64).reshape(3) - g.mean
    cov = g.covariance()
    sol = np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * d @ sol))


# ---------------------------------------------------------------------------
# cameras and views


@dataclass
class Camera:
    """Pinhole camera; `quat`/`position` give the camera-to-world pose."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    quat: np.ndarray       # (4,) wxyz camera-to-world rotation
    position: np.ndarray   # (3,) camera center in world space
    near_clip: float = 0.1

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.near_clip <= 0:
            raise InvalidParameterError("near clip must be positive")
        self.quat = normalize_quat(np.asarray(self.quat, dtype=np.float64).reshape(4))
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.quat)

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.position) @ self.rotation()   # == R^T (p - pos)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass
class View:
    """A camera at a normalized timestamp, optionally with a target image."""

    camera: Camera
    time: float
    image: np.ndarray | None = None   # (H, W, 3) float64 in [0, 1]

    def __post_init__(self):
        if not (0.0 <= self.time <= 1.0):
            raise InvalidParameterError(f"view time {self.time} outside [0, 1]")
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.shape != (self.camera.height, self.camera.width, 3):
                raise InvalidInputError("view image shape does not match camera")


@dataclass
class Dataset:
    """Ordered views plus a train/test split over view indices."""

    views: list
    test_indices: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.views)
        if n == 0:
            raise InvalidInputError("dataset needs at least one view")
        bad = [i for i in self.test_indices if not (0 <= i < n)]
        if bad:
            raise InvalidInputError(f"test indices out of range: {bad}")
        if len(set(self.test_indices)) != len(self.test_indices):
            raise InvalidInputError("duplicate test indices")

    def train_views(self) -> list:
        test = set(self.test_indices)
        return [v for i, v in enumerate(self.views) if i not in test]

    def test_views(self) -> list:
        return [self.views[i] for i in self.test_indices]


# ---------------------------------------------------------------------------
# projection


@dataclass
class ProjectedSplats:
    """Screen-space splats for one camera.

    Arrays are indexed over the *visible* subset; `index` maps each row back
    into the source GaussianSet. `jac` is d(mean2d)/d(world mean). `p_cam`
    and `cov_cam` are kept so mean gradients can also be chained through the
    position-dependent projection Jacobian (the cov2d path).
    """

    mean2d: np.ndarray    # (M, 2)
    cov2d: np.ndarray     # (M, 3) packed (xx, xy, yy), regularized
    depth: np.ndarray     # (M,) camera-space z
    index: np.ndarray     # (M,) int32 rows into the source set
    jac: np.ndarray       # (M, 2, 3)
    p_cam: np.ndarray     # (M, 3) camera-space positions
    cov_cam: np.ndarray   # (M, 3, 3) camera-space covariances
    fx: float
    fy: float

    def __len__(self) -> int:
        return len(self.depth)


def project_gaussian(camera: Camera, g: Gaussian3D):
    """Project one Gaussian; returns (mean2d, cov2d_packed, depth) or None.

    None means the primitive was culled by the near plane. cov2d carries the
    COV2D_REG diagonal regularizer.
    """
    gs = GaussianSet(g.mean[None], g.quat[None], g.scale[None],
                     np.array([g.opacity]), g.color[None], validate=False)
    proj = project_gaussians(camera, gs)
    if len(proj) == 0:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


def project_gaussians(camera: Camera, gaussians: GaussianSet) -> ProjectedSplats:
    """Perspective-project a set with first-order covariance transport.

    Culls at z <= near_clip. Projection happens once per call; the fused
    renderer relies on that to merge work across experts.
    """
    from .instrumentation import COUNTERS
    COUNTERS.bump("projection_passes")

    rot = camera.rotation()                      # camera-to-world
    p_cam = (gaussians.means - camera.position) @ rot
    z = p_cam[:, 2]
    keep = z > camera.near_clip
    index = np.nonzero(keep)[0].astype(np.int32)
    p_cam = p_cam[keep]
    z = z[keep]
    x, y = p_cam[:, 0], p_cam[:, 1]

    fx, fy = camera.fx, camera.fy
    mean2d = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1)

    # J maps camera-space perturbations to pixel space (first order).
    m = len(z)
    jac_cam = np.zeros((m, 2, 3))
    jac_cam[:, 0, 0] = fx / z
    jac_cam[:, 0, 2] = -fx * x / z ** 2
    jac_cam[:, 1, 1] = fy / z
    jac_cam[:, 1, 2] = -fy * y / z ** 2

    cov_world = covariance_from_rs(gaussians.quats[keep], gaussians.scales[keep])
    cov_cam = np.einsum("ji,njk,kl->nil", rot, cov_world, rot)
    cov2d_full = jac_cam @ cov_cam @ np.swapaxes(jac_cam, 1, 2)
    cov2d = np.stack([cov2d_full[:, 0, 0] + COV2D_REG,
                      cov2d_full[:, 0, 1],
                      cov2d_full[:, 1, 1] + COV2D_REG], axis=1)

    # d(mean2d)/d(world mean) = J R^T
    jac = jac_cam @ rot.T
    return ProjectedSplats(mean2d=mean2d, cov2d=cov2d, depth=z.copy(),
                           index=index, jac=jac, p_cam=p_cam, cov_cam=cov_cam,
                           fx=fx, fy=fy)


def project_mean_backward(camera: Camera, proj: ProjectedSplats,
                          d_mean2d: np.ndarray, d_cov2d: np.ndarray) -> np.ndarray:
    """World-space mean gradient for the visible subset, both chain paths.

    d_mean2d flows through J R^T directly; d_cov2d (packed) flows through the
    position dependence of J in cov2d = J cov_cam J^T. Returns (M, 3).
    """
    d_world = np.einsum("mi,mij->mj", d_mean2d, proj.jac)

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = proj.fx, proj.fy
    m = len(proj)
    jac_cam = np.zeros((m, 2, 3))
    jac_cam[:, 0, 0] = fx / z
    jac_cam[:, 0, 2] = -fx * x / z ** 2
    jac_cam[:, 1, 1] = fy / z
    jac_cam[:, 1, 2] = -fy * y / z ** 2
    t = proj.cov_cam @ np.swapaxes(jac_cam, 1, 2)          # (M, 3, 2)

    # symmetric full-matrix upstream; the packed xy entry covers both slots
    u00, u01, u11 = d_cov2d[:, 0], 0.5 * d_cov2d[:, 1], d_cov2d[:, 2]

    # dJ/dx has only [0, 2]; dJ/dy only [1, 2]; dJ/dz touches all four
    gx = -fx / z ** 2
    gy = -fy / z ** 2
    d_pcam = np.empty((m, 3))
    d_pcam[:, 0] = 2.0 * gx * (u00 * t[:, 2, 0] + u01 * t[:, 2, 1])
    d_pcam[:, 1] = 2.0 * gy * (u01 * t[:, 2, 0] + u11 * t[:, 2, 1])
    a0 = gx * t[:, 0, 0] + (2.0 * fx * x / z ** 3) * t[:, 2, 0]
    a1 = gx * t[:, 0, 1] + (2.0 * fx * x / z ** 3) * t[:, 2, 1]
    b0 = gy * t[:, 1, 0] + (2.0 * fy * y / z ** 3) * t[:, 2, 0]
    b1 = gy * t[:, 1, 1] + (2.0 * fy * y / z ** 3) * t[:, 2, 1]
    d_pcam[:, 2] = 2.0 * (u00 * a0 + u01 * a1 + u01 * b0 + u11 * b1)

    return d_world + d_pcam @ camera.rotation().T


def pixel_ray(camera: Camera, ix: float, iy: float) -> np.ndarray:
    """Unit world-space direction through an image point (pixel units)."""
    d_cam = np.array([(ix - camera.cx) / camera.fx,
                      (iy - camera.cy) / camera.fy,
                      1.0])
    d_world = camera.rotation() @ d_cam
    return d_world / np.linalg.norm(d_world)


def ray_plane(camera: Camera) -> np.ndarray:
    """(H, W, 3) unit world-space ray directions at pixel centers."""
    xs = (np.arange(camera.width) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(camera.height) + 0.5 - camera.cy) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    d_world = d_cam @ camera.rotation().T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
