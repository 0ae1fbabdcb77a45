"""Fit rig pose and shape to tracked points, 3D keypoints and silhouette masks."""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_vector
from .errors import InvalidInputError
from .skinning import Pose, bind_gaussians, lbs, unpose

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera
    coordinates (x_c = R x + t). Pixel (u, v) indexes mask column u, row v."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be > 0")
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or np.linalg.det(R) <= 0:
            raise InvalidInputError("camera rotation must be orthonormal with det +1")
        self.rotation = R
        self.translation = check_vector(self.translation, 3, name="translation")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidInputError("image size must be positive")
        self.width, self.height = int(self.width), int(self.height)

    def project(self, points):
        """Pixel coordinates (n, 2) and camera-space depth (n,)."""
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def translated(self, offset):
        """The same camera after moving the whole world by ``offset``."""
        return Camera(self.fx, self.fy, self.cx, self.cy, self.rotation,
                      self.translation - self.rotation @ np.asarray(offset, float), self.width, self.height)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["rotation"], d["translation"], d["width"], d["height"])


class SilhouetteMask:
    """Binary raster (1 = person) with a cached outside-distance field."""

    def __init__(self, data, camera=None):
        data = np.asarray(data)
        if data.ndim != 2:
            raise InvalidInputError("mask must be a 2D array")
        if camera is not None and data.shape != (camera.height, camera.width):
            raise InvalidInputError(f"mask shape {data.shape} does not match camera {(camera.height, camera.width)}")
        self.data = (data > 0).astype(np.uint8)
        self._dist = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def outside_distance(self):
        """Per pixel, distance in pixels to the nearest mask pixel (0 inside)."""
        if self._dist is None:
            if self.data.any():
                self._dist = ndimage.distance_transform_edt(self.data == 0)
            else:
                self._dist = np.full(self.data.shape, float(max(self.data.shape)))
        return self._dist


@dataclass(eq=False)
class KeypointSet:
    """World-space targets for the rig's marker vertices."""

    targets: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if self.valid is None:
            self.valid = np.ones(len(self.targets), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if len(self.valid) != len(self.targets):
            raise InvalidInputError("valid flags must match targets")
        if not np.all(np.isfinite(self.targets[self.valid])):
            raise InvalidInputError("valid keypoint targets must be finite")

    def translated(self, offset):
        return KeypointSet(self.targets + np.asarray(offset, float), self.valid.copy())


@dataclass
class LossWeights:
    align: float = 1.0
    verts: float = 1e-2
    pose_reg: float = 1e-3
    shape_reg: float = 1e-3
    track: float = 1.0
    keypoint: float = 1e-1

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (np.isfinite(v) and v >= 0):
                raise InvalidInputError(f"loss weight {k} must be finite and >= 0")


def loss_keypoints(rig, pose, markers, shape=None):
    if len(markers.targets) != len(rig.marker_vertices):
        raise InvalidInputError("one keypoint target per rig marker is required")
    posed = rig.posed_vertices(pose, shape)[rig.marker_vertices]
    d = posed[markers.valid] - markers.targets[markers.valid]
    return float(np.sum(d * d))


def loss_align(body_points, vertices):
    """Sum of squared distances from each body point to its nearest vertex."""
    body_points = np.asarray(body_points, dtype=np.float64).reshape(-1, 3)
    if len(body_points) == 0:
        warnings.warn("no body points; alignment loss is 0", RuntimeWarning)
        return 0.0
    d, _ = cKDTree(vertices).query(body_points)
    return float(np.sum(d * d))


def _pixel_lookup(camera, mask, vertices):
    uv, z = camera.project(vertices)
    col = np.floor(uv[:, 0] + 0.5)
    row = np.floor(uv[:, 1] + 0.5)
    ok = (z > 0) & np.isfinite(col) & np.isfinite(row)
    ok &= (col >= 0) & (col < mask.shape[1]) & (row >= 0) & (row < mask.shape[0])
    inside = np.zeros(len(vertices), dtype=bool)
    inside[ok] = mask.data[row[ok].astype(np.int64), col[ok].astype(np.int64)] > 0
    return inside


def count_outside(vertices, cameras, masks):
    """Eq.-4 style count: vertices whose projection falls outside the mask
    (nearest pixel; off-image or behind-camera counts as outside)."""
    if len(cameras) != len(masks):
        raise InvalidInputError("one mask per camera is required")
    total = 0
    for cam, mask in zip(cameras, masks):
        mask = mask if isinstance(mask, SilhouetteMask) else SilhouetteMask(mask, cam)
        total += int(np.sum(~_pixel_lookup(cam, mask, vertices)))
    return float(total)


def loss_verts(rig, pose, cameras, masks, shape=None):
    return count_outside(rig.posed_vertices(pose, shape), cameras, masks)


def mask_surrogate(vertices, cameras, masks):
    """Continuous stand-in for :func:`count_outside`: bilinearly sampled
    outside-distance (pixels) plus the distance beyond the image border.
    Zero exactly when every projection lies on a mask pixel's footprint."""
    total = 0.0
    for cam, mask in zip(cameras, masks):
        mask = mask if isinstance(mask, SilhouetteMask) else SilhouetteMask(mask, cam)
        uv, z = cam.project(vertices)
        dist = mask.outside_distance
        h, w = dist.shape
        behind = ~(z > 0) | ~np.all(np.isfinite(uv), axis=1)
        uv = np.where(behind[:, None], 0.0, uv)
        cu = np.clip(uv[:, 0], 0, w - 1)
        cv = np.clip(uv[:, 1], 0, h - 1)
        border = np.hypot(uv[:, 0] - cu, uv[:, 1] - cv)
        vals = ndimage.map_coordinates(dist, [cv, cu], order=1, mode="nearest")
        vals = vals + border
        vals[behind] = max(h, w)
        total += float(np.sum(vals))
    return total


def loss_reg(pose, shape=None):
    pr = float(np.sum(pose.rotations**2))
    sr = 0.0 if shape is None else float(np.sum(np.asarray(shape, float) ** 2))
    return pr, sr


@dataclass(eq=False)
class BoundPoints:
    """Body points expressed in the rig's rest space, with their skin weights."""

    canonical: np.ndarray
    weights: np.ndarray


def bind_points(rig, pose, points, shape=None):
    """Bind world-space ``points`` observed at ``pose`` so that
    ``lbs(rig, pose, bound.canonical, bound.weights)`` returns them."""
    points = check_points(points, name="points")
    weights = bind_gaussians(rig, points, pose, shape)
    return BoundPoints(unpose(rig, pose, points, weights), weights)


def loss_track(rig, pose, bound, tracked):
    pred = lbs(rig, pose, bound.canonical, bound.weights)
    d = pred - np.asarray(tracked, dtype=np.float64)
    return float(np.sum(d * d))


def _n_params(rig, with_shape):
    return 3 * rig.n_joints + 3 + (rig.n_shape if with_shape else 0)


def _unpack(rig, x, with_shape, shape_fixed):
    J = rig.n_joints
    pose = Pose(x[: 3 * J].reshape(J, 3), x[3 * J: 3 * J + 3])
    shape = x[3 * J + 3:] if with_shape else shape_fixed
    return pose, shape


def _fd_grad(f, x, h):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _minimize(f, x0, fd_step, max_iter, tol):
    """L-BFGS on central-difference gradients; returns the best finite iterate."""
    best = {"x": x0.copy(), "f": f(x0)}

    def fg(x):
        val = f(x)
        if not np.isfinite(val):
            return 1e300, np.zeros_like(x)
        if val < best["f"]:
            best["x"], best["f"] = x.copy(), val
        return val, _fd_grad(f, x, fd_step)

    if not np.isfinite(best["f"]):
        return x0, best["f"], False
    res = optimize.minimize(fg, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15})
    if np.isfinite(res.fun) and res.fun <= best["f"]:
        return res.x, res.fun, True
    return best["x"], best["f"], True


@dataclass(eq=False)
class InitialFit:
    pose: Pose
    shape: np.ndarray
    losses: dict
    initial_losses: dict


def _init_terms(rig, pose, shape, body_points, cameras, masks, weights, surrogate):
    verts = rig.posed_vertices(pose, shape)
    pr, sr = loss_reg(pose, shape)
    terms = {
        "align": loss_align(body_points, verts),
        "verts": (mask_surrogate if surrogate else count_outside)(verts, cameras, masks) if cameras else 0.0,
        "pose_reg": pr,
        "shape_reg": sr,
    }
    terms["total"] = (weights.align * terms["align"] + weights.verts * terms["verts"]
                      + weights.pose_reg * pr + weights.shape_reg * sr)
    return terms


def fit_initial(rig, pose, body_points, cameras=(), masks=(), weights=None, shape=None, *,
                fit_shape=True, fd_step=1e-6, max_iter=500, tol=1e-10):
    """Minimize the first-frame objective (alignment + mask + regularizers).

    Mask gradients come from :func:`mask_surrogate`; the reported ``verts``
    term is the raw count. The result never has a higher reported total than
    the initialization.
    """
    weights = weights or LossWeights()
    body_points = np.asarray(body_points, dtype=np.float64).reshape(-1, 3)
    masks = [m if isinstance(m, SilhouetteMask) else SilhouetteMask(m, c) for c, m in zip(cameras, masks)]
    if len(masks) != len(cameras):
        raise InvalidInputError("one mask per camera is required")
    shape0 = np.zeros(rig.n_shape) if shape is None else check_vector(shape, rig.n_shape, name="shape")
    with_shape = fit_shape and rig.n_shape > 0
    x0 = pose.to_vector()
    if with_shape:
        x0 = np.concatenate([x0, shape0])

    def objective(x):
        p, s = _unpack(rig, x, with_shape, shape0)
        return _init_terms(rig, p, s, body_points, cameras, masks, weights, True)["total"]

    x, _, _ = _minimize(objective, x0, fd_step, max_iter, tol)
    p0, s0 = _unpack(rig, x0, with_shape, shape0)
    p1, s1 = _unpack(rig, x, with_shape, shape0)
    before = _init_terms(rig, p0, s0, body_points, cameras, masks, weights, False)
    after = _init_terms(rig, p1, s1, body_points, cameras, masks, weights, False)
    if not np.isfinite(after["total"]) or after["total"] > before["total"]:
        log.info("fit_initial: reported loss did not improve; keeping the initialization")
        p1, s1, after = p0, s0, before
    return InitialFit(p1, np.array(s1, dtype=np.float64), after, before)


@dataclass(eq=False)
class SequenceFit:
    poses: list
    shape: np.ndarray
    losses: list
    flagged: list = field(default_factory=list)


def fit_sequence(rig, initial_pose, tracked, *, shape=None, keypoints=None, weights=None,
                 bound=None, fd_step=1e-6, max_iter=500, tol=1e-12):
    """Per-frame pose fit against tracked body points (and optional keypoints).

    ``tracked`` has shape (T, n, 3); frame 0 is the frame of ``initial_pose``
    and is used to bind the points unless ``bound`` is given. Each later
    frame starts from the previous frame's pose; shape is held fixed. Frames
    whose loss turns non-finite keep the previous pose and are flagged.
    """
    weights = weights or LossWeights()
    tracked = np.asarray(tracked, dtype=np.float64)
    if tracked.ndim != 3 or tracked.shape[2] != 3:
        raise InvalidInputError("tracked points must have shape (T, n, 3)")
    shape = None if shape is None else check_vector(shape, rig.n_shape, name="shape")
    if bound is None:
        bound = bind_points(rig, initial_pose, tracked[0], shape)
    if keypoints is not None and len(keypoints) != len(tracked):
        raise InvalidInputError("need one keypoint set (or None) per frame")

    def frame_loss(pose, t):
        val = weights.track * loss_track(rig, pose, bound, tracked[t])
        if keypoints is not None and keypoints[t] is not None and weights.keypoint > 0:
            val += weights.keypoint * loss_keypoints(rig, pose, keypoints[t], shape)
        return val

    poses = [initial_pose]
    losses = [frame_loss(initial_pose, 0)]
    flagged = []
    J = rig.n_joints
    for t in range(1, len(tracked)):
        prev = poses[-1]

        def objective(x, t=t):
            return frame_loss(Pose(x[: 3 * J].reshape(J, 3), x[3 * J:]), t)

        try:
            x, val, ok = _minimize(objective, prev.to_vector(), fd_step, max_iter, tol)
        except (FloatingPointError, np.linalg.LinAlgError):
            ok, val = False, np.nan
        if not ok or not np.isfinite(val):
            log.warning("frame %d: pose fit diverged; carrying previous pose", t)
            poses.append(prev)
            losses.append(float("nan"))
            flagged.append(t)
            continue
        poses.append(Pose.from_vector(x, J))
        losses.append(float(val))
    return SequenceFit(poses, shape, losses, flagged)


def render_mask(camera, points, radius=1.5):
    """Binary mask covering every pixel within ``radius`` pixels of a projected point."""
    uv, z = camera.project(points)
    img = np.zeros((camera.height, camera.width), dtype=bool)
    uv = uv[z > 0]
    col = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    row = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    ok = (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    img[row[ok], col[ok]] = True
    if radius > 0:
        img = ndimage.distance_transform_edt(~img) <= radius
    return img.astype(np.uint8)


class PoseSequenceFitter(BaseEstimator):
    """Estimator over :func:`fit_initial` + :func:`fit_sequence`.

    ``fit(X)`` takes tracked body points (T, n, 3). Frame 0 is fitted with
    the first-frame objective (if ``fit_first``), then the remaining frames
    with the tracking objective.
    """

    def __init__(self, weights=None, fit_first=True, fit_shape=True, fd_step=1e-6, max_iter=500):
        self.weights = weights
        self.fit_first = fit_first
        self.fit_shape = fit_shape
        self.fd_step = fd_step
        self.max_iter = max_iter

    def fit(self, X, y=None, *, rig, initial_pose=None, cameras=(), masks=(), keypoints=None, shape=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != 3:
            raise InvalidInputError("X must have shape (T, n, 3)")
        weights = self.weights or LossWeights()
        pose = initial_pose or Pose.identity(rig.n_joints)
        if self.fit_first:
            init = fit_initial(rig, pose, X[0], cameras, masks, weights, shape,
                               fit_shape=self.fit_shape, fd_step=self.fd_step, max_iter=self.max_iter)
            pose, shape = init.pose, (init.shape if rig.n_shape else None)
            self.initial_fit_ = init
        seq = fit_sequence(rig, pose, X, shape=shape, keypoints=keypoints, weights=weights,
                           fd_step=self.fd_step, max_iter=self.max_iter)
        self.poses_ = seq.poses
        self.shape_ = seq.shape
        self.losses_ = seq.losses
        self.flagged_frames_ = seq.flagged
        self.rig_ = rig
        return self

    def predict(self, X=None):
        """Posed rig vertices per fitted frame, shape (T, V, 3)."""
        check_is_fitted(self, "poses_")
        return np.stack([self.rig_.posed_vertices(p, self.shape_) for p in self.poses_])
