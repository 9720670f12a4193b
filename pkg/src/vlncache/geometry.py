"""Pinhole camera, rigid poses, and the view-aligned token remap.

Camera frames follow the usual vision convention: x right, y down, z along
the optical axis. A pose maps frame-local points into its parent frame,
``p_parent = R @ p_local + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BehindCamera, DimensionError, InvalidDepth

Z_NEAR = 1e-4
OUT_OF_VIEW = kernels.OUT_OF_VIEW


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    patch: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.patch <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("image and patch sizes must be positive")
        if self.width % self.patch or self.height % self.patch:
            raise ValueError(f"image {self.width}x{self.height} not divisible by patch {self.patch}")

    @property
    def cols(self) -> int:
        return self.width // self.patch

    @property
    def rows(self) -> int:
        return self.height // self.patch

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    def grid(self) -> "TokenGrid":
        return TokenGrid.from_intrinsics(self)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def default_intrinsics() -> Intrinsics:
    """128x128 image, 16 px patches (8x8 = 64 tokens), roughly 60 degree FOV."""
    return Intrinsics(fx=112.0, fy=112.0, cx=64.0, cy=64.0, width=128, height=128, patch=16)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        rot = self.rotation @ other.rotation
        return PoseSE3(_reorthonormalize(rot), self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def allclose(self, other: "PoseSE3", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def tobytes(self) -> bytes:
        return self.rotation.tobytes() + self.translation.tobytes()


def _reorthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def camera_pose(position, yaw: float) -> PoseSE3:
    """Level camera at ``position`` (world frame, z up) looking along heading ``yaw`` (radians).

    Positive yaw turns left, seen from above.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return PoseSE3(np.column_stack([right, down, forward]), np.asarray(position, dtype=np.float64))


def relative_pose(pose_t: PoseSE3, pose_prev: PoseSE3) -> PoseSE3:
    """Transform taking camera-``t`` coordinates into camera-``t-1`` coordinates."""
    return pose_prev.inverse().compose(pose_t)


@dataclass(frozen=True)
class TokenGrid:
    rows: int
    cols: int
    patch: int
    centers: np.ndarray = field(repr=False)

    @classmethod
    def from_intrinsics(cls, k: Intrinsics) -> "TokenGrid":
        rr, cc = np.meshgrid(np.arange(k.rows), np.arange(k.cols), indexing="ij")
        centers = np.stack([(cc.ravel() + 0.5) * k.patch, (rr.ravel() + 0.5) * k.patch], axis=1)
        centers.setflags(write=False)
        return cls(k.rows, k.cols, k.patch, centers)

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def rowcol(self, i: int) -> tuple[int, int]:
        return divmod(int(i), self.cols)

    def patch_at(self, x: float, y: float) -> int | None:
        """Token index of the patch containing continuous pixel ``(x, y)``, or None."""
        if not (0.0 <= x < self.cols * self.patch and 0.0 <= y < self.rows * self.patch):
            return None
        return self.index(int(y // self.patch), int(x // self.patch))


def back_project(u, d: float, k: Intrinsics) -> np.ndarray:
    if not (math.isfinite(d) and d > 0):
        raise InvalidDepth(f"depth must be positive and finite, got {d}")
    x, y = float(u[0]), float(u[1])
    return np.array([(x - k.cx) * d / k.fx, (y - k.cy) * d / k.fy, d])


def project(p, k: Intrinsics) -> np.ndarray:
    """Continuous pixel coordinate of camera-frame point ``p``; raises BehindCamera near z<=0."""
    x, y, z = (float(v) for v in p)
    if not z > Z_NEAR:
        raise BehindCamera(f"z={z} is behind the near plane")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def search_radius(k_window: int) -> int:
    """Neighborhood radius in patches for a window side length.

    A side of 3 searches 3x3 patches; 0 and 1 take the rounded patch only.
    """
    if k_window < 0:
        raise ValueError("k_window must be non-negative")
    return max(0, (int(k_window) - 1) // 2)


def _cosine(a, b, eps):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps or nb < eps:
        return 0.0
    return float(np.dot(a, b) / (na * nb + eps))


def remap_token(i: int, depth_t, t_rel: PoseSE3, k: Intrinsics, grid: TokenGrid, features_t,
                prev_features, k_window: int = 3, eps: float = 1e-6) -> int | None:
    """Previous-frame token that saw the same surface as token ``i``; None when out of view.

    Scalar reference version of :func:`remap_tokens`.
    """
    d = float(depth_t[i])
    try:
        p = back_project(grid.centers[i], d, k)
        xy = project(t_rel.apply(p), k)
    except (InvalidDepth, BehindCamera):
        return None
    center = grid.patch_at(xy[0], xy[1])
    if center is None:
        return None
    radius = search_radius(k_window)
    if radius == 0:
        return center
    r0, c0 = grid.rowcol(center)
    cands = []
    for r in range(max(r0 - radius, 0), min(r0 + radius, grid.rows - 1) + 1):
        for c in range(max(c0 - radius, 0), min(c0 + radius, grid.cols - 1) + 1):
            j = grid.index(r, c)
            sim = _cosine(features_t[i], prev_features[j], eps)
            dist = ((c + 0.5) * grid.patch - xy[0]) ** 2 + ((r + 0.5) * grid.patch - xy[1]) ** 2
            cands.append((sim, dist, j))
    best = max(s for s, _, _ in cands)
    near = [(dist, j) for s, dist, j in cands if s >= best - kernels.TIE_TOL]
    return min(near)[1]


def remap_tokens(depth_t, t_rel: PoseSE3, k: Intrinsics, features_t, prev_features,
                 k_window: int = 3, eps: float = 1e-6) -> np.ndarray:
    """Aligned index for every token at once; ``OUT_OF_VIEW`` (-1) marks tokens with no counterpart."""
    features_t = np.asarray(features_t, dtype=np.float64)
    prev_features = np.asarray(prev_features, dtype=np.float64)
    m = k.num_tokens
    if features_t.shape[0] != m or prev_features.shape[0] != m or np.shape(depth_t)[0] != m:
        raise DimensionError(f"expected {m} tokens")
    if features_t.shape[1] != prev_features.shape[1]:
        raise DimensionError("feature dimensions differ")
    grid = TokenGrid.from_intrinsics(k)
    return kernels.remap_search(
        grid.centers, np.asarray(depth_t, dtype=np.float64), t_rel.rotation, t_rel.translation, k,
        features_t, prev_features, search_radius(k_window), eps, Z_NEAR,
    )
