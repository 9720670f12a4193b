"""Hot inner loops: ray casting and view-aligned remap search.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorized numpy version. ``backend()`` reports which one the public
functions dispatch to; ``set_backend`` switches at runtime (tests and the
benchmark use it to run both).
"""

import math

import numpy as np

from . import _accel
from ._accel import njit

OUT_OF_VIEW = -1
TIE_TOL = 1e-12

_backend = "numba" if _accel.USE_NUMBA else "numpy"


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _accel.NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    _backend = name


# ---------------------------------------------------------------------------
# ray casting


@njit
def _raycast_loop(origin, dirs, corners, edge_u, edge_v, normals):
    n_rays = dirs.shape[0]
    n_surf = corners.shape[0]
    depth = np.full(n_rays, np.inf)
    surface = np.full(n_rays, -1, dtype=np.int64)
    local = np.zeros((n_rays, 2))
    for r in range(n_rays):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        for s in range(n_surf):
            nx, ny, nz = normals[s, 0], normals[s, 1], normals[s, 2]
            denom = nx * dx + ny * dy + nz * dz
            if abs(denom) < 1e-12:
                continue
            cx = corners[s, 0] - origin[0]
            cy = corners[s, 1] - origin[1]
            cz = corners[s, 2] - origin[2]
            t = (nx * cx + ny * cy + nz * cz) / denom
            if t <= 1e-9 or t >= depth[r]:
                continue
            # hit point relative to the surface corner
            px = t * dx - cx
            py = t * dy - cy
            pz = t * dz - cz
            uu = edge_u[s, 0] * edge_u[s, 0] + edge_u[s, 1] * edge_u[s, 1] + edge_u[s, 2] * edge_u[s, 2]
            vv = edge_v[s, 0] * edge_v[s, 0] + edge_v[s, 1] * edge_v[s, 1] + edge_v[s, 2] * edge_v[s, 2]
            a = (px * edge_u[s, 0] + py * edge_u[s, 1] + pz * edge_u[s, 2]) / uu
            b = (px * edge_v[s, 0] + py * edge_v[s, 1] + pz * edge_v[s, 2]) / vv
            if a < 0.0 or a > 1.0 or b < 0.0 or b > 1.0:
                continue
            depth[r] = t
            surface[r] = s
            local[r, 0] = a * math.sqrt(uu)
            local[r, 1] = b * math.sqrt(vv)
    return depth, surface, local


def _raycast_numpy(origin, dirs, corners, edge_u, edge_v, normals):
    denom = dirs @ normals.T  # (R, S)
    rel = corners - origin  # (S, 3)
    numer = np.einsum("sk,sk->s", normals, rel)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) < 1e-12, np.inf, numer[None, :] / denom)
    t = np.where(t > 1e-9, t, np.inf)
    finite_t = np.where(np.isfinite(t), t, 0.0)
    hit = finite_t[:, :, None] * dirs[:, None, :] - rel[None, :, :]  # (R, S, 3)
    uu = np.einsum("sk,sk->s", edge_u, edge_u)
    vv = np.einsum("sk,sk->s", edge_v, edge_v)
    a = np.einsum("rsk,sk->rs", hit, edge_u) / uu
    b = np.einsum("rsk,sk->rs", hit, edge_v) / vv
    inside = (a >= 0.0) & (a <= 1.0) & (b >= 0.0) & (b <= 1.0)
    t = np.where(inside, t, np.inf)
    surface = np.argmin(t, axis=1)
    rows = np.arange(dirs.shape[0])
    depth = t[rows, surface]
    missed = ~np.isfinite(depth)
    local = np.stack([a[rows, surface] * np.sqrt(uu[surface]), b[rows, surface] * np.sqrt(vv[surface])], axis=1)
    surface = np.where(missed, -1, surface).astype(np.int64)
    local[missed] = 0.0
    return depth, surface, local


def raycast(origin, dirs, corners, edge_u, edge_v, normals):
    """Nearest rectangle hit for each ray.

    Returns ``(t, surface, local)``; ``t`` is the ray parameter (``inf`` on a
    miss), ``surface`` the hit index (-1 on a miss) and ``local`` the hit
    position in meters along the two rectangle edges.
    """
    args = [np.ascontiguousarray(x, dtype=np.float64) for x in (origin, dirs, corners, edge_u, edge_v, normals)]
    if _backend == "numba":
        return _raycast_loop(*args)
    return _raycast_numpy(*args)


# ---------------------------------------------------------------------------
# view-aligned remap


@njit
def _remap_loop(centers, depth, rot, trans, fx, fy, cx, cy, width, height, patch, cols, rows,
                feat_t, feat_prev, radius, eps, z_near):
    m = centers.shape[0]
    n_prev = feat_prev.shape[0]
    dim = feat_t.shape[1]
    out = np.full(m, -1, dtype=np.int64)
    norm_prev = np.zeros(n_prev)
    for j in range(n_prev):
        acc = 0.0
        for d in range(dim):
            acc += feat_prev[j, d] * feat_prev[j, d]
        norm_prev[j] = math.sqrt(acc)
    for i in range(m):
        dep = depth[i]
        if not (dep > 0.0) or not math.isfinite(dep):
            continue
        px = (centers[i, 0] - cx) * dep / fx
        py = (centers[i, 1] - cy) * dep / fy
        pz = dep
        qx = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
        qy = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
        qz = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
        if qz <= z_near:
            continue
        x = fx * qx / qz + cx
        y = fy * qy / qz + cy
        if not (x >= 0.0 and x < width and y >= 0.0 and y < height):
            continue
        c0 = min(int(math.floor(x / patch)), cols - 1)
        r0 = min(int(math.floor(y / patch)), rows - 1)
        if radius == 0:
            out[i] = r0 * cols + c0
            continue
        na = 0.0
        for d in range(dim):
            na += feat_t[i, d] * feat_t[i, d]
        na = math.sqrt(na)
        r_lo = max(r0 - radius, 0)
        r_hi = min(r0 + radius, rows - 1)
        c_lo = max(c0 - radius, 0)
        c_hi = min(c0 + radius, cols - 1)
        # first pass: best similarity in the window
        best = -np.inf
        for r in range(r_lo, r_hi + 1):
            for c in range(c_lo, c_hi + 1):
                j = r * cols + c
                s = _cos_rows(feat_t, i, na, feat_prev, j, norm_prev[j], eps)
                if s > best:
                    best = s
        # second pass: among near-ties prefer geometric proximity, then low index
        best_j = -1
        best_dist = np.inf
        for r in range(r_lo, r_hi + 1):
            for c in range(c_lo, c_hi + 1):
                j = r * cols + c
                s = _cos_rows(feat_t, i, na, feat_prev, j, norm_prev[j], eps)
                if s < best - 1e-12:
                    continue
                ux = (c + 0.5) * patch - x
                uy = (r + 0.5) * patch - y
                dist = ux * ux + uy * uy
                if dist < best_dist:
                    best_dist = dist
                    best_j = j
        out[i] = best_j
    return out


@njit
def _cos_rows(a, i, na, b, j, nb, eps):
    if na < eps or nb < eps:
        return 0.0
    acc = 0.0
    for d in range(a.shape[1]):
        acc += a[i, d] * b[j, d]
    return acc / (na * nb + eps)


def _remap_numpy(centers, depth, rot, trans, fx, fy, cx, cy, width, height, patch, cols, rows,
                 feat_t, feat_prev, radius, eps, z_near):
    m = centers.shape[0]
    out = np.full(m, OUT_OF_VIEW, dtype=np.int64)
    valid = (depth > 0.0) & np.isfinite(depth)
    dep = np.where(valid, depth, 1.0)
    pts = np.stack([(centers[:, 0] - cx) * dep / fx, (centers[:, 1] - cy) * dep / fy, dep], axis=1)
    q = pts @ rot.T + trans
    valid &= q[:, 2] > z_near
    qz = np.where(valid, q[:, 2], 1.0)
    x = fx * q[:, 0] / qz + cx
    y = fy * q[:, 1] / qz + cy
    valid &= (x >= 0.0) & (x < width) & (y >= 0.0) & (y < height)
    c0 = np.minimum(np.floor(np.where(valid, x, 0.0) / patch).astype(np.int64), cols - 1)
    r0 = np.minimum(np.floor(np.where(valid, y, 0.0) / patch).astype(np.int64), rows - 1)
    if radius == 0:
        out[valid] = (r0 * cols + c0)[valid]
        return out

    offsets = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(offsets, offsets, indexing="ij")
    rr = r0[:, None] + dr.ravel()[None, :]  # (M, W) in row-major window order
    cc = c0[:, None] + dc.ravel()[None, :]
    inside = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
    cand = np.where(inside, rr * cols + cc, 0)

    na = np.linalg.norm(feat_t, axis=1)
    nb = np.linalg.norm(feat_prev, axis=1)
    dots = np.einsum("md,mwd->mw", feat_t, feat_prev[cand])
    sims = dots / (na[:, None] * nb[cand] + eps)
    sims = np.where((na[:, None] < eps) | (nb[cand] < eps), 0.0, sims)
    sims = np.where(inside, sims, -np.inf)

    best = sims.max(axis=1)
    near = sims >= (best[:, None] - TIE_TOL)
    dist = ((cc + 0.5) * patch - x[:, None]) ** 2 + ((rr + 0.5) * patch - y[:, None]) ** 2
    dist = np.where(near & inside, dist, np.inf)
    # argmin picks the first minimum; window order is row-major so that is the lowest index
    pick = np.argmin(dist, axis=1)
    chosen = cand[np.arange(m), pick]
    out[valid] = chosen[valid]
    return out


def remap_search(centers, depth, rotation, translation, intrinsics, features_t, features_prev,
                 radius: int, eps: float, z_near: float) -> np.ndarray:
    """Aligned previous-frame index for every token, ``OUT_OF_VIEW`` where none exists."""
    k = intrinsics
    args = (
        np.ascontiguousarray(centers, dtype=np.float64),
        np.ascontiguousarray(depth, dtype=np.float64),
        np.ascontiguousarray(rotation, dtype=np.float64),
        np.ascontiguousarray(translation, dtype=np.float64),
        float(k.fx), float(k.fy), float(k.cx), float(k.cy),
        float(k.width), float(k.height), float(k.patch), int(k.cols), int(k.rows),
        np.ascontiguousarray(features_t, dtype=np.float64),
        np.ascontiguousarray(features_prev, dtype=np.float64),
        int(radius), float(eps), float(z_near),
    )
    if _backend == "numba":
        return _remap_loop(*args)
    return _remap_numpy(*args)
