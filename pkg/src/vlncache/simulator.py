"""Synthetic navigation environments.

Scenes are closed boxes of textured rectangles. A pinhole camera moves through
them phase by phase; every step yields per-token encoder-like features, depth,
semantic labels and an oracle relevance schedule driven by which landmark the
current instruction stage is about.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import RenderHole, TrajectoryOutOfBounds
from .geometry import Intrinsics, PoseSE3, TokenGrid, camera_pose

PHASE_KINDS = ("Exploration", "Cruising", "Goal")
RELEVANCE_DECAY = 0.5


@dataclass(frozen=True)
class Surface:
    corner: tuple
    edge_u: tuple
    edge_v: tuple
    label: str


@dataclass(frozen=True)
class Scene:
    surfaces: tuple
    seed: int = 0
    bounds: tuple = (0.0, 1.0, 0.0, 1.0)  # walkable xmin, xmax, ymin, ymax
    obstacles: tuple = ()  # footprints (xmin, xmax, ymin, ymax) the camera may not enter
    name: str = "inline"

    def __post_init__(self):
        for s in self.surfaces:
            u, v = np.asarray(s.edge_u, float), np.asarray(s.edge_v, float)
            if abs(u @ v) > 1e-9 * np.linalg.norm(u) * np.linalg.norm(v):
                raise ValueError(f"surface {s.label!r} edges must be orthogonal")
            if np.linalg.norm(np.cross(u, v)) == 0:
                raise ValueError(f"surface {s.label!r} is degenerate")

    @property
    def labels(self) -> tuple:
        seen = []
        for s in self.surfaces:
            if s.label not in seen:
                seen.append(s.label)
        return tuple(seen)

    def arrays(self):
        corners = np.array([s.corner for s in self.surfaces], dtype=np.float64)
        eu = np.array([s.edge_u for s in self.surfaces], dtype=np.float64)
        ev = np.array([s.edge_v for s in self.surfaces], dtype=np.float64)
        return corners, eu, ev, np.cross(eu, ev)

    def contains(self, x: float, y: float, margin: float = 0.05) -> bool:
        x0, x1, y0, y1 = self.bounds
        if not (x0 + margin <= x <= x1 - margin and y0 + margin <= y <= y1 - margin):
            return False
        return not any(a - margin <= x <= b + margin and c - margin <= y <= d + margin
                       for a, b, c, d in self.obstacles)


# ---------------------------------------------------------------------------
# scene construction helpers


def rect(corner, edge_u, edge_v, label) -> Surface:
    return Surface(tuple(map(float, corner)), tuple(map(float, edge_u)), tuple(map(float, edge_v)), label)


def room_shell(x0, x1, y0, y1, height, prefix="") -> list:
    """Four walls, floor and ceiling of an axis-aligned room."""
    w, d = x1 - x0, y1 - y0
    return [
        rect((x0, y0, 0), (w, 0, 0), (0, d, 0), "floor"),
        rect((x0, y0, height), (w, 0, 0), (0, d, 0), "ceiling"),
        rect((x0, y0, 0), (w, 0, 0), (0, 0, height), f"{prefix}wall_south"),
        rect((x0, y1, 0), (w, 0, 0), (0, 0, height), f"{prefix}wall_north"),
        rect((x0, y0, 0), (0, d, 0), (0, 0, height), f"{prefix}wall_west"),
        rect((x1, y0, 0), (0, d, 0), (0, 0, height), f"{prefix}wall_east"),
    ]


def box(center_xy, size, label) -> list:
    """Five visible faces (no bottom) of a box standing on the floor."""
    cx, cy = center_xy
    sx, sy, sz = size
    x0, y0 = cx - sx / 2, cy - sy / 2
    return [
        rect((x0, y0, 0), (sx, 0, 0), (0, 0, sz), label),
        rect((x0, y0 + sy, 0), (sx, 0, 0), (0, 0, sz), label),
        rect((x0, y0, 0), (0, sy, 0), (0, 0, sz), label),
        rect((x0 + sx, y0, 0), (0, sy, 0), (0, 0, sz), label),
        rect((x0, y0, sz), (sx, 0, 0), (0, sy, 0), label),
    ]


def box_footprint(center_xy, size):
    cx, cy = center_xy
    return (cx - size[0] / 2, cx + size[0] / 2, cy - size[1] / 2, cy + size[1] / 2)


def build_scene(room, boxes=(), partitions=(), seed=0, name="inline") -> Scene:
    """``room``: dict with x, y (ranges) and height; ``boxes``: dicts with center, size, label;
    ``partitions``: extra vertical wall rectangles as dicts with corner, edge_u, edge_v, label."""
    (x0, x1), (y0, y1), h = room["x"], room["y"], room["height"]
    surfaces = room_shell(x0, x1, y0, y1, h)
    obstacles = []
    for p in partitions:
        surfaces.append(rect(p["corner"], p["edge_u"], p["edge_v"], p.get("label", "partition")))
        cx, cy = p["corner"][0], p["corner"][1]
        ex, ey = p["edge_u"][0], p["edge_u"][1]
        obstacles.append((min(cx, cx + ex) - 0.05, max(cx, cx + ex) + 0.05,
                          min(cy, cy + ey) - 0.05, max(cy, cy + ey) + 0.05))
    for b in boxes:
        surfaces.extend(box(b["center"], b["size"], b["label"]))
        obstacles.append(box_footprint(b["center"], b["size"]))
    return Scene(tuple(surfaces), int(seed), (x0, x1, y0, y1), tuple(obstacles), name)


# ---------------------------------------------------------------------------
# procedural features


@dataclass(frozen=True)
class FeatureField:
    """Per-surface smooth feature maps.

    Each surface carries ``D/2`` cos/sin pairs. Non-zero frequencies come in
    perpendicular quads of equal weight, so the cosine similarity between two
    points of one surface depends only on their distance, isotropically. A
    random orthogonal rotation per surface decorrelates different surfaces.
    """

    rotations: np.ndarray  # (S, D, D)
    omegas: np.ndarray  # (S, P, 2) rad/m
    phases: np.ndarray  # (S, P)
    weights: np.ndarray  # (P,)
    dim: int

    def sample(self, surface: np.ndarray, uv: np.ndarray) -> np.ndarray:
        arg = np.einsum("npk,nk->np", self.omegas[surface], uv) + self.phases[surface]
        amp = np.sqrt(self.weights)
        pairs = np.empty((surface.shape[0], 2 * self.weights.shape[0]))
        pairs[:, 0::2] = amp * np.cos(arg)
        pairs[:, 1::2] = amp * np.sin(arg)
        if pairs.shape[1] < self.dim:
            pairs = np.pad(pairs, ((0, 0), (0, self.dim - pairs.shape[1])))
        # unit-variance entries, like encoder hidden states
        return math.sqrt(self.dim) * np.einsum("nij,nj->ni", self.rotations[surface], pairs)


DC_WEIGHT = 0.5
FREQ_RANGE = (0.8, 2.4)  # rad/m; wavelengths of roughly 2.5 to 8 m


@lru_cache(maxsize=32)
def feature_field(seed: int, n_surfaces: int, dim: int) -> FeatureField:
    n_pairs = dim // 2
    n_quads = max(0, (n_pairs - 1) // 2)
    n_dc = n_pairs - 2 * n_quads
    weights = np.empty(n_pairs)
    weights[:n_dc] = DC_WEIGHT / n_dc
    if n_quads:
        weights[n_dc:] = (1.0 - DC_WEIGHT) / (2 * n_quads)
    else:
        weights[:] = 1.0 / n_pairs
    rotations = np.empty((n_surfaces, dim, dim))
    omegas = np.zeros((n_surfaces, n_pairs, 2))
    phases = np.empty((n_surfaces, n_pairs))
    for s in range(n_surfaces):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s, 0xFEA7]))
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        rotations[s] = q * np.sign(np.diag(r))
        ang = rng.uniform(0.0, math.pi, n_quads)
        mag = rng.uniform(*FREQ_RANGE, n_quads)
        for j in range(n_quads):
            w = mag[j] * np.array([math.cos(ang[j]), math.sin(ang[j])])
            omegas[s, n_dc + 2 * j] = w
            omegas[s, n_dc + 2 * j + 1] = (-w[1], w[0])
        phases[s] = rng.uniform(0.0, 2 * math.pi, n_pairs)
    for arr in (rotations, omegas, phases, weights):
        arr.setflags(write=False)
    return FeatureField(rotations, omegas, phases, weights, dim)


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True, eq=False)
class Observation:
    features: np.ndarray  # (M, D)
    depth: np.ndarray  # (M,) z-depth in meters
    pose: PoseSE3
    labels: np.ndarray  # (M,) index into scene.labels
    surface: np.ndarray  # (M,) hit surface index
    oracle_relevance: np.ndarray  # (M,) in [0, 1]
    step: int = 0
    phase: str = ""
    phase_index: int = 0


def camera_rays(pose: PoseSE3, k: Intrinsics, grid: TokenGrid | None = None) -> np.ndarray:
    """World-frame ray directions through patch centers, scaled so camera-z is 1."""
    grid = grid or TokenGrid.from_intrinsics(k)
    cam = np.stack([(grid.centers[:, 0] - k.cx) / k.fx, (grid.centers[:, 1] - k.cy) / k.fy,
                    np.ones(grid.num_tokens)], axis=1)
    return cam @ pose.rotation.T


def raycast_scene(scene: Scene, origin, dirs):
    corners, eu, ev, normals = scene.arrays()
    return kernels.raycast(np.asarray(origin, float), dirs, corners, eu, ev, normals)


def _view_noise(scene_seed: int, pose: PoseSE3, shape) -> np.ndarray:
    key = zlib.crc32(pose.tobytes())
    rng = np.random.default_rng(np.random.SeedSequence([scene_seed, key, 0x5EED]))
    z = rng.standard_normal(shape)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def render(scene: Scene, pose: PoseSE3, k: Intrinsics, dim: int, eta: float = 0.02,
           relevance_by_label: dict | None = None) -> Observation:
    """Ray-cast every patch center and sample the hit surface's features.

    A pose-seeded perturbation of relative size ``eta`` stands in for lighting
    and encoder variation: the same pose always renders identically.
    """
    dirs = camera_rays(pose, k)
    depth, surface, uv = raycast_scene(scene, pose.translation, dirs)
    if np.any(surface < 0):
        raise RenderHole(f"{int(np.sum(surface < 0))} rays escaped the scene")
    field_ = feature_field(scene.seed, len(scene.surfaces), dim)
    feats = field_.sample(surface, uv)
    if eta:
        noise = _view_noise(scene.seed, pose, feats.shape)
        feats = feats + eta * np.linalg.norm(feats, axis=1, keepdims=True) * noise
    names = scene.labels
    label_of_surface = np.array([names.index(s.label) for s in scene.surfaces])
    labels = label_of_surface[surface]
    rel = np.zeros(labels.shape[0])
    if relevance_by_label:
        lut = np.array([relevance_by_label.get(n, 0.0) for n in names])
        rel = np.clip(lut[labels], 0.0, 1.0)
    return Observation(feats, depth, pose, labels, surface, rel)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Phase:
    kind: str
    steps: int
    yaw_deg: float = 0.0
    translation_m: float = 0.0
    active_label: str | None = None

    def __post_init__(self):
        if self.kind not in PHASE_KINDS:
            raise ValueError(f"phase kind must be one of {PHASE_KINDS}, got {self.kind!r}")
        if self.steps < 1:
            raise ValueError("phase step count must be >= 1")
        if not (math.isfinite(self.yaw_deg) and math.isfinite(self.translation_m)):
            raise ValueError("yaw and translation must be finite")


@dataclass(frozen=True)
class TrajectorySpec:
    phases: tuple
    start_xy: tuple = (1.0, 1.0)
    start_yaw_deg: float = 0.0
    camera_height: float = 1.5

    @property
    def num_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    def phase_of_step(self) -> list:
        out = []
        for idx, p in enumerate(self.phases):
            out.extend([idx] * p.steps)
        return out


def relevance_schedule(traj: TrajectorySpec, phase_index: int) -> dict:
    """Label -> relevance during phase ``phase_index``.

    The active label scores 1; a label whose phase has ended decays by half per
    subsequent phase; labels never active score 0.
    """
    out = {}
    for q in range(phase_index + 1):
        label = traj.phases[q].active_label
        if label is not None:
            out[label] = RELEVANCE_DECAY ** (phase_index - q)
    return out


def poses(scene: Scene, traj: TrajectorySpec) -> list:
    x, y = map(float, traj.start_xy)
    yaw = math.radians(traj.start_yaw_deg)
    out = []
    for p in traj.phases:
        for _ in range(p.steps):
            yaw += math.radians(p.yaw_deg)
            x += p.translation_m * math.cos(yaw)
            y += p.translation_m * math.sin(yaw)
            if not scene.contains(x, y):
                raise TrajectoryOutOfBounds(f"pose ({x:.3f}, {y:.3f}) left the walkable area")
            out.append(camera_pose((x, y, traj.camera_height), yaw))
    return out


def run_episode(scene: Scene, traj: TrajectorySpec, k: Intrinsics, dim: int, eta: float = 0.02) -> list:
    """One observation per trajectory step; each phase step turns first, then moves forward."""
    phase_idx = traj.phase_of_step()
    out = []
    for t, pose in enumerate(poses(scene, traj)):
        pi = phase_idx[t]
        obs = render(scene, pose, k, dim, eta, relevance_schedule(traj, pi))
        out.append(Observation(obs.features, obs.depth, obs.pose, obs.labels, obs.surface,
                               obs.oracle_relevance, t, traj.phases[pi].kind, pi))
    return out


# ---------------------------------------------------------------------------
# presets


def _corridor(seed):
    scene = build_scene(
        {"x": (0.0, 24.0), "y": (0.0, 3.0), "height": 3.0},
        boxes=[
            {"center": (5.0, 0.45), "size": (0.8, 0.7, 1.2), "label": "cabinet"},
            {"center": (11.0, 2.55), "size": (0.9, 0.7, 1.0), "label": "plant"},
            {"center": (18.0, 0.45), "size": (1.0, 0.7, 1.4), "label": "shelf"},
            {"center": (23.2, 1.5), "size": (0.8, 1.2, 1.6), "label": "door"},
        ],
        seed=seed, name="corridor",
    )
    traj = TrajectorySpec(
        (
            Phase("Exploration", 3, 8.0, 0.05, "cabinet"),
            Phase("Exploration", 3, -8.0, 0.05, "cabinet"),
            Phase("Cruising", 12, 0.0, 0.45, "plant"),
            Phase("Cruising", 4, 0.5, 0.45, "shelf"),
            Phase("Goal", 4, -3.0, 0.2, "door"),
        ),
        start_xy=(1.0, 1.5),
    )
    return scene, traj


def _two_room(seed):
    scene = build_scene(
        {"x": (0.0, 16.0), "y": (0.0, 6.0), "height": 3.0},
        partitions=[
            {"corner": (8.0, 0.0, 0.0), "edge_u": (0.0, 2.4, 0.0), "edge_v": (0.0, 0.0, 3.0), "label": "partition"},
            {"corner": (8.0, 3.6, 0.0), "edge_u": (0.0, 2.4, 0.0), "edge_v": (0.0, 0.0, 3.0), "label": "partition"},
        ],
        boxes=[
            {"center": (3.0, 5.4), "size": (1.0, 0.8, 0.9), "label": "sofa"},
            {"center": (6.0, 0.6), "size": (0.8, 0.8, 1.2), "label": "table"},
            {"center": (13.0, 5.3), "size": (1.2, 0.8, 0.8), "label": "bed"},
            {"center": (15.3, 1.0), "size": (0.8, 1.2, 1.8), "label": "closet"},
        ],
        seed=seed, name="two-room",
    )
    traj = TrajectorySpec(
        (
            Phase("Exploration", 6, 12.0, 0.05, "sofa"),
            Phase("Exploration", 6, -12.0, 0.05, "table"),
            Phase("Cruising", 14, 0.0, 0.5, "bed"),
            Phase("Goal", 6, -6.0, 0.15, "closet"),
        ),
        start_xy=(2.0, 3.0),
    )
    return scene, traj


def _turn_heavy(seed):
    scene = build_scene(
        {"x": (0.0, 10.0), "y": (0.0, 10.0), "height": 3.0},
        boxes=[
            {"center": (9.2, 2.0), "size": (0.8, 1.0, 1.2), "label": "cabinet"},
            {"center": (5.0, 9.3), "size": (1.2, 0.8, 1.0), "label": "sofa"},
            {"center": (0.8, 6.0), "size": (0.8, 1.2, 1.5), "label": "shelf"},
            {"center": (7.5, 7.5), "size": (0.8, 0.8, 0.8), "label": "plant"},
        ],
        seed=seed, name="turn-heavy",
    )
    traj = TrajectorySpec(
        (
            Phase("Exploration", 8, 12.0, 0.05, "cabinet"),
            Phase("Cruising", 8, 1.0, 0.3, "sofa"),
            Phase("Exploration", 8, -12.0, 0.05, "shelf"),
            Phase("Cruising", 6, 0.5, 0.3, "plant"),
            Phase("Goal", 6, 6.0, 0.1, "plant"),
        ),
        start_xy=(3.0, 3.0),
        start_yaw_deg=0.0,
    )
    return scene, traj


PRESETS = {
    "corridor": (_corridor, "24 m corridor with four landmarks; mostly forward motion"),
    "two-room": (_two_room, "two rooms joined by a doorway; scan, cross, approach"),
    "turn-heavy": (_turn_heavy, "10 m square room; alternating in-place scans and short cruises"),
}


def preset(name: str, seed: int = 0):
    """``(scene, trajectory)`` for a named preset."""
    try:
        builder, _ = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return builder(seed)
