"""Software renderer for the block world.

Every object in the scene is an axis-aligned box, so rendering is a per-ray
slab test against all boxes, keeping the nearest hit (a z-buffer). Each pixel
averages ``supersample**2`` rays and is quantized to 8 bits like a real
camera, which keeps sub-pixel edge information in the intensities and makes
replay storage as uint8 lossless.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .world import BIN_SIZE, WorldState

Vec3 = tuple[float, float, float]

IMAGE_RESOLUTION = 32
MAX_RESOLUTION = 64
SUPERSAMPLE = 3
FAR_PLANE = 2.0
CAMERA_NOISE_STD = 0.01
CAMERA_TARGET: Vec3 = (0.0, 0.0, 0.08)
VIEW_NAMES = ("Shoulder", "Left", "Right")

BACKGROUND = (0.08, 0.08, 0.1)
COLORS = {
    "bin": (0.45, 0.45, 0.45),
    "blue": (0.1, 0.25, 0.95),
    "orange": (1.0, 0.55, 0.1),
    "fixture": (0.55, 0.35, 0.2),
    "hole": (0.15, 0.15, 0.15),
    "target_hole": (0.1, 0.85, 0.25),
    "finger": (0.9, 0.9, 0.9),
    "palm": (0.75, 0.1, 0.1),
}
# Per-face brightness: +z, -z, +-x, +-y.
FACE_SHADE = {(2, 1): 1.0, (2, -1): 0.5, (0, 1): 0.8, (0, -1): 0.8, (1, 1): 0.65, (1, -1): 0.65}

FINGER_SIZE = (0.008, 0.02, 0.045)
FINGER_GAP_OPEN = 0.075
FINGER_GAP_EMPTY = 0.016
RAW_MAGIC = b"MVQI"


@dataclass(frozen=True)
class CameraPose:
    position: Vec3
    look_at: Vec3
    up: Vec3
    fov_degrees: float = 45.0

    def __post_init__(self):
        up = np.asarray(self.up, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - np.asarray(self.position, dtype=np.float64)
        if abs(np.linalg.norm(up) - 1.0) > 1e-9:
            raise ValueError("camera up vector must be unit norm")
        if np.linalg.norm(fwd) == 0 or np.linalg.norm(np.cross(up, fwd / np.linalg.norm(fwd))) < 1e-3:
            raise ValueError("camera up vector is parallel to the view axis")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) orthonormal camera axes."""
        fwd = np.asarray(self.look_at, dtype=np.float64) - np.asarray(self.position, dtype=np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)

    def project(self, point: Sequence[float], resolution: int = IMAGE_RESOLUTION) -> tuple[float, float, float]:
        """Pinhole projection to continuous (row, col) pixel coordinates and view depth.

        Pixel (i, j) covers [i, i+1) x [j, j+1), so its center is (i + 0.5, j + 0.5).
        """
        fwd, right, up = self.basis()
        v = np.asarray(point, dtype=np.float64) - np.asarray(self.position, dtype=np.float64)
        z = float(v @ fwd)
        t = math.tan(math.radians(self.fov_degrees) / 2)
        x = float(v @ right) / (z * t)
        y = float(v @ up) / (z * t)
        return (1 - y) / 2 * resolution, (x + 1) / 2 * resolution, z


def camera_from_orbit(azimuth_deg: float, elevation_deg: float, distance: float,
                      target: Vec3 = CAMERA_TARGET, fov_degrees: float = 45.0) -> CameraPose:
    """Camera on a sphere around ``target``; azimuth 0 is behind the robot, negative is to its left."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    offset = np.array([math.sin(az) * math.cos(el), -math.cos(az) * math.cos(el), math.sin(el)])
    pos = np.asarray(target) + distance * offset
    return CameraPose(tuple(float(v) for v in pos), target, (0.0, 0.0, 1.0), fov_degrees)


def nominal_cameras() -> list[CameraPose]:
    # Shoulder sits close to Left on purpose; Right sees the scene from the opposite side.
    return [
        camera_from_orbit(-20.0, 60.0, 1.0),
        camera_from_orbit(-60.0, 45.0, 1.0),
        camera_from_orbit(60.0, 45.0, 1.0),
    ]


def perturb_cameras(nominal: Sequence[CameraPose], seed, noise_std: float = CAMERA_NOISE_STD) -> list[CameraPose]:
    """Per-episode uniform noise of the given standard deviation on position, look_at and up."""
    if noise_std == 0:
        return list(nominal)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    half = noise_std * math.sqrt(3.0)
    out = []
    for cam in nominal:
        while True:
            pos, look, up = (np.asarray(v, dtype=np.float64) + rng.uniform(-half, half, 3)
                             for v in (cam.position, cam.look_at, cam.up))
            up = up / np.linalg.norm(up)
            try:
                out.append(CameraPose(tuple(map(float, pos)), tuple(map(float, look)), tuple(map(float, up)), cam.fov_degrees))
                break
            except ValueError:
                continue
    return out


# ---------------------------------------------------------------- scene


def scene_boxes(state: WorldState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scene as (lo, hi, rgb) arrays, one row per box."""
    boxes: list[tuple[Sequence[float], Sequence[float], str]] = []

    def add(center, size, color):
        c, s = np.asarray(center, dtype=np.float64), np.asarray(size, dtype=np.float64) / 2
        boxes.append((c - s, c + s, color))


    for cx, cy, cz in state.bins:
        add((cx, cy, cz - 0.005), (BIN_SIZE[0], BIN_SIZE[1], 0.01), "bin")
    fx = state.fixture
    if fx is not None:
        x, y, top = fx.position
        add((x, y, top - fx.size[2] / 2), fx.size, "fixture")
        side = fx.hole_clearance * 2 + state.config.block_edge
        for k, (hx, hy, _) in enumerate(fx.hole_centers()):
            add((hx, hy, top + 0.0005), (side, side, 0.001), "target_hole" if k == 1 else "hole")
    for b in state.blocks:
        add(b.position, (b.edge_length,) * 3, b.color.value)

    gx, gy, gz = state.gripper_position
    if not state.gripper_closed:
        gap = FINGER_GAP_OPEN
    elif state.attached_index is not None:
        gap = state.blocks[state.attached_index].edge_length + FINGER_SIZE[0]
    else:
        gap = FINGER_GAP_EMPTY
    fz = gz + FINGER_SIZE[2] / 2 - 0.02
    for sgn in (-1, 1):
        add((gx + sgn * gap / 2, gy, fz), FINGER_SIZE, "finger")
    add((gx, gy, fz + FINGER_SIZE[2] / 2 + 0.006), (gap + FINGER_SIZE[0], 0.03, 0.012), "palm")

    lo = np.array([b[0] for b in boxes]).reshape(-1, 3)
    hi = np.array([b[1] for b in boxes]).reshape(-1, 3)
    rgb = np.array([COLORS[b[2]] for b in boxes]).reshape(-1, 3)
    return lo, hi, rgb


@functools.lru_cache(maxsize=256)
def _camera_frame(camera: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    fwd, right, up = camera.basis()
    return np.asarray(camera.position, dtype=np.float64), fwd, right, up, math.tan(math.radians(camera.fov_degrees) / 2)


@functools.lru_cache(maxsize=64)
def _ray_directions(camera: CameraPose, resolution: int, supersample: int) -> tuple[np.ndarray, np.ndarray]:
    """(n, n, 3) ray directions with unit forward component, so hit distance equals view depth,
    plus the (n, n, 3) index of the face each ray would see if it hit a box through that axis."""
    _, fwd, right, up, t = _camera_frame(camera)
    n = resolution * supersample
    u = ((np.arange(n) + 0.5) / n * 2 - 1) * t
    d = fwd + u[None, :, None] * right + (-u)[:, None, None] * up
    # A ray entering through the slab of axis k sees the face whose normal opposes d_k.
    face = np.arange(3) * 2 + (d < 0)
    d.setflags(write=False)
    face.setflags(write=False)
    return d, face


# Face index = 2 * axis + (normal points to +axis).
_FACE_TABLE = np.array([FACE_SHADE[(ax, sg)] for ax in range(3) for sg in (-1, 1)])


def _screen_rects(camera: CameraPose, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Conservative subpixel rectangles (r0, r1, c0, c1) per box; empty rectangles for off-screen boxes."""
    pick = np.array(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij")).reshape(3, -1).T  # (8, 3)
    corners = np.where(pick[None, :, :] == 0, lo[:, None, :], hi[:, None, :])  # (B, 8, 3)
    origin, fwd, right, up, t = _camera_frame(camera)
    v = corners - origin
    z = v @ fwd
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = ((v @ right) / (z * t) + 1) / 2 * n
        rows = (1 - (v @ up) / (z * t)) / 2 * n
    rects = np.stack([np.floor(rows.min(1)) - 1, np.ceil(rows.max(1)) + 1,
                      np.floor(cols.min(1)) - 1, np.ceil(cols.max(1)) + 1], axis=1)
    behind = z <= 1e-6
    rects[behind.any(1)] = (0, n, 0, n)
    rects[behind.all(1)] = (0, 0, 0, 0)
    return np.clip(rects, 0, n).astype(int)


def _trace(camera: CameraPose, dirs: np.ndarray, faces: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Z-buffered nearest hit per ray: (box index or -1, depth, face shade)."""
    n = dirs.shape[0]
    origin = _camera_frame(camera)[0]
    zbuf = np.full((n, n), np.inf)
    ids = np.full((n, n), -1)
    face_buf = np.zeros((n, n), dtype=np.int64)
    for k, (r0, r1, c0, c1) in enumerate(_screen_rects(camera, lo, hi, n)):
        if r0 >= r1 or c0 >= c1:
            continue
        d = dirs[r0:r1, c0:c1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[k] - origin) / d
            t2 = (hi[k] - origin) / d
        tnear = np.minimum(t1, t2)
        entry = tnear.max(axis=-1)
        zb = zbuf[r0:r1, c0:c1]
        hit = (np.maximum(t1, t2).min(axis=-1) >= entry) & (entry > 0) & (entry < zb)
        if not hit.any():
            continue
        axis = tnear.argmax(axis=-1)
        face = np.take_along_axis(faces[r0:r1, c0:c1], axis[..., None], axis=-1)[..., 0]
        zb[hit] = entry[hit]
        ids[r0:r1, c0:c1][hit] = k
        face_buf[r0:r1, c0:c1][hit] = face[hit]
    return ids, zbuf, _FACE_TABLE[face_buf]


@dataclass(frozen=True)
class ViewImage:
    pixels: np.ndarray  # (H, W, C) float32 in [0, 1], multiples of 1/255
    view_id: int

    @property
    def has_depth(self) -> bool:
        return self.pixels.shape[-1] == 4


@dataclass(frozen=True)
class MultiViewObservation:
    views: tuple[ViewImage, ...]
    gripper_closed: bool

    def stacked(self) -> np.ndarray:
        return np.stack([v.pixels for v in self.views])


def quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render(state: WorldState, camera: CameraPose, with_depth: bool = False, view_id: int = 0,
           resolution: int = IMAGE_RESOLUTION, supersample: int = SUPERSAMPLE) -> ViewImage:
    return render_boxes(*scene_boxes(state), camera, with_depth, view_id, resolution, supersample)


def render_boxes(lo: np.ndarray, hi: np.ndarray, rgb: np.ndarray, camera: CameraPose, with_depth: bool = False,
                 view_id: int = 0, resolution: int = IMAGE_RESOLUTION, supersample: int = SUPERSAMPLE) -> ViewImage:
    """Render an explicit box list; rows of ``lo``/``hi``/``rgb`` describe one box each."""
    if not 1 <= resolution <= MAX_RESOLUTION:
        raise ValueError(f"resolution must be in [1, {MAX_RESOLUTION}]")
    lo, hi, rgb = (np.asarray(a, dtype=np.float64).reshape(-1, 3) for a in (lo, hi, rgb))
    dirs, faces = _ray_directions(camera, resolution, supersample)
    ids, depth, shade = _trace(camera, dirs, faces, lo, hi)
    hit = ids >= 0
    palette = np.vstack([rgb, [BACKGROUND]])  # id -1 picks the background row
    color = np.where(hit[..., None], palette[ids] * shade[..., None], np.asarray(BACKGROUND))
    channels = [color]
    if with_depth:
        channels.append(np.minimum(np.where(hit, depth, FAR_PLANE) / FAR_PLANE, 1.0)[..., None])
    img = np.concatenate(channels, axis=-1)
    s, n = supersample, resolution
    img = img.reshape(n, s, n, s, -1).mean(axis=(1, 3))
    return ViewImage(quantize(img), view_id)


def observe(state: WorldState, cameras: Sequence[CameraPose], with_depth: bool = False,
            resolution: int = IMAGE_RESOLUTION, supersample: int = SUPERSAMPLE) -> MultiViewObservation:
    views = tuple(render(state, cam, with_depth, i, resolution, supersample) for i, cam in enumerate(cameras))
    return MultiViewObservation(views, state.gripper_closed)


def dump_raw(image: ViewImage, path: str | Path) -> None:
    """Debug dump: 16-byte header (magic, H, W, C as little-endian uint32) then uint8 pixels."""
    h, w, c = image.pixels.shape
    data = np.round(image.pixels * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", h, w, c))
        fh.write(data.tobytes())


def load_raw(path: str | Path) -> ViewImage:
    blob = Path(path).read_bytes()
    if blob[:4] != RAW_MAGIC:
        raise ValueError("not a raw image dump")
    h, w, c = struct.unpack("<III", blob[4:16])
    pixels = np.frombuffer(blob[16:], dtype=np.uint8).reshape(h, w, c).astype(np.float32) / 255.0
    return ViewImage(pixels, 0)
