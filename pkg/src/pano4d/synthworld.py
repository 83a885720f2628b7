"""Deterministic synthetic 4D scenes: rigid box actors moving over a textured
ground, simulated LiDAR sampling, rasterized multi-camera images, exact
panoptic ground truth, and the training-time clip augmentations.

Dataset directory layout:
    manifest.json          scene metadata, calibration, class palette, file index
    points_<t>.bin         magic + u32 count + float32 LE records (x, y, z, intensity)
    labels_<t>.bin         magic + u32 count + (u16 class, u32 track) LE records
    cam<k>_<t>.ppm         binary P6 pixmap
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, FormatError
from .geometry import CameraModel, project

POINTS_MAGIC = b"P4DP\x00\x01\r\n"
LABELS_MAGIC = b"P4DL\x00\x01\r\n"
MANIFEST_FORMAT = "pano4d-scene-v1"

_GOLDEN = 0.618033988749895


# ---------------------------------------------------------------------------
# palette and config


@dataclass
class ClassSpec:
    id: int
    name: str
    kind: str  # "thing" | "stuff"
    hue: float
    intensity: float
    size: tuple[float, float, float] | None = None  # thing box half-proportions


def default_palette() -> list[ClassSpec]:
    return [
        ClassSpec(1, "ground", "stuff", 0.30, 0.25),
        ClassSpec(2, "wall", "stuff", 0.08, 0.55),
        ClassSpec(3, "crate", "thing", 0.58, 0.75, (1.4, 1.4, 1.2)),
        ClassSpec(4, "cart", "thing", 0.95, 0.45, (0.9, 1.7, 1.0)),
    ]


def validate_palette(classes: list[ClassSpec]) -> None:
    if not classes:
        raise ConfigError("classes: palette is empty")
    ids = [c.id for c in classes]
    if len(set(ids)) != len(ids):
        raise ConfigError("classes: duplicate class id")
    if any(c.id <= 0 for c in classes):
        raise ConfigError("classes: ids must be positive")
    if not any(c.kind == "stuff" for c in classes):
        raise ConfigError("classes: need at least one stuff class")
    for c in classes:
        if c.kind not in ("thing", "stuff"):
            raise ConfigError(f"classes.{c.name}.kind: '{c.kind}' is not thing/stuff")
        if c.kind == "thing" and c.size is None:
            raise ConfigError(f"classes.{c.name}.size: thing class needs a box size")


@dataclass
class SceneConfig:
    frames: int = 8
    actors_min: int = 2
    actors_max: int = 4
    classes: list[ClassSpec] = field(default_factory=default_palette)
    points_per_actor: int = 90
    ground_points: int = 400
    wall_points: int = 150
    area: float = 14.0
    speed_min: float = 0.15
    speed_max: float = 0.45
    image_height: int = 48
    image_width: int = 64
    num_cameras: int = 2
    occlusion_prob: float = 0.0
    occlusion_min: int = 1
    occlusion_max: int = 3
    spawn: str = "ring"  # "ring" | "cluster"
    size_jitter: float = 0.1

    def validate(self) -> None:
        if self.frames < 2:
            raise ConfigError("data.frames: need at least 2 frames")
        if self.actors_min < 0 or self.actors_max < self.actors_min:
            raise ConfigError("data.actors_min/actors_max: invalid range")
        validate_palette(self.classes)
        if self.actors_max > 0 and not any(c.kind == "thing" for c in self.classes):
            raise ConfigError("data.classes: actors requested but no thing class")
        if self.image_height % 8 or self.image_width % 8:
            raise ConfigError("data.image_height/width: must be divisible by 8")
        if self.num_cameras < 1:
            raise ConfigError("data.num_cameras: need at least one camera")
        if self.occlusion_min < 1 or self.occlusion_max > self.frames - 2:
            if self.occlusion_prob > 0:
                raise ConfigError("data.occlusion_min/max: window must fit inside the sequence")
        if self.spawn not in ("ring", "cluster"):
            raise ConfigError(f"data.spawn: unknown mode '{self.spawn}'")

    def thing_classes(self) -> list[ClassSpec]:
        return [c for c in self.classes if c.kind == "thing"]

    def stuff_classes(self) -> list[ClassSpec]:
        return [c for c in self.classes if c.kind == "stuff"]

    def class_by_id(self, cid: int) -> ClassSpec:
        for c in self.classes:
            if c.id == cid:
                return c
        raise KeyError(cid)


# ---------------------------------------------------------------------------
# scene data


@dataclass
class ActorTrack:
    track_id: int
    class_id: int
    size: np.ndarray  # (3,) full extents
    yaw: float
    hue: float
    centers: np.ndarray  # (F, 3)
    visible: np.ndarray  # (F,) bool


@dataclass
class FrameCloud:
    xyz: np.ndarray  # (N, 3) float32
    intensity: np.ndarray  # (N,) float32
    class_ids: np.ndarray  # (N,) uint16
    track_ids: np.ndarray  # (N,) uint32

    @property
    def num_points(self) -> int:
        return self.xyz.shape[0]


@dataclass
class PointCloudClip:
    """Two consecutive LiDAR frames stacked; timestamps are -1 then 0.

    ``world_rotation`` records the augmentation yaw applied to the points so
    consumers can rotate the camera calibration consistently.
    """

    xyz: np.ndarray  # (N, 3) float64
    intensity: np.ndarray
    timestamps: np.ndarray  # (N,) in {-1, 0}
    class_ids: np.ndarray
    track_ids: np.ndarray
    frame_index: np.ndarray  # (N,) in {0, 1}; 0 = older frame
    frame_numbers: tuple[int, int]
    world_rotation: float = 0.0

    @property
    def num_points(self) -> int:
        return self.xyz.shape[0]

    def points_of_frame(self, local: int) -> np.ndarray:
        return np.flatnonzero(self.frame_index == local)


@dataclass
class Scene:
    config: SceneConfig
    seed: int
    cameras: list[CameraModel]
    frames: list[FrameCloud]
    images: list[list[np.ndarray]]  # [frame][camera] H x W x 3 uint8
    actors: list[ActorTrack]

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def clip(self, t: int) -> PointCloudClip:
        """The 2-frame clip ending at frame t (frames t-1 and t)."""
        if t < 1 or t >= self.num_frames:
            raise IndexError(f"clip end frame {t} out of range")
        a, b = self.frames[t - 1], self.frames[t]
        n_a = a.num_points
        xyz = np.concatenate([a.xyz, b.xyz]).astype(np.float64)
        return PointCloudClip(
            xyz=xyz,
            intensity=np.concatenate([a.intensity, b.intensity]).astype(np.float64),
            timestamps=np.concatenate(
                [np.full(n_a, -1.0), np.zeros(b.num_points)]
            ),
            class_ids=np.concatenate([a.class_ids, b.class_ids]).astype(np.int64),
            track_ids=np.concatenate([a.track_ids, b.track_ids]).astype(np.int64),
            frame_index=np.concatenate(
                [np.zeros(n_a, np.int64), np.ones(b.num_points, np.int64)]
            ),
            frame_numbers=(t - 1, t),
        )


def actor_hue(class_hue: float, track_id: int) -> float:
    """Distinct per-actor hue inside a narrow band around the class hue, so
    appearance identifies both the class and the instance."""
    return (class_hue + 0.08 * ((track_id * _GOLDEN) % 1.0) - 0.04) % 1.0


def actor_color(actor: ActorTrack) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb(actor.hue, 0.85, 0.9)
    return np.array([int(round(255 * c)) for c in rgb], dtype=np.uint8)


# ---------------------------------------------------------------------------
# generation


def default_camera_rig(cfg: SceneConfig) -> list[CameraModel]:
    """Cameras at the sensor origin (1.8 m up), looking outward with a slight
    downward tilt, spread evenly in azimuth."""
    cams = []
    h, w = cfg.image_height, cfg.image_width
    fx = fy = 0.9 * w
    tilt = 0.18
    for k in range(cfg.num_cameras):
        az = 2.0 * np.pi * k / cfg.num_cameras
        d = np.array([np.cos(az), np.sin(az), 0.0])
        up = np.array([0.0, 0.0, 1.0])
        fwd = np.cos(tilt) * d - np.sin(tilt) * up
        right = np.array([d[1], -d[0], 0.0])
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        center = np.array([0.0, 0.0, 1.8])
        cams.append(CameraModel(
            fx=fx, fy=fy, cx=w / 2.0, cy=h / 2.0,
            rotation=rot, translation=-rot @ center,
            width=w, height=h,
        ))
    return cams


def _spawn_actor(rng: np.random.Generator, cfg: SceneConfig, track_id: int) -> ActorTrack:
    spec = cfg.thing_classes()[rng.integers(len(cfg.thing_classes()))]
    size = np.array(spec.size) * rng.uniform(1.0 - cfg.size_jitter,
                                             1.0 + cfg.size_jitter)
    if cfg.spawn == "cluster":
        # adjacent same-band actors; appearance is what disambiguates them
        radius = rng.uniform(5.0, 6.5)
        angle = rng.uniform(-0.3, 0.3)
    else:
        radius = rng.uniform(5.0, 0.75 * cfg.area)
        angle = rng.uniform(0, 2 * np.pi)
    start = np.array([radius * np.cos(angle), radius * np.sin(angle), size[2] / 2])
    # constant velocity; redraw until the path stays clear of the sensor
    for _ in range(64):
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        heading = rng.uniform(0, 2 * np.pi)
        vel = np.array([speed * np.cos(heading), speed * np.sin(heading), 0.0])
        path = start[None, :] + np.arange(cfg.frames)[:, None] * vel[None, :]
        if np.min(np.linalg.norm(path[:, :2], axis=1)) > 3.0:
            break
    visible = np.ones(cfg.frames, dtype=bool)
    if cfg.occlusion_prob > 0 and rng.random() < cfg.occlusion_prob:
        length = int(rng.integers(cfg.occlusion_min, cfg.occlusion_max + 1))
        start_f = int(rng.integers(1, cfg.frames - length))
        visible[start_f : start_f + length] = False
    return ActorTrack(
        track_id=track_id,
        class_id=spec.id,
        size=size,
        yaw=float(rng.uniform(0, 2 * np.pi)),
        hue=actor_hue(spec.hue, track_id),
        centers=path,
        visible=visible,
    )


def _box_surface_points(rng: np.random.Generator, n: int, size: np.ndarray) -> np.ndarray:
    """Points on the box surface, pulled slightly inward so they are strictly
    inside the closed box."""
    half = size / 2.0
    areas = np.array([
        size[1] * size[2], size[1] * size[2],
        size[0] * size[2], size[0] * size[2],
        size[0] * size[1], size[0] * size[1],
    ])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts * 0.999


def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(actor: ActorTrack, frame: int) -> np.ndarray:
    half = actor.size / 2.0
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    local = signs * half
    return local @ _rot_z(actor.yaw).T + actor.centers[frame]


def point_in_box(points: np.ndarray, actor: ActorTrack, frame: int, tol: float = 1e-9) -> np.ndarray:
    local = (points - actor.centers[frame]) @ _rot_z(actor.yaw)
    return np.all(np.abs(local) <= actor.size / 2.0 + tol, axis=1)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic under (config, seed); actors move with constant velocity
    and optionally disappear for 1-3 frames."""
    config.validate()
    rng = np.random.default_rng(seed)
    n_actors = int(rng.integers(config.actors_min, config.actors_max + 1))
    actors = [_spawn_actor(rng, config, i + 1) for i in range(n_actors)]
    cameras = default_camera_rig(config)

    ground = config.class_by_id(1) if any(c.id == 1 for c in config.classes) else config.stuff_classes()[0]
    stuff = config.stuff_classes()
    frames: list[FrameCloud] = []
    images: list[list[np.ndarray]] = []
    for f in range(config.frames):
        xyz_parts, cls_parts, trk_parts, intens_parts = [], [], [], []

        g = config.ground_points
        gx = rng.uniform(-config.area, config.area, size=g)
        gy = rng.uniform(-config.area, config.area, size=g)
        gz = rng.uniform(0.0, 0.05, size=g)
        xyz_parts.append(np.stack([gx, gy, gz], axis=1))
        cls_parts.append(np.full(g, ground.id))
        trk_parts.append(np.zeros(g))
        intens_parts.append(ground.intensity + rng.normal(0, 0.02, size=g))

        wall = next((c for c in stuff if c.name == "wall"), None)
        if wall is not None and config.wall_points > 0:
            m = config.wall_points
            ang = rng.uniform(0, 2 * np.pi, size=m)
            wz = rng.uniform(0.0, 2.0, size=m)
            xyz_parts.append(np.stack(
                [config.area * np.cos(ang), config.area * np.sin(ang), wz], axis=1))
            cls_parts.append(np.full(m, wall.id))
            trk_parts.append(np.zeros(m))
            intens_parts.append(wall.intensity + rng.normal(0, 0.02, size=m))

        for actor in actors:
            if not actor.visible[f]:
                continue
            local = _box_surface_points(rng, config.points_per_actor, actor.size)
            world = local @ _rot_z(actor.yaw).T + actor.centers[f]
            spec = config.class_by_id(actor.class_id)
            k = config.points_per_actor
            xyz_parts.append(world)
            cls_parts.append(np.full(k, actor.class_id))
            trk_parts.append(np.full(k, actor.track_id))
            intens_parts.append(spec.intensity + rng.normal(0, 0.02, size=k))

        frames.append(FrameCloud(
            xyz=np.concatenate(xyz_parts).astype(np.float32),
            intensity=np.clip(np.concatenate(intens_parts), 0.0, 1.0).astype(np.float32),
            class_ids=np.concatenate(cls_parts).astype(np.uint16),
            track_ids=np.concatenate(trk_parts).astype(np.uint32),
        ))
        images.append([render_frame(actors, f, cam) for cam in cameras])

    return Scene(config=config, seed=seed, cameras=cameras, frames=frames,
                 images=images, actors=actors)


# ---------------------------------------------------------------------------
# rasterization

_CHECKER_A = np.array([72, 82, 74], dtype=np.uint8)
_CHECKER_B = np.array([104, 112, 104], dtype=np.uint8)
_SKY = np.array([168, 178, 198], dtype=np.uint8)


def _convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise."""
    pts = np.unique(pts, axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and cross2(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _fill_hull(mask_shape: tuple[int, int], hull: np.ndarray) -> np.ndarray:
    """Boolean image of pixels whose center lies inside the convex hull."""
    h, w = mask_shape
    mask = np.zeros((h, w), dtype=bool)
    if len(hull) < 3:
        return mask
    x0 = max(int(np.floor(hull[:, 0].min())) - 1, 0)
    x1 = min(int(np.ceil(hull[:, 0].max())) + 2, w)
    y0 = max(int(np.floor(hull[:, 1].min())) - 1, 0)
    y1 = min(int(np.ceil(hull[:, 1].max())) + 2, h)
    if x0 >= x1 or y0 >= y1:
        return mask
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    inside = np.ones(gx.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        edge_len = float(np.hypot(b[0] - a[0], b[1] - a[1]))
        if edge_len < 1e-12:
            continue
        cross = (b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0])
        # dilate by ~half a pixel diagonal so edge points stay covered
        inside &= cross >= -0.71 * edge_len
    mask[y0:y1, x0:x1] = inside
    return mask


def actor_silhouette(actor: ActorTrack, frame: int, cam: CameraModel) -> np.ndarray | None:
    """Hull mask of the actor's box in this camera, or None if any corner is
    behind the image plane (the box is then not rendered)."""
    corners = box_corners(actor, frame)
    cam_pts = corners @ cam.rotation.T + cam.translation
    if np.any(cam_pts[:, 2] < 0.05):
        return None
    u = cam.fx * cam_pts[:, 0] / cam_pts[:, 2] + cam.cx
    v = cam.fy * cam_pts[:, 1] / cam_pts[:, 2] + cam.cy
    hull = _convex_hull_2d(np.stack([u, v], axis=1))
    return _fill_hull((cam.height, cam.width), hull)


def render_frame(actors: list[ActorTrack], frame: int, cam: CameraModel) -> np.ndarray:
    """Flat-shaded boxes over a checkered ground, far-to-near painter order."""
    h, w = cam.height, cam.width
    img = np.empty((h, w, 3), dtype=np.uint8)

    # ground: per-pixel ray / plane-z=0 intersection
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    d_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy,
                      np.ones_like(us)], axis=-1)
    d_world = d_cam @ cam.rotation  # rows of R span camera axes in world frame
    center = -cam.rotation.T @ cam.translation
    dz = d_world[..., 2]
    hits = dz < -1e-9
    t = np.where(hits, -center[2] / np.where(hits, dz, -1.0), 0.0)
    hx = center[0] + t * d_world[..., 0]
    hy = center[1] + t * d_world[..., 1]
    parity = ((np.floor(hx) + np.floor(hy)) % 2).astype(int)
    img[...] = _SKY
    img[hits & (parity == 0)] = _CHECKER_A
    img[hits & (parity == 1)] = _CHECKER_B

    order = sorted(
        (a for a in actors if a.visible[frame]),
        key=lambda a: -np.linalg.norm(a.centers[frame] - center),
    )
    for actor in order:
        sil = actor_silhouette(actor, frame, cam)
        if sil is not None:
            img[sil] = actor_color(actor)
    return img


def jitter_brightness(image: np.ndarray, scale: float) -> np.ndarray:
    """Simple brightness augmentation for rendered images."""
    return np.clip(image.astype(np.float64) * scale, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# clip augmentation


@dataclass
class AugmentParams:
    rotation_max: float = np.pi
    jitter_sigma: float = 0.0
    point_budget: int = 1_000_000


def augment_clip(clip: PointCloudClip, params: AugmentParams, seed: int) -> PointCloudClip:
    """Global z rotation, Gaussian xyz jitter, uniform subsampling to budget.

    The rotation is recorded on the clip so the camera calibration can be
    rotated consistently (the pose of the world moved, not the sensors'
    relative geometry)."""
    if params.point_budget <= 0:
        raise ConfigError("augment.point_budget: must be positive")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-params.rotation_max, params.rotation_max)
    xyz = clip.xyz @ _rot_z(theta).T
    if params.jitter_sigma > 0:
        xyz = xyz + rng.normal(0, params.jitter_sigma, size=xyz.shape)
    n = clip.num_points
    keep = np.arange(n)
    if params.point_budget < n:
        keep = np.sort(rng.choice(n, size=params.point_budget, replace=False))
    return PointCloudClip(
        xyz=xyz[keep],
        intensity=clip.intensity[keep],
        timestamps=clip.timestamps[keep],
        class_ids=clip.class_ids[keep],
        track_ids=clip.track_ids[keep],
        frame_index=clip.frame_index[keep],
        frame_numbers=clip.frame_numbers,
        world_rotation=clip.world_rotation + theta,
    )


# ---------------------------------------------------------------------------
# dataset i/o


def _write_points(path: str, frame: FrameCloud) -> None:
    recs = np.empty((frame.num_points, 4), dtype="<f4")
    recs[:, :3] = frame.xyz
    recs[:, 3] = frame.intensity
    with open(path, "wb") as fh:
        fh.write(POINTS_MAGIC)
        fh.write(np.uint32(frame.num_points).tobytes())
        fh.write(recs.tobytes())


def _read_points(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise FormatError(f"missing frame file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != POINTS_MAGIC:
            raise FormatError(f"{path}: bad magic bytes at offset 0")
        count = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        payload = fh.read()
    expected = count * 16
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated at offset {12 + len(payload)}, expected {expected} payload bytes"
        )
    recs = np.frombuffer(payload, dtype="<f4").reshape(count, 4)
    return recs[:, :3].copy(), recs[:, 3].copy()


LABEL_DTYPE = np.dtype([("cls", "<u2"), ("trk", "<u4")])


def write_label_records(path: str, class_ids: np.ndarray,
                        track_ids: np.ndarray) -> None:
    """(u16 class, u32 track) records behind a magic header and a count."""
    n = len(class_ids)
    recs = np.empty(n, dtype=LABEL_DTYPE)
    recs["cls"] = class_ids
    recs["trk"] = track_ids
    with open(path, "wb") as fh:
        fh.write(LABELS_MAGIC)
        fh.write(np.uint32(n).tobytes())
        fh.write(recs.tobytes())


def read_label_records(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise FormatError(f"missing frame file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != LABELS_MAGIC:
            raise FormatError(f"{path}: bad magic bytes at offset 0")
        count = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        payload = fh.read()
    expected = count * LABEL_DTYPE.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated at offset {12 + len(payload)}, expected {expected} payload bytes"
        )
    recs = np.frombuffer(payload, dtype=LABEL_DTYPE)
    return recs["cls"].astype(np.uint16), recs["trk"].astype(np.uint32)


def _write_labels(path: str, frame: FrameCloud) -> None:
    write_label_records(path, frame.class_ids, frame.track_ids)


def _read_labels(path: str) -> tuple[np.ndarray, np.ndarray]:
    return read_label_records(path)


def write_ppm(path: str, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.astype(np.uint8).tobytes())


def read_ppm(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FormatError(f"missing frame file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6\n"):
        raise FormatError(f"{path}: bad magic bytes at offset 0")
    header_end = data.index(b"255\n") + 4
    dims = data[3 : data.index(b"\n", 3)].split()
    w, h = int(dims[0]), int(dims[1])
    payload = data[header_end:]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: truncated at offset {header_end + len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def _palette_to_json(classes: list[ClassSpec]) -> list[dict]:
    out = []
    for c in classes:
        d = asdict(c)
        d["size"] = list(c.size) if c.size is not None else None
        out.append(d)
    return out


def _palette_from_json(items: list[dict]) -> list[ClassSpec]:
    out = []
    for d in items:
        size = tuple(d["size"]) if d.get("size") is not None else None
        out.append(ClassSpec(d["id"], d["name"], d["kind"], d["hue"],
                             d["intensity"], size))
    return out


def scene_config_to_dict(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["classes"] = _palette_to_json(cfg.classes)
    return d


def scene_config_from_dict(d: dict) -> SceneConfig:
    known = {f for f in SceneConfig.__dataclass_fields__}
    for key in d:
        if key not in known:
            raise ConfigError(f"data.{key}: unknown key")
    kwargs = dict(d)
    if "classes" in kwargs:
        kwargs["classes"] = _palette_from_json(kwargs["classes"])
    cfg = SceneConfig(**kwargs)
    cfg.validate()
    return cfg


def write_dataset(scene: Scene, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    point_files = [f"points_{t}.bin" for t in range(scene.num_frames)]
    label_files = [f"labels_{t}.bin" for t in range(scene.num_frames)]
    image_files = [
        [f"cam{k}_{t}.ppm" for k in range(len(scene.cameras))]
        for t in range(scene.num_frames)
    ]
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": scene.seed,
        "frames": scene.num_frames,
        "config": scene_config_to_dict(scene.config),
        "cameras": [
            {
                "intrinsics": cam.intrinsic_matrix().tolist(),
                "extrinsics": cam.extrinsic_matrix().tolist(),
                "width": cam.width,
                "height": cam.height,
            }
            for cam in scene.cameras
        ],
        "actors": [
            {
                "track_id": a.track_id,
                "class_id": a.class_id,
                "size": a.size.tolist(),
                "yaw": a.yaw,
                "hue": a.hue,
                "centers": a.centers.tolist(),
                "visible": a.visible.astype(int).tolist(),
            }
            for a in scene.actors
        ],
        "files": {"points": point_files, "labels": label_files, "images": image_files},
    }
    for t in range(scene.num_frames):
        _write_points(os.path.join(out_dir, point_files[t]), scene.frames[t])
        _write_labels(os.path.join(out_dir, label_files[t]), scene.frames[t])
        for k, img in enumerate(scene.images[t]):
            write_ppm(os.path.join(out_dir, image_files[t][k]), img)
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def read_dataset(scene_dir: str) -> Scene:
    mpath = os.path.join(scene_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError(f"missing manifest: {mpath}")
    with open(mpath, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{mpath}: malformed JSON ({e})") from e
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{mpath}: unknown format '{manifest.get('format')}'")
    config = scene_config_from_dict(manifest["config"])
    cameras = [
        CameraModel.from_matrices(c["intrinsics"], c["extrinsics"],
                                  c["width"], c["height"])
        for c in manifest["cameras"]
    ]
    actors = [
        ActorTrack(
            track_id=a["track_id"],
            class_id=a["class_id"],
            size=np.array(a["size"]),
            yaw=a["yaw"],
            hue=a["hue"],
            centers=np.array(a["centers"]),
            visible=np.array(a["visible"], dtype=bool),
        )
        for a in manifest["actors"]
    ]
    frames = []
    images = []
    files = manifest["files"]
    for t in range(manifest["frames"]):
        xyz, intensity = _read_points(os.path.join(scene_dir, files["points"][t]))
        cls, trk = _read_labels(os.path.join(scene_dir, files["labels"][t]))
        if cls.shape[0] != xyz.shape[0]:
            raise FormatError(
                f"{files['labels'][t]}: {cls.shape[0]} labels for {xyz.shape[0]} points"
            )
        frames.append(FrameCloud(xyz=xyz, intensity=intensity,
                                 class_ids=cls, track_ids=trk))
        images.append([read_ppm(os.path.join(scene_dir, p)) for p in files["images"][t]])
    return Scene(config=config, seed=manifest["seed"], cameras=cameras,
                 frames=frames, images=images, actors=actors)


def scene_equal(a: Scene, b: Scene) -> bool:
    if scene_config_to_dict(a.config) != scene_config_to_dict(b.config):
        return False
    if a.seed != b.seed or a.num_frames != b.num_frames:
        return False
    if len(a.cameras) != len(b.cameras) or len(a.actors) != len(b.actors):
        return False
    for ca, cb in zip(a.cameras, b.cameras):
        if not (np.array_equal(ca.intrinsic_matrix(), cb.intrinsic_matrix())
                and np.array_equal(ca.extrinsic_matrix(), cb.extrinsic_matrix())
                and (ca.width, ca.height) == (cb.width, cb.height)):
            return False
    for xa, xb in zip(a.actors, b.actors):
        if not (xa.track_id == xb.track_id and xa.class_id == xb.class_id
                and np.array_equal(xa.size, xb.size) and xa.yaw == xb.yaw
                and xa.hue == xb.hue and np.array_equal(xa.centers, xb.centers)
                and np.array_equal(xa.visible, xb.visible)):
            return False
    for fa, fb in zip(a.frames, b.frames):
        if not (np.array_equal(fa.xyz, fb.xyz)
                and np.array_equal(fa.intensity, fb.intensity)
                and np.array_equal(fa.class_ids, fb.class_ids)
                and np.array_equal(fa.track_ids, fb.track_ids)):
            return False
    for ia, ib in zip(a.images, b.images):
        for ja, jb in zip(ia, ib):
            if not np.array_equal(ja, jb):
                return False
    return True
