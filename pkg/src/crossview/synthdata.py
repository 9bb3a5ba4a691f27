"""Procedural cross-view world: roads, buildings and landmark pillars.

World coordinates are meters with ``x`` East and ``y`` South, so world axes line
up with aerial columns and rows. A scene is rasterized once on a fine grid;
aerial patches are area-sampled from it and ground panoramas are raycast.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import MetersPerPixel, Pose
from .tensor import io

GRASS = (0.33, 0.52, 0.24)
ROAD = (0.42, 0.42, 0.44)
SKY = (0.62, 0.76, 0.95)
KIND_GRASS, KIND_ROAD, KIND_BUILDING, KIND_LANDMARK = 0, 1, 2, 3


@dataclass
class RenderConfig:
    L: int = 64
    patch_m: float = 70.0
    ground_h: int = 16
    ground_w: int = 64
    vfov: float = 90.0
    camera_height: float = 1.6
    ray_step: float = 0.25
    max_range: float = 50.0
    shade_m: float = 20.0
    raster_res: float = 0.25

    @property
    def scale(self) -> float:
        return self.patch_m / self.L


@dataclass
class SceneSpec:
    seed: int
    world_m: float
    roads: list = field(default_factory=list)  # (axis, center, width); axis 'h' => constant y
    buildings: list = field(default_factory=list)  # (x0, y0, x1, y1, height, (r, g, b))
    landmarks: list = field(default_factory=list)  # (x, y, radius, height, (r, g, b))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class CameraPose:
    """Camera location in world meters and heading in degrees (0 = North, clockwise)."""

    x: float
    y: float
    heading: float


@dataclass
class SamplePair:
    ground: np.ndarray  # H x W x 3
    aerial: np.ndarray  # L x L x 3
    gt: Pose
    scale: MetersPerPixel
    camera: CameraPose | None = None


def _color(rng) -> tuple[float, float, float]:
    h = rng.random()
    s = rng.uniform(0.45, 0.95)
    v = rng.uniform(0.55, 0.95)
    return tuple(round(c, 4) for c in colorsys.hsv_to_rgb(h, s, v))


def generate_scene(seed: int, world_m: float = 180.0, n_buildings: int = 90, n_landmarks: int = 30) -> SceneSpec:
    """Random road grid with buildings in the blocks and colored pillars along the roads."""
    rng = np.random.default_rng([seed, 0x5CE])
    scene = SceneSpec(seed=int(seed), world_m=float(world_m))
    for axis in ("h", "v"):
        n = int(rng.integers(3, 5))
        centers = np.sort(rng.uniform(0.15 * world_m, 0.85 * world_m, size=n))
        # keep parallel roads apart so blocks have room for buildings
        centers = [c for i, c in enumerate(centers) if i == 0 or c - centers[i - 1] > 18.0]
        # make sure roads pass through the central pose region
        mid = world_m / 2
        if not any(abs(c - mid) < 20 for c in centers):
            centers.append(mid + rng.uniform(-15, 15))
        for c in centers:
            scene.roads.append((axis, round(float(c), 3), round(float(rng.uniform(6.0, 10.0)), 3)))

    def near_road(x0, y0, x1, y1, margin):
        for axis, c, w in scene.roads:
            lo, hi = c - w / 2 - margin, c + w / 2 + margin
            if axis == "h" and y1 > lo and y0 < hi:
                return True
            if axis == "v" and x1 > lo and x0 < hi:
                return True
        return False

    placed: list[tuple[float, float, float, float]] = []
    tries = 0
    while len(scene.buildings) < n_buildings and tries < 40 * n_buildings:
        tries += 1
        w, d = rng.uniform(5.0, 16.0, size=2)
        x0 = rng.uniform(0, world_m - w)
        y0 = rng.uniform(0, world_m - d)
        box = (x0, y0, x0 + w, y0 + d)
        if near_road(*box, margin=1.5):
            continue
        if any(box[0] < b[2] + 2 and box[2] > b[0] - 2 and box[1] < b[3] + 2 and box[3] > b[1] - 2 for b in placed):
            continue
        placed.append(box)
        h = float(rng.uniform(3.0, 16.0))
        scene.buildings.append(tuple(round(float(v), 3) for v in box) + (round(h, 3), _color(rng)))
    tries = 0
    while len(scene.landmarks) < n_landmarks and tries < 100 * n_landmarks:
        tries += 1
        axis, c, w = scene.roads[int(rng.integers(len(scene.roads)))]
        r = float(rng.uniform(0.8, 1.8))
        along = float(rng.uniform(r, world_m - r))
        side = (w / 2 + r + rng.uniform(0.3, 2.0)) * (1 if rng.random() < 0.5 else -1)
        x, y = (along, c + side) if axis == "h" else (c + side, along)
        box = (x - r, y - r, x + r, y + r)
        if near_road(*box, margin=0.2):
            continue
        if any(box[0] < b[2] and box[2] > b[0] and box[1] < b[3] and box[3] > b[1] for b in placed):
            continue
        placed.append(box)
        scene.landmarks.append(
            (round(x, 3), round(y, 3), round(r, 3), round(float(rng.uniform(3.0, 8.0)), 3), _color(rng))
        )
    return scene


class Raster:
    """Fine-grid rasterization of a scene: kind, color and height per cell."""

    def __init__(self, scene: SceneSpec, res: float = 0.25):
        self.res = res
        n = int(math.ceil(scene.world_m / res))
        self.n = n
        c = (np.arange(n) + 0.5) * res
        X, Y = np.meshgrid(c, c)  # rows = y, cols = x
        kind = np.zeros((n, n), np.int8)
        color = np.empty((n, n, 3), np.float32)
        color[:] = GRASS
        height = np.zeros((n, n), np.float32)
        for axis, cen, w in scene.roads:
            m = np.abs((Y if axis == "h" else X) - cen) <= w / 2
            kind[m] = KIND_ROAD
            color[m] = ROAD
        for x0, y0, x1, y1, h, col in scene.buildings:
            m = (X >= x0) & (X < x1) & (Y >= y0) & (Y < y1)
            kind[m] = KIND_BUILDING
            color[m] = col
            height[m] = h
        for x, y, r, h, col in scene.landmarks:
            m = (X - x) ** 2 + (Y - y) ** 2 <= r * r
            kind[m] = KIND_LANDMARK
            color[m] = col
            height[m] = h
        self.kind, self.color, self.height = kind, color, height

    def cell(self, x, y):
        """Raster indices (row, col) for world points; out-of-world points clamp to the border."""
        j = np.clip(np.floor(np.asarray(x) / self.res).astype(np.int64), 0, self.n - 1)
        i = np.clip(np.floor(np.asarray(y) / self.res).astype(np.int64), 0, self.n - 1)
        return i, j

    def on_road(self, x: float, y: float) -> bool:
        i, j = self.cell(x, y)
        return bool(self.kind[i, j] == KIND_ROAD)


_RASTERS: dict[tuple[int, float], Raster] = {}


def raster_for(scene: SceneSpec, res: float = 0.25) -> Raster:
    key = (scene.seed, res, scene.digest())
    if key not in _RASTERS:
        if len(_RASTERS) > 64:
            _RASTERS.clear()
        _RASTERS[key] = Raster(scene, res)
    return _RASTERS[key]


def render_aerial(raster: Raster, cx: float, cy: float, cfg: RenderConfig, supersample: int = 3) -> np.ndarray:
    """North-up L x L patch centered on world point (cx, cy), area-averaged."""
    L, s = cfg.L, cfg.scale
    offs = (np.arange(L * supersample) + 0.5) / supersample - L / 2
    xs = cx + offs * s
    ys = cy + offs * s
    i, _ = raster.cell(np.zeros_like(ys), ys)
    _, j = raster.cell(xs, np.zeros_like(xs))
    img = raster.color[i[:, None], j[None, :]]
    return img.reshape(L, supersample, L, supersample, 3).mean(axis=(1, 3)).astype(np.float32)


def column_azimuths(heading: float, W: int) -> np.ndarray:
    """Absolute azimuth (deg) of each panorama column: heading + (c - W/2) * 360 / W.

    Computed in column units reduced mod W, so headings that are whole columns
    give bit-identical azimuths to the corresponding shifted columns.
    """
    step = 360.0 / W
    units = np.mod(heading / step + np.arange(W) - W / 2, W)
    return units * step


def render_ground(raster: Raster, x: float, y: float, heading: float, cfg: RenderConfig) -> np.ndarray:
    """Cylindrical H x W panorama raycast from (x, y); column W/2 looks along ``heading``."""
    H, W = cfg.ground_h, cfg.ground_w
    az = np.radians(column_azimuths(heading, W))
    dx, dy = np.sin(az), -np.cos(az)
    t = np.arange(1, int(round(cfg.max_range / cfg.ray_step)) + 1) * cfg.ray_step
    px = x + dx[:, None] * t[None, :]
    py = y + dy[:, None] * t[None, :]
    i, j = raster.cell(px, py)
    solid = raster.kind[i, j] >= KIND_BUILDING
    hit = solid.any(axis=1)
    first = np.argmax(solid, axis=1)
    cols = np.arange(W)
    dist = np.where(hit, t[first], np.inf)
    hi, hj = i[cols, first], j[cols, first]
    obj_color = raster.color[hi, hj]
    obj_height = np.where(hit, raster.height[hi, hj], 0.0)

    elev = np.radians((H / 2 - np.arange(H) - 0.5) * cfg.vfov / H)
    cam_h = cfg.camera_height
    top = np.where(hit, np.arctan2(obj_height - cam_h, np.where(hit, dist, 1.0)), -np.pi)
    img = np.empty((H, W, 3), np.float32)
    img[:] = SKY
    shade_obj = (1.0 / (1.0 + np.where(hit, dist, 0) / cfg.shade_m))[:, None] * obj_color
    for r, phi in enumerate(elev):
        if phi >= 0:
            m = hit & (top >= phi)
            img[r, m] = shade_obj[m]
            continue
        g = cam_h / math.tan(-phi)
        gi, gj = raster.cell(x + dx * g, y + dy * g)
        floor = raster.color[gi, gj] / (1.0 + g / cfg.shade_m)
        obj = hit & (dist <= g)
        img[r] = np.where(obj[:, None], shade_obj, floor)
    return img


def render_pair(scene: SceneSpec, camera: CameraPose, jitter_seed: int, cfg: RenderConfig | None = None) -> SamplePair:
    """Aerial patch whose center quarter contains the camera, plus the camera's panorama."""
    cfg = cfg or RenderConfig()
    raster = raster_for(scene, cfg.raster_res)
    if not raster.on_road(camera.x, camera.y):
        raise ValueError(f"camera ({camera.x:.2f}, {camera.y:.2f}) is not on a road")
    rng = np.random.default_rng([int(jitter_seed), 0xA1])
    L, s = cfg.L, cfg.scale
    # camera pixel offset from the patch center, uniform in [-L/4, L/4)
    off = rng.uniform(-L / 4, L / 4, size=2)
    cy = camera.y - off[0] * s
    cx = camera.x - off[1] * s
    aerial = render_aerial(raster, cx, cy, cfg)
    ground = render_ground(raster, camera.x, camera.y, camera.heading, cfg)
    gt = Pose(float(L / 2 + off[0]), float(L / 2 + off[1]), float(camera.heading))
    return SamplePair(ground, aerial, gt, MetersPerPixel(s), camera)


def sample_camera(scene: SceneSpec, rng: np.random.Generator, cfg: RenderConfig | None = None,
                  margin: float | None = None) -> CameraPose:
    """Uniform heading and a uniformly random on-road location away from the world border."""
    cfg = cfg or RenderConfig()
    raster = raster_for(scene, cfg.raster_res)
    margin = cfg.patch_m * 0.75 if margin is None else margin
    for _ in range(10_000):
        x, y = rng.uniform(margin, scene.world_m - margin, size=2)
        if raster.on_road(x, y):
            return CameraPose(float(x), float(y), float(rng.uniform(0, 360)))
    raise RuntimeError(f"scene {scene.seed} has no road inside the pose region")


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

SPLITS = ("train", "same", "cross")
_SPLIT_CODE = {"train": 1, "same": 2, "cross": 3}


def scene_seeds(seed: int, split: str, n_scenes: int) -> list[int]:
    """Train and same-area test share one scene pool; cross-area uses a disjoint pool."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    base = int(seed) * 100_000 + (50_000 if split == "cross" else 0)
    return [base + i for i in range(n_scenes)]


def make_samples(n: int, seed: int, split: str, n_scenes: int = 20, cfg: RenderConfig | None = None):
    """Yield (record, SamplePair) for ``n`` samples, cycling through the split's scenes."""
    cfg = cfg or RenderConfig()
    seeds = scene_seeds(seed, split, n_scenes)
    scenes = {}
    for idx in range(n):
        sseed = seeds[idx % len(seeds)]
        if sseed not in scenes:
            scenes[sseed] = generate_scene(sseed)
        scene = scenes[sseed]
        rng = np.random.default_rng([int(seed), _SPLIT_CODE[split], idx])
        cam = sample_camera(scene, rng, cfg)
        pair = render_pair(scene, cam, jitter_seed=int(rng.integers(2**31)), cfg=cfg)
        rec = {
            "id": f"{split}_{idx:06d}",
            "u": pair.gt.u,
            "v": pair.gt.v,
            "heading": pair.gt.heading,
            "scale": pair.scale.scale,
            "split": split,
            "scene_seed": sseed,
        }
        yield rec, pair


def build_dataset(out, n: int, seed: int, split: str = "train", n_scenes: int = 20,
                  overwrite: bool = False, cfg: RenderConfig | None = None) -> Path:
    """Write ``index.jsonl`` plus ``ground_<id>.cvt`` / ``aerial_<id>.cvt`` per sample."""
    if n <= 0:
        raise ValueError("n must be positive")
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} is not empty (use overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec, pair in make_samples(n, seed, split, n_scenes, cfg):
        io.save(out / f"ground_{rec['id']}.cvt", pair.ground)
        io.save(out / f"aerial_{rec['id']}.cvt", pair.aerial)
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "index.jsonl").write_text("\n".join(lines) + "\n")
    return out


@dataclass
class Dataset:
    """In-memory dataset: stacked images plus their index records."""

    ground: np.ndarray  # N x H x W x 3
    aerial: np.ndarray  # N x L x L x 3
    records: list

    def __len__(self) -> int:
        return len(self.records)

    @property
    def poses(self) -> list[Pose]:
        return [Pose(r["u"], r["v"], r["heading"]) for r in self.records]

    @property
    def scale(self) -> float:
        return float(self.records[0]["scale"])

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.ground[idx], self.aerial[idx], [self.records[i] for i in idx])


def read_index(directory) -> list[dict]:
    text = (Path(directory) / "index.jsonl").read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    recs = read_index(d)
    if not recs:
        raise ValueError(f"{d} has an empty index")
    g = np.stack([io.load(d / f"ground_{r['id']}.cvt") for r in recs])
    a = np.stack([io.load(d / f"aerial_{r['id']}.cvt") for r in recs])
    return Dataset(g, a, recs)


def dataset_from_samples(n: int, seed: int, split: str, n_scenes: int = 20, cfg: RenderConfig | None = None) -> Dataset:
    recs, gs, aes = [], [], []
    for rec, pair in make_samples(n, seed, split, n_scenes, cfg):
        recs.append(rec)
        gs.append(pair.ground)
        aes.append(pair.aerial)
    return Dataset(np.stack(gs), np.stack(aes), recs)
