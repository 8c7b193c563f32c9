"""Synthetic object-centric tabletop world.

Boxes are ``(x1, y1, x2, y2)`` in normalized image coordinates (y grows
downwards, so "up" in the image is smaller y) and depth ``d`` is in [0, 1]
with 0 nearest to the camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .mpdsl import ACTIONS, COLORS, RELATIONS, SHAPES

FEATURE_DIM = 16
N_COLORS = len(COLORS)
N_SHAPES = len(SHAPES)
GEOMETRY_SLICE = slice(N_COLORS + N_SHAPES, FEATURE_DIM)

# Rendering palette (RGB).
PALETTE = {
    "red": (220, 30, 30),
    "blue": (30, 60, 220),
    "cyan": (30, 200, 210),
    "green": (30, 170, 50),
    "magenta": (200, 40, 200),
    "yellow": (235, 215, 30),
    "white": (250, 250, 250),
}
BACKGROUND = (128, 128, 128)


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Location:
    b: tuple
    d: float

    def __post_init__(self):
        b = tuple(float(v) for v in self.b)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", float(self.d))
        if len(b) != 4:
            raise ValueError("box needs four corners")
        vals = b + (self.d,)
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValueError(f"location components must lie in [0,1]: {vals}")
        if not (b[0] < b[2] and b[1] < b[3]):
            raise ValueError(f"degenerate box {b}")

    @classmethod
    def from_array(cls, arr) -> "Location":
        arr = [float(v) for v in arr]
        return cls(tuple(arr[:4]), arr[4])

    def as_array(self) -> np.ndarray:
        return np.array(self.b + (self.d,), dtype=np.float64)

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.b
        return (x1 + x2) / 2.0, (y1 + y2) / 2.0

    @property
    def size(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.b
        return x2 - x1, y2 - y1


@dataclass(frozen=True)
class ObjectRecord:
    id: int
    color: str
    shape: str
    loc: Location
    feature: np.ndarray = field(compare=False, repr=False)

    def __post_init__(self):
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")


@dataclass(frozen=True)
class Scene:
    objects: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def ids(self) -> list[int]:
        return [o.id for o in self.objects]

    def by_id(self, oid: int) -> ObjectRecord:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")

    def index_of(self, oid: int) -> int:
        for i, o in enumerate(self.objects):
            if o.id == oid:
                return i
        raise KeyError(f"no object with id {oid}")

    def world(self) -> dict[int, Location]:
        return {o.id: o.loc for o in self.objects}

    def loc_array(self) -> np.ndarray:
        return np.stack([o.loc.as_array() for o in self.objects]) if self.objects else np.zeros((0, 5))

    def feature_array(self) -> np.ndarray:
        return np.stack([o.feature for o in self.objects]) if self.objects else np.zeros((0, FEATURE_DIM))

    def with_world(self, world: Mapping[int, Location], refresh_features: bool = True) -> "Scene":
        """Copy with new locations; geometry features follow the boxes, appearance is kept."""
        objs = []
        for o in self.objects:
            loc = world[o.id]
            feat = o.feature
            if refresh_features:
                feat = feat.copy()
                feat[GEOMETRY_SLICE] += geometry_features(loc.as_array()) - geometry_features(o.loc.as_array())
            objs.append(replace(o, loc=loc, feature=feat))
        return Scene(objs, self.seed)


# WorldState is a plain mapping object id -> Location.
WorldState = dict


@dataclass(frozen=True)
class SceneConfig:
    x_range: tuple = (0.15, 0.85)
    y_range: tuple = (0.15, 0.85)
    depth_range: tuple = (0.2, 0.8)
    size_range: tuple = (0.06, 0.12)
    overlap_threshold: float = 0.05
    max_retries: int = 2000
    unique_attributes: bool = True
    feature_noise: float = 0.05
    margin: float = 0.02


# -- geometry -------------------------------------------------------------------------


def _check_box(b) -> None:
    if not (b[0] < b[2] and b[1] < b[3]):
        raise ValueError(f"degenerate box {tuple(b)}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    _check_box(a)
    _check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    rb = np.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def geometry_features(loc: np.ndarray) -> np.ndarray:
    """(cx, cy, w, h, d, aspect) for a 5-vector location."""
    x1, y1, x2, y2, d = loc
    w, h = x2 - x1, y2 - y1
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, w, h, d, w / max(h, 1e-3)])


def gold_relation(rel: str, a: Location, b: Location, margin: float = 0.05) -> bool:
    """Whether ``a`` stands in relation ``rel`` to ``b`` (e.g. a is left of b)."""
    if rel == "left":
        return a.center[0] < b.center[0] - margin
    if rel == "right":
        return a.center[0] > b.center[0] + margin
    if rel == "behind":
        return a.d > b.d + margin
    if rel == "front":
        return a.d < b.d - margin
    raise KeyError(f"unknown relation {rel!r}")


def gold_relation_matrix(rel: str, locs: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """``M[i, j]`` = 1 if object i is ``rel`` to object j (diagonal zero)."""
    locs = np.asarray(locs, dtype=np.float64)
    cx = (locs[:, 0] + locs[:, 2]) / 2
    d = locs[:, 4]
    if rel == "left":
        m = cx[:, None] < cx[None, :] - margin
    elif rel == "right":
        m = cx[:, None] > cx[None, :] + margin
    elif rel == "behind":
        m = d[:, None] > d[None, :] + margin
    elif rel == "front":
        m = d[:, None] < d[None, :] - margin
    else:
        raise KeyError(f"unknown relation {rel!r}")
    m = m.astype(np.float64)
    np.fill_diagonal(m, 0.0)
    return m


def _clamp(box: np.ndarray, d: float) -> Location:
    # rigid shift keeps the size; boxes never exceed the unit square at the sizes used here
    box = box.copy()
    for lo, hi in ((0, 2), (1, 3)):
        if box[lo] < 0.0:
            box[[lo, hi]] -= box[lo]
        if box[hi] > 1.0:
            box[[lo, hi]] -= box[hi] - 1.0
    box = np.clip(box, 0.0, 1.0)
    return Location(tuple(box), float(np.clip(d, 0.0, 1.0)))


def apply_gold_action(act: str, subj: Location, ref: Location, margin: float = 0.02) -> Location:
    """Ground-truth placement of ``subj`` relative to ``ref`` for action ``act``."""
    if act not in ACTIONS:
        raise KeyError(f"unknown action {act!r}")
    w, h = subj.size
    rx1, ry1, rx2, ry2 = ref.b
    rcx, rcy = ref.center
    if act == "mov_right":
        x1, cy, d = rx2 + margin, rcy, ref.d
        box = np.array([x1, cy - h / 2, x1 + w, cy + h / 2])
    elif act == "mov_left":
        x2, cy, d = rx1 - margin, rcy, ref.d
        box = np.array([x2 - w, cy - h / 2, x2, cy + h / 2])
    elif act == "mov_behind":
        cx, cy, d = rcx, rcy - 0.05, ref.d + 0.1
        box = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    elif act == "mov_front":
        cx, cy, d = rcx, rcy + 0.05, ref.d - 0.1
        box = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    else:  # mov_top
        cx, d = rcx, ref.d
        box = np.array([cx - w / 2, ry1 - h, cx + w / 2, ry1])
    return _clamp(box, d)


# -- scenes and features ---------------------------------------------------------------


def _feature_rng(seed: int, oid: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(oid), int(salt)]))


def base_feature(color: str, shape: str, loc: Location) -> np.ndarray:
    f = np.zeros(FEATURE_DIM)
    f[COLORS.index(color)] = 1.0
    f[N_COLORS + SHAPES.index(shape)] = 1.0
    f[GEOMETRY_SLICE] = geometry_features(loc.as_array())
    return f


def featurize(obj: ObjectRecord, noise_sigma: float, seed) -> np.ndarray:
    """Synthetic dense feature: attribute one-hots and box geometry plus Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    f = base_feature(obj.color, obj.shape, obj.loc)
    if noise_sigma > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        f = f + rng.normal(0.0, noise_sigma, size=FEATURE_DIM)
    return f


def make_object(oid: int, color: str, shape: str, loc: Location, noise: float, seed: int, salt: int = 0) -> ObjectRecord:
    obj = ObjectRecord(oid, color, shape, loc, np.zeros(FEATURE_DIM))
    return replace(obj, feature=featurize(obj, noise, _feature_rng(seed, oid, salt)))


def generate_scene(seed: int, n: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Rejection-sample ``n`` non-overlapping objects with random attributes."""
    if n < 1:
        raise ValueError("a scene needs at least one object")
    rng = np.random.default_rng(seed)
    combos = [(c, s) for c in COLORS for s in SHAPES]
    if cfg.unique_attributes:
        if n > len(combos):
            raise PlacementError(f"cannot draw {n} objects with distinct attributes")
        attrs = [combos[i] for i in rng.permutation(len(combos))[:n]]
    else:
        attrs = [combos[i] for i in rng.integers(len(combos), size=n)]
    lo, hi = cfg.size_range
    boxes: list[np.ndarray] = []
    for k in range(n):
        for _ in range(cfg.max_retries):
            w, h = rng.uniform(lo, hi, size=2)
            x1 = rng.uniform(cfg.x_range[0], cfg.x_range[1] - w)
            y1 = rng.uniform(cfg.y_range[0], cfg.y_range[1] - h)
            box = np.array([x1, y1, x1 + w, y1 + h])
            if not boxes or iou_matrix(box, np.stack(boxes)).max() < cfg.overlap_threshold:
                boxes.append(box)
                break
        else:
            area = (cfg.x_range[1] - cfg.x_range[0]) * (cfg.y_range[1] - cfg.y_range[0])
            density = k * ((lo + hi) / 2) ** 2 / area
            raise PlacementError(
                f"placed {k} of {n} objects after {cfg.max_retries} retries (box density {density:.2f})"
            )
    depths = rng.uniform(*cfg.depth_range, size=n)
    objs = [
        make_object(i, c, s, Location(tuple(b), d), cfg.feature_noise, seed)
        for i, ((c, s), b, d) in enumerate(zip(attrs, boxes, depths))
    ]
    return Scene(objs, seed)


def associate(scene_i: Scene, scene_f: Scene) -> dict[int, int]:
    """Greedy one-to-one matching by descending cosine similarity of features."""
    if len(scene_i) != len(scene_f):
        raise ValueError(f"object count mismatch: {len(scene_i)} vs {len(scene_f)}")
    if not len(scene_i):
        return {}
    fa, fb = scene_i.feature_array(), scene_f.feature_array()
    fa = fa / np.linalg.norm(fa, axis=1, keepdims=True)
    fb = fb / np.linalg.norm(fb, axis=1, keepdims=True)
    sim = fa @ fb.T
    ids_i, ids_f = scene_i.ids, scene_f.ids
    pairs = sorted(
        ((-sim[a, b], ids_i[a], ids_f[b]) for a in range(len(ids_i)) for b in range(len(ids_f)))
    )
    out: dict[int, int] = {}
    used: set[int] = set()
    for _, a, b in pairs:
        if a in out or b in used:
            continue
        out[a] = b
        used.add(b)
    return out


# -- serialization ------------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "seed": int(scene.seed),
        "objects": [
            {
                "id": o.id,
                "color": o.color,
                "shape": o.shape,
                "b": list(o.loc.b),
                "d": o.loc.d,
                "feature": [float(v) for v in o.feature],
            }
            for o in scene.objects
        ],
    }


def scene_from_dict(rec: Mapping) -> Scene:
    objs = [
        ObjectRecord(
            int(o["id"]), o["color"], o["shape"], Location(tuple(o["b"]), o["d"]),
            np.asarray(o["feature"], dtype=np.float64),
        )
        for o in rec["objects"]
    ]
    return Scene(objs, int(rec.get("seed", 0)))


def save_scenes(path, scenes: Iterable[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_dict(s), sort_keys=True) + "\n")


def load_scenes(path) -> list[Scene]:
    with open(path, encoding="utf-8") as fh:
        return [scene_from_dict(json.loads(line)) for line in fh if line.strip()]


# -- rendering --------------------------------------------------------------------------


def render_array(scene: Scene, size: int = 256) -> np.ndarray:
    """Paint the scene far-to-near into an ``(size, size, 3)`` uint8 array."""
    from PIL import Image, ImageDraw

    img = Image.new("RGB", (size, size), BACKGROUND)
    draw = ImageDraw.Draw(img)
    order = sorted(scene.objects, key=lambda o: (-o.loc.d, o.id))
    for o in order:
        x1, y1, x2, y2 = (int(round(v * (size - 1))) for v in o.loc.b)
        col = PALETTE[o.color]
        draw.rectangle([x1, y1, x2, y2], fill=col)
        dark = tuple(c // 2 for c in col)
        if o.shape == "lego":
            # studs along the top edge
            r = max(1, (x2 - x1) // 8)
            for sx in (x1 + (x2 - x1) // 3, x1 + 2 * (x2 - x1) // 3):
                draw.ellipse([sx - r, y1 + r, sx + r, y1 + 3 * r], fill=dark)
        elif o.shape == "dice":
            r = max(1, (x2 - x1) // 10)
            for px, py in ((0.3, 0.3), (0.7, 0.7), (0.5, 0.5)):
                cx, cy = x1 + px * (x2 - x1), y1 + py * (y2 - y1)
                draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=dark)
    return np.asarray(img)


def render(scene: Scene, path, size: int = 256) -> None:
    """Write a PNG of the scene."""
    from PIL import Image

    arr = render_array(scene, size)
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write render to {path}: {exc}") from exc


__all__ = [
    "ACTIONS", "RELATIONS", "FEATURE_DIM", "GEOMETRY_SLICE", "Location", "ObjectRecord", "Scene",
    "SceneConfig", "PlacementError", "iou", "iou_matrix", "geometry_features", "gold_relation",
    "gold_relation_matrix", "apply_gold_action", "featurize", "generate_scene", "associate",
    "scene_to_dict", "scene_from_dict", "render", "render_array",
]
