"""Procedural synthetic scenes.

Sprite "objects" are composites of colored primitives (disks, rings, regular
polygons) rasterized with 2x supersampling; the pointing hand is an
arrow-like glyph drawn pointing along +x and rotated continuously toward the
target at compose time. Train and test libraries use disjoint palettes and
disjoint shape-parameter ranges so test objects are genuinely novel.

Every sample pairs an exemplar scene (hand pointing at the target among
distractors) with a search scene (same target among fresh distractors, no
hand). Distractor placement keeps every distractor center off the open
hand-to-target segment by a clearance radius and outside the pointing wedge
by an angular clearance, so exactly one object lies inside the beam.

Generation is pure given (seed, split, index) and therefore reproducible and
freely parallel.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ValidationError

TRAIN_SPLIT_TAG = 0
TEST_SPLIT_TAG = 1
LIBRARY_TAG = 2


@dataclass(frozen=True)
class SceneConfig:
    canvas: int = 158
    sprite_size: int = 24
    n_train: int = 5000
    n_test: int = 1000
    n_train_sprites: int = 2075
    n_test_sprites: int = 703
    n_train_hands: int = 47
    n_test_hands: int = 8
    min_distractors: int = 1
    max_distractors: int = 3
    # distractor centers stay this far from the open hand-to-target segment
    segment_clearance: float = 24.0
    # and at least this many degrees off the pointing ray (> beam half-width
    # plus half an orientation step, so beam membership is unambiguous even
    # after quantization to the feature grid)
    ray_clearance_deg: float = 22.5
    backdrop: tuple = (236, 233, 226)
    backdrop_jitter: int = 8

    def __post_init__(self):
        if self.canvas < 2 * self.sprite_size:
            raise ValidationError(
                f"canvas {self.canvas} too small for sprite size {self.sprite_size}"
            )
        if self.min_distractors < 0 or self.max_distractors < self.min_distractors:
            raise ValidationError("bad distractor count range")


# ---------------------------------------------------------------------------
# primitive rasterization


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return tuple(int(round(255 * c)) for c in rgb)


def _raster(prims, size, ss=2):
    """Paint primitives (later over earlier) on a 2x supersampled grid and
    box-downsample into an RGBA uint8 bitmap."""
    n = size * ss
    half = size / 2.0
    yy, xx = np.mgrid[0:n, 0:n]
    u = (xx + 0.5) / ss - half  # x relative to bitmap center
    v = (yy + 0.5) / ss - half  # y relative to bitmap center (down)
    rgb = np.zeros((n, n, 3), dtype=np.float32)
    alpha = np.zeros((n, n), dtype=np.float32)
    for kind, color, args in prims:
        if kind == "disk":
            cx, cy, r = args
            mask = (u - cx) ** 2 + (v - cy) ** 2 <= r * r
        elif kind == "ring":
            cx, cy, r_out, r_in = args
            d2 = (u - cx) ** 2 + (v - cy) ** 2
            mask = (d2 <= r_out * r_out) & (d2 >= r_in * r_in)
        elif kind == "ngon":
            cx, cy, r, sides, rot = args
            apothem = r * np.cos(np.pi / sides)
            mask = np.ones_like(alpha, dtype=bool)
            for k in range(sides):
                a = rot + (2 * k + 1) * np.pi / sides
                mask &= (u - cx) * np.cos(a) + (v - cy) * np.sin(a) <= apothem
        elif kind == "poly":
            # convex polygon given counterclockwise (image convention) vertices
            verts = args
            mask = np.ones_like(alpha, dtype=bool)
            for k in range(len(verts)):
                x0, y0 = verts[k]
                x1, y1 = verts[(k + 1) % len(verts)]
                mask &= (u - x0) * (y1 - y0) - (v - y0) * (x1 - x0) >= 0
        else:
            raise ValueError(f"unknown primitive {kind!r}")
        for ch in range(3):
            rgb[..., ch][mask] = color[ch]
        alpha[mask] = 1.0
    pm = rgb * alpha[..., None]
    pm = pm.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
    a = alpha.reshape(size, ss, size, ss).mean(axis=(1, 3))
    out = np.zeros((size, size, 4), dtype=np.uint8)
    nz = a > 0
    out[..., :3][nz] = np.clip(pm[nz] / a[nz, None] + 0.5, 0, 255).astype(np.uint8)
    out[..., 3] = np.clip(a * 255 + 0.5, 0, 255).astype(np.uint8)
    return out


@dataclass(frozen=True)
class Sprite:
    id: str
    bitmap: np.ndarray  # RGBA uint8 (S, S, 4)
    split: str


@dataclass(frozen=True)
class HandGlyph:
    id: str
    bitmap: np.ndarray  # RGBA uint8 (S, S, 4), tip pointing along +x
    split: str


# disjoint per-split style spaces: hue bands, primitive radii, polygon sides
_SPRITE_STYLE = {
    "train": {"hue": (0.00, 0.50), "r0": (5.0, 8.0), "r1": (2.0, 4.0), "sides": (3, 4, 6)},
    "test": {"hue": (0.55, 0.95), "r0": (8.4, 10.4), "r1": (4.3, 5.4), "sides": (5, 7)},
}
_HAND_STYLE = {
    "train": {"hue": (0.04, 0.12), "tip_len": (0.42, 0.58)},
    "test": {"hue": (0.70, 0.85), "tip_len": (0.62, 0.74)},
}


def _make_sprite(rng, ident, split, size):
    style = _SPRITE_STYLE[split]
    budget = size / 2.0 - 1.0

    def color():
        h = rng.uniform(*style["hue"])
        return _hsv_to_rgb(h, rng.uniform(0.55, 0.95), rng.uniform(0.6, 0.95))

    prims = []
    r0 = rng.uniform(*style["r0"])
    if rng.random() < 0.5:
        prims.append(("disk", color(), (0.0, 0.0, r0)))
    else:
        sides = int(rng.choice(style["sides"]))
        prims.append(("ngon", color(), (0.0, 0.0, r0, sides, rng.uniform(0, np.pi))))
    for _ in range(int(rng.integers(1, 4))):  # 1..3 secondary primitives
        r = rng.uniform(*style["r1"])
        max_off = max(0.0, budget - r)
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0, min(max_off, r0))
        cx, cy = off * np.cos(ang), off * np.sin(ang)
        kind = rng.choice(["disk", "ring", "ngon"])
        if kind == "disk":
            prims.append(("disk", color(), (cx, cy, r)))
        elif kind == "ring":
            prims.append(("ring", color(), (cx, cy, r, r * rng.uniform(0.4, 0.7))))
        else:
            sides = int(rng.choice(style["sides"]))
            prims.append(("ngon", color(), (cx, cy, r, sides, rng.uniform(0, np.pi))))
    return Sprite(id=ident, bitmap=_raster(prims, size), split=split)


def _make_hand(rng, ident, split, size):
    style = _HAND_STYLE[split]
    budget = size / 2.0 - 1.0

    def color():
        h = rng.uniform(*style["hue"])
        return _hsv_to_rgb(h, rng.uniform(0.5, 0.9), rng.uniform(0.55, 0.9))

    tip_len = budget * rng.uniform(*style["tip_len"])
    tip_w = budget * rng.uniform(0.30, 0.50)
    shaft_h = budget * rng.uniform(0.14, 0.26)
    tail = -budget * rng.uniform(0.7, 0.95)
    body = color()
    tip_x = budget
    base_x = tip_x - tip_len
    prims = [
        ("poly", body, ((tail, -shaft_h), (base_x, -shaft_h), (base_x, shaft_h), (tail, shaft_h))),
        ("poly", color(), ((tip_x, 0.0), (base_x, -tip_w), (base_x, tip_w))),
    ]
    if rng.random() < 0.6:  # tail knob, extra orientation cue
        kr = budget * rng.uniform(0.14, 0.22)
        prims.append(("disk", color(), (tail + kr * 0.5, 0.0, kr)))
    return HandGlyph(id=ident, bitmap=_raster(prims, size), split=split)


@dataclass
class SpriteLibrary:
    sprites: dict = field(default_factory=dict)  # split -> list[Sprite]
    hands: dict = field(default_factory=dict)  # split -> list[HandGlyph]


def generate_sprite_library(seed, config=None):
    """Deterministic sprite + hand libraries for both splits."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng([seed, LIBRARY_TAG])
    lib = SpriteLibrary(sprites={}, hands={})
    counts = {
        "train": (cfg.n_train_sprites, cfg.n_train_hands),
        "test": (cfg.n_test_sprites, cfg.n_test_hands),
    }
    for split, (n_sprites, n_hands) in counts.items():
        tag = split[:2]
        lib.sprites[split] = [
            _make_sprite(rng, f"{tag}_sprite_{i:04d}", split, cfg.sprite_size)
            for i in range(n_sprites)
        ]
        lib.hands[split] = [
            _make_hand(rng, f"{tag}_hand_{i:03d}", split, cfg.sprite_size)
            for i in range(n_hands)
        ]
    return lib


# ---------------------------------------------------------------------------
# scene composition


def rotate_rgba(bitmap, angle_deg):
    """Rotate an RGBA bitmap about its center (bilinear, premultiplied alpha)."""
    s = bitmap.shape[0]
    c = (s - 1) / 2.0
    th = np.radians(angle_deg)
    ct, st = np.cos(th), np.sin(th)
    yy, xx = np.mgrid[0:s, 0:s]
    dx, dy = xx - c, yy - c
    # inverse rotation back into the canonical frame (y axis points down)
    sx = ct * dx + st * dy + c
    sy = -st * dx + ct * dy + c
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    pm = bitmap.astype(np.float32)
    pm[..., :3] *= pm[..., 3:] / 255.0

    def tap(yi, xi):
        inside = (yi >= 0) & (yi < s) & (xi >= 0) & (xi < s)
        out = np.zeros((s, s, 4), dtype=np.float32)
        out[inside] = pm[yi[inside], xi[inside]]
        return out

    val = (
        tap(y0, x0) * ((1 - fx) * (1 - fy))[..., None]
        + tap(y0, x0 + 1) * (fx * (1 - fy))[..., None]
        + tap(y0 + 1, x0) * ((1 - fx) * fy)[..., None]
        + tap(y0 + 1, x0 + 1) * (fx * fy)[..., None]
    )
    out = np.zeros_like(bitmap)
    a = val[..., 3]
    nz = a > 1e-3
    out[..., :3][nz] = np.clip(val[..., :3][nz] / a[nz, None] * 255.0 + 0.5, 0, 255).astype(np.uint8)
    out[..., 3] = np.clip(a + 0.5, 0, 255).astype(np.uint8)
    return out


def _paste_rgba(canvas, bitmap, tl_x, tl_y):
    s = bitmap.shape[0]
    region = canvas[tl_y : tl_y + s, tl_x : tl_x + s]
    a = bitmap[..., 3:].astype(np.float32) / 255.0
    region[:] = (bitmap[..., :3].astype(np.float32) * a + region * (1 - a) + 0.5).astype(np.uint8)


def _center_of(tl, size):
    return (tl[0] + (size - 1) / 2.0, tl[1] + (size - 1) / 2.0)


def _boxes_overlap(tl_a, tl_b, size):
    return abs(tl_a[0] - tl_b[0]) < size and abs(tl_a[1] - tl_b[1]) < size


def point_segment_distance(p, a, b):
    """Distance from point p to the open segment a->b."""
    p, a, b = (np.asarray(v, dtype=np.float64) for v in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = np.clip(float((p - a) @ ab) / denom, 0.0, 1.0)
    return float(np.hypot(*(p - (a + t * ab))))


def _wrap_deg(d):
    return (d + 180.0) % 360.0 - 180.0


def compose_scene(target, distractors, hand, config, rng):
    """Render one scene; returns (uint8 H x W x 3 image, layout dict).

    Placement is rejection-sampled: sprite bounding boxes never overlap, and
    when a hand is present each distractor center keeps segment_clearance
    pixels from the open hand-to-target segment and ray_clearance_deg degrees
    off the pointing ray. Raises after 1000 rejected placements.
    """
    size = config.sprite_size
    canvas_n = config.canvas
    hi = canvas_n - size + 1
    budget = 1000

    def place(constraint, placed):
        nonlocal budget
        while budget > 0:
            budget -= 1
            tl = (int(rng.integers(0, hi)), int(rng.integers(0, hi)))
            if any(_boxes_overlap(tl, q, size) for q in placed):
                continue
            if constraint is None or constraint(tl):
                return tl
        raise DataError(
            "scene placement failed after 1000 rejection attempts; "
            "use fewer or smaller sprites for this canvas size"
        )

    placed = []
    hand_tl = None
    if hand is not None:
        hand_tl = place(None, placed)
        placed.append(hand_tl)
    target_tl = place(None, placed)
    placed.append(target_tl)

    if hand is not None:
        hc = _center_of(hand_tl, size)
        tc = _center_of(target_tl, size)
        ray_deg = float(np.degrees(np.arctan2(tc[1] - hc[1], tc[0] - hc[0])))

        def clear_of_beam(tl):
            dc = _center_of(tl, size)
            if point_segment_distance(dc, hc, tc) <= config.segment_clearance:
                return False
            ang = float(np.degrees(np.arctan2(dc[1] - hc[1], dc[0] - hc[0])))
            return abs(_wrap_deg(ang - ray_deg)) > config.ray_clearance_deg

        constraint = clear_of_beam
    else:
        ray_deg = None
        constraint = None

    distractor_tls = []
    for _ in distractors:
        tl = place(constraint, placed)
        placed.append(tl)
        distractor_tls.append(tl)

    base = np.asarray(config.backdrop, dtype=np.int64)
    jitter = rng.integers(-config.backdrop_jitter, config.backdrop_jitter + 1, size=3)
    img = np.full(
        (canvas_n, canvas_n, 3),
        np.clip(base + jitter, 0, 255).astype(np.uint8),
        dtype=np.uint8,
    )
    for sprite, tl in zip(distractors, distractor_tls):
        _paste_rgba(img, sprite.bitmap, tl[0], tl[1])
    _paste_rgba(img, target.bitmap, target_tl[0], target_tl[1])
    if hand is not None:
        _paste_rgba(img, rotate_rgba(hand.bitmap, ray_deg), hand_tl[0], hand_tl[1])

    layout = {
        "target": {"id": target.id, "pos": list(_center_of(target_tl, size))},
        "distractors": [
            {"id": s.id, "pos": list(_center_of(tl, size))}
            for s, tl in zip(distractors, distractor_tls)
        ],
        "hand": None
        if hand is None
        else {"id": hand.id, "pos": list(_center_of(hand_tl, size)), "angle_deg": ray_deg},
        "canvas": canvas_n,
        "sprite_size": size,
    }
    return img, layout


def _pick_distractors(rng, sprites, target_id, config):
    n = int(rng.integers(config.min_distractors, config.max_distractors + 1))
    pool = [s for s in sprites if s.id != target_id]
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[int(i)] for i in idx]


def make_sample(library, config, split, seed, index):
    """One exemplar/search pair, deterministic in (seed, split, index)."""
    tag = TRAIN_SPLIT_TAG if split == "train" else TEST_SPLIT_TAG
    rng = np.random.default_rng([seed, tag, index])
    sprites = library.sprites[split]
    hands = library.hands[split]
    target = sprites[int(rng.integers(0, len(sprites)))]
    hand = hands[int(rng.integers(0, len(hands)))]
    ex_distractors = _pick_distractors(rng, sprites, target.id, config)
    se_distractors = _pick_distractors(rng, sprites, target.id, config)
    exemplar, ex_layout = compose_scene(target, ex_distractors, hand, config, rng)
    search, se_layout = compose_scene(target, se_distractors, None, config, rng)
    labels = {
        "target_sprite": target.id,
        "target_pos": ex_layout["target"]["pos"],
        "target_pos_search": se_layout["target"]["pos"],
        "hand": ex_layout["hand"],
        "distractors": ex_layout["distractors"],
        "distractors_search": se_layout["distractors"],
        "rng_stream": [int(seed), tag, int(index)],
        "sprite_size": config.sprite_size,
    }
    return exemplar, search, labels


# ---------------------------------------------------------------------------
# on-disk dataset

DATASET_FORMAT = "pointloc-dataset"
DATASET_VERSION = 1


def build_dataset(out_dir, config, seed, library=None, progress=None):
    """Generate and persist the full train/test dataset; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    library = library or generate_sprite_library(seed, config)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": int(seed),
        "config": asdict(config),
        "canvas": config.canvas,
        "sprite_size": config.sprite_size,
        "splits": {
            "train": {"count": config.n_train, "dir": "train"},
            "test": {"count": config.n_test, "dir": "test"},
        },
    }
    for split, count in (("train", config.n_train), ("test", config.n_test)):
        for i in range(count):
            exemplar, search, labels = make_sample(library, config, split, seed, i)
            sdir = out / split / f"{i:05d}"
            sdir.mkdir(parents=True, exist_ok=True)
            Image.fromarray(exemplar, "RGB").save(sdir / "exemplar.png", optimize=False)
            Image.fromarray(search, "RGB").save(sdir / "search.png", optimize=False)
            with open(sdir / "labels.json", "w") as fh:
                json.dump(labels, fh, indent=1, sort_keys=True)
            if progress is not None:
                progress(split, i, count)
    with open(out / "meta.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


@dataclass
class Sample:
    exemplar: np.ndarray  # float32 (3, H, W) in [0, 1]
    search: np.ndarray
    target_pos: tuple  # (x, y) pixels in the exemplar
    target_pos_search: tuple
    meta: dict


def load_image_chw(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


class Dataset:
    """Reader for a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise DataError(f"no dataset manifest at {meta_path}")
        with open(meta_path) as fh:
            self.meta = json.load(fh)
        if self.meta.get("format") != DATASET_FORMAT:
            raise DataError(f"{meta_path} is not a {DATASET_FORMAT} manifest")
        self.canvas = int(self.meta["canvas"])
        self.sprite_size = int(self.meta["sprite_size"])
        # caching decoded images is only worth it for desk-scale canvases
        self._cache = {} if self.canvas <= 100 else None

    def count(self, split):
        return int(self.meta["splits"][split]["count"])

    def sample(self, split, i):
        if self._cache is not None and (split, i) in self._cache:
            ex, se, labels = self._cache[(split, i)]
        else:
            sdir = self.root / self.meta["splits"][split]["dir"] / f"{i:05d}"
            ex = load_image_chw(sdir / "exemplar.png")
            se = load_image_chw(sdir / "search.png")
            with open(sdir / "labels.json") as fh:
                labels = json.load(fh)
            if self._cache is not None:
                self._cache[(split, i)] = (ex, se, labels)
        return Sample(
            exemplar=ex,
            search=se,
            target_pos=tuple(labels["target_pos"]),
            target_pos_search=tuple(labels["target_pos_search"]),
            meta=labels,
        )
