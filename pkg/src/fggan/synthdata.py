"""Procedural multi-view fine-grained dataset.

Each category is a composite of filled primitives on a canonical canvas.
Coarse layout (body, cabin, wheels, base colors) is shared by all categories
of a make; small marks and an aspect tweak distinguish models within a make.
A view is a fixed affine transform of the canonical rendering; photos add
affine jitter, photometric jitter and background clutter, while stock images
are clean canonical-pose renders on a flat background.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .utils import (
    affine_det,
    affine_inverse,
    config_digest,
    rng_for,
    sample_affine,
)

VIEW_NAMES = ("front", "side", "rear", "front-side", "rear-side")
CANONICAL_DEFAULT = "front"

COARSE_DIM = 19
FINE_DIM = 25
SHAPE_DIM = COARSE_DIM + FINE_DIM
COARSE_SLICE = slice(0, COARSE_DIM)
FINE_SLICE = slice(COARSE_DIM, SHAPE_DIM)

STOCK_BG = 0.55
SUPERSAMPLE = 4


def _compose(*mats):
    """Compose 2x3 affines given as 6-tuples, right-most applied first."""
    out = np.eye(3)
    for p in mats:
        m = np.eye(3)
        m[:2, :] = np.asarray(p, dtype=np.float64).reshape(2, 3)
        out = out @ m
    return tuple(out[:2, :].reshape(-1))


def _rot(deg):
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return (c, -s, 0.0, s, c, 0.0)


def _scale(sx, sy):
    return (sx, 0.0, 0.0, 0.0, sy, 0.0)


def _shear(kx):
    return (1.0, kx, 0.0, 0.0, 1.0, 0.0)


def _translate(tx, ty):
    return (1.0, 0.0, tx, 0.0, 1.0, ty)


# forward transform: canonical coordinates -> view coordinates
BASE_AFFINES = {
    "front": (1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
    "side": _compose(_rot(8), _shear(0.25), _scale(0.55, 0.95)),
    "rear": _compose(_rot(-5), _scale(-0.9, 0.85)),
    "front-side": _compose(_rot(-12), _shear(0.15), _scale(0.8, 0.95)),
    "rear-side": _compose(_rot(10), _shear(-0.1), _scale(-0.75, 0.9)),
}

ZERO_JITTER = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Jitter:
    """Photometric perturbation scales; realized values come from clutter_seed."""
    brightness: float = 0.0
    hue_shift: float = 0.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class CategorySpec:
    category_id: int
    make_id: int
    model_id: int
    generation: int
    shape_params: tuple

    @property
    def coarse(self):
        return np.asarray(self.shape_params[COARSE_SLICE])

    @property
    def fine(self):
        return np.asarray(self.shape_params[FINE_SLICE])


@dataclass(frozen=True)
class ViewSpec:
    view_name: str
    affine: tuple  # forward canonical->view transform, 6 parameters
    jitter: Jitter = Jitter()
    clutter_seed: int = 0


@dataclass(frozen=True)
class ClutterConfig:
    count_min: int = 2
    count_max: int = 4
    contrast: float = 0.35


@dataclass
class DataConfig:
    n_makes: int = 5
    n_models_per_make: int = 5
    views: tuple = VIEW_NAMES
    stocks_per_view: int = 1
    train_photos_per_category: int = 40
    test_photos_per_category: int = 10
    image_size: int = 32
    n_generations: int = 5
    jitter_brightness: float = 0.30
    jitter_hue: float = 0.20
    noise_min: float = 0.02
    noise_max: float = 0.08
    affine_rotation_deg: float = 10.0
    affine_scale_jitter: float = 0.12
    affine_translate: float = 0.08
    clutter_min: int = 2
    clutter_max: int = 4
    clutter_contrast: float = 0.35

    @property
    def n_categories(self):
        return self.n_makes * self.n_models_per_make

    def clutter(self):
        return ClutterConfig(self.clutter_min, self.clutter_max, self.clutter_contrast)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["views"] = list(self.views)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["views"] = tuple(d.get("views", VIEW_NAMES))
        return cls(**d)


def make_categories(config: DataConfig, master_seed: int):
    """Deterministic category table; coarse params per make, fine per model."""
    cats = []
    for make_id in range(config.n_makes):
        rng = rng_for(master_seed, "make", make_id)
        coarse = np.array([
            rng.uniform(0.14, 0.22),   # body x0
            rng.uniform(0.78, 0.86),   # body x1
            rng.uniform(0.40, 0.50),   # body y0
            rng.uniform(0.70, 0.78),   # body y1
            rng.uniform(0.42, 0.58),   # cabin cx
            rng.uniform(0.30, 0.40),   # cabin cy
            rng.uniform(0.15, 0.24),   # cabin rx
            rng.uniform(0.09, 0.15),   # cabin ry
            rng.uniform(0.25, 0.33),   # wheel1 x
            rng.uniform(0.67, 0.75),   # wheel2 x
            rng.uniform(0.72, 0.78),   # wheel y
            rng.uniform(0.06, 0.10),   # wheel r
            *rng.uniform(-0.8, 0.9, 3),   # body rgb
            *rng.uniform(-0.8, 0.9, 3),   # cabin rgb
            rng.uniform(-0.9, -0.5),   # wheel shade
        ])
        for model_id in range(config.n_models_per_make):
            mrng = rng_for(master_seed, "model", make_id, model_id)
            fine = [mrng.uniform(0.93, 1.07)]  # body aspect tweak
            for _ in range(3):
                fine.extend([
                    float(mrng.integers(0, 2)),   # mark kind: 0 rect, 1 ellipse
                    mrng.uniform(0.10, 0.90),     # x fraction of body box
                    mrng.uniform(0.15, 0.85),     # y fraction of body box
                    mrng.uniform(0.05, 0.12),     # width
                    mrng.uniform(0.04, 0.10),     # height
                    *mrng.uniform(-0.9, 0.9, 3),  # mark rgb
                ])
            category_id = make_id * config.n_models_per_make + model_id
            cats.append(CategorySpec(
                category_id=category_id,
                make_id=make_id,
                model_id=model_id,
                generation=category_id % config.n_generations,
                shape_params=tuple(np.concatenate([coarse, np.array(fine)])),
            ))
    return cats


def _primitives(spec: CategorySpec):
    """Decode shape params into (kind, geometry, rgb) in painter order."""
    c = spec.coarse
    f = spec.fine
    body_x0, body_x1, body_y0, body_y1 = c[0], c[1], c[2], c[3]
    cx = 0.5 * (body_x0 + body_x1)
    half = 0.5 * (body_x1 - body_x0) * f[0]
    body_x0, body_x1 = cx - half, cx + half
    body_rgb, cabin_rgb = c[12:15], c[15:18]
    wheel_rgb = np.full(3, c[18])
    prims = [
        ("ellipse", (c[8], c[10], c[11], c[11]), wheel_rgb),
        ("ellipse", (c[9], c[10], c[11], c[11]), wheel_rgb),
        ("rect", (body_x0, body_y0, body_x1, body_y1), body_rgb),
        ("ellipse", (c[4], c[5], c[6], c[7]), cabin_rgb),
    ]
    for k in range(3):
        m = f[1 + 8 * k:1 + 8 * (k + 1)]
        mx = body_x0 + m[1] * (body_x1 - body_x0)
        my = body_y0 + m[2] * (body_y1 - body_y0)
        if m[0] < 0.5:
            prims.append(("rect", (mx - m[3] / 2, my - m[4] / 2, mx + m[3] / 2, my + m[4] / 2), m[5:8]))
        else:
            prims.append(("ellipse", (mx, my, m[3] / 2, m[4] / 2), m[5:8]))
    return prims


def _paint(color, covered, mask, rgb):
    color[mask] = rgb
    covered |= mask


def _rasterize(prims, image_size, supersample=SUPERSAMPLE):
    """Paint primitives on a supersampled grid; returns (color, covered) at full res."""
    n = image_size * supersample
    u = (np.arange(n) + 0.5) / n
    uu, vv = np.meshgrid(u, u, indexing="xy")
    color = np.zeros((n, n, 3), dtype=np.float64)
    covered = np.zeros((n, n), dtype=bool)
    for kind, geom, rgb in prims:
        if kind == "rect":
            x0, y0, x1, y1 = geom
            mask = (uu >= min(x0, x1)) & (uu <= max(x0, x1)) & (vv >= min(y0, y1)) & (vv <= max(y0, y1))
        else:
            cx, cy, rx, ry = geom
            mask = ((uu - cx) / max(rx, 1e-6)) ** 2 + ((vv - cy) / max(ry, 1e-6)) ** 2 <= 1.0
        _paint(color, covered, mask, np.asarray(rgb, dtype=np.float64))
    return color, covered


def _downsample(arr, factor):
    h, w = arr.shape[:2]
    if arr.ndim == 2:
        return arr.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return arr.reshape(h // factor, factor, w // factor, factor, arr.shape[2]).mean(axis=(1, 3))


def render_object_layer(spec: CategorySpec, image_size: int, supersample=SUPERSAMPLE):
    """Canonical-pose object as (alpha-premultiplied rgb, alpha) at image_size."""
    color, covered = _rasterize(_primitives(spec), image_size, supersample)
    premul = color * covered[..., None]
    return _downsample(premul, supersample), _downsample(covered.astype(np.float64), supersample)


def interior_mask(alpha, erode=2):
    """Boolean mask of the object's interior (full coverage, edges eroded)."""
    m = alpha > 0.999
    for _ in range(erode):
        p = np.pad(m, 1, constant_values=False)
        m = (p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
             & p[1:-1, 1:-1])
    return m


def _background(image_size, rng, clutter: ClutterConfig | None, supersample=SUPERSAMPLE):
    if clutter is None:
        return np.full((image_size, image_size, 3), STOCK_BG, dtype=np.float64)
    bg_rgb = rng.uniform(-0.35, 0.45, 3)
    prims = []
    for _ in range(int(rng.integers(clutter.count_min, clutter.count_max + 1))):
        kind = "rect" if rng.integers(0, 2) == 0 else "ellipse"
        cx, cy = rng.uniform(0.0, 1.0, 2)
        w, h = rng.uniform(0.10, 0.35, 2)
        rgb = np.clip(bg_rgb + rng.uniform(-clutter.contrast, clutter.contrast, 3), -1, 1)
        if kind == "rect":
            prims.append(("rect", (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), rgb))
        else:
            prims.append(("ellipse", (cx, cy, w / 2, h / 2), rgb))
    color, covered = _rasterize(prims, image_size, supersample)
    canvas = np.where(covered[..., None], color, bg_rgb[None, None, :])
    return _downsample(canvas, supersample)


def _hue_mix(img, shift):
    if shift == 0.0:
        return img
    rolled = np.roll(img, 1 if shift > 0 else -1, axis=2)
    a = abs(shift)
    return (1.0 - a) * img + a * rolled


def render_view(spec: CategorySpec, view: ViewSpec, image_size: int,
                clutter: ClutterConfig | None = None) -> np.ndarray:
    """Render one image: warped object over background, plus photometrics.

    Deterministic in (spec, view, image_size, clutter); all stochastic pieces
    derive from view.clutter_seed. Returns float32 (H, W, 3) in [-1, 1].
    """
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    if abs(affine_det(view.affine)) < 1e-6:
        raise ValueError("view affine is not invertible")
    rng = rng_for(view.clutter_seed, "render")
    premul, alpha = render_object_layer(spec, image_size)
    inv = affine_inverse(view.affine)
    warped = sample_affine(premul, inv, fill=0.0)
    walpha = np.clip(sample_affine(alpha, inv, fill=0.0), 0.0, 1.0)
    bg = _background(image_size, rng, clutter)
    out = warped + bg * (1.0 - walpha[..., None])
    j = view.jitter
    if j.brightness:
        out = out + rng.uniform(-j.brightness, j.brightness)
    if j.hue_shift:
        out = _hue_mix(out, rng.uniform(-j.hue_shift, j.hue_shift))
    if j.noise_std:
        out = out + rng.normal(0.0, j.noise_std, out.shape)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def to_uint8(img):
    return np.clip(np.round((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr):
    return (arr.astype(np.float32) / 127.5) - 1.0


def save_png(img, path):
    Image.fromarray(to_uint8(img), "RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    category_id: int
    make_id: int
    model_id: int
    generation: int
    view: str
    role: str    # stock | photo
    split: str   # train | test
    seed: int

    def to_dict(self):
        return dataclasses.asdict(self)


class Manifest:
    """Dataset manifest: generation config, master seed and image records."""

    def __init__(self, config: DataConfig, master_seed: int, records, root=None, filter_tag=None):
        self.config = config
        self.master_seed = int(master_seed)
        self.records = list(records)
        self.root = root
        self.filter_tag = filter_tag
        self._categories = None

    @property
    def digest(self):
        payload = {"config": self.config.to_dict(), "master_seed": self.master_seed}
        if self.filter_tag is not None:
            payload["filter"] = self.filter_tag
        return config_digest(payload)

    @property
    def categories(self):
        if self._categories is None:
            self._categories = make_categories(self.config, self.master_seed)
        return self._categories

    def category(self, category_id):
        return self.categories[category_id]

    def select(self, role=None, split=None, view=None, categories=None):
        cats = set(categories) if categories is not None else None
        out = []
        for r in self.records:
            if role is not None and r.role != role:
                continue
            if split is not None and r.split != split:
                continue
            if view is not None and r.view != view:
                continue
            if cats is not None and r.category_id not in cats:
                continue
            out.append(r)
        return out

    def present_categories(self, split=None, role=None):
        return sorted({r.category_id for r in self.select(role=role, split=split)})

    def filtered(self, categories, tag):
        cats = set(categories)
        sub = [r for r in self.records if r.category_id in cats]
        return Manifest(self.config, self.master_seed, sub, root=self.root,
                        filter_tag={"tag": tag, "categories": sorted(cats)})

    def image(self, record: ManifestRecord):
        if self.root is None:
            raise ValueError("manifest has no image root directory")
        return load_png(os.path.join(self.root, record.image_path))

    def save(self, path):
        header = {
            "kind": "manifest",
            "config": self.config.to_dict(),
            "master_seed": self.master_seed,
            "digest": self.digest,
            "n_records": len(self.records),
        }
        if self.filter_tag is not None:
            header["filter"] = self.filter_tag
        with open(path, "w") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for r in self.records:
                f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            header = json.loads(f.readline())
            records = [ManifestRecord(**json.loads(line)) for line in f if line.strip()]
        m = cls(DataConfig.from_dict(header["config"]), header["master_seed"], records,
                root=os.path.dirname(os.path.abspath(path)),
                filter_tag=header.get("filter"))
        return m


def _perturbed_affine(base, config: DataConfig, rng):
    deg = rng.uniform(-config.affine_rotation_deg, config.affine_rotation_deg)
    s = 1.0 + rng.uniform(-config.affine_scale_jitter, config.affine_scale_jitter)
    tx, ty = rng.uniform(-config.affine_translate, config.affine_translate, 2)
    return _compose(_translate(tx, ty), _rot(deg), _scale(s, s), base)


def generate_dataset(config: DataConfig, master_seed: int, out_dir) -> Manifest:
    """Render the full dataset to out_dir and write its manifest.

    Stock images cover every (category, view) pair; photos draw a view,
    a jittered affine, photometrics and clutter per image. Split assignment
    and every image byte are pure functions of (config, master_seed).
    """
    if config.n_makes <= 0 or config.n_models_per_make <= 0:
        raise ValueError("category counts must be positive")
    if config.train_photos_per_category <= 0 or config.test_photos_per_category < 0:
        raise ValueError("photo counts must be positive")
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images", "stock"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images", "photos"), exist_ok=True)

    cats = make_categories(config, master_seed)
    records = []
    for spec in cats:
        for view_name in config.views:
            base = BASE_AFFINES[view_name]
            for s_idx in range(config.stocks_per_view):
                affine = base
                if s_idx > 0:
                    # extra stocks are slight variants so distinct pairs exist
                    affine = _compose(_scale(1.0 + 0.02 * s_idx, 1.0 + 0.02 * s_idx), base)
                seed = int(rng_for(master_seed, "stockseed", spec.category_id, view_name, s_idx).integers(2 ** 31))
                view = ViewSpec(view_name, affine, Jitter(), seed)
                rel = f"images/stock/cat{spec.category_id:03d}_{view_name}_{s_idx}.png"
                save_png(render_view(spec, view, config.image_size, clutter=None),
                         os.path.join(out_dir, rel))
                records.append(ManifestRecord(rel, spec.category_id, spec.make_id,
                                              spec.model_id, spec.generation, view_name,
                                              "stock", "train", seed))
        n_photos = config.train_photos_per_category + config.test_photos_per_category
        prng = rng_for(master_seed, "photos", spec.category_id)
        for i in range(n_photos):
            view_name = config.views[int(prng.integers(0, len(config.views)))]
            affine = _perturbed_affine(BASE_AFFINES[view_name], config, prng)
            jit = Jitter(config.jitter_brightness, config.jitter_hue,
                         float(prng.uniform(config.noise_min, config.noise_max)))
            seed = int(prng.integers(2 ** 31))
            view = ViewSpec(view_name, affine, jit, seed)
            rel = f"images/photos/cat{spec.category_id:03d}_p{i:03d}.png"
            save_png(render_view(spec, view, config.image_size, clutter=config.clutter()),
                     os.path.join(out_dir, rel))
            split = "train" if i < config.train_photos_per_category else "test"
            records.append(ManifestRecord(rel, spec.category_id, spec.make_id,
                                          spec.model_id, spec.generation, view_name,
                                          "photo", split, seed))

    manifest = Manifest(config, master_seed, records, root=out_dir)
    manifest.save(os.path.join(out_dir, "manifest.jsonl"))
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump({"config": config.to_dict(), "master_seed": master_seed,
                   "digest": manifest.digest}, f, indent=2, sort_keys=True)
    return manifest


@dataclass
class SplitAssignment:
    mode: str
    known_categories: tuple
    unseen_categories: tuple
    cutoff: int | None = None
    schedule: tuple = ()

    def training_manifest(self, manifest: Manifest):
        return manifest.filtered(self.known_categories, f"open-{self.mode}-known")


def make_open_set_split(manifest: Manifest, known_fraction=None, mode="category",
                        cutoff=None, seed=0) -> SplitAssignment:
    """Partition categories into known/unseen for open-set protocols.

    category mode: a seeded random subset of round(known_fraction * K)
    categories is known. generation mode: categories with generation <= cutoff
    are known and a per-epoch arrival schedule is emitted.
    """
    cats = manifest.present_categories()
    if mode == "category":
        if known_fraction is None or not 0.0 < known_fraction < 1.0:
            raise ValueError("known_fraction must be in (0, 1)")
        n_known = int(round(known_fraction * len(cats)))
        if n_known < 1 or n_known >= len(cats):
            raise ValueError("known_fraction yields an empty known or unseen set")
        perm = rng_for(seed, "openset", manifest.digest).permutation(len(cats))
        known = tuple(sorted(cats[i] for i in perm[:n_known]))
        unseen = tuple(sorted(set(cats) - set(known)))
        return SplitAssignment("category", known, unseen)
    if mode == "generation":
        gens = sorted({manifest.category(c).generation for c in cats})
        if cutoff is None or cutoff < gens[0] or cutoff >= gens[-1]:
            raise ValueError(f"cutoff must lie in [{gens[0]}, {gens[-1] - 1}]")
        known = tuple(sorted(c for c in cats if manifest.category(c).generation <= cutoff))
        unseen = tuple(sorted(set(cats) - set(known)))
        if not known or not unseen:
            raise ValueError("cutoff yields an empty known or unseen set")
        schedule = []
        cumulative = list(known)
        for g in gens:
            if g <= cutoff:
                continue
            new = sorted(c for c in unseen if manifest.category(c).generation == g)
            cumulative = sorted(set(cumulative) | set(new))
            schedule.append({
                "generation": g,
                "new_categories": new,
                "database_categories": list(cumulative),
            })
        return SplitAssignment("generation", known, unseen, cutoff=cutoff,
                               schedule=tuple(schedule))
    raise ValueError(f"unknown open-set mode: {mode}")


class ImageCache:
    """Decoded-image cache keyed by manifest path."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache = {}

    def get(self, record: ManifestRecord):
        img = self._cache.get(record.image_path)
        if img is None:
            img = self.manifest.image(record)
            self._cache[record.image_path] = img
        return img


class PairSource:
    """Draws (photo, canonical stock, label) training triples."""

    def __init__(self, manifest: Manifest, canonical_view: str, cache: ImageCache | None = None):
        self.manifest = manifest
        self.canonical_view = canonical_view
        self.cache = cache or ImageCache(manifest)
        self.photos = manifest.select(role="photo", split="train")
        self.stocks = {}
        for r in manifest.select(role="stock", view=canonical_view):
            self.stocks.setdefault(r.category_id, []).append(r)
        missing = {r.category_id for r in self.photos} - set(self.stocks)
        if missing:
            raise ValueError(f"categories missing canonical stock image: {sorted(missing)}")
        self.label_of = {c: i for i, c in enumerate(sorted({r.category_id for r in self.photos}))}

    @property
    def num_classes(self):
        return len(self.label_of)

    def _triple(self, photo: ManifestRecord, rng):
        stocks = self.stocks[photo.category_id]
        idx = int(rng.integers(0, len(stocks))) if len(stocks) > 1 else 0
        alt = idx
        if len(stocks) > 1:
            alt = int(rng.integers(0, len(stocks) - 1))
            if alt >= idx:
                alt += 1
        return {
            "x_r": self.cache.get(photo),
            "x_c": self.cache.get(stocks[idx]),
            "x_c_alt": self.cache.get(stocks[alt]),
            "y": self.label_of[photo.category_id],
            "category_id": photo.category_id,
            "record": photo,
        }

    def sample(self, batch: int, seed: int):
        """Uniform i.i.d. draw of `batch` triples, deterministic per seed."""
        rng = rng_for(seed, "pairs")
        return [self._triple(self.photos[int(i)], rng)
                for i in rng.integers(0, len(self.photos), size=batch)]

    def epoch_batches(self, epoch_seed: int, batch_size: int):
        """Shuffled full pass over train photos, stacked per batch."""
        rng = rng_for(epoch_seed, "epoch")
        order = rng.permutation(len(self.photos))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            triples = [self._triple(self.photos[int(i)], rng) for i in order[start:start + batch_size]]
            yield stack_triples(triples)


def sample_pairs(manifest: Manifest, canonical_view: str, batch: int, seed: int):
    """One-shot uniform pair sampling (see PairSource.sample)."""
    return PairSource(manifest, canonical_view).sample(batch, seed)


def stack_triples(triples):
    return {
        "x_r": np.stack([t["x_r"] for t in triples]).astype(np.float32),
        "x_c": np.stack([t["x_c"] for t in triples]).astype(np.float32),
        "x_c_alt": np.stack([t["x_c_alt"] for t in triples]).astype(np.float32),
        "y": np.array([t["y"] for t in triples], dtype=np.int64),
    }
