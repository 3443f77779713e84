"""Synthetic multi-domain digit benchmark, on-disk dataset IO, and seeded
minibatch sampling.

The generator rasterizes polyline digit glyphs through a signed-distance
field and composites them under per-domain "recipes" (flat, color-patch,
cluttered, textured backgrounds). Every image's randomness comes from an rng
stream keyed by (seed, domain, class, index), so generation is reproducible
and order-independent.

On-disk layout: ``root/<domain>/<class>/<index>.png`` plus ``manifest.json``
listing domains, classes, image_shape and the train/val split as relative
paths. Pixels are stored as 8-bit PNG and decoded to float32 in [-1, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

# rng stream tags, mixed into seeds so independent draws never collide
_STREAM_IMAGE = 1
_STREAM_SPLIT = 2
_STREAM_SAMPLER = 3


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) float32, nominally in [-1, 1]
    class_label: int
    domain_label: int


@dataclass
class MultiDomainDataset:
    domains: list
    classes: list
    splits: dict  # split name -> list[LabeledImage]
    image_shape: tuple  # (C, H, W)

    def split_size(self, split: str) -> int:
        return len(self.splits[split])


@dataclass(frozen=True)
class DomainRecipe:
    """Rendering parameters for one synthetic domain."""
    name: str
    background: str          # flat | patches | clutter | texture
    tint: tuple              # glyph RGB in [0, 1]
    bg_color: tuple          # base background RGB in [0, 1]
    noise: float = 0.0       # additive gaussian noise std
    stroke: float = 1.6      # stroke radius in pixels at 32x32 scale
    distractors: int = 0     # random clutter strokes behind the glyph

    def key(self):
        return (self.background, self.tint, self.bg_color, self.noise,
                self.stroke, self.distractors)


def default_domain_recipes(num_domains: int) -> list:
    base = [
        DomainRecipe("plain", "flat", tint=(0.10, 0.10, 0.12),
                     bg_color=(0.92, 0.92, 0.90), noise=0.0, stroke=1.6),
        DomainRecipe("patches", "patches", tint=(1.0, 1.0, 1.0),
                     bg_color=(0.5, 0.5, 0.5), noise=0.02, stroke=1.6),
        DomainRecipe("clutter", "clutter", tint=(0.95, 0.95, 0.92),
                     bg_color=(0.12, 0.12, 0.15), noise=0.06, stroke=2.3,
                     distractors=7),
        DomainRecipe("texture", "texture", tint=(0.95, 0.15, 0.20),
                     bg_color=(0.55, 0.60, 0.55), noise=0.0, stroke=1.6),
    ]
    if num_domains <= len(base):
        return base[:num_domains]
    out = list(base)
    styles = ["flat", "patches", "clutter", "texture"]
    for i in range(len(base), num_domains):
        hue = (0.15 + 0.61 * i) % 1.0
        tint = tuple(round(0.25 + 0.7 * ((hue + p / 3.0) % 1.0), 3)
                     for p in range(3))
        out.append(DomainRecipe(f"extra{i}", styles[i % 4], tint=tint,
                                bg_color=(0.45, 0.5, 0.55),
                                noise=0.01 * (i % 3), stroke=1.4 + 0.3 * (i % 3)))
    return out


@dataclass(frozen=True)
class SynthBenchmarkSpec:
    num_domains: int = 4
    num_classes: int = 10
    images_per_class_per_domain: int = 600
    image_shape: tuple = (3, 32, 32)
    seed: int = 0
    domain_recipes: tuple = ()   # defaults to default_domain_recipes

    def recipes(self) -> list:
        if self.domain_recipes:
            return list(self.domain_recipes)
        return default_domain_recipes(self.num_domains)

    def validate(self):
        if self.num_domains < 2:
            raise ValueError(f"need at least 2 domains, got {self.num_domains}")
        if not (1 <= self.num_classes <= 10):
            raise ValueError("num_classes must be in 1..10 (digit glyphs)")
        if self.images_per_class_per_domain < 1:
            raise ValueError("images_per_class_per_domain must be >= 1")
        C, H, W = self.image_shape
        if C not in (1, 3) or H < 8 or W < 8:
            raise ValueError(f"unsupported image_shape {self.image_shape}")
        rec = self.recipes()
        if len(rec) != self.num_domains:
            raise ValueError(
                f"{self.num_domains} domains but {len(rec)} recipes")
        keys = [r.key() for r in rec]
        if len(set(keys)) != len(keys):
            raise ValueError("domain recipes must be pairwise distinct")
        names = [r.name for r in rec]
        if len(set(names)) != len(names):
            raise ValueError("domain names must be unique")


# ---------------------------------------------------------------------------
# glyph geometry
# ---------------------------------------------------------------------------

_L, _R, _M = 0.28, 0.72, 0.50
_T, _C, _B = 0.14, 0.50, 0.86

# each digit is a list of segments ((x0,y0),(x1,y1)) on the unit square
_DIGIT_SEGMENTS = {
    0: [((_L, _T), (_R, _T)), ((_R, _T), (_R, _B)),
        ((_R, _B), (_L, _B)), ((_L, _B), (_L, _T))],
    1: [((_M, _T), (_M, _B)), ((_M, _T), (0.36, 0.28)),
        ((0.38, _B), (0.62, _B))],
    2: [((_L, _T), (_R, _T)), ((_R, _T), (_R, _C)),
        ((_R, _C), (_L, _B)), ((_L, _B), (_R, _B))],
    3: [((_L, _T), (_R, _T)), ((_R, _T), (_R, _B)),
        ((_R, _B), (_L, _B)), ((_M, _C), (_R, _C))],
    4: [((_L, _T), (_L, _C)), ((_L, _C), (_R, _C)), ((_R, _T), (_R, _B))],
    5: [((_R, _T), (_L, _T)), ((_L, _T), (_L, _C)), ((_L, _C), (_R, _C)),
        ((_R, _C), (_R, _B)), ((_R, _B), (_L, _B))],
    6: [((_R, _T), (_L, _T)), ((_L, _T), (_L, _B)), ((_L, _B), (_R, _B)),
        ((_R, _B), (_R, _C)), ((_R, _C), (_L, _C))],
    7: [((_L, _T), (_R, _T)), ((_R, _T), (0.42, _B))],
    8: [((_L, _T), (_R, _T)), ((_R, _T), (_R, _B)), ((_R, _B), (_L, _B)),
        ((_L, _B), (_L, _T)), ((_L, _C), (_R, _C))],
    9: [((_L, _T), (_R, _T)), ((_L, _T), (_L, _C)), ((_L, _C), (_R, _C)),
        ((_R, _T), (_R, _B)), ((_R, _B), (0.40, _B))],
}


def _glyph_segments(cls: int, rng: np.random.Generator) -> np.ndarray:
    """Digit segments jittered by a small random affine map (class-safe)."""
    segs = np.asarray([[p0[0], p0[1], p1[0], p1[1]]
                       for p0, p1 in _DIGIT_SEGMENTS[cls]], dtype=np.float64)
    ang = rng.uniform(-0.14, 0.14)          # ~8 degrees
    scale = rng.uniform(0.85, 1.08)
    shear = rng.uniform(-0.08, 0.08)
    tx, ty = rng.uniform(-0.05, 0.05, 2)
    ca, sa = np.cos(ang), np.sin(ang)
    A = scale * np.asarray([[ca, -sa], [sa, ca]]) @ np.asarray([[1, shear], [0, 1]])
    pts = segs.reshape(-1, 2) - 0.5
    pts = pts @ A.T + 0.5 + np.asarray([tx, ty])
    return pts.reshape(-1, 4)


def _segment_mask(segs: np.ndarray, H: int, W: int, radius: float,
                  aa: float = 0.7) -> np.ndarray:
    """Rasterize segments (in pixel coords) into a soft coverage mask."""
    ys, xs = np.mgrid[0:H, 0:W]
    P = np.stack([xs, ys], axis=-1).reshape(-1, 1, 2).astype(np.float64)
    A = segs[None, :, 0:2]
    AB = segs[None, :, 2:4] - A
    denom = np.maximum((AB ** 2).sum(-1), 1e-12)
    t = np.clip(((P - A) * AB).sum(-1) / denom, 0.0, 1.0)
    proj = A + t[..., None] * AB
    d = np.sqrt(((P - proj) ** 2).sum(-1)).min(axis=1).reshape(H, W)
    return np.clip((radius + aa / 2 - d) / aa, 0.0, 1.0)


def _to_pixel_box(segs01: np.ndarray, H: int, W: int) -> np.ndarray:
    out = segs01.copy()
    out[:, 0::2] *= (W - 1)
    out[:, 1::2] *= (H - 1)
    return out


def render_image(cls: int, recipe: DomainRecipe, image_shape: tuple,
                 rng: np.random.Generator) -> np.ndarray:
    """One (C,H,W) float image in [0,1] for class `cls` under `recipe`."""
    C, H, W = image_shape
    px_scale = min(H, W) / 32.0
    segs = _to_pixel_box(_glyph_segments(cls, rng), H, W)
    mask = _segment_mask(segs, H, W, recipe.stroke * px_scale)

    tint = np.asarray(recipe.tint) + rng.uniform(-0.06, 0.06, 3)
    bg_col = np.asarray(recipe.bg_color) + rng.uniform(-0.05, 0.05, 3)
    tint = np.clip(tint, 0, 1)[:, None, None]
    bg_col = np.clip(bg_col, 0, 1)[:, None, None]

    if recipe.background == "flat":
        bg = np.broadcast_to(bg_col, (3, H, W)).copy()
    elif recipe.background == "patches":
        bg = np.broadcast_to(bg_col, (3, H, W)).copy()
        for _ in range(4):
            col = rng.uniform(0.1, 0.9, 3)[:, None, None]
            h = rng.integers(H // 4, H); w = rng.integers(W // 4, W)
            y0 = rng.integers(0, H - h + 1); x0 = rng.integers(0, W - w + 1)
            bg[:, y0:y0 + h, x0:x0 + w] = col
    elif recipe.background == "clutter":
        bg = np.broadcast_to(bg_col, (3, H, W)).copy()
        if recipe.distractors:
            pts = rng.uniform(0, 1, (recipe.distractors, 4))
            # short strokes: pull endpoints toward their midpoints
            mid = (pts[:, 0:2] + pts[:, 2:4]) / 2
            pts[:, 0:2] = mid + (pts[:, 0:2] - mid) * 0.45
            pts[:, 2:4] = mid + (pts[:, 2:4] - mid) * 0.45
            dmask = _segment_mask(_to_pixel_box(pts, H, W), H, W,
                                  0.8 * px_scale)
            shade = rng.uniform(0.35, 0.7)
            bg = bg * (1 - dmask) + shade * dmask
    elif recipe.background == "texture":
        yy, xx = np.mgrid[0:H, 0:W]
        u = xx / max(W - 1, 1); v = yy / max(H - 1, 1)
        fx, fy = rng.uniform(1.5, 4.0, 2)
        bg = np.empty((3, H, W))
        for c in range(3):
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * (fx * u + fy * v) + phase)
            bg[c] = np.clip(bg_col[c] + 0.22 * wave, 0, 1)
    else:
        raise ValueError(f"unknown background style {recipe.background!r}")

    if recipe.background == "patches":
        # MNIST-M-style inversion blend: the glyph flips the patch colors
        img = np.abs(bg - mask[None])
    else:
        img = bg * (1 - mask[None]) + tint * mask[None]

    if recipe.noise > 0:
        img = img + rng.normal(0.0, recipe.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    if C == 1:
        img = img.mean(axis=0, keepdims=True)
    return img


# ---------------------------------------------------------------------------
# generation and loading
# ---------------------------------------------------------------------------

def _encode_png(img01: np.ndarray, path: Path):
    arr = np.round(img01 * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def generate_synthetic_benchmark(spec: SynthBenchmarkSpec,
                                 out_dir) -> MultiDomainDataset:
    """Write the benchmark to `out_dir` and return it loaded from disk."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recipes = spec.recipes()
    domains = [r.name for r in recipes]
    classes = [str(c) for c in range(spec.num_classes)]
    n = spec.images_per_class_per_domain
    n_val = int(round(n * 0.2))

    split_paths = {"train": [], "val": []}
    for di, recipe in enumerate(recipes):
        for ci, cname in enumerate(classes):
            cdir = out / recipe.name / cname
            cdir.mkdir(parents=True, exist_ok=True)
            for idx in range(n):
                rng = np.random.default_rng(
                    [spec.seed, _STREAM_IMAGE, di, ci, idx])
                img = render_image(ci, recipe, spec.image_shape, rng)
                _encode_png(img, cdir / f"{idx:04d}.png")
            srng = np.random.default_rng([spec.seed, _STREAM_SPLIT, di, ci])
            perm = srng.permutation(n)
            val_idx = set(perm[:n_val].tolist())
            for idx in range(n):
                rel = f"{recipe.name}/{cname}/{idx:04d}.png"
                split_paths["val" if idx in val_idx else "train"].append(rel)

    manifest = {
        "domains": domains,
        "classes": classes,
        "image_shape": list(spec.image_shape),
        "splits": split_paths,
        "spec": {
            "num_domains": spec.num_domains,
            "num_classes": spec.num_classes,
            "images_per_class_per_domain": spec.images_per_class_per_domain,
            "image_shape": list(spec.image_shape),
            "seed": spec.seed,
            "domain_recipes": [vars(r) for r in recipes],
        },
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return load_image_folder(out)


def load_image_folder(root) -> MultiDomainDataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    domains = list(manifest["domains"])
    classes = list(manifest["classes"])
    C, H, W = manifest["image_shape"]
    dmap = {d: i for i, d in enumerate(domains)}
    cmap = {c: i for i, c in enumerate(classes)}

    splits = {}
    for split, rels in manifest["splits"].items():
        items = []
        for rel in rels:
            parts = rel.split("/")
            if len(parts) != 3 or parts[0] not in dmap or parts[1] not in cmap:
                raise ValueError(f"manifest path {rel!r} does not match "
                                 f"<domain>/<class>/<file>.png")
            arr = np.asarray(Image.open(root / rel))
            if arr.ndim == 2:
                arr = arr[:, :, None]
            h, w, c = arr.shape
            if (h, w) != (H, W) or c not in (1, C):
                raise ValueError(
                    f"{root / rel}: got {h}x{w}x{c}, expected {H}x{W} "
                    f"with 1 or {C} channels")
            px = arr.astype(np.float32).transpose(2, 0, 1) / 255.0
            if c == 1 and C > 1:
                px = np.repeat(px, C, axis=0)
            px = px * 2.0 - 1.0
            items.append(LabeledImage(px, cmap[parts[1]], dmap[parts[0]]))
        splits[split] = items
    return MultiDomainDataset(domains, classes, splits, (C, H, W))


# ---------------------------------------------------------------------------
# domain filtering (leave-one-domain-out plumbing)
# ---------------------------------------------------------------------------

def exclude_domain(dataset: MultiDomainDataset, holdout: str) -> MultiDomainDataset:
    """Source view: every split without the held-out domain, with domain
    labels re-indexed over the remaining domains."""
    if holdout not in dataset.domains:
        raise ValueError(f"unknown domain {holdout!r}; have {dataset.domains}")
    keep = [d for d in dataset.domains if d != holdout]
    old_to_new = {dataset.domains.index(d): i for i, d in enumerate(keep)}
    splits = {}
    for split, items in dataset.splits.items():
        splits[split] = [
            LabeledImage(im.pixels, im.class_label, old_to_new[im.domain_label])
            for im in items if im.domain_label in old_to_new]
    return MultiDomainDataset(keep, list(dataset.classes), splits,
                              dataset.image_shape)


def collect_domain(dataset: MultiDomainDataset, domain: str) -> list:
    """All images (every split pooled) of one domain, in split order."""
    if domain not in dataset.domains:
        raise ValueError(f"unknown domain {domain!r}; have {dataset.domains}")
    di = dataset.domains.index(domain)
    out = []
    for split in dataset.splits:
        out.extend(im for im in dataset.splits[split] if im.domain_label == di)
    return out


def batch_arrays(batch: list):
    """Stack a list of LabeledImage into (x, y, d) arrays."""
    x = np.stack([im.pixels for im in batch])
    y = np.asarray([im.class_label for im in batch], dtype=np.int64)
    d = np.asarray([im.domain_label for im in batch], dtype=np.int64)
    return x, y, d


# ---------------------------------------------------------------------------
# minibatch sampling
# ---------------------------------------------------------------------------

@dataclass
class SamplerState:
    """Counter-based sampler state: every batch is a pure function of
    (seed, count), which makes resume-from-checkpoint exact."""
    seed: int
    count: int = 0


def iters_per_epoch(n_items: int, batch_size: int) -> int:
    return -(-n_items // batch_size)


def sample_minibatch(dataset: MultiDomainDataset, split: str, batch_size: int,
                     rng_state: SamplerState, balanced: bool = False) -> list:
    """Next minibatch under `rng_state`, advancing it by one batch.

    Unbalanced: per-epoch permutation, consumed in order; the last batch of
    an epoch may be short, so each epoch covers every item exactly once.
    Balanced: equal per-domain counts (batch_size must divide by the number
    of domains), each domain consuming its own permutation stream.
    """
    items = dataset.splits[split]
    N = len(items)
    if batch_size > N:
        raise ValueError(f"batch_size {batch_size} exceeds split size {N}")
    if not balanced:
        ipe = iters_per_epoch(N, batch_size)
        epoch, slot = divmod(rng_state.count, ipe)
        perm = np.random.default_rng(
            [rng_state.seed, _STREAM_SAMPLER, epoch]).permutation(N)
        sel = perm[slot * batch_size:(slot + 1) * batch_size]
        rng_state.count += 1
        return [items[i] for i in sel]

    D = len(dataset.domains)
    if batch_size % D:
        raise ValueError(
            f"balanced sampling needs batch_size divisible by {D} domains")
    per = batch_size // D
    by_domain = [[] for _ in range(D)]
    for i, im in enumerate(items):
        by_domain[im.domain_label].append(i)
    batch = []
    for di in range(D):
        pool = by_domain[di]
        if not pool:
            raise ValueError(f"domain {dataset.domains[di]!r} absent from "
                             f"split {split!r}")
        nd = len(pool)
        start = rng_state.count * per
        for j in range(start, start + per):
            rnd, off = divmod(j, nd)
            perm = np.random.default_rng(
                [rng_state.seed, _STREAM_SAMPLER, di, rnd]).permutation(nd)
            batch.append(items[pool[perm[off]]])
    rng_state.count += 1
    return batch
