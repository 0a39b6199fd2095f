"""Synthetic two-domain data: annulus phantoms with a controllable shift.

Both domains draw from one shape family (rotated elliptical annulus, a rough
stand-in for a myocardial ring). Source frames add light Gaussian noise and
keep their masks. Target frames run through a degradation chain in fixed
order: multiplicative Rayleigh speckle, gamma remap, intensity offset, then
Gaussian blur. Target masks exist only in the dataset's evaluation slot.
Pixel values are quantized to the 16-bit grid at generation time so the
in-memory dataset and a disk round-trip agree bit for bit.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import (DIM_MULTIPLE, DomainDataset, GazeTrajectory, Image, SegMask,
                   SourceItem, TargetItem, write_gaze_csv, write_gray_png,
                   write_mask_png)
from .metrics import surface_points

GAZE_STEP_MS = 200.0  # 5 Hz sampling


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_source: int = 24
    n_target: int = 24
    center_range: tuple = (0.38, 0.62)  # fraction of image side
    axes_range: tuple = (10.0, 18.0)    # semi-axes, pixels
    rotation_range: tuple = (0.0, math.pi)
    wall: float = 4.5                   # annulus thickness, pixels
    area_range: tuple = (0.03, 0.40)    # mask foreground fraction
    source_noise: float = 0.04
    # default shift is pure speckle: multiplicative noise scatters the
    # teacher's target-domain errors, which adaptation can then denoise;
    # gamma/offset/blur produce systematic boundary errors that survive
    # pseudo-label training, so they default to neutral and stay sweepable
    speckle: float = 2.4
    gamma: float = 1.0
    offset: float = 0.0
    blur: float = 0.0
    gaze_samples: int = 20
    gaze_jitter: float = 1.5            # pixels
    seed: int = 0

    def __post_init__(self):
        if self.image_size < DIM_MULTIPLE or self.image_size % DIM_MULTIPLE:
            raise ValueError(f"image_size must be a positive multiple of {DIM_MULTIPLE}")
        if self.n_source < 1 or self.n_target < 1:
            raise ValueError("item counts must be >= 1")
        for name in ("source_noise", "speckle", "offset", "blur", "gaze_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.gaze_samples < 1:
            raise ValueError("gaze_samples must be >= 1")
        for name in ("center_range", "axes_range", "rotation_range", "area_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"degenerate shape config: {name} low > high")
        if self.axes_range[0] <= self.wall + 1.0:
            raise ValueError("degenerate shape config: axes must exceed wall thickness")
        if self.axes_range[1] >= 0.5 * self.image_size:
            raise ValueError("degenerate shape config: axes too large for image")
        if not (0.0 < self.center_range[0] and self.center_range[1] < 1.0):
            raise ValueError("degenerate shape config: center range outside image")
        if not (0.0 <= self.area_range[0] and self.area_range[1] <= 1.0):
            raise ValueError("degenerate shape config: area range outside [0, 1]")


def _annulus_mask(cfg, rng):
    """Sample shape params until the foreground fraction lands in range."""
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(200):
        cy = rng.uniform(*cfg.center_range) * n
        cx = rng.uniform(*cfg.center_range) * n
        a = rng.uniform(*cfg.axes_range)
        b = rng.uniform(*cfg.axes_range)
        rot = rng.uniform(*cfg.rotation_range)
        ca, sa = math.cos(rot), math.sin(rot)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        outer = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        ai, bi = a - cfg.wall, b - cfg.wall
        inner = (u / ai) ** 2 + (v / bi) ** 2 <= 1.0
        mask = outer & ~inner
        frac = mask.mean()
        if cfg.area_range[0] <= frac <= cfg.area_range[1] and mask.any():
            return mask.astype(np.uint8), inner
    raise ValueError("degenerate shape config: area range unreachable")


BACKGROUND_LEVEL = 0.30
POOL_LEVEL = 0.12   # blood pool inside the ring
WALL_LEVEL = 0.85   # near full scale so per-image max normalization is ~identity on source


def _quantize16(img):
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0


def _render_source(cfg, rng):
    mask, inner = _annulus_mask(cfg, rng)
    img = np.full(mask.shape, BACKGROUND_LEVEL)
    img[inner] = POOL_LEVEL
    img[mask.astype(bool)] = WALL_LEVEL
    img = img + rng.normal(0.0, cfg.source_noise, size=img.shape)
    return _quantize16(img), mask


def _render_target(cfg, rng):
    mask, inner = _annulus_mask(cfg, rng)
    img = np.full(mask.shape, BACKGROUND_LEVEL)
    img[inner] = POOL_LEVEL
    img[mask.astype(bool)] = WALL_LEVEL
    img = img + rng.normal(0.0, cfg.source_noise, size=img.shape)
    if cfg.speckle > 0:
        # Rayleigh field rescaled to unit mean, blended by strength
        ray = rng.rayleigh(scale=1.0, size=img.shape) / math.sqrt(math.pi / 2.0)
        img = img * (1.0 + cfg.speckle * (ray - 1.0))
    # clamp negatives for the power map but keep the speckle tail above 1;
    # the [0,1] invariant is restored by the final quantization clip
    img = np.maximum(img, 0.0) ** cfg.gamma
    img = img + cfg.offset
    if cfg.blur > 0:
        img = gaussian_filter(img, sigma=cfg.blur, mode="nearest")
    return _quantize16(img), mask


def synthesize_gaze(gt, cfg, seed=None):
    """Fixation-like samples scattered around the mask boundary.

    Each sample picks a boundary pixel, jitters both coordinates by
    N(0, gaze_jitter^2) pixels, clips into the image, and normalizes to
    [0, 1] against (side - 1) so jitter 0 lands exactly on boundary pixels.
    """
    mask = np.asarray(getattr(gt, "pixels", gt))
    if not mask.any():
        raise ValueError("no structure to gaze at")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    boundary = surface_points(mask).astype(np.float64)
    h, w = mask.shape
    samples = []
    for k in range(cfg.gaze_samples):
        r, c = boundary[rng.integers(len(boundary))]
        if cfg.gaze_jitter > 0:
            r += rng.normal(0.0, cfg.gaze_jitter)
            c += rng.normal(0.0, cfg.gaze_jitter)
        r = min(max(r, 0.0), h - 1.0)
        c = min(max(c, 0.0), w - 1.0)
        samples.append((k * GAZE_STEP_MS, c / (w - 1.0), r / (h - 1.0)))
    return GazeTrajectory(tuple(samples))


def _as_loaded(img):
    """Peak-normalize and requantize a rendered frame.

    Loaders normalize PNGs by per-image max, so the in-memory dataset applies
    the same map at generation time; after one pass the values are a fixpoint
    of write -> load and both code paths see identical bits.
    """
    return Image(_quantize16(img / img.max()))


def generate_domain(cfg, role):
    """Deterministic dataset for one domain; target masks go to the eval slot."""
    if role not in ("source", "target"):
        raise ValueError(f"role must be 'source' or 'target', got {role!r}")
    n_items = cfg.n_source if role == "source" else cfg.n_target
    base = np.random.SeedSequence([cfg.seed, 0 if role == "source" else 1])
    children = base.spawn(n_items)
    items = []
    eval_masks = {}
    for i, child in enumerate(children):
        render_seed, gaze_seed = child.spawn(2)
        rng = np.random.default_rng(render_seed)
        if role == "source":
            img, mask = _render_source(cfg, rng)
            stem = f"src{i:04d}"
            items.append(SourceItem(stem, _as_loaded(img), SegMask(mask)))
        else:
            img, mask = _render_target(cfg, rng)
            stem = f"tgt{i:04d}"
            gaze = synthesize_gaze(mask, cfg, seed=gaze_seed)
            items.append(TargetItem(stem, _as_loaded(img), gaze))
            eval_masks[stem] = SegMask(mask)
    return DomainDataset(role=role, items=items, _eval_masks=eval_masks)


def write_dataset(ds, root):
    """Write the standard on-disk layout (images/, masks/, gaze/).

    Target evaluation masks are written to masks/ as well; the loader routes
    them back into the evaluation-only slot.
    """
    from pathlib import Path
    root = Path(root)
    for sub in ("images", "masks", "gaze"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for idx, item in enumerate(ds.items):
        write_gray_png(root / "images" / f"{item.stem}.png", item.image.pixels)
        if ds.role == "source":
            write_mask_png(root / "masks" / f"{item.stem}.png", item.mask.pixels)
        else:
            write_mask_png(root / "masks" / f"{item.stem}.png",
                           ds.evaluation_mask(idx).pixels)
            if item.gaze is not None:
                write_gaze_csv(root / "gaze" / f"{item.stem}.csv", item.gaze)
    return root
