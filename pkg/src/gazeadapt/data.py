"""Domain types and on-disk ingestion for source/target datasets.

Layout per dataset root:

    root/images/<stem>.png   8- or 16-bit grayscale
    root/masks/<stem>.png    binary mask; required for source, evaluation-only
                             for target
    root/gaze/<stem>.csv     gaze samples, header ``t_ms,x,y``; target only

Pairing is by shared filename stem; items are ordered lexicographically by
stem. Target masks never appear on the training-facing records: they are
reachable only through :meth:`DomainDataset.evaluation_mask`.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MIN_SIDE = 16
DIM_MULTIPLE = 16  # 2**4, the default backbone depth


def _frozen(arr):
    out = np.array(arr, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Image:
    """H x W grayscale frame with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("Image pixels must be 2-D")
        h, w = px.shape
        if h < MIN_SIDE or w < MIN_SIDE or h % DIM_MULTIPLE or w % DIM_MULTIPLE:
            raise ValueError(
                f"image dimensions {h}x{w} must be >= {MIN_SIDE} and divisible by {DIM_MULTIPLE}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("bad image range: values outside [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class SegMask:
    """Binary segmentation mask, values exactly {0, 1}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError("SegMask pixels must be 2-D")
        vals = np.unique(px)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "pixels", _frozen(px.astype(np.uint8)))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def foreground_count(self):
        return int(self.pixels.sum())


@dataclass(frozen=True)
class GazeTrajectory:
    """Ordered gaze samples (t_ms, x, y) with normalized coordinates.

    Nominal sampling is one fix every 200 ms (5 Hz) but the gap is not
    enforced; timestamps only have to be strictly increasing.
    """

    samples: tuple
    frame_id: str = ""

    def __post_init__(self):
        samples = tuple((float(t), float(x), float(y)) for t, x, y in self.samples)
        prev = None
        for t, x, y in samples:
            if prev is not None and t <= prev:
                raise ValueError("gaze timestamps must be strictly increasing")
            prev = t
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError("gaze coordinates must lie in [0, 1]")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True, eq=False)
class SourceItem:
    stem: str
    image: Image
    mask: SegMask


@dataclass(frozen=True, eq=False)
class TargetItem:
    # deliberately no mask field: training code cannot see target labels
    stem: str
    image: Image
    gaze: GazeTrajectory | None


@dataclass(eq=False)
class DomainDataset:
    """Either a labeled source dataset or an unlabeled (+gaze) target one."""

    role: str
    items: list
    _eval_masks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {self.role!r}")
        if len(self.items) < 1:
            raise ValueError("dataset must contain at least one item")

    def __len__(self):
        return len(self.items)

    def has_evaluation_masks(self):
        if self.role == "source":
            return True
        return len(self._eval_masks) == len(self.items)

    def evaluation_mask(self, index):
        """Ground-truth mask for scoring only; never used by training."""
        item = self.items[index]
        if self.role == "source":
            return item.mask
        try:
            return self._eval_masks[item.stem]
        except KeyError:
            raise LookupError(f"no evaluation mask for target item {item.stem!r}") from None


def normalize_image(raw):
    """Scale a nonnegative intensity array by its max into an Image in [0,1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and raw.min() < 0:
        raise ValueError("bad image range: negative intensity")
    peak = raw.max() if raw.size else 0.0
    if peak > 0:
        return Image(raw / peak)
    return Image(np.zeros_like(raw))


def read_gray_png(path):
    with PILImage.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "I;16B"):
            im = im.convert("I")
        arr = np.asarray(im)
    return arr.astype(np.float64)


def write_gray_png(path, values01, bits=16):
    values01 = np.asarray(values01, dtype=np.float64)
    if bits == 16:
        arr = np.round(values01 * 65535.0).astype(np.uint16)
        im = PILImage.fromarray(arr)  # uint16 -> I;16
    elif bits == 8:
        arr = np.round(values01 * 255.0).astype(np.uint8)
        im = PILImage.fromarray(arr, mode="L")
    else:
        raise ValueError("bits must be 8 or 16")
    im.save(path)


def write_mask_png(path, mask):
    arr = (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def read_mask_png(path):
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return SegMask((arr > 127).astype(np.uint8))


def write_gaze_csv(path, traj):
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("t_ms,x,y\n")
        for t, x, y in traj.samples:
            # repr round-trips float64 exactly, so load == original bitwise
            f.write(f"{t!r},{x!r},{y!r}\n")


def read_gaze_csv(path, frame_id=""):
    samples = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if [c.strip() for c in row] != ["t_ms", "x", "y"]:
                    raise ValueError(f"gaze parse error at {path} line 1: expected header t_ms,x,y")
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ValueError(f"gaze parse error at {path} line {lineno}: expected 3 fields")
            try:
                samples.append((float(row[0]), float(row[1]), float(row[2])))
            except ValueError:
                raise ValueError(f"gaze parse error at {path} line {lineno}: non-numeric field") from None
    try:
        return GazeTrajectory(tuple(samples), frame_id=frame_id)
    except ValueError as e:
        raise ValueError(f"gaze parse error at {path}: {e}") from None


def load_dataset(root, role):
    """Load a dataset directory; ordering is lexicographic by filename stem."""
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise ValueError(f"no images/ directory under {root}")
    stems = sorted(p.stem for p in images_dir.glob("*.png"))
    if not stems:
        raise ValueError(f"no PNG images under {images_dir}")

    items = []
    eval_masks = {}
    for stem in stems:
        img = normalize_image(read_gray_png(images_dir / f"{stem}.png"))
        mask_path = root / "masks" / f"{stem}.png"
        if role == "source":
            if not mask_path.is_file():
                raise ValueError(f"incomplete source record: missing mask for {stem!r}")
            items.append(SourceItem(stem, img, read_mask_png(mask_path)))
        else:
            gaze_path = root / "gaze" / f"{stem}.csv"
            gaze = read_gaze_csv(gaze_path, frame_id=stem) if gaze_path.is_file() else None
            items.append(TargetItem(stem, img, gaze))
            if mask_path.is_file():
                eval_masks[stem] = read_mask_png(mask_path)
    return DomainDataset(role=role, items=items, _eval_masks=eval_masks)
