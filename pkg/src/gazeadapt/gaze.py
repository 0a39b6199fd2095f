"""Gaze heatmaps and the per-pixel loss weight masks derived from them.

A trajectory rasterizes to a max-normalized sum of isotropic Gaussians, one
per fixation. The weight mask is the affine remap ``w = floor + (1-floor)*h``
so attended pixels get weight 1 and unattended ones keep a positive floor,
which keeps the weighted cross-entropy logs finite.

Heatmaps and weight masks share one binary exchange format (GZH1): magic
``GZH1``, height and width as uint32 LE, then height*width float32 LE values
row-major. Arrays are held in float32 so a save/load round trip is bit-exact.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

GZH1_MAGIC = b"GZH1"


@dataclass(frozen=True, eq=False)
class GazeHeatmap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("heatmap must be 2-D")
        if v.size and v.min() < 0:
            raise ValueError("heatmap values must be nonnegative")
        if v.size and v.max() > 1.0 + 1e-6:
            raise ValueError("heatmap values must not exceed 1")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class WeightMask:
    values: np.ndarray
    w_floor: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("weight mask must be 2-D")
        if not (0.0 < self.w_floor <= 1.0):
            raise ValueError("bad weight floor: must be in (0, 1]")
        if v.min() < self.w_floor - 1e-6 or v.max() > 1.0 + 1e-6:
            raise ValueError("weight mask values must lie in [w_floor, 1]")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def rasterize_heatmap(traj, height, width, sigma):
    """Rasterize a trajectory into a max-normalized Gaussian-splat heatmap.

    Sample coordinates are normalized; a sample (x, y) lands at pixel
    (x*(width-1), y*(height-1)). An empty trajectory gives an all-zero map.
    """
    if sigma <= 0:
        raise ValueError("bad kernel width: sigma must be positive")
    if height < 16 or width < 16:
        raise ValueError("heatmap dimensions must be >= 16")
    if traj is None or len(traj) == 0:
        return GazeHeatmap(np.zeros((height, width), dtype=np.float32))
    centers = np.array([(y * (height - 1), x * (width - 1))
                        for (_t, x, y) in traj.samples], dtype=np.float64)
    heat = kernels.splat_gaussians(centers, float(sigma), int(height), int(width))
    heat = heat / heat.max()
    return GazeHeatmap(heat.astype(np.float32))


def regularize_to_weights(heatmap, w_floor):
    """Affine remap of a heatmap onto [w_floor, 1]; monotone in the heatmap."""
    if not (0.0 < w_floor <= 1.0):
        raise ValueError("bad weight floor: must be in (0, 1]")
    h = heatmap.values.astype(np.float64)
    w = w_floor + (1.0 - w_floor) * h
    return WeightMask(w.astype(np.float32), w_floor=float(w_floor))


def write_gzh1(path, values):
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("GZH1 stores a single 2-D plane")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(GZH1_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(values.astype("<f4").tobytes())


def read_gzh1(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != GZH1_MAGIC:
        raise ValueError(f"not a GZH1 file: {path}")
    h, w = struct.unpack("<II", blob[4:12])
    payload = blob[12:]
    if len(payload) != 4 * h * w:
        raise ValueError(f"truncated GZH1 file: {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
