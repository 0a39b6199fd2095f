"""U-Net style encoder-decoder with explicit forward/backward passes.

The same architecture serves as teacher and student. Compute runs in
float64; parameter tensors are kept on the float32 grid (re-quantized after
every optimizer step) so the float32 checkpoint container round-trips
bit-exactly.

Architecture for depth L and base width c: encoder stages i=0..L-1 of two
3x3 conv+ReLU layers at width c*2^i, each followed by 2x2 max pooling; a
bottleneck stage at width c*2^L (the feature tap used for attention-based
alignment); a mirrored decoder with nearest-neighbor upsampling and skip
concatenation; a final 1x1 conv + sigmoid head clamped to [eps, 1-eps].
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import Image

PROB_EPS = 1e-7


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """C x h x w activation tensor."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError("FeatureMap must be 3-D (channels, height, width)")
        if not np.isfinite(v).all():
            raise ValueError("FeatureMap values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class Prediction:
    """Per-pixel foreground probabilities, strictly inside (0, 1)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("Prediction must be 2-D")
        if p.min() <= 0.0 or p.max() >= 1.0:
            raise ValueError("prediction probabilities must lie strictly inside (0, 1)")
        object.__setattr__(self, "probs", p)


@dataclass(eq=False)
class ModelParams:
    """Named weight tensors plus the metadata needed to rebuild the net."""

    depth: int
    base_channels: int
    tensors: dict
    seed: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)  # free-form, checkpointed


def _f32_grid(a):
    return a.astype(np.float32).astype(np.float64)


def quantize_params(tensors):
    """Snap every tensor to the float32 grid (in place)."""
    for name in tensors:
        tensors[name] = _f32_grid(tensors[name])


def _conv_names(depth):
    names = []
    for i in range(depth):
        names += [f"enc{i}.conv1", f"enc{i}.conv2"]
    names += ["bott.conv1", "bott.conv2"]
    for i in reversed(range(depth)):
        names += [f"dec{i}.up", f"dec{i}.conv1", f"dec{i}.conv2"]
    names += ["head"]
    return names


def _layer_shapes(depth, base):
    shapes = {}
    cin = 1
    for i in range(depth):
        cout = base * 2 ** i
        shapes[f"enc{i}.conv1"] = (cout, cin, 3, 3)
        shapes[f"enc{i}.conv2"] = (cout, cout, 3, 3)
        cin = cout
    cb = base * 2 ** depth
    shapes["bott.conv1"] = (cb, cin, 3, 3)
    shapes["bott.conv2"] = (cb, cb, 3, 3)
    for i in reversed(range(depth)):
        ci = base * 2 ** i
        shapes[f"dec{i}.up"] = (ci, 2 * ci, 3, 3)
        shapes[f"dec{i}.conv1"] = (ci, 2 * ci, 3, 3)
        shapes[f"dec{i}.conv2"] = (ci, ci, 3, 3)
    shapes["head"] = (1, base, 1, 1)
    return shapes


def init_params(depth, base_channels, seed):
    """He-initialized parameters, reproducible for a given seed."""
    if depth < 2:
        raise ValueError("depth too small: need depth >= 2")
    if base_channels < 4:
        raise ValueError("base_channels too small: need >= 4")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _layer_shapes(depth, base_channels).items():
        fan_in = shape[1] * shape[2] * shape[3]
        tensors[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        tensors[f"{name}.b"] = np.zeros(shape[0])
    quantize_params(tensors)
    return ModelParams(depth=depth, base_channels=base_channels,
                       tensors=tensors, seed=seed, epoch=0)


def clone_for_student(teacher):
    """Deep copy so student updates can never touch teacher tensors."""
    tensors = {k: v.copy() for k, v in teacher.tensors.items()}
    return ModelParams(depth=teacher.depth, base_channels=teacher.base_channels,
                       tensors=tensors, seed=teacher.seed, epoch=teacher.epoch,
                       extra=dict(teacher.extra))


# ---------------------------------------------------------------------------
# layer primitives (forward returns cache for the matching backward)

def conv_forward(x, w, b, stride=1):
    y = kernels.conv2d(x, w, stride=stride) + b[None, :, None, None]
    return y, (x, w, stride)


def conv_backward(dy, cache):
    x, w, stride = cache
    dx = kernels.conv2d_input_grad(dy, w, (x.shape[2], x.shape[3]), stride=stride)
    dw = kernels.conv2d_weight_grad(x, dy, (w.shape[2], w.shape[3]), stride=stride)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def maxpool2_forward(x):
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(n, c, h // 2, w // 2, 4)
    idx = v.argmax(axis=-1)
    y = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy, cache):
    idx, shape = cache
    n, c, h, w = shape
    flat = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
    return flat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dy):
    n, c, h2, w2 = dy.shape
    return dy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------

def _block_forward(x, params, prefix):
    c1, cache1 = conv_forward(x, params.tensors[f"{prefix}.conv1.w"],
                              params.tensors[f"{prefix}.conv1.b"])
    r1, m1 = relu_forward(c1)
    c2, cache2 = conv_forward(r1, params.tensors[f"{prefix}.conv2.w"],
                              params.tensors[f"{prefix}.conv2.b"])
    r2, m2 = relu_forward(c2)
    return r2, (cache1, m1, cache2, m2)


def _block_backward(dy, caches, grads, prefix):
    cache1, m1, cache2, m2 = caches
    d = relu_backward(dy, m2)
    d, dw2, db2 = conv_backward(d, cache2)
    grads[f"{prefix}.conv2.w"] = dw2
    grads[f"{prefix}.conv2.b"] = db2
    d = relu_backward(d, m1)
    d, dw1, db1 = conv_backward(d, cache1)
    grads[f"{prefix}.conv1.w"] = dw1
    grads[f"{prefix}.conv1.b"] = db1
    return d


def forward_arrays(params, x):
    """Batched forward pass.

    x: (N, 1, H, W) float64 in [0, 1].
    Returns (probs (N,H,W), bottleneck (N,C,h,w), cache).
    """
    depth = params.depth
    h, w = x.shape[2], x.shape[3]
    if h % 2 ** depth or w % 2 ** depth:
        raise ValueError(f"shape not divisible by stride: {h}x{w} vs 2^{depth}")
    cache = {"x_shape": x.shape, "skips": [], "enc": [], "pool": []}
    cur = x
    for i in range(depth):
        a, bc = _block_forward(cur, params, f"enc{i}")
        cache["enc"].append(bc)
        cache["skips"].append(a)
        cur, pc = maxpool2_forward(a)
        cache["pool"].append(pc)
    bott, bc = _block_forward(cur, params, "bott")
    cache["bott"] = bc
    cur = bott
    cache["dec"] = []
    for i in reversed(range(depth)):
        up = upsample2_forward(cur)
        cu, ccache = conv_forward(up, params.tensors[f"dec{i}.up.w"],
                                  params.tensors[f"dec{i}.up.b"])
        ru, mu = relu_forward(cu)
        cat = np.concatenate([ru, cache["skips"][i]], axis=1)
        c1, cache1 = conv_forward(cat, params.tensors[f"dec{i}.conv1.w"],
                                  params.tensors[f"dec{i}.conv1.b"])
        r1, m1 = relu_forward(c1)
        c2, cache2 = conv_forward(r1, params.tensors[f"dec{i}.conv2.w"],
                                  params.tensors[f"dec{i}.conv2.b"])
        r2, m2 = relu_forward(c2)
        cache["dec"].append((ccache, mu, ru.shape[1], cache1, m1, cache2, m2))
        cur = r2
    cache["decoder_final"] = cur
    logits, hcache = conv_forward(cur, params.tensors["head.w"], params.tensors["head.b"])
    cache["head"] = hcache
    z = logits[:, 0]
    probs_raw = _sigmoid(z)
    probs = np.clip(probs_raw, PROB_EPS, 1.0 - PROB_EPS)
    cache["unclamped"] = (probs_raw > PROB_EPS) & (probs_raw < 1.0 - PROB_EPS)
    cache["probs"] = probs
    cache["bottleneck"] = bott
    return probs, bott, cache


def backward_arrays(params, cache, dprobs, dbottleneck=None):
    """Backward pass; returns gradients for every tensor in params.

    dprobs: (N,H,W) gradient w.r.t. the clamped probabilities.
    dbottleneck: optional (N,C,h,w) gradient injected at the bottleneck tap.
    """
    depth = params.depth
    grads = {}
    probs = cache["probs"]
    dz = dprobs * probs * (1.0 - probs) * cache["unclamped"]
    d, dwh, dbh = conv_backward(dz[:, None, :, :], cache["head"])
    grads["head.w"] = dwh
    grads["head.b"] = dbh
    skip_grads = [None] * depth
    d_cur = d
    # cache["dec"] was appended for i = depth-1 .. 0; walk it in reverse
    for idx_in_cache in reversed(range(len(cache["dec"]))):
        ccache, mu, up_ch, cache1, m1, cache2, m2 = cache["dec"][idx_in_cache]
        i = depth - 1 - idx_in_cache
        dd = relu_backward(d_cur, m2)
        dd, dw2, db2 = conv_backward(dd, cache2)
        grads[f"dec{i}.conv2.w"] = dw2
        grads[f"dec{i}.conv2.b"] = db2
        dd = relu_backward(dd, m1)
        dd, dw1, db1 = conv_backward(dd, cache1)
        grads[f"dec{i}.conv1.w"] = dw1
        grads[f"dec{i}.conv1.b"] = db1
        dru = dd[:, :up_ch]
        skip_grads[i] = dd[:, up_ch:]
        dcu = relu_backward(dru, mu)
        dup, dwu, dbu = conv_backward(dcu, ccache)
        grads[f"dec{i}.up.w"] = dwu
        grads[f"dec{i}.up.b"] = dbu
        d_cur = upsample2_backward(dup)
    if dbottleneck is not None:
        d_cur = d_cur + dbottleneck
    d_cur = _block_backward(d_cur, cache["bott"], grads, "bott")
    for i in reversed(range(depth)):
        d_cur = maxpool2_backward(d_cur, cache["pool"][i])
        d_cur = d_cur + skip_grads[i]
        d_cur = _block_backward(d_cur, cache["enc"][i], grads, f"enc{i}")
    return grads


def forward(params, img):
    """Single-image forward; returns (Prediction, bottleneck FeatureMap)."""
    if isinstance(img, Image):
        px = img.pixels
    else:
        px = np.asarray(img, dtype=np.float64)
    probs, bott, _ = forward_arrays(params, px[None, None, :, :])
    return Prediction(probs[0]), FeatureMap(bott[0])


# ---------------------------------------------------------------------------
# checkpoint container: magic, JSON metadata, float32 LE payload, CRC-32

CKPT_MAGIC = b"GZC1"


def save_checkpoint(params, path):
    meta = {
        "depth": params.depth,
        "base_channels": params.base_channels,
        "seed": params.seed,
        "epoch": params.epoch,
        "extra": params.extra,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes()
                       for v in params.tensors.values())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    try:
        if blob[:4] != CKPT_MAGIC:
            raise ValueError("bad magic")
        hlen = struct.unpack("<I", blob[4:8])[0]
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        off = 8 + hlen
        plen = struct.unpack("<Q", blob[off:off + 8])[0]
        off += 8
        payload = blob[off:off + plen]
        if len(payload) != plen:
            raise ValueError("truncated payload")
        crc = struct.unpack("<I", blob[off + plen:off + plen + 4])[0]
    except (struct.error, ValueError, json.JSONDecodeError) as e:
        raise ValueError(f"checkpoint integrity failure: {path} ({e})") from None
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ValueError(f"checkpoint integrity failure: {path} (checksum mismatch)")
    tensors = {}
    pos = 0
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos)
        tensors[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        pos += 4 * n
    return ModelParams(depth=header["depth"], base_channels=header["base_channels"],
                       tensors=tensors, seed=header["seed"], epoch=header["epoch"],
                       extra=header.get("extra", {}))


def params_hash(params):
    """Content hash of the float32 tensor payload (order-sensitive)."""
    import hashlib
    h = hashlib.sha256()
    for k in params.tensors:
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.tensors[k], dtype="<f4").tobytes())
    return h.hexdigest()
