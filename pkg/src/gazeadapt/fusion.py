"""Gaze-feature extraction, cross-attention fusion, and feature alignment.

The gaze heatmap passes through a small strided-conv extractor whose output
grid matches the teacher bottleneck, giving one query token per bottleneck
cell. Single-head attention over raw tokens (no learned Q/K/V maps) attends
the teacher tokens with the gaze queries; the attended tokens are
concatenated onto the teacher tokens; a learned linear projection brings the
concatenation back to token width for an MSE alignment against the student
bottleneck. The teacher side is a constant: no gradient ever flows into it.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .network import _f32_grid, conv_backward, conv_forward, relu_backward, relu_forward


@dataclass(frozen=True, eq=False)
class GazeFeature:
    """(n, d) gaze query tokens on the bottleneck grid."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2:
            raise ValueError("GazeFeature tokens must be 2-D (n, d)")
        object.__setattr__(self, "tokens", t)


@dataclass(frozen=True, eq=False)
class FusedFeature:
    """(n, 2d) tokens: teacher token i concatenated with its attended token."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[1] % 2:
            raise ValueError("FusedFeature tokens must be 2-D (n, 2d)")
        object.__setattr__(self, "tokens", t)


def extractor_widths(depth, token_dim):
    return [max(1, token_dim >> (depth - 1 - i)) for i in range(depth)]


def init_gaa_params(depth, token_dim, seed):
    """Extractor conv stack (He init) + alignment projection (identity prefix)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    cin = 1
    for i, cout in enumerate(extractor_widths(depth, token_dim)):
        fan_in = cin * 9
        tensors[f"ext{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
        tensors[f"ext{i}.b"] = np.zeros(cout)
        cin = cout
    # identity on the teacher half, zero on the attended half: the alignment
    # loss starts at exactly zero for a fresh student clone and training
    # decides how much of the gaze-attended features to mix in
    tensors["proj.w"] = np.concatenate(
        [np.eye(token_dim), np.zeros((token_dim, token_dim))], axis=1)
    tensors["proj.b"] = np.zeros(token_dim)
    for k in tensors:
        tensors[k] = _f32_grid(tensors[k])
    return tensors


def feature_map_tokens(feat):
    """Flatten (C, h, w) feature values to (h*w, C) tokens, row-major."""
    v = np.asarray(feat if isinstance(feat, np.ndarray) else feat.values, dtype=np.float64)
    c = v.shape[0]
    return v.reshape(c, -1).T


# ---------------------------------------------------------------------------
# batched array core

def extract_forward(gaa_params, heat_batch, depth):
    """heat_batch: (N, 1, H, W) -> tokens (N, h*w, d) plus backward cache."""
    h, w = heat_batch.shape[2], heat_batch.shape[3]
    if h % 2 ** depth or w % 2 ** depth:
        raise ValueError(f"shape not divisible by stride: {h}x{w} vs 2^{depth}")
    cur = heat_batch
    caches = []
    for i in range(depth):
        c, cc = conv_forward(cur, gaa_params[f"ext{i}.w"], gaa_params[f"ext{i}.b"], stride=2)
        cur, mask = relu_forward(c)
        caches.append((cc, mask))
    n_, d = cur.shape[0], cur.shape[1]
    tokens = cur.reshape(n_, d, -1).transpose(0, 2, 1)
    return tokens, (caches, cur.shape)


def extract_backward(cache, dtokens):
    caches, feat_shape = cache
    grads = {}
    d = dtokens.transpose(0, 2, 1).reshape(feat_shape)
    for i in reversed(range(len(caches))):
        cc, mask = caches[i]
        d = relu_backward(d, mask)
        d, dw, db = conv_backward(d, cc)
        grads[f"ext{i}.w"] = dw
        grads[f"ext{i}.b"] = db
    return grads


def fuse_forward(q_tokens, t_tokens):
    """Cross-attention fuse: scores = q @ t^T / sqrt(d), rows softmaxed.

    q_tokens, t_tokens: (N, n, d). Returns fused (N, n, 2d) and cache.
    """
    if q_tokens.shape != t_tokens.shape:
        if q_tokens.shape[-1] != t_tokens.shape[-1]:
            raise ValueError(f"token dim mismatch: {q_tokens.shape[-1]} vs {t_tokens.shape[-1]}")
        raise ValueError(f"token count mismatch: {q_tokens.shape[-2]} vs {t_tokens.shape[-2]}")
    d = q_tokens.shape[-1]
    scores = np.matmul(q_tokens, t_tokens.transpose(0, 2, 1)) / np.sqrt(d)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=-1, keepdims=True)
    attended = np.matmul(attn, t_tokens)
    fused = np.concatenate([t_tokens, attended], axis=-1)
    return fused, (q_tokens, t_tokens, attn, d)


def fuse_backward(cache, dfused):
    """Gradient w.r.t. the query tokens only (teacher tokens are frozen)."""
    _q, t_tokens, attn, d = cache
    datt = dfused[..., t_tokens.shape[-1]:]
    dattn = np.matmul(datt, t_tokens.transpose(0, 2, 1))
    tmp = (dattn * attn).sum(axis=-1, keepdims=True)
    dscores = attn * (dattn - tmp)
    return np.matmul(dscores, t_tokens) / np.sqrt(d)


def align_forward(gaa_params, fused, s_tokens):
    """MSE between projected fused tokens and student tokens."""
    if fused.shape[:-1] != s_tokens.shape[:-1]:
        raise ValueError(f"token count mismatch: {fused.shape[-2]} vs {s_tokens.shape[-2]}")
    pw, pb = gaa_params["proj.w"], gaa_params["proj.b"]
    z = np.matmul(fused, pw.T) + pb
    diff = z - s_tokens
    loss = (diff * diff).mean()
    return loss, (fused, diff, pw)


def align_backward(cache):
    fused, diff, pw = cache
    dz = 2.0 * diff / diff.size
    grads = {
        "proj.w": np.einsum("bnd,bne->de", dz, fused),
        "proj.b": dz.sum(axis=(0, 1)),
    }
    dfused = np.matmul(dz, pw)
    ds_tokens = -dz
    return dfused, ds_tokens, grads


# ---------------------------------------------------------------------------
# typed single-item ops

def extract_gaze_features(heatmap, gaa_params, depth):
    heat = heatmap.values.astype(np.float64)[None, None]
    tokens, _ = extract_forward(gaa_params, heat, depth)
    return GazeFeature(tokens[0])


def cross_attention_fuse(gaze_feature, t_tokens):
    t = np.asarray(t_tokens if isinstance(t_tokens, np.ndarray) else feature_map_tokens(t_tokens),
                   dtype=np.float64)
    fused, _ = fuse_forward(gaze_feature.tokens[None], t[None])
    return FusedFeature(fused[0])


def gaa_alignment_loss(fused_feature, s_tokens, gaa_params):
    s = np.asarray(s_tokens if isinstance(s_tokens, np.ndarray) else feature_map_tokens(s_tokens),
                   dtype=np.float64)
    loss, _ = align_forward(gaa_params, fused_feature.tokens[None], s[None])
    return loss
