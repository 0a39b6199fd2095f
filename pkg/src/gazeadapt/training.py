"""Two-phase training: supervised teacher, then gaze-guided student adaptation.

Teacher phase fits the backbone on labeled source images with Dice + BCE.
Adaptation clones the teacher into a student and trains it on unlabeled
target images against frozen teacher pseudo-labels, with the gaze-weighted
balance term and the attention alignment term added per the configured loss
weights. The teacher is never updated; its tensors are hashed before and
after adaptation and the hashes must match.

Because the teacher is frozen, its per-item outputs (probabilities and
bottleneck tokens) are computed once up front and reused every epoch.
"""

import csv
import hashlib
import json
import struct
import time
import warnings
from pathlib import Path

import numpy as np

from . import fusion, kernels, losses
from .data import SegMask
from .gaze import rasterize_heatmap, regularize_to_weights
from .metrics import evaluate_masks
from .network import (ModelParams, clone_for_student, forward_arrays,
                      backward_arrays, init_params, params_hash,
                      quantize_params, save_checkpoint)

RMS_EPS = 1e-8
LOSS_COLUMNS = ("epoch", "l_gaa", "l_gb", "l_dice", "l_ce", "total")


# ---------------------------------------------------------------------------
# optimizer

def rmsprop_init(tensors):
    return {name: np.zeros_like(value) for name, value in tensors.items()}


def rmsprop_step(tensors, grads, state, lr, smoothing):
    """One RMSProp update; parameters are re-pinned to the float32 grid."""
    for name, g in grads.items():
        state[name] = smoothing * state[name] + (1.0 - smoothing) * g * g
        tensors[name] = tensors[name] - lr * g / (np.sqrt(state[name]) + RMS_EPS)
    quantize_params(tensors)


# ---------------------------------------------------------------------------
# hashing and manifest plumbing

def dataset_hash(ds):
    h = hashlib.sha256()
    h.update(ds.role.encode())
    for idx, item in enumerate(ds.items):
        h.update(item.stem.encode())
        h.update(np.ascontiguousarray(item.image.pixels).tobytes())
        if ds.role == "source":
            h.update(np.ascontiguousarray(item.mask.pixels).tobytes())
        else:
            if item.gaze is not None:
                h.update(repr(item.gaze.samples).encode())
    return h.hexdigest()


def masks_hash(masks):
    h = hashlib.sha256()
    for m in masks:
        h.update(np.ascontiguousarray(m.pixels).tobytes())
    return h.hexdigest()


def write_loss_curve(path, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(LOSS_COLUMNS)
        for r in rows:
            out.writerow([r["epoch"]] + [f"{r[k]:.8f}" for k in LOSS_COLUMNS[1:]])


def read_loss_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOSS_COLUMNS:
        raise ValueError(f"bad loss curve header in {path}")
    return [dict(zip(LOSS_COLUMNS, [int(r[0])] + [float(v) for v in r[1:]]))
            for r in rows[1:]]


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        return json.load(fh)


def _warn_if_not_monotone(totals, context):
    """Soft check: window-5 smoothed training loss should not increase."""
    if len(totals) < 6:
        return None
    sm = np.convolve(totals, np.ones(5) / 5.0, mode="valid")
    worst = float(np.max(np.diff(sm))) if len(sm) > 1 else 0.0
    if worst > 1e-9:
        msg = (f"{context}: smoothed training loss increased by {worst:.3e} "
               "at some epoch (soft check, not a failure)")
        warnings.warn(msg)
        return msg
    return None


# ---------------------------------------------------------------------------
# data plumbing

def split_indices(n):
    """80/20 train/val split by index; tiny sets keep everything in train."""
    n_val = int(round(0.2 * n))
    if n - n_val < 1:
        n_val = 0
    return list(range(n - n_val)), list(range(n - n_val, n))


def _image_batch(ds, idxs):
    return np.stack([ds.items[i].image.pixels for i in idxs])[:, None, :, :]


def _epoch_batches(n_items, batch, rng):
    order = rng.permutation(n_items)
    return [order[i:i + batch].tolist() for i in range(0, n_items, batch)]


def predict_mask(params, pixels, threshold):
    probs, _, _ = forward_arrays(params, np.asarray(pixels)[None, None])
    return SegMask((probs[0] >= threshold).astype(np.uint8))


# ---------------------------------------------------------------------------
# phase 1: supervised teacher

def train_teacher(source, cfg):
    """Returns (teacher ModelParams, manifest dict); writes artifacts to cfg.out_dir."""
    if source.role != "source":
        raise ValueError("train_teacher needs a source dataset")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    params = init_params(cfg.depth, cfg.base_channels, cfg.seed)
    state = rmsprop_init(params.tensors)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    masks = [item.mask.pixels.astype(np.float64) for item in source.items]
    curve = []
    for epoch in range(cfg.epochs):
        sums = {"l_dice": 0.0, "l_ce": 0.0, "total": 0.0}
        n_seen = 0
        for bi, idxs in enumerate(_epoch_batches(len(source.items), cfg.batch, shuffle_rng)):
            x = _image_batch(source, idxs)
            y = np.stack([masks[i] for i in idxs])
            probs, _, cache = forward_arrays(params, x)
            l_dice, d_dice = losses.dice_grad(probs, y)
            l_ce, d_ce = losses.bce_grad(probs, y)
            total = l_dice + l_ce
            if not np.isfinite(total):
                stems = [source.items[i].stem for i in idxs]
                raise RuntimeError(f"non-finite loss in teacher epoch {epoch} "
                                   f"batch {bi} (items {stems})")
            grads = backward_arrays(params, cache, d_dice + d_ce)
            rmsprop_step(params.tensors, grads, state, cfg.lr, cfg.rms_smoothing)
            w = len(idxs)
            sums["l_dice"] += l_dice * w
            sums["l_ce"] += l_ce * w
            sums["total"] += total * w
            n_seen += w
        curve.append({"epoch": epoch, "l_gaa": 0.0, "l_gb": 0.0,
                      "l_dice": sums["l_dice"] / n_seen,
                      "l_ce": sums["l_ce"] / n_seen,
                      "total": sums["total"] / n_seen})
        params.epoch = epoch + 1
    soft_warning = _warn_if_not_monotone([r["total"] for r in curve], "teacher")
    ckpt = out / "teacher.gzc"
    save_checkpoint(params, ckpt)
    write_loss_curve(out / "teacher_losses.csv", curve)
    manifest = {
        "kind": "train-teacher",
        "backend": kernels.get_backend(),
        "seed": cfg.seed,
        "dataset_hash": dataset_hash(source),
        "loss_curve": curve,
        "checkpoint": str(ckpt),
        "checkpoint_hash": params_hash(params),
        "wall_clock_s": time.perf_counter() - t0,
        "warnings": [w for w in [soft_warning] if w],
    }
    write_manifest(out / "teacher_manifest.json", manifest)
    return params, manifest


# ---------------------------------------------------------------------------
# phase 2: pseudo-labels and gaze-guided adaptation

def generate_pseudo_labels(teacher, target, threshold):
    """Frozen teacher predictions thresholded with the >= convention."""
    out = []
    for item in target.items:
        out.append(predict_mask(teacher, item.image.pixels, threshold))
    return out


def evaluate_model(params, ds, threshold, metadata=None):
    triples = []
    for idx, item in enumerate(ds.items):
        pred = predict_mask(params, item.image.pixels, threshold)
        triples.append((item.stem, pred, ds.evaluation_mask(idx)))
    return evaluate_masks(triples, metadata)


def _gaze_products(target, cfg):
    """Per-item heatmap and weight mask, computed once and frozen."""
    heats, weights = [], []
    for item in target.items:
        if item.gaze is None:
            raise ValueError(f"gaze required for adaptation: "
                             f"missing for {item.stem!r}")
        h, w = item.image.height, item.image.width
        heat = rasterize_heatmap(item.gaze, h, w, cfg.gaze_sigma)
        heats.append(heat.values.astype(np.float64))
        weights.append(regularize_to_weights(heat, cfg.w_floor).values.astype(np.float64))
    return np.stack(heats), np.stack(weights)


def adapt_student(teacher, target, pseudo, cfg):
    """Returns (student ModelParams, manifest); writes artifacts to cfg.out_dir."""
    if target.role != "target":
        raise ValueError("adapt_student needs a target dataset")
    if len(pseudo) != len(target.items):
        raise ValueError("pseudo-label count does not match target items")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    lw = cfg.loss_weights()
    lr = cfg.adapt_lr or cfg.lr
    n_epochs = cfg.adapt_epochs or cfg.epochs
    teacher_hash_before = params_hash(teacher)
    pseudo_hash = masks_hash(pseudo)
    empty_pseudo = [m.foreground_count() == 0
                    for m in pseudo]

    heats, weight_masks = _gaze_products(target, cfg)
    pseudo_arr = np.stack([m.pixels.astype(np.float64) for m in pseudo])

    # teacher is frozen: precompute its bottleneck tokens once
    token_dim = cfg.base_channels * 2 ** cfg.depth
    t_tokens_all = None
    if lw.lambda_gaa > 0:
        t_bott_list = []
        for item in target.items:
            _, bott, _ = forward_arrays(teacher, item.image.pixels[None, None])
            t_bott_list.append(bott[0])
        tb = np.stack(t_bott_list)
        t_tokens_all = tb.reshape(tb.shape[0], tb.shape[1], -1).transpose(0, 2, 1)

    student = clone_for_student(teacher)
    s_state = rmsprop_init(student.tensors)
    gaa_params = None
    g_state = None
    if lw.lambda_gaa > 0:
        gaa_params = fusion.init_gaa_params(
            cfg.depth, token_dim, np.random.SeedSequence([cfg.seed, 7]))
        g_state = rmsprop_init(gaa_params)

    train_idx, val_idx = split_indices(len(target.items))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 303]))
    curve = []
    val_dsc = []
    for epoch in range(n_epochs):
        sums = {"l_gaa": 0.0, "l_gb": 0.0, "l_dice": 0.0, "l_ce": 0.0, "total": 0.0}
        n_seen = 0
        perm = shuffle_rng.permutation(len(train_idx))
        batches = [[train_idx[j] for j in perm[i:i + cfg.batch]]
                   for i in range(0, len(train_idx), cfg.batch)]
        for bi, idxs in enumerate(batches):
            x = _image_batch(target, idxs)
            if cfg.aug_noise > 0:
                # fresh view each visit; labels, weights and teacher tokens
                # stay tied to the clean image
                x = np.clip(x + aug_rng.normal(0.0, cfg.aug_noise, x.shape), 0.0, 1.0)
            y = pseudo_arr[idxs]
            wmask = weight_masks[idxs]
            s_probs, s_bott, s_cache = forward_arrays(student, x)

            l_gaa = 0.0
            d_bott = None
            gaa_grads = None
            if lw.lambda_gaa > 0:
                n, c = s_bott.shape[0], s_bott.shape[1]
                s_tokens = s_bott.reshape(n, c, -1).transpose(0, 2, 1)
                q_tokens, ecache = fusion.extract_forward(
                    gaa_params, heats[idxs][:, None], cfg.depth)
                fused, fcache = fusion.fuse_forward(q_tokens, t_tokens_all[idxs])
                l_gaa, acache = fusion.align_forward(gaa_params, fused, s_tokens)
                dfused, ds_tokens, proj_grads = fusion.align_backward(acache)
                dfused = lw.lambda_gaa * dfused
                ds_tokens = lw.lambda_gaa * ds_tokens
                gaa_grads = {k: lw.lambda_gaa * v for k, v in proj_grads.items()}
                dq = fusion.fuse_backward(fcache, dfused)
                gaa_grads.update(fusion.extract_backward(ecache, dq))
                d_bott = ds_tokens.transpose(0, 2, 1).reshape(s_bott.shape)

            l_gb, d_gb = (0.0, 0.0)
            if lw.lambda_gb > 0:
                l_gb, d_gb = losses.gbl_grad(s_probs, y, wmask)
            l_dice, d_dice = (0.0, 0.0)
            if lw.lambda_dice > 0:
                l_dice, d_dice = losses.dice_grad(s_probs, y)
            l_ce, d_ce = (0.0, 0.0)
            if lw.lambda_ce > 0:
                l_ce, d_ce = losses.bce_grad(s_probs, y)

            try:
                total = losses.total_loss(l_gaa, l_gb, l_dice, l_ce, lw)
            except RuntimeError as e:
                stems = [target.items[i].stem for i in idxs]
                raise RuntimeError(f"non-finite loss in adaptation epoch {epoch} "
                                   f"batch {bi} (items {stems})") from e

            d_probs = lw.lambda_gb * d_gb + lw.lambda_dice * d_dice + lw.lambda_ce * d_ce
            if np.isscalar(d_probs):
                d_probs = np.zeros_like(s_probs)
            s_grads = backward_arrays(student, s_cache, d_probs, dbottleneck=d_bott)
            rmsprop_step(student.tensors, s_grads, s_state, lr, cfg.rms_smoothing)
            if gaa_grads is not None:
                rmsprop_step(gaa_params, gaa_grads, g_state, lr, cfg.rms_smoothing)

            w = len(idxs)
            for key, val in (("l_gaa", l_gaa), ("l_gb", l_gb),
                             ("l_dice", l_dice), ("l_ce", l_ce), ("total", total)):
                sums[key] += val * w
            n_seen += w
        curve.append({"epoch": epoch, **{k: sums[k] / n_seen for k in
                                         ("l_gaa", "l_gb", "l_dice", "l_ce", "total")}})
        student.epoch = epoch + 1
        if val_idx and target.has_evaluation_masks():
            # reporting only; training never reads these masks
            scores = []
            for i in val_idx:
                pred = predict_mask(student, target.items[i].image.pixels, cfg.threshold)
                scores.append(_dsc_fast(pred.pixels, target.evaluation_mask(i).pixels))
            val_dsc.append(float(np.mean(scores)))

    soft_warning = _warn_if_not_monotone([r["total"] for r in curve], "adaptation")
    if params_hash(teacher) != teacher_hash_before:
        raise RuntimeError("teacher tensors changed during adaptation")
    if masks_hash(pseudo) != pseudo_hash:
        raise RuntimeError("pseudo-labels changed during adaptation")

    ckpt = out / "student.gzc"
    save_checkpoint(student, ckpt)
    gaa_ckpt = None
    if gaa_params is not None:
        gaa_model = ModelParams(depth=cfg.depth, base_channels=cfg.base_channels,
                                tensors=gaa_params, seed=cfg.seed,
                                epoch=n_epochs, extra={"kind": "gaa"})
        gaa_ckpt = out / "gaa.gzc"
        save_checkpoint(gaa_model, gaa_ckpt)
    write_loss_curve(out / "adapt_losses.csv", curve)
    manifest = {
        "kind": "adapt",
        "backend": kernels.get_backend(),
        "seed": cfg.seed,
        "loss_weights": {"lambda_gaa": lw.lambda_gaa, "lambda_gb": lw.lambda_gb,
                         "lambda_dice": lw.lambda_dice, "lambda_ce": lw.lambda_ce},
        "dataset_hash": dataset_hash(target),
        "pseudo_hash": pseudo_hash,
        "empty_pseudo_items": [target.items[i].stem
                               for i, e in enumerate(empty_pseudo) if e],
        "teacher_hash": teacher_hash_before,
        "teacher_unchanged": True,
        "train_items": len(train_idx),
        "val_items": len(val_idx),
        "val_dsc": val_dsc,
        "loss_curve": curve,
        "checkpoint": str(ckpt),
        "checkpoint_hash": params_hash(student),
        "gaa_checkpoint": str(gaa_ckpt) if gaa_ckpt else None,
        "wall_clock_s": time.perf_counter() - t0,
        "warnings": [w for w in [soft_warning] if w],
    }
    write_manifest(out / "adapt_manifest.json", manifest)
    return student, manifest


def _dsc_fast(a, b):
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


# ---------------------------------------------------------------------------
# ablation driver

ABLATION_WEIGHTS = {
    "no-DA": None,  # raw teacher, no adaptation phase
    "GAA-only": {"lambda_gb": 0.0},
    "GBL-only": {"lambda_gaa": 0.0},
    "full": {},
}


def ablate(run_cfg, synth_cfg, modes, seeds, out_dir):
    """One teacher per seed shared across modes; returns [(label, report)]."""
    import dataclasses

    from .metrics import write_report_csv, write_report_json
    from .synth import generate_domain

    for mode in modes:
        if mode not in ABLATION_WEIGHTS:
            raise ValueError(f"unknown ablation mode {mode!r}")
    out = Path(out_dir)
    results = []
    for seed in seeds:
        sc = dataclasses.replace(synth_cfg, seed=synth_cfg.seed + seed)
        source = generate_domain(sc, "source")
        target = generate_domain(sc, "target")
        seed_dir = out / f"seed{seed}"
        tcfg = dataclasses.replace(run_cfg, seed=run_cfg.seed + seed,
                                   out_dir=str(seed_dir / "teacher"))
        teacher, _ = train_teacher(source, tcfg)
        pseudo = generate_pseudo_labels(teacher, target, run_cfg.threshold)
        for mode in modes:
            mode_dir = seed_dir / mode
            meta = {"mode": mode, "seed": seed}
            if ABLATION_WEIGHTS[mode] is None:
                report = evaluate_model(teacher, target, run_cfg.threshold, meta)
                mode_dir.mkdir(parents=True, exist_ok=True)
            else:
                acfg = dataclasses.replace(run_cfg, seed=run_cfg.seed + seed,
                                           out_dir=str(mode_dir),
                                           **ABLATION_WEIGHTS[mode])
                student, _ = adapt_student(teacher, target, pseudo, acfg)
                report = evaluate_model(student, target, run_cfg.threshold, meta)
            write_report_csv(mode_dir / "report.csv", report)
            write_report_json(mode_dir / "report.json", report)
            results.append((mode, report))
    return results


# ---------------------------------------------------------------------------
# feature dumps (bottleneck + final decoder activations)

FEAT_MAGIC = b"GZF1"


def dump_features(params, img, path):
    """Write bottleneck and final-decoder activations for one image.

    Binary layout: magic, uint32 map count, then per map uint32 (c, h, w)
    followed by c*h*w float32 LE values. The first map is the bottleneck, so
    its channel count equals base_channels * 2**depth.
    """
    pixels = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    _, bott, cache = forward_arrays(params, pixels[None, None])
    maps = [bott[0], cache["decoder_final"][0]]
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<I", len(maps)))
        for m in maps:
            c, h, w = m.shape
            fh.write(struct.pack("<III", c, h, w))
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
    return [m.astype(np.float32) for m in maps]


def read_feature_dump(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEAT_MAGIC:
        raise ValueError(f"not a feature dump: {path}")
    (count,) = struct.unpack("<I", blob[4:8])
    off = 8
    maps = []
    for _ in range(count):
        c, h, w = struct.unpack("<III", blob[off:off + 12])
        off += 12
        n = c * h * w
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        maps.append(arr.reshape(c, h, w).copy())
        off += 4 * n
    return maps
