"""Training-loop tests: optimizer oracle, teacher/adaptation smoke runs,
manifest invariants, pseudo-label conventions, and the ablation driver.

Full-scale behavior (domain gap, adaptation gains) lives in
test_acceptance.py; everything here runs on 32px frames in seconds.
"""

import dataclasses
import json

import numpy as np
import pytest

from conftest import tiny_run_config, tiny_synth_config

from gazeadapt import synth, training
from gazeadapt.config import RunConfig
from gazeadapt.data import DomainDataset, SegMask, TargetItem
from gazeadapt.network import forward_arrays, load_checkpoint, params_hash


# ---------------------------------------------------------------------------
# optimizer oracle

def test_rmsprop_single_step_hand_case():
    t = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([2.0, -1.0])}
    st = training.rmsprop_init(t)
    assert np.array_equal(st["w"], [0.0, 0.0])
    training.rmsprop_step(t, g, st, lr=0.1, smoothing=0.9)
    # state = (1-b) g^2, step = lr g / ([sqrt state] + eps), then f32 pin
    exp_state = 0.1 * np.array([4.0, 1.0])
    exp_w = np.array([1.0, 2.0]) - 0.1 * np.array([2.0, -1.0]) / (np.sqrt(exp_state) + 1e-8)
    exp_w = exp_w.astype(np.float32).astype(np.float64)
    assert np.allclose(st["w"], exp_state, rtol=0, atol=1e-15)
    assert np.array_equal(t["w"], exp_w)


def test_rmsprop_state_accumulates():
    t = {"w": np.array([0.5])}
    g = {"w": np.array([1.0])}
    st = training.rmsprop_init(t)
    training.rmsprop_step(t, g, st, lr=0.01, smoothing=0.9)
    training.rmsprop_step(t, g, st, lr=0.01, smoothing=0.9)
    # second step sees state = 0.9*0.1 + 0.1 = 0.19
    assert np.allclose(st["w"], [0.19], atol=1e-15)


def test_params_stay_on_f32_grid_after_step():
    t = {"w": np.array([1.0 / 3.0])}
    st = training.rmsprop_init(t)
    training.rmsprop_step(t, {"w": np.array([0.7])}, st, lr=1e-3, smoothing=0.99)
    assert t["w"].dtype == np.float64
    assert np.array_equal(t["w"], t["w"].astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------------------
# plumbing

def test_split_indices_80_20():
    assert training.split_indices(10) == (list(range(8)), [8, 9])
    assert training.split_indices(5) == ([0, 1, 2, 3], [4])
    # tiny sets keep everything in train
    assert training.split_indices(2) == ([0, 1], [])
    assert training.split_indices(1) == ([0], [])


def test_loss_curve_round_trip(tmp_path):
    rows = [{"epoch": 0, "l_gaa": 0.125, "l_gb": 0.5, "l_dice": 0.75,
             "l_ce": 0.0625, "total": 1.4375},
            {"epoch": 1, "l_gaa": 0.1, "l_gb": 0.4, "l_dice": 0.7,
             "l_ce": 0.06, "total": 1.26}]
    p = tmp_path / "curve.csv"
    training.write_loss_curve(p, rows)
    header = p.read_text().splitlines()[0]
    assert header == "epoch,l_gaa,l_gb,l_dice,l_ce,total"
    back = training.read_loss_curve(p)
    assert len(back) == 2
    for a, b in zip(rows, back):
        assert a["epoch"] == b["epoch"]
        for k in ("l_gaa", "l_gb", "l_dice", "l_ce", "total"):
            assert abs(a[k] - b[k]) < 1e-8


def test_loss_curve_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("epoch,loss\n0,1.0\n")
    with pytest.raises(ValueError, match="bad loss curve header"):
        training.read_loss_curve(p)


def test_manifest_round_trip(tmp_path):
    man = {"kind": "train-teacher", "seed": 3, "nested": {"a": [1, 2]}}
    p = tmp_path / "m.json"
    training.write_manifest(p, man)
    assert training.read_manifest(p) == man


def test_monotone_warning_helper():
    rising = [1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0]
    with pytest.warns(UserWarning, match="smoothed training loss increased"):
        msg = training._warn_if_not_monotone(rising, "teacher")
    assert msg is not None
    falling = [7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]
    assert training._warn_if_not_monotone(falling, "teacher") is None
    assert training._warn_if_not_monotone([2.0, 1.0], "teacher") is None  # too short


def test_dataset_hash_sensitivity(tiny_source, tiny_target):
    a = training.dataset_hash(tiny_source)
    assert a == training.dataset_hash(tiny_source)
    assert a != training.dataset_hash(tiny_target)
    regen = synth.generate_domain(tiny_synth_config(), role="source")
    assert training.dataset_hash(regen) == a
    other = synth.generate_domain(tiny_synth_config(seed=12), role="source")
    assert training.dataset_hash(other) != a


# ---------------------------------------------------------------------------
# phase 1: teacher

def test_teacher_smoke_and_artifacts(tiny_source, tmp_path):
    cfg = tiny_run_config(tmp_path)
    teacher, man = training.train_teacher(tiny_source, cfg)
    assert teacher.epoch == cfg.epochs
    out = tmp_path / "run"
    assert (out / "teacher.gzc").exists()
    assert (out / "teacher_losses.csv").exists()
    assert (out / "teacher_manifest.json").exists()
    assert man["checkpoint_hash"] == params_hash(teacher)
    assert man["dataset_hash"] == training.dataset_hash(tiny_source)
    assert len(man["loss_curve"]) == cfg.epochs
    assert training.read_manifest(out / "teacher_manifest.json")["kind"] == "train-teacher"
    loaded = load_checkpoint(out / "teacher.gzc")
    assert params_hash(loaded) == params_hash(teacher)


def test_teacher_deterministic(tiny_source, tmp_path):
    h = []
    blobs = []
    for tag in ("a", "b"):
        cfg = tiny_run_config(tmp_path, out_dir=str(tmp_path / tag))
        _, man = training.train_teacher(tiny_source, cfg)
        h.append(man["checkpoint_hash"])
        blobs.append((tmp_path / tag / "teacher.gzc").read_bytes())
    assert h[0] == h[1]
    assert blobs[0] == blobs[1]


def test_teacher_requires_source_role(tiny_target, tmp_path):
    with pytest.raises(ValueError, match="needs a source dataset"):
        training.train_teacher(tiny_target, tiny_run_config(tmp_path))


def test_teacher_loss_decreases(tiny_source, tmp_path):
    cfg = tiny_run_config(tmp_path, epochs=8)
    _, man = training.train_teacher(tiny_source, cfg)
    totals = [r["total"] for r in man["loss_curve"]]
    assert totals[-1] < totals[0]


# ---------------------------------------------------------------------------
# pseudo-labels

@pytest.fixture(scope="module")
def tiny_teacher(tiny_source, tmp_path_factory):
    cfg = tiny_run_config(tmp_path_factory.mktemp("teach"), epochs=4)
    teacher, _ = training.train_teacher(tiny_source, cfg)
    return teacher


def test_pseudo_labels_shapes_and_types(tiny_teacher, tiny_target):
    pseudo = training.generate_pseudo_labels(tiny_teacher, tiny_target, 0.5)
    assert len(pseudo) == len(tiny_target.items)
    for m, item in zip(pseudo, tiny_target.items):
        assert isinstance(m, SegMask)
        assert m.pixels.shape == item.image.pixels.shape


def test_pseudo_threshold_extremes(tiny_teacher, tiny_target):
    # probabilities are strictly inside (0, 1), so these saturate
    lo = training.generate_pseudo_labels(tiny_teacher, tiny_target, 1e-9)
    hi = training.generate_pseudo_labels(tiny_teacher, tiny_target, 1.0 - 1e-9)
    assert all(m.pixels.all() for m in lo)
    assert all(not m.pixels.any() for m in hi)


def test_pseudo_threshold_is_inclusive(tiny_teacher, tiny_target):
    # a pixel whose probability equals the threshold lands in the foreground
    px = tiny_target.items[0].image.pixels
    probs, _, _ = forward_arrays(tiny_teacher, px[None, None])
    pstar = float(probs[0, 7, 9])
    pseudo = training.generate_pseudo_labels(tiny_teacher, tiny_target, pstar)
    assert pseudo[0].pixels[7, 9] == 1


# ---------------------------------------------------------------------------
# phase 2: adaptation

@pytest.fixture(scope="module")
def tiny_pseudo(tiny_teacher, tiny_target):
    return training.generate_pseudo_labels(tiny_teacher, tiny_target, 0.5)


def test_adapt_smoke_and_manifest(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    cfg = tiny_run_config(tmp_path)
    before = params_hash(tiny_teacher)
    student, man = training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo, cfg)
    out = tmp_path / "run"
    assert (out / "student.gzc").exists()
    assert (out / "gaa.gzc").exists()
    assert (out / "adapt_losses.csv").exists()
    assert man["teacher_unchanged"] is True
    assert man["teacher_hash"] == before
    assert params_hash(tiny_teacher) == before  # frozen across adaptation
    assert man["checkpoint_hash"] == params_hash(student)
    assert man["checkpoint_hash"] != before  # student actually moved
    assert len(man["loss_curve"]) == cfg.epochs
    assert man["train_items"] + man["val_items"] == len(tiny_target.items)
    lw = man["loss_weights"]
    assert set(lw) == {"lambda_gaa", "lambda_gb", "lambda_dice", "lambda_ce"}


def test_adapt_deterministic(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    h = []
    for tag in ("a", "b"):
        cfg = tiny_run_config(tmp_path, out_dir=str(tmp_path / tag))
        _, man = training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo, cfg)
        h.append(man["checkpoint_hash"])
    assert h[0] == h[1]


def test_adapt_loss_decomposition(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    cfg = tiny_run_config(tmp_path, lambda_gaa=0.5, lambda_gb=2.0,
                          lambda_dice=1.0, lambda_ce=0.25)
    _, man = training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo, cfg)
    for row in man["loss_curve"]:
        recon = (0.5 * row["l_gaa"] + 2.0 * row["l_gb"]
                 + 1.0 * row["l_dice"] + 0.25 * row["l_ce"])
        assert abs(row["total"] - recon) < 1e-9


def test_adapt_without_gaa_skips_fusion(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    cfg = tiny_run_config(tmp_path, lambda_gaa=0.0)
    _, man = training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo, cfg)
    assert man["gaa_checkpoint"] is None
    assert not (tmp_path / "run" / "gaa.gzc").exists()
    assert all(row["l_gaa"] == 0.0 for row in man["loss_curve"])


def test_adapt_lr_zero_inherits_lr(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    inherit = tiny_run_config(tmp_path, out_dir=str(tmp_path / "a"))
    explicit = tiny_run_config(tmp_path, out_dir=str(tmp_path / "b"),
                               adapt_lr=inherit.lr)
    _, ma = training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo, inherit)
    _, mb = training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo, explicit)
    assert ma["checkpoint_hash"] == mb["checkpoint_hash"]


def test_adapt_epochs_overrides_epochs(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    cfg = tiny_run_config(tmp_path, epochs=5, adapt_epochs=1)
    student, man = training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo, cfg)
    assert len(man["loss_curve"]) == 1
    assert student.epoch == 1


def test_adapt_requires_target_role(tiny_teacher, tiny_source, tiny_pseudo, tmp_path):
    with pytest.raises(ValueError, match="needs a target dataset"):
        training.adapt_student(tiny_teacher, tiny_source, tiny_pseudo,
                               tiny_run_config(tmp_path))


def test_adapt_rejects_count_mismatch(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    with pytest.raises(ValueError, match="pseudo-label count"):
        training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo[:-1],
                               tiny_run_config(tmp_path))


def test_adapt_requires_gaze(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    item = tiny_target.items[0]
    blind = DomainDataset("target", [TargetItem(item.stem, item.image, None)])
    with pytest.raises(ValueError, match="gaze required for adaptation"):
        training.adapt_student(tiny_teacher, blind, tiny_pseudo[:1],
                               tiny_run_config(tmp_path))


def test_adapt_flags_empty_pseudo_labels(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    hollow = list(tiny_pseudo)
    hollow[0] = SegMask(np.zeros_like(tiny_pseudo[0].pixels))
    cfg = tiny_run_config(tmp_path)
    _, man = training.adapt_student(tiny_teacher, tiny_target, hollow, cfg)
    assert man["empty_pseudo_items"] == [tiny_target.items[0].stem]


def test_adapt_does_not_mutate_pseudo(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    before = training.masks_hash(tiny_pseudo)
    training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo,
                           tiny_run_config(tmp_path))
    assert training.masks_hash(tiny_pseudo) == before


# ---------------------------------------------------------------------------
# evaluation and ablation driver

def test_evaluate_model_reports_all_items(tiny_teacher, tiny_source):
    rep = training.evaluate_model(tiny_teacher, tiny_source, 0.5, {"tag": "t"})
    assert len(rep.rows) == len(tiny_source.items)
    assert 0.0 <= rep.mean_dsc <= 100.0
    assert rep.metadata["tag"] == "t"


def test_ablate_smoke(tmp_path):
    scfg = tiny_synth_config()
    rcfg = tiny_run_config(tmp_path)
    modes = list(training.ABLATION_WEIGHTS)
    results = training.ablate(rcfg, scfg, modes, seeds=[0], out_dir=tmp_path / "ab")
    assert [label for label, _ in results] == ["no-DA", "GAA-only", "GBL-only", "full"]
    for label, rep in results:
        assert len(rep.rows) == scfg.n_target
        mode_dir = tmp_path / "ab" / "seed0" / label
        assert (mode_dir / "report.csv").exists()
        assert (mode_dir / "report.json").exists()
    # one shared teacher per seed
    assert (tmp_path / "ab" / "seed0" / "teacher" / "teacher.gzc").exists()


def test_ablate_rejects_unknown_mode(tmp_path):
    with pytest.raises(ValueError, match="unknown ablation mode"):
        training.ablate(tiny_run_config(tmp_path), tiny_synth_config(),
                        ["full", "extra"], seeds=[0], out_dir=tmp_path / "x")


# ---------------------------------------------------------------------------
# feature dumps

def test_feature_dump_round_trip(tiny_teacher, tiny_source, tmp_path):
    img = tiny_source.items[0].image
    p = tmp_path / "feat.gzf"
    maps = training.dump_features(tiny_teacher, img, p)
    back = training.read_feature_dump(p)
    assert len(back) == len(maps) == 2
    for a, b in zip(maps, back):
        assert a.dtype == np.float32
        assert np.array_equal(a, b)
    # first map is the bottleneck
    assert maps[0].shape[0] == tiny_teacher.base_channels * 2 ** tiny_teacher.depth


def test_feature_dump_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.gzf"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not a feature dump"):
        training.read_feature_dump(p)


def test_feature_dump_tracks_adaptation(tiny_teacher, tiny_target, tiny_pseudo, tmp_path):
    student, _ = training.adapt_student(tiny_teacher, tiny_target, tiny_pseudo,
                                        tiny_run_config(tmp_path))
    img = tiny_target.items[0].image
    t_maps = training.dump_features(tiny_teacher, img, tmp_path / "t.gzf")
    s_maps = training.dump_features(student, img, tmp_path / "s.gzf")
    assert any(not np.array_equal(a, b) for a, b in zip(t_maps, s_maps))
