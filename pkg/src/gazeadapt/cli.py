"""Command line surface: dataset generation, training, adaptation, reports.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. Every
subcommand writes a JSON manifest under the run directory before returning
success, so a finished directory is always self-describing.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import metrics, training
from .data import load_dataset, normalize_image, read_gray_png, write_mask_png
from .network import load_checkpoint, params_hash
from .synth import generate_domain, write_dataset

SWEEP_DEFAULT_VALUES = (0.0, 0.25, 0.5, 1.0, 2.0)


class _Parser(argparse.ArgumentParser):
    # contract: bad usage exits 1 (argparse default would be 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(sub):
    sub.add_argument("--config", default=None, help="TOML or JSON config file")
    sub.add_argument("--profile", default=None, choices=sorted(cfgmod.PROFILES),
                     help="named settings bundle applied before the config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SEC.KEY=VAL", help="override, e.g. run.lr=1e-3")
    sub.add_argument("--out", default=None, help="run directory (overrides run.out_dir)")


def _resolve(args):
    run_cfg, synth_cfg = cfgmod.load_config(args.config, args.profile, args.overrides)
    if args.out is not None:
        run_cfg = dataclasses.replace(run_cfg, out_dir=args.out)
    return run_cfg, synth_cfg


def _outdir(run_cfg):
    out = Path(run_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_parser():
    parser = _Parser(prog="gazeadapt",
                     description="gaze-assisted teacher-student domain adaptation "
                                 "for binary segmentation")
    subs = parser.add_subparsers(dest="command", required=True)
    epilog = cfgmod.describe_defaults()
    kw = {"epilog": epilog,
          "formatter_class": argparse.RawDescriptionHelpFormatter}

    p = subs.add_parser("gen-synth", help="generate the synthetic two-domain dataset", **kw)
    _add_common(p)

    p = subs.add_parser("train-teacher", help="supervised training on labeled source", **kw)
    _add_common(p)
    p.add_argument("--data", required=True, help="source dataset root")

    p = subs.add_parser("pseudo-label", help="write frozen teacher pseudo-labels", **kw)
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="target dataset root")

    p = subs.add_parser("adapt", help="gaze-guided student adaptation on target", **kw)
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--data", required=True, help="target dataset root")

    p = subs.add_parser("evaluate", help="score a checkpoint against evaluation masks", **kw)
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--role", default="target", choices=("source", "target"))

    p = subs.add_parser("ablate", help="run the adaptation ablation grid", **kw)
    _add_common(p)
    p.add_argument("--modes", default="all",
                   help="'all' or comma list from " + ",".join(training.ABLATION_WEIGHTS))
    p.add_argument("--seeds", default="3",
                   help="count (runs seeds 0..n-1) or comma list of seeds")

    p = subs.add_parser("sweep", help="sweep one loss weight over a value grid", **kw)
    _add_common(p)
    p.add_argument("--param", default="lambda_gb", choices=("lambda_gaa", "lambda_gb"))
    p.add_argument("--values", default=",".join(str(v) for v in SWEEP_DEFAULT_VALUES))

    p = subs.add_parser("plot", help="render loss curves and ablation bars from a run", **kw)
    _add_common(p)
    p.add_argument("--run", required=True, help="run directory to scan")

    p = subs.add_parser("dump-features", help="dump bottleneck/decoder activations", **kw)
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="grayscale PNG")
    p.add_argument("--file", default=None, help="dump path (default OUT/features.gzf)")
    return parser


# ---------------------------------------------------------------------------

def cmd_gen_synth(args):
    run_cfg, synth_cfg = _resolve(args)
    out = _outdir(run_cfg)
    source = generate_domain(synth_cfg, "source")
    target = generate_domain(synth_cfg, "target")
    write_dataset(source, out / "source")
    write_dataset(target, out / "target")
    training.write_manifest(out / "gen_manifest.json", {
        "kind": "gen-synth",
        "config_hash": cfgmod.config_hash(run_cfg, synth_cfg),
        "synth": cfgmod.config_dict(synth_cfg),
        "source_hash": training.dataset_hash(source),
        "target_hash": training.dataset_hash(target),
        "n_source": len(source.items),
        "n_target": len(target.items),
    })
    print(f"wrote {len(source.items)} source / {len(target.items)} target items under {out}")
    return 0


def cmd_train_teacher(args):
    run_cfg, synth_cfg = _resolve(args)
    source = load_dataset(args.data, "source")
    params, manifest = training.train_teacher(source, run_cfg)
    print(f"teacher: {manifest['checkpoint']} "
          f"(final loss {manifest['loss_curve'][-1]['total']:.4f})")
    return 0


def cmd_pseudo_label(args):
    run_cfg, synth_cfg = _resolve(args)
    out = _outdir(run_cfg)
    teacher = load_checkpoint(args.checkpoint)
    target = load_dataset(args.data, "target")
    pseudo = training.generate_pseudo_labels(teacher, target, run_cfg.threshold)
    mask_dir = out / "pseudo"
    mask_dir.mkdir(exist_ok=True)
    empty = []
    for item, mask in zip(target.items, pseudo):
        write_mask_png(mask_dir / f"{item.stem}.png", mask.pixels)
        if mask.foreground_count() == 0:
            empty.append(item.stem)
    training.write_manifest(out / "pseudo_manifest.json", {
        "kind": "pseudo-label",
        "threshold": run_cfg.threshold,
        "checkpoint_hash": params_hash(teacher),
        "dataset_hash": training.dataset_hash(target),
        "n_items": len(pseudo),
        "empty_pseudo_items": empty,
    })
    print(f"wrote {len(pseudo)} pseudo-labels to {mask_dir}"
          + (f" ({len(empty)} empty)" if empty else ""))
    return 0


def cmd_adapt(args):
    run_cfg, synth_cfg = _resolve(args)
    out = _outdir(run_cfg)
    teacher = load_checkpoint(args.teacher)
    target = load_dataset(args.data, "target")
    pseudo = training.generate_pseudo_labels(teacher, target, run_cfg.threshold)
    student, manifest = training.adapt_student(teacher, target, pseudo, run_cfg)
    print(f"student: {manifest['checkpoint']} "
          f"(final loss {manifest['loss_curve'][-1]['total']:.4f})")
    if target.has_evaluation_masks():
        report = training.evaluate_model(student, target, run_cfg.threshold,
                                         {"config_hash": cfgmod.config_hash(run_cfg),
                                          "checkpoint_hash": manifest["checkpoint_hash"]})
        metrics.write_report_csv(out / "report.csv", report)
        metrics.write_report_json(out / "report.json", report)
        assd_txt = "n/a" if report.mean_assd is None else f"{report.mean_assd:.3f}"
        print(f"target DSC {report.mean_dsc:.2f} ASSD {assd_txt}")
    return 0


def cmd_evaluate(args):
    run_cfg, synth_cfg = _resolve(args)
    out = _outdir(run_cfg)
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, args.role)
    if not ds.has_evaluation_masks():
        raise ValueError(f"no evaluation masks under {args.data}; cannot score")
    report = training.evaluate_model(params, ds, run_cfg.threshold, {
        "config_hash": cfgmod.config_hash(run_cfg),
        "checkpoint_hash": params_hash(params),
        "seed": params.seed,
        "epoch": params.epoch,
    })
    metrics.write_report_csv(out / "report.csv", report)
    metrics.write_report_json(out / "report.json", report)
    training.write_manifest(out / "evaluate_manifest.json", {
        "kind": "evaluate",
        "role": args.role,
        "checkpoint_hash": params_hash(params),
        "dataset_hash": training.dataset_hash(ds),
        "mean_dsc": report.mean_dsc,
        "mean_assd": report.mean_assd,
        "n_assd_undefined": report.n_assd_undefined,
    })
    assd_txt = "n/a" if report.mean_assd is None else f"{report.mean_assd:.3f}"
    print(f"{args.role} DSC {report.mean_dsc:.2f} ASSD {assd_txt} "
          f"({len(report.rows)} items) -> {out / 'report.csv'}")
    return 0


def _parse_modes(text):
    if text.strip() == "all":
        return list(training.ABLATION_WEIGHTS)
    modes = [m.strip() for m in text.split(",") if m.strip()]
    for m in modes:
        if m not in training.ABLATION_WEIGHTS:
            raise ValueError(f"unknown ablation mode {m!r}; "
                             f"choose from {list(training.ABLATION_WEIGHTS)}")
    if not modes:
        raise ValueError("no ablation modes given")
    return modes


def _parse_seeds(text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("no seeds given")
    if len(parts) == 1 and "," not in text:
        return list(range(int(parts[0])))
    return [int(p) for p in parts]


def cmd_ablate(args):
    run_cfg, synth_cfg = _resolve(args)
    out = _outdir(run_cfg)
    modes = _parse_modes(args.modes)
    seeds = _parse_seeds(args.seeds)
    results = training.ablate(run_cfg, synth_cfg, modes, seeds, out)
    manifest = {
        "kind": "ablate",
        "config_hash": cfgmod.config_hash(run_cfg, synth_cfg),
        "modes": modes,
        "seeds": seeds,
        "mean_dsc": {m: float(np.mean([r.mean_dsc for lbl, r in results if lbl == m]))
                     for m in modes},
    }
    if set(modes) == set(metrics.ABLATION_LABELS):
        rows = metrics.tabulate_ablation(results, out / "ablation.csv",
                                         out / "ablation.png")
        manifest["table"] = rows
        for r in rows:
            print(f"{r['label']:>9s}: DSC {r['mean_dsc']:6.2f} +- {r['std_dsc']:.2f} "
                  f"(delta {r['delta_dsc']:+.2f})")
    else:
        for m in modes:
            print(f"{m:>9s}: DSC {manifest['mean_dsc'][m]:6.2f}")
    training.write_manifest(out / "ablate_manifest.json", manifest)
    return 0


def cmd_sweep(args):
    run_cfg, synth_cfg = _resolve(args)
    out = _outdir(run_cfg)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("no sweep values given")
    source = generate_domain(synth_cfg, "source")
    target = generate_domain(synth_cfg, "target")
    tcfg = dataclasses.replace(run_cfg, out_dir=str(out / "teacher"))
    teacher, _ = training.train_teacher(source, tcfg)
    pseudo = training.generate_pseudo_labels(teacher, target, run_cfg.threshold)
    rows = []
    for v in values:
        vdir = out / f"{args.param}_{v:g}"
        acfg = dataclasses.replace(run_cfg, out_dir=str(vdir), **{args.param: v})
        student, _ = training.adapt_student(teacher, target, pseudo, acfg)
        report = training.evaluate_model(student, target, run_cfg.threshold,
                                         {"sweep_param": args.param, "value": v})
        metrics.write_report_csv(vdir / "report.csv", report)
        rows.append({"value": v, "mean_dsc": report.mean_dsc,
                     "std_dsc": report.std_dsc})
        print(f"{args.param}={v:g}: DSC {report.mean_dsc:.2f}")

    import csv as _csv
    with open(out / f"sweep_{args.param}.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["value", "mean_dsc", "std_dsc"])
        for r in rows:
            w.writerow([r["value"], f"{r['mean_dsc']:.4f}", f"{r['std_dsc']:.4f}"])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r["value"] for r in rows], [r["mean_dsc"] for r in rows], "o-")
    ax.set_xlabel(args.param)
    ax.set_ylabel("mean target DSC (%)")
    fig.tight_layout()
    fig.savefig(out / f"sweep_{args.param}.png", dpi=120)
    plt.close(fig)

    training.write_manifest(out / "sweep_manifest.json", {
        "kind": "sweep",
        "param": args.param,
        "rows": rows,
        "config_hash": cfgmod.config_hash(run_cfg, synth_cfg),
        "teacher_hash": params_hash(teacher),
    })
    print(f"sweep plot: {out / f'sweep_{args.param}.png'}")
    return 0


def cmd_plot(args):
    run_cfg, _ = _resolve(args)
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise ValueError(f"run directory not found: {run_dir}")
    plot_dir = _outdir(run_cfg) / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    emitted = []
    for curve_path in sorted(run_dir.rglob("*_losses.csv")):
        rows = training.read_loss_curve(curve_path)
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        xs = [r["epoch"] for r in rows]
        for key in ("l_gaa", "l_gb", "l_dice", "l_ce", "total"):
            if any(abs(r[key]) > 0 for r in rows) or key == "total":
                ax.plot(xs, [r[key] for r in rows], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        name = curve_path.relative_to(run_dir).as_posix().replace("/", "_")
        dest = plot_dir / (name[:-4] + ".png")
        fig.savefig(dest, dpi=120)
        plt.close(fig)
        emitted.append(str(dest))

    ablation_csv = run_dir / "ablation.csv"
    if ablation_csv.is_file():
        import csv as _csv
        with open(ablation_csv, newline="") as fh:
            rows = list(_csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(5, 3.2))
        xs = np.arange(len(rows))
        ax.bar(xs, [float(r["mean_dsc"]) for r in rows],
               yerr=[float(r["std_dsc"]) for r in rows], capsize=4, color="#4878a8")
        ax.set_xticks(xs)
        ax.set_xticklabels([r["label"] for r in rows])
        ax.set_ylabel("mean target DSC (%)")
        fig.tight_layout()
        dest = plot_dir / "ablation.png"
        fig.savefig(dest, dpi=120)
        plt.close(fig)
        emitted.append(str(dest))

    if not emitted:
        raise ValueError(f"nothing to plot under {run_dir}")
    training.write_manifest(plot_dir / "plots_manifest.json",
                            {"kind": "plot", "source": str(run_dir), "files": emitted})
    print(f"rendered {len(emitted)} plot(s) into {plot_dir}")
    return 0


def cmd_dump_features(args):
    run_cfg, _ = _resolve(args)
    out = _outdir(run_cfg)
    params = load_checkpoint(args.checkpoint)
    img = normalize_image(read_gray_png(args.image))
    dest = Path(args.file) if args.file else out / "features.gzf"
    maps = training.dump_features(params, img, dest)
    training.write_manifest(out / "dump_manifest.json", {
        "kind": "dump-features",
        "checkpoint_hash": params_hash(params),
        "file": str(dest),
        "shapes": [list(m.shape) for m in maps],
    })
    print(f"wrote {len(maps)} feature maps to {dest} "
          f"(bottleneck channels={maps[0].shape[0]})")
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train-teacher": cmd_train_teacher,
    "pseudo-label": cmd_pseudo_label,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
    "dump-features": cmd_dump_features,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, LookupError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
