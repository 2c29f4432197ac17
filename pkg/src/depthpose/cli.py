"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 evaluation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import ffd as ffd_mod
from .dataio import DatasetFormat, SplitSpec, load_dataset, make_splits
from .errors import ConfigError, DataError, EvalError, InvalidSpec, LengthMismatch, MissingPairs
from .localizer import LocalizerConfig, LocalizerHyper, build_localizer, train_localizer
from .metrics import emit_report
from .pipeline import (
    Models,
    PipelineConfig,
    contact_sheet,
    evaluate,
    load_model,
    prepare_head_inputs,
    prepare_shoulder_inputs,
    run_pipeline,
    save_model,
)
from .posenet import (
    BranchConfig,
    Fusion,
    PoseHyper,
    build_branch,
    build_shoulder_net,
    build_trident,
    train_branch,
    train_two_phase,
)
from .synth import synth_generate

EXIT_CONFIG, EXIT_DATA, EXIT_EVAL = 2, 3, 4


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _hyper(cls, raw: dict | None, **overrides):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(bad)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**raw)


def _pipeline_config(args, raw: dict) -> PipelineConfig:
    cfg = PipelineConfig.from_dict(raw.get("pipeline", {}))
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "use_gt_center", False):
        cfg.use_gt_center = True
    for name in ("localizer", "ffd", "trident", "shoulder"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _records(args):
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    records = load_dataset(args.dataset, DatasetFormat(args.format))
    if args.split is None:
        return records, records
    return make_splits(records, SplitSpec.from_json(args.split))


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args, raw):
    recs = synth_generate(args.subjects, args.frames, args.seed or 0, _out(args))
    print(f"wrote {len(recs)} frames to {args.out}")


def cmd_train_localizer(args, raw):
    train, _ = _records(args)
    seed = args.seed or 0
    cfg = LocalizerConfig.from_dict(raw["localizer"]) if "localizer" in raw else LocalizerConfig()
    model = build_localizer(cfg, seed=seed)
    model, hist = train_localizer(model, train, _hyper(LocalizerHyper, raw.get("localizer_hyper"),
                                                       seed=seed, epochs=args.epochs))
    out = _out(args)
    save_model(out / "localizer.ckpt", "localizer", model)
    ffd_mod.write_history_csv(hist, out / "localizer_history.csv", ("epoch", "loss", "lr"))
    print(f"final loss {hist[-1]['loss']:.6f}")


def cmd_train_ffd(args, raw):
    train, _ = _records(args)
    if any(r.gray is None for r in train):
        raise MissingPairs("training frames without gray images")
    seed = args.seed or 0
    inputs = prepare_head_inputs(train)
    gen = ffd_mod.build_generator(ffd_mod.GeneratorConfig(**raw.get("generator", {})), seed=seed)
    disc = ffd_mod.build_discriminator(ffd_mod.DiscriminatorConfig(**raw.get("discriminator", {})),
                                       seed=seed + 1)
    hyper = _hyper(ffd_mod.GanHyper, raw.get("gan_hyper"), seed=seed, steps=args.epochs)
    gen, hist = ffd_mod.train_ffd(gen, disc, inputs.ffd_in, inputs.gray, hyper)
    out = _out(args)
    save_model(out / "ffd.ckpt", "ffd_generator", gen)
    ffd_mod.write_history_csv(hist, out / "ffd_history.csv")
    print(f"pooled SSE {hist[0]['g_sse']:.4f} -> {hist[-1]['g_sse']:.4f}")


def _branch_cfg(raw, channels):
    return BranchConfig(in_channels=channels, **raw.get("branch", {}))


def _write_pose_histories(out: Path, histories: dict):
    fields_ = ("epoch", "loss", "err_pitch", "err_roll", "err_yaw", "lr")
    for name, hist in histories.items():
        if isinstance(hist, list):
            ffd_mod.write_history_csv(hist, out / f"pose_{name}_history.csv", fields_)


def cmd_train_pose(args, raw):
    train, _ = _records(args)
    cfg = _pipeline_config(args, raw)
    seed = args.seed or 0
    gen = load_model(cfg.ffd, "ffd_generator") if cfg.ffd and not cfg.disable_ffd else None
    inputs = prepare_head_inputs(train, config=cfg)
    angles = [r.head_pose for r in train]
    branches = [build_branch(_branch_cfg(raw, c), seed=seed + i) for i, c in enumerate((1, 1, 2))]
    trident = build_trident(*branches, fusion=Fusion(raw.get("fusion", "conv_concat")),
                            seed=seed + 3, dropout=raw.get("head_dropout", 0.5))
    hb = _hyper(PoseHyper, raw.get("pose_hyper"), seed=seed, epochs=args.epochs)
    hh = _hyper(PoseHyper, raw.get("head_hyper", raw.get("pose_hyper")), seed=seed,
                epochs=args.epochs)
    trident, hist = train_two_phase(trident, inputs.depth, inputs.ffd_out(gen, cfg.disable_ffd),
                                    inputs.motion, angles, hb, hh)
    out = _out(args)
    save_model(out / "trident.ckpt", "trident", trident)
    _write_pose_histories(out, hist)
    print(f"head loss {hist['head'][-1]['loss']:.6f}, branches frozen: {hist['frozen_ok']}")


def cmd_train_shoulders(args, raw):
    train, _ = _records(args)
    cfg = _pipeline_config(args, raw)
    seed = args.seed or 0
    net = build_shoulder_net(_branch_cfg(raw, 1), seed=seed)
    hyper = _hyper(PoseHyper, raw.get("pose_hyper"), seed=seed, epochs=args.epochs)
    net, hist = train_branch(net, prepare_shoulder_inputs(train, cfg),
                             [r.shoulder_pose for r in train], hyper)
    out = _out(args)
    save_model(out / "shoulder.ckpt", "shoulder", net)
    _write_pose_histories(out, {"shoulder": hist})
    print(f"shoulder loss {hist[-1]['loss']:.6f}")


def cmd_eval(args, raw):
    _, test = _records(args)
    cfg = _pipeline_config(args, raw)
    report = evaluate(test, cfg)
    split = Path(args.split).stem if args.split else "all"
    csv_path, _ = emit_report(report.rows(Path(args.dataset).name, split), _out(args) / "report")
    print(csv_path.read_text(), end="")


def cmd_infer(args, raw):
    _, test = _records(args)
    cfg = _pipeline_config(args, raw)
    results = run_pipeline(test, cfg, Models.from_config(cfg))
    out = _out(args)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "skipped", "center_x", "center_y", "head_pitch", "head_roll",
                    "head_yaw", "shoulder_pitch", "shoulder_roll", "shoulder_yaw"])
        for res in results:
            center = res.head_center or ("", "")
            head = res.head_pose.as_array().tolist() if res.head_pose else ["", "", ""]
            sh = res.shoulder_pose.as_array().tolist() if res.shoulder_pose else ["", "", ""]
            w.writerow([res.frame_id, int(res.skipped), *center, *head, *sh])
    if args.viz:
        contact_sheet(results, test, out / "contact_sheet.png")
    print(f"wrote {out / 'predictions.csv'}")


def cmd_report(args, raw):
    path = Path(args.report)
    try:
        rows = list(csv.DictReader(open(path.with_suffix(".csv"), newline="")))
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    for row in rows:
        print(f"{row['model']:>10} {row['metric']:<22} {float(row['value']):.4f}")


COMMANDS = {
    "synth": cmd_synth,
    "train-localizer": cmd_train_localizer,
    "train-ffd": cmd_train_ffd,
    "train-pose": cmd_train_pose,
    "train-shoulders": cmd_train_shoulders,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if name == "report":
            p.add_argument("report", help="report path (with or without .csv)")
            continue
        if name == "synth":
            p.add_argument("--subjects", type=int, default=4)
            p.add_argument("--frames", type=int, default=8)
            continue
        p.add_argument("--dataset", help="dataset root in the canonical layout")
        p.add_argument("--format", default="biwi", choices=[f.value for f in DatasetFormat])
        p.add_argument("--split", help="split spec JSON")
        p.add_argument("--use-gt-center", action="store_true")
        if name.startswith("train"):
            p.add_argument("--epochs", type=int, help="epochs (steps for train-ffd)")
        for ckpt in ("localizer", "ffd", "trident", "shoulder"):
            p.add_argument(f"--{ckpt}", help=f"{ckpt} checkpoint path")
        if name == "infer":
            p.add_argument("--viz", action="store_true", help="write a PNG contact sheet")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)  # keeps CPU reductions in a fixed order, so reports are reproducible
    try:
        COMMANDS[args.command](args, _load_config(args.config))
    except (ConfigError, InvalidSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EvalError, LengthMismatch) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
