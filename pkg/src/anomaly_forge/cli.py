"""``anomaly-forge`` command line: forge, train, eval, bank, map, prompts."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset, evaluation, learn, pnm, scoring
from .config import ConfigError, RunConfig, load_config, parse_assignment
from .encoders import encode_image
from .prompt_bank import PromptBankError, build_prompt_matrix, expand_templates, load_prompt_bank

FINAL_STAGE = 3


class CliError(Exception):
    """User-facing failure; reported on stderr with exit status 1."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def checkpoint_path(cfg: RunConfig, stage: int) -> Path:
    return cfg.checkpoint_dir / f"stage{stage}.json"


def _prompt_matrix(cfg: RunConfig):
    bank = load_prompt_bank(cfg.prompt_bank_path())
    name = cfg.prompts.class_name
    if name not in bank:
        raise CliError(f"class {name!r} not in prompt bank {cfg.prompt_bank_path()} (has {sorted(bank)})")
    return build_prompt_matrix(bank[name], cfg.encoder_config())


def _load_split(cfg: RunConfig, split: str):
    if not (cfg.dataset_dir / dataset.MANIFEST).is_file():
        raise CliError(f"no dataset at {cfg.dataset_dir}; run 'forge' first")
    samples = dataset.read_dataset(cfg.dataset_dir)
    train_idx, test_idx = dataset.split_holdout(samples, cfg.dataset.holdout_per_class)
    idx = {"train": train_idx, "test": test_idx, "all": list(range(len(samples)))}[split]
    return [samples[i] for i in idx], idx


def _load_checkpoint(cfg: RunConfig, path: Path) -> learn.Checkpoint:
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    try:
        ckpt = learn.Checkpoint.load(path)
        dims = learn.dims_from_params(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise CliError(f"incompatible checkpoint {path}: {exc}") from exc
    e = cfg.encoder
    if (dims.c1, dims.c2, dims.c3) != (e.c1, e.c2, e.c3):
        raise CliError(f"incompatible checkpoint {path}: dims {dims} do not match the encoder config")
    if ckpt.seed != cfg.seed:
        raise CliError(f"checkpoint {path} was trained with seed {ckpt.seed}, run seed is {cfg.seed}")
    return ckpt


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_forge(cfg: RunConfig, args) -> int:
    n_normal = cfg.dataset.n_normal if args.n_normal is None else args.n_normal
    n_abnormal = cfg.dataset.n_abnormal if args.n_abnormal is None else args.n_abnormal
    samples = dataset.forge_samples(cfg.seed, n_normal, n_abnormal, cfg.texture_config(), cfg.synth)
    try:
        manifest = dataset.write_dataset(samples, cfg.dataset_dir)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {cfg.dataset_dir}: {exc}") from exc
    print(f"forged {len(samples)} samples ({n_normal} normal, {n_abnormal} abnormal) -> {manifest}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    samples, _ = _load_split(cfg, "train")
    if not samples:
        raise CliError("training split is empty")
    data = dataset.encode_samples(samples, cfg.encoder_config())
    ctx = learn.TextContext.from_prompts(_prompt_matrix(cfg), cfg.image_size)
    t = cfg.train
    dims = learn.ModelDims(cfg.encoder.c1, cfg.encoder.c2, cfg.encoder.c3, t.l3, t.c_mid, t.head_hidden)
    if args.resume:
        ckpt = _load_checkpoint(cfg, Path(args.resume))
    else:
        ckpt = learn.Checkpoint(learn.init_model(cfg.seed, dims), cfg.seed, 0)
    plans = cfg.plans()
    stages = args.stages or list(range(ckpt.stage + 1, FINAL_STAGE + 1))
    if not stages:
        raise CliError(f"checkpoint is already at stage {ckpt.stage}; nothing to train")
    expected = ckpt.stage + 1
    for s in stages:
        if s != expected:
            raise CliError(f"stage order violated: stage {s} requested but the next stage is {expected}")
        expected += 1

    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_path = cfg.checkpoint_dir / "train_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(learn.LOG_COLUMNS)

        def log(row: learn.LogRow):
            writer.writerow([row.step, row.stage, _fmt(row.lr), _fmt(row.l_c), _fmt(row.l_f), _fmt(row.l_d)])

        for s in stages:
            ckpt = learn.run_stage(ckpt, data, ctx, plans[s - 1], cfg.seed, cfg.focal(), log)
            path = ckpt.save(checkpoint_path(cfg, s))
            print(f"stage {s} done -> {path}")
    print(f"training log -> {log_path}")
    return 0


def _predict(cfg: RunConfig, args, samples):
    """Fused maps, and answer-head outputs when a checkpoint is in play."""
    size = cfg.image_size
    if args.oracle_maps:
        maps = [s.gt_mask.astype(np.float64) for s in samples]
        return maps, None, None
    if args.bank:
        bank = scoring.load_memory_bank(args.bank)
        enc = cfg.encoder_config()
        maps = dataset.parallel_map(lambda s: scoring.fewshot_map(encode_image(s.image, enc)[1], bank, size).fused, samples)
        return maps, None, None
    ckpt = _load_checkpoint(cfg, Path(args.checkpoint) if args.checkpoint else checkpoint_path(cfg, FINAL_STAGE))
    data = dataset.encode_samples(samples, cfg.encoder_config())
    ctx = learn.TextContext.from_prompts(_prompt_matrix(cfg), size)
    out, _ = learn.forward(ckpt.params, data.batch(np.arange(len(data))), ctx, uses_masks=ckpt.stage >= 2)
    return list(out.fused), out.logits[:, 0], out.logits[:, 1:]


def cmd_eval(cfg: RunConfig, args) -> int:
    samples, idx = _load_split(cfg, args.split)
    if not samples:
        raise CliError(f"split {args.split!r} is empty")
    maps, anomaly_logit, cell_logits = _predict(cfg, args, samples)
    gts = [s.gt_mask for s in samples]
    truth = [s.label for s in samples]
    try:
        i_auroc = evaluation.auroc([scoring.image_score(m) for m in maps], [t == "abnormal" for t in truth])
        p_auroc = evaluation.pixel_auroc(maps, gts)
    except evaluation.MetricUndefinedError as exc:
        raise CliError(str(exc)) from exc
    acc = pos_acc = None
    if args.oracle_maps:
        acc = evaluation.accuracy(["abnormal" if m.max() > 0 else "normal" for m in maps], truth)
    elif anomaly_logit is not None:
        acc = evaluation.accuracy(["abnormal" if z > 0 else "normal" for z in anomaly_logit], truth)
        abn = [i for i, t in enumerate(truth) if t == "abnormal"]
        if abn:
            hits = [
                int(np.argmax(cell_logits[i])) in {c.id for c in evaluation.position_cells(gts[i])} for i in abn
            ]
            pos_acc = float(np.mean(hits))
    report = evaluation.MetricsReport(
        args.split, len(samples), int(sum(g.size for g in gts)), i_auroc, p_auroc, acc, pos_acc
    )
    csv_path, json_path = report.write(cfg.report_dir, args.stem)
    if args.heatmaps:
        hdir = cfg.report_dir / f"{args.stem}_heatmaps"
        for i, m in zip(idx, maps):
            evaluation.export_heatmap(np.clip(m, 0.0, 1.0), hdir / f"{i:05d}.pgm")
    sys.stdout.write(report.to_csv())
    print(f"report -> {csv_path}, {json_path}")
    return 0


def cmd_bank(cfg: RunConfig, args) -> int:
    if args.normals:
        root = Path(args.normals)
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".ppm")) if root.is_dir() else []
        if not files:
            raise CliError(f"no .pgm/.ppm images in {root}")
        normals = [pnm.load_image(p) for p in files]
    else:
        samples, _ = _load_split(cfg, "train")
        normals = [s.image for s in samples if s.label == "normal"]
    try:
        bank = scoring.build_memory_bank(
            normals, cfg.encoder_config(), args.k, cfg.seed if args.bank_seed is None else args.bank_seed
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    path = Path(args.output) if args.output else cfg.checkpoint_dir / f"bank_k{args.k}.json"
    scoring.save_memory_bank(bank, path)
    print(f"memory bank (k={bank.k}, {sum(len(b) for b in bank.levels)} patch features) -> {path}")
    return 0


def cmd_map(cfg: RunConfig, args) -> int:
    if bool(args.checkpoint) == bool(args.bank):
        raise CliError("map needs exactly one of --checkpoint or --bank")
    image = pnm.load_image(args.image)
    size = image.shape[:2]
    try:
        enc = dataclasses.replace(cfg.encoder_config(), image_size=size)
    except ValueError as exc:
        raise CliError(f"image {args.image} ({size[0]}x{size[1]}) does not fit the encoder grids: {exc}") from exc
    _, stack = encode_image(image, enc)
    if args.bank:
        maps = scoring.fewshot_map(stack, scoring.load_memory_bank(args.bank), size)
    else:
        ckpt = _load_checkpoint(cfg, Path(args.checkpoint))
        bank = load_prompt_bank(cfg.prompt_bank_path())
        pm = build_prompt_matrix(bank[cfg.prompts.class_name], enc)
        maps = scoring.decode_map(stack, pm, ckpt.params, size)
    out = Path(args.output) if args.output else Path(cfg.out) / f"{Path(args.image).stem}.map.pgm"
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.export_heatmap(np.clip(maps.fused, 0.0, 1.0), out)
    print(f"image score {scoring.image_score(maps):.6f}; heatmap -> {out}")
    return 0


def cmd_prompts(args) -> int:
    from .prompt_bank import bundled_bank_path

    path = Path(args.path) if args.path else bundled_bank_path()
    bank = load_prompt_bank(path)
    for cp in bank.values():
        expand_templates(cp)
    print("valid")
    for name, cp in bank.items():
        print(
            f"  {name}: {len(cp.normal_templates)} normal, {len(cp.abnormal_templates)} abnormal, "
            f"{len(cp.keywords)} keyword prompts"
        )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=d, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=d, help="run seed (required here or in the config)")
    parser.add_argument("--out", metavar="DIR", default=d, help="output root for relative paths")
    parser.add_argument(
        "--set", dest="overrides", action="append", metavar="KEY=VALUE", default=d,
        help="override a config entry, e.g. --set train.epochs=5 (repeatable)",
    )
    parser.add_argument(
        "--print-config", action="store_true", default=d, help="print the merged configuration and exit"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anomaly-forge", description=__doc__)
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("forge", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--n-normal", type=int)
    p.add_argument("--n-abnormal", type=int)

    p = sub.add_parser("train", parents=[common], help="three-stage training")
    p.add_argument("--resume", metavar="CKPT", help="continue from a stage checkpoint")
    p.add_argument("--stages", type=int, nargs="+", choices=(1, 2, 3), help="stages to run (default: all remaining)")

    p = sub.add_parser("eval", parents=[common], help="metrics report on a dataset split")
    p.add_argument("--checkpoint", metavar="CKPT", help="default: the final-stage checkpoint")
    p.add_argument("--bank", metavar="BANK", help="score with a few-shot memory bank instead")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--stem", default="metrics", help="report file stem")
    p.add_argument("--heatmaps", action="store_true", help="export per-image PGM heatmaps")
    p.add_argument("--oracle-maps", action="store_true", help="use ground-truth masks as maps (harness self-test)")

    p = sub.add_parser("bank", parents=[common], help="build a k-shot memory bank")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--normals", metavar="DIR", help="directory of normal images (default: training normals)")
    p.add_argument("--bank-seed", type=int, help="shot-selection seed (default: run seed)")
    p.add_argument("--output", metavar="PATH")

    p = sub.add_parser("map", parents=[common], help="anomaly heatmap for one image")
    p.add_argument("image")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--bank", metavar="BANK")
    p.add_argument("--output", metavar="PATH")

    p = sub.add_parser("prompts", parents=[common], help="validate a prompt-bank file")
    p.add_argument("path", nargs="?", help="default: the bundled bank")
    return parser


COMMANDS = {"forge": cmd_forge, "train": cmd_train, "eval": cmd_eval, "bank": cmd_bank, "map": cmd_map}


def _error(kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None and not args.print_config:
        parser.print_help(sys.stderr)
        return 2
    try:
        if args.command == "prompts" and not args.print_config:
            return cmd_prompts(args)
        overrides = [parse_assignment(s) for s in (args.overrides or [])]
        cfg = load_config(args.config, args.seed, args.out, overrides)
        if args.print_config:
            print(json.dumps(cfg.to_dict(), indent=2))
            return 0
        return COMMANDS[args.command](cfg, args)
    except learn.DivergenceError as exc:
        return _error("divergence", str(exc), stage=exc.stage, step=exc.step)
    except ConfigError as exc:
        return _error("config", str(exc))
    except PromptBankError as exc:
        return _error("prompt_bank", str(exc))
    except CliError as exc:
        return _error("usage", str(exc))
    except (OSError, ValueError) as exc:
        return _error(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
