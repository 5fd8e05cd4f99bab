"""Command-line entry points for data, training, inference, and reports."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataset, imgio, simulate, synthesis, training
from .harmonize import HarmonizeRequest, InferenceModel, evaluate, flip_consistency, harmonize


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="YAML config file")


def _cmd_dump_config(args) -> int:
    cfg = training.load_config(args.config)
    sys.stdout.write(training.dump_config(cfg))
    return 0


def _cmd_build_data(args) -> int:
    cfg = training.load_config(args.config)
    dc = training.data_config(cfg)
    if args.scenes:
        dc = simulate.DataConfig(**{**dc.__dict__, "paired": False})
    records = simulate.build_dataset(args.out, args.n, args.seed, dc)
    print(f"wrote {len(records)} tuples to {args.out}")
    return 0


def _cmd_validate_data(args) -> int:
    problems = dataset.validate_dataset(args.root, max_tuples=args.max)
    if problems:
        for p in problems:
            print(p)
        return 1
    n = len(dataset.read_manifest(args.root))
    print(f"ok: {n} tuples valid")
    return 0


def _cmd_train(args) -> int:
    cfg = training.load_config(args.config)
    if args.dump_config:
        sys.stdout.write(training.dump_config(cfg))
        return 0
    from . import report

    stage = args.stage.replace("-", "_")
    if stage in ("stage1_bg", "stage1_env"):
        if not args.data:
            raise SystemExit("train: --data is required for stage1 training")
        _, records = training.train_stage1(
            args.data, stage.removeprefix("stage1_"), cfg, args.out, resume=args.resume
        )
    elif stage == "align":
        if not (args.data and args.bg_ckpt and args.env_ckpt):
            raise SystemExit("train align: needs --data, --bg-ckpt, --env-ckpt")
        ckpt, records = training.train_align(
            args.data, args.bg_ckpt, args.env_ckpt, cfg, args.out
        )
        print(
            f"holdout L1 {ckpt.meta['holdout_l1']:.5f} "
            f"vs identity baseline {ckpt.meta['baseline_l1']:.5f}"
        )
    elif stage == "finetune":
        if not (args.data and args.synth_data and args.init):
            raise SystemExit("train finetune: needs --data, --synth-data, --init")
        _, records = training.train_finetune(
            args.data, args.synth_data, args.init, cfg, args.out
        )
    else:
        raise SystemExit(f"unknown stage {args.stage!r}")
    fig = report.loss_curve_figure(records, str(args.out) + ".loss.png", title=stage)
    print(f"checkpoint: {args.out}")
    print(f"loss records: {args.out}.loss.tsv, curve: {fig}")
    return 0


def _cmd_assemble(args) -> int:
    training.assemble_final(args.unet, args.extractor, args.align, args.out)
    print(f"assembled final checkpoint: {args.out}")
    return 0


def _cmd_synth_data(args) -> int:
    records = synthesis.build_synth_dataset(
        args.scenes,
        args.out,
        args.n,
        args.seed,
        env_ckpt=args.env_ckpt,
        final_ckpt=args.final_ckpt,
        steps=args.steps,
    )
    print(f"wrote {len(records)} synthesized pairs to {args.out}")
    return 0


def _cmd_harmonize(args) -> int:
    req = HarmonizeRequest(
        fg=imgio.load_image(args.fg),
        mask=imgio.load_mask(args.mask),
        bg=imgio.load_image(args.bg),
        ckpt=args.ckpt,
        seed=args.seed,
        steps=args.steps,
        mode=args.mode,
    )
    out = harmonize(req)
    imgio.save_image(out, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from . import report as report_mod

    model = InferenceModel.load(args.ckpt)
    rep = evaluate(
        None,
        args.testset,
        steps=args.steps,
        seed=args.seed,
        mode=args.mode,
        out_tsv=args.out,
        model=model,
    )
    stem = Path(args.out).with_suffix("")
    report_mod.eval_figure(rep, f"{stem}_metrics.png")
    tuples = [dataset.load_tuple(args.testset, r) for r in dataset.read_manifest(args.testset)]
    n_grid = min(6, len(tuples))
    grid_x = np.stack([t.x_a for t in tuples[:n_grid]])
    grid_m = np.stack([t.mask for t in tuples[:n_grid]])
    grid_c = np.stack([t.y_b if model.stage != "stage1_env" else t.z_thumb for t in tuples[:n_grid]])
    preds = model.predict(grid_x, grid_m, grid_c, steps=args.steps, seed=args.seed, mode=args.mode)
    grid_t = np.stack([t.x_b for t in tuples[:n_grid]])
    report_mod.sample_grid_figure(grid_x, preds, grid_t, f"{stem}_samples.png")
    print(rep.summary_text())
    print(f"report: {args.out} (+ {stem}_metrics.png, {stem}_samples.png)")
    return 0


def _cmd_probe_flip(args) -> int:
    model = InferenceModel.load(args.ckpt)
    rep = flip_consistency(model, args.testset, steps=args.steps, seed=args.seed)
    print(rep.summary_text())
    if args.out:
        from . import report as report_mod

        rep.to_tsv(args.out)
        fig = report_mod.flip_figure(rep, str(Path(args.out).with_suffix("")) + ".png")
        print(f"cases: {args.out}, figure: {fig}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lightblend",
        description="Lighting-aware portrait harmonization at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dump-config", help="print the effective configuration")
    _add_config_arg(p)
    p.set_defaults(fn=_cmd_dump_config)

    p = sub.add_parser("build-data", help="render a light-stage dataset")
    _add_config_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--scenes",
        action="store_true",
        help="single-lighting scenes (sources for synthesis) instead of relit pairs",
    )
    p.set_defaults(fn=_cmd_build_data)

    p = sub.add_parser("validate-data", help="check dataset invariants")
    p.add_argument("--root", required=True)
    p.add_argument("--max", type=int, default=None, help="check at most this many tuples")
    p.set_defaults(fn=_cmd_validate_data)

    p = sub.add_parser("train", help="run one training stage")
    _add_config_arg(p)
    p.add_argument(
        "--stage",
        required=True,
        choices=["stage1-bg", "stage1-env", "align", "finetune"],
    )
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--resume", help="resume a stage1 run from this checkpoint")
    p.add_argument("--bg-ckpt", help="align: stage1-bg checkpoint")
    p.add_argument("--env-ckpt", help="align: stage1-env checkpoint")
    p.add_argument("--synth-data", help="finetune: synthesized dataset directory")
    p.add_argument("--init", help="finetune: assembled final checkpoint")
    p.add_argument(
        "--dump-config", action="store_true", help="print the effective config and exit"
    )
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("assemble", help="fuse stage1/align checkpoints into a final model")
    p.add_argument("--unet", required=True, help="stage1-env checkpoint (denoiser + branch)")
    p.add_argument("--extractor", required=True, help="stage1-bg checkpoint (extractor)")
    p.add_argument("--align", required=True, help="align checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_assemble)

    p = sub.add_parser("synth-data", help="synthesize finetune pairs from scenes")
    p.add_argument("--scenes", required=True, help="scene dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--env-ckpt", help="stage1-env checkpoint for env-conditioned relights")
    p.add_argument("--final-ckpt", help="final checkpoint for bg-conditioned relights")
    p.add_argument("--steps", type=int, default=20)
    p.set_defaults(fn=_cmd_synth_data)

    p = sub.add_parser("harmonize", help="relight a composite to match a background")
    p.add_argument("--fg", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--bg", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--mode", choices=["ddim", "ddpm"], default="ddim")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_harmonize)

    p = sub.add_parser("eval", help="score a checkpoint on a test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--out", required=True, help="report TSV path")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["ddim", "ddpm"], default="ddim")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("probe-flip", help="flipped-background light-direction check")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional TSV path (figure written alongside)")
    p.set_defaults(fn=_cmd_probe_flip)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
