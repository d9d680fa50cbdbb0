"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Diagnostics
go to stderr; with --json, machine-readable results go to stdout.
Seed precedence: --seed flag > GLAVCL_SEED env var > config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import attention, container, gradcheck, probes, synthdata, trainer
from .encoders import ConfigError, EncoderConfig, ShapeError
from .objectives import LossInputError
from .probes import FeatureSelector, ProbeError
from .runconfig import echo_config, load_run_config
from .synthdata import ValidationError
from .trainer import TrainConfigError, TrainingDiverged

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (
    ValidationError, ConfigError, ShapeError, LossInputError,
    TrainConfigError, ProbeError, attention.AttentionError, ValueError,
)


def _resolve_seed(flag_seed: int | None, config_seed: int) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("GLAVCL_SEED")
    if env is not None:
        return int(env)
    return config_seed


def _emit(args, payload: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload))
    else:
        print(human)


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    n = args.n if args.n is not None else cfg.data.n_clips
    seed = _resolve_seed(args.seed, cfg.data.seed)
    cfg.data.n_clips = n
    cfg.data.seed = seed
    spec = cfg.data.clip_spec()
    clips, manifest = synthdata.generate_dataset(
        n, spec, n_classes=cfg.data.n_classes, seed=seed,
        randomize_source=cfg.data.randomize_source,
        source_cell_grid=cfg.encoder.grid_hw
        if cfg.data.align_source_to_grid else None,
        randomize_event=cfg.data.randomize_event,
    )
    synthdata.write_dataset(clips, manifest, args.out)
    echo_config(cfg, args.out)
    _emit(args, {"out": args.out, "n_clips": n, "seed": seed},
          f"wrote {n} clips to {args.out}")
    return EXIT_OK


def _encoder_cfg_for_dataset(cfg, clips) -> EncoderConfig:
    enc = EncoderConfig(**asdict(cfg.encoder))
    enc.grid_hw = tuple(enc.grid_hw)
    enc.n_mel_bands = clips[0].mel.shape[0]
    enc.slices_per_frame = clips[0].mel.shape[1] // clips[0].frames.shape[0]
    return enc


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    clips, _ = synthdata.read_dataset(args.data)
    cfg.train.seed = _resolve_seed(args.seed, cfg.train.seed)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.shuffle_audio:
        clips = synthdata.shuffle_audio(clips, cfg.train.seed)
    enc = _encoder_cfg_for_dataset(cfg, clips)
    state = trainer.train(clips, cfg.train, enc_cfg=enc, out_dir=args.out)
    echo_config(cfg, args.out)
    last = state.loss_history[-1] if state.loss_history else {}
    _emit(args, {"out": args.out, "steps": state.step, "final": last},
          f"trained {state.step} steps; final loss "
          f"{last.get('loss'):.4f}" if last else "trained 0 steps")
    return EXIT_OK


def _parse_features(text: str) -> FeatureSelector:
    if text.strip() == "none":
        selector = FeatureSelector(use_zvg=False, use_zvl=False, use_audio=False)
        selector.validate()  # raises, naming the invariant
    aliases = {"zvg": "use_zvg", "zvl": "use_zvl", "audio": "use_audio"}
    kwargs = {v: False for v in aliases.values()}
    for token in text.split(","):
        token = token.strip()
        if token not in aliases:
            raise ProbeError(f"unknown feature {token!r}; use zvg, zvl, audio")
        kwargs[aliases[token]] = True
    selector = FeatureSelector(**kwargs)
    selector.validate()
    return selector


def cmd_probe(args) -> int:
    cfg = load_run_config(args.config)
    seed = _resolve_seed(args.seed, cfg.probe.seed)
    selector = (_parse_features(args.features) if args.features
                else FeatureSelector(**cfg.probe.features))
    selector.validate()
    clips, _ = synthdata.read_dataset(args.data)
    model = trainer.resume(args.checkpoint).model
    task = args.task or cfg.probe.task
    runners = {
        "global_cls": lambda: probes.probe_global_classification(
            model, clips, selector, seed=seed),
        "event_loc": lambda: probes.probe_event_localization(
            model, clips, seed=seed),
        "source_loc": lambda: probes.probe_source_localization(
            model, clips, seed=seed, percentile=cfg.probe.percentile),
        "word_cls": lambda: probes.probe_word_classification(
            model, clips, seed=seed),
    }
    if task == "all":
        results = [run() for run in runners.values()]
    elif task in runners:
        results = [runners[task]()]
    else:
        raise ProbeError(f"unknown probe task {task!r}")
    payload = [r.to_json() for r in results]
    print(json.dumps(payload if len(payload) > 1 else payload[0]))
    return EXIT_OK


def _parse_axes(tokens: list[str]) -> dict:
    axes = {}
    for token in tokens:
        if "=" not in token:
            raise ProbeError(f"axis {token!r} must look like name=v1,v2")
        name, values = token.split("=", 1)
        parsed = [v.strip() for v in values.split(",") if v.strip()]
        if name == "m":
            parsed = [int(v) for v in parsed]
        axes[name] = parsed
    return axes


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    seed = _resolve_seed(args.seed, cfg.data.seed)
    axes = _parse_axes(args.axes or [])
    enc = EncoderConfig(**asdict(cfg.encoder))
    enc.grid_hw = tuple(enc.grid_hw)
    enc.n_mel_bands = cfg.data.n_mel_bands
    results = probes.run_ablation_suite(
        cfg.data.clip_spec(), cfg.data.n_clips, axes, cfg.train, enc,
        n_classes=cfg.data.n_classes, data_seed=seed, out_dir=args.out,
        jobs=args.jobs,
    )
    echo_config(cfg, args.out)
    if args.json:
        print(json.dumps([r.to_json() for r in results]))
    else:
        print(probes.format_results_table(results))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config)
    seed = _resolve_seed(args.seed, cfg.train.seed)
    report = gradcheck.run_gradcheck(seed=seed)
    payload = report.to_json()
    _emit(args, payload,
          ("pass" if report.passed else "FAIL")
          + f" (max rel err {max(report.checks.values()):.3e}, "
            f"tol {report.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_viz(args) -> int:
    clips, manifest = synthdata.read_dataset(args.data)
    model = trainer.resume(args.checkpoint).model
    stems = [rec["path"].rsplit(".", 1)[0] for rec in manifest.clip_records]
    if args.clip_id in stems:
        idx = stems.index(args.clip_id)
    else:
        try:
            idx = int(args.clip_id)
        except ValueError:
            raise ValidationError(f"unknown clip id {args.clip_id!r}") from None
        if not 0 <= idx < len(clips):
            raise ValidationError(f"clip index {idx} out of range")
    clip = clips[idx]
    feats = probes.extract_features(model, [clip])[0]
    import torch

    attn = attention.AttentionMap(
        weights=torch.as_tensor(feats.attn_weights),
        logits=torch.as_tensor(feats.attn_weights),
    )
    os.makedirs(args.out, exist_ok=True)
    out_hw = clip.truth_mask.shape
    paths = attention.render_attention_heatmap(
        args.out, stems[idx], attn, out_hw,
        frame=np.asarray(clip.frames).mean(axis=0)[:, :, 0],
    )
    _emit(args, {"paths": paths}, "\n".join(paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glavcl",
        description="Global-local audio-visual contrastive learning on "
                    "synthetic data: generate, train, probe, ablate, "
                    "gradient-check, visualize.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON run config file")
        p.add_argument("--seed", type=int, help="seed (overrides env/config)")
        p.add_argument("--json", action="store_true",
                       help="machine-readable JSON on stdout")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, help="number of clips")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="pretrain encoders on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--steps", type=int, help="override training steps")
    p.add_argument("--shuffle-audio", action="store_true",
                   help="derange audio across clips (control condition)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="evaluate frozen features")
    common(p, needs_out=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--task",
                   choices=["all", "global_cls", "event_loc", "source_loc",
                            "word_cls"],
                   help="probe task (default from config)")
    p.add_argument("--features",
                   help="comma list of zvg,zvl,audio (or 'none')")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="run an ablation suite")
    common(p)
    p.add_argument("--axes", nargs="+",
                   help="axes like m=1,3,5,7 objective_mode=both,global_only")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes for conditions")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient checks "
                            "(exit 2 if any check fails)")
    common(p, needs_out=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz", help="write attention heatmap PGMs for a clip")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--clip-id", required=True,
                   help="clip stem (clip_00000) or integer index")
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; report as validation error
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except container.ContainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
