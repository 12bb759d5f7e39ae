"""Command-line entry point: ``tagformer <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
integrity error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as A
from . import data as D
from .config import augment_spec, model_overrides, reference, resolve_config
from .dsp import Waveform, load_audio, save_audio
from .errors import ConfigError, TagformerError, UsageError
from .eval import evaluate_model, format_sweep, length_sweep
from .models import (
    PRESETS, RESNET_PRESETS, MusicTaggingTransformer, build_model, load_model, param_count, preset,
)
from .train import NoisyStudentConfig, TrainConfig, train_noisy_student, train_supervised

log = logging.getLogger("tagformer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _resolve(args, overrides: dict):
    common = {("run", "seed"): args.seed, ("run", "workers"): args.workers}
    return resolve_config(args.config, {**common, **overrides})


def _snapshot(cfg, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.ini").write_text(cfg.to_ini(), encoding="utf-8")


def _train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr=t["lr"], batch_size=t["batch_size"], max_epochs=t["max_epochs"], patience=t["patience"],
        chunk_seconds=t["chunk_seconds"], augment=augment_spec(cfg), seed=cfg["run"]["seed"],
        workers=cfg["run"]["workers"], max_seconds=t["max_seconds"] or None,
    )


def _model_config(cfg, n_tags: int) -> tuple:
    kind, name = cfg["model"]["type"], cfg["model"]["preset"]
    overrides = {"n_tags": n_tags, **model_overrides(cfg)}
    if kind == "transformer":
        if name not in PRESETS:
            raise ConfigError(f"unknown transformer preset {name!r}")
        return kind, preset(name, **overrides).to_dict()
    if kind == "resnet":
        if name not in RESNET_PRESETS:
            raise ConfigError(f"unknown resnet preset {name!r}")
        allowed = {k: v for k, v in overrides.items() if k in ("n_tags", "dropout", "n_layers")}
        return kind, {**RESNET_PRESETS[name], **allowed}
    raise ConfigError(f"unknown model type {kind!r}")


# -- commands ------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _resolve(args, {})
    out = Path(args.out)
    m = D.synth_dataset(
        args.artists, args.tracks_per_artist, out, n_tags=args.tags, clip_seconds=args.clip_seconds,
        seed=cfg["run"]["seed"], unlabeled_fraction=args.unlabeled_fraction, unlabeled_artists=args.unlabeled_artists,
    )
    labeled, unlabeled = m.counts()
    print(f"wrote {len(m)} tracks ({labeled} labeled, {unlabeled} unlabeled) to {out / 'manifest.tsv'}")
    return 0


def cmd_split(args) -> int:
    ratios = _floats(args.ratios)
    try:
        ratios = D._check_ratios(ratios)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = _resolve(args, {})
    m = D.load_manifest(args.manifest)
    s = D.cals_split(m, ratios, cfg["run"]["seed"])
    overlap = D.artist_overlap(m, s)
    D.save_split(m, s, args.out)
    summary = D.split_summary(m, s)
    for part in D.SPLITS:
        print(f"{part}\t{summary['track_fraction'][part]:.4f}")
    print(f"pool sizes: {json.dumps(summary['pool_sizes'], sort_keys=True)}")
    print(f"artist overlap: {overlap}")
    return 0 if overlap == 0 else 2


def _print_param_counts(model):
    print(f"param_count default transformer: {param_count(MusicTaggingTransformer(preset('default')))}")
    print(f"param_count kd preset: {param_count(MusicTaggingTransformer(preset('kd')))}")
    print(f"param_count this model: {param_count(model)}")


def cmd_train_teacher(args) -> int:
    cfg = _resolve(args, {
        ("model", "type"): args.model, ("model", "preset"): args.preset, ("train", "max_epochs"): args.max_epochs,
        ("train", "lr"): args.lr,
    })
    out = Path(args.out)
    _snapshot(cfg, out)
    store = D.TrackStore.from_split_file(args.split)
    kind, mcfg = _model_config(cfg, store.n_tags)
    model = build_model(kind, mcfg, seed=cfg["run"]["seed"])
    _print_param_counts(model)
    result = train_supervised(model, store, _train_config(cfg), out)
    report = evaluate_model(result.model, store, "valid", cfg["eval"]["chunk_seconds"])
    report.write(out / "valid_report.tsv")
    print(f"best epoch {result.best_epoch}, validation BCE {result.best_val_loss:.6f}, "
          f"ROC-AUC {report.macro_roc_auc:.4f}, checkpoint {result.checkpoint}")
    return 0


def cmd_train_student(args) -> int:
    cfg = _resolve(args, {
        ("student", "mode"): args.mode, ("student", "iterations"): args.iterations,
        ("train", "max_epochs"): args.max_epochs, ("train", "lr"): args.lr,
    })
    out = Path(args.out)
    _snapshot(cfg, out)
    store = D.TrackStore.from_split_file(args.split)
    teacher, _ = load_model(args.teacher)
    mode = cfg["student"]["mode"]
    if mode == "ke":
        student_config, student_type = None, teacher.model_type
    elif mode == "kd":
        name = cfg["student"]["kd_preset"]
        if name not in PRESETS:
            raise ConfigError(f"unknown transformer preset {name!r}")
        student_type = "transformer"
        student_config = preset(name, n_tags=teacher.cfg.n_tags, n_mels=teacher.cfg.n_mels).to_dict()
        student = build_model(student_type, student_config)
        if param_count(student) >= param_count(teacher):
            raise ConfigError(f"kd student preset {name!r} ({param_count(student)} parameters) is not smaller "
                              f"than the teacher ({param_count(teacher)})")
    else:
        raise ConfigError(f"[student] mode must be ke or kd, got {mode!r}")
    ns = NoisyStudentConfig(
        teacher_checkpoint=args.teacher, student_model=student_type, student_config=student_config,
        unlabeled_ratio=cfg["student"]["unlabeled_ratio"], iterations=cfg["student"]["iterations"],
    )
    result = train_noisy_student(ns, store, _train_config(cfg), out, teacher=teacher)
    report = evaluate_model(result.model, store, "valid", cfg["eval"]["chunk_seconds"])
    report.write(out / "valid_report.tsv")
    print(f"student ({mode}) parameters {param_count(result.model)}, validation ROC-AUC {report.macro_roc_auc:.4f}, "
          f"checkpoint {result.checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, {("eval", "chunk_seconds"): args.chunk_seconds, ("eval", "split"): args.on,
                          ("eval", "lengths"): args.length_sweep})
    out = Path(args.out)
    _snapshot(cfg, out)
    model, _ = load_model(args.checkpoint)
    store = D.TrackStore.from_split_file(args.split)
    report = evaluate_model(model, store, cfg["eval"]["split"], cfg["eval"]["chunk_seconds"])
    report.write(out / "report.tsv")
    print(f"macro ROC-AUC {report.macro_roc_auc:.6f}  PR-AUC {report.macro_pr_auc:.6f}  tracks {report.n_tracks}"
          + (f"  skipped tags {report.skipped_tags}" if report.skipped_tags else ""))
    if cfg["eval"]["lengths"]:
        rows = length_sweep(model, store, _floats(cfg["eval"]["lengths"]), cfg["eval"]["split"])
        text = format_sweep(rows)
        (out / "length_sweep.tsv").write_text(text, encoding="utf-8")
        print(text, end="")
    return 0


def cmd_augment_preview(args) -> int:
    cfg = _resolve(args, {})
    out = Path(args.out)
    _snapshot(cfg, out)
    w = load_audio(args.input)
    chain = A.AugmentChain.build(augment_spec(cfg), cfg["run"]["seed"])
    save_audio(out / "original.wav", w)
    plans = []
    for i in range(args.count):
        rng = np.random.default_rng([cfg["run"]["seed"], i])
        plan = chain.sample(np.random.default_rng([cfg["run"]["seed"], i]))
        aug = A.apply_chain(w, chain, rng)
        save_audio(out / f"augmented_{i}.wav", Waveform(aug.samples, aug.sample_rate))
        plans.append({"file": f"augmented_{i}.wav", "transforms": plan})
        print(f"augmented_{i}.wav: " + (", ".join(f"{n}={v:g}" for n, v in plan) or "(no transforms fired)"))
    (out / "plan.json").write_text(json.dumps({"probabilities": chain.probabilities, "previews": plans},
                                              indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_config_reference(args) -> int:
    print(reference(), end="")
    return 0


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides [run] seed)")
    common.add_argument("--workers", type=int, default=None, help="data-loading worker processes")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="tagformer", description="Music tagging transformer with noisy student training.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic tagged corpus")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--artists", type=int, default=50)
    s.add_argument("--tracks-per-artist", type=int, default=10)
    s.add_argument("--tags", type=int, default=4)
    s.add_argument("--clip-seconds", type=float, default=5.0)
    s.add_argument("--unlabeled-artists", type=int, default=0, help="extra artists whose tracks carry no tags")
    s.add_argument("--unlabeled-fraction", type=float, default=0.0, help="share of other tracks written without tags")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("split", parents=[common], help="artist-level stratified split of a manifest")
    s.add_argument("--manifest", required=True, help="manifest TSV")
    s.add_argument("--out", required=True, help="split file to write")
    s.add_argument("--ratios", default="0.7,0.1,0.2", help="train,valid,test fractions")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-teacher", parents=[common], help="supervised training with augmentation")
    s.add_argument("--split", required=True, help="split file from the split command")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--model", choices=["transformer", "resnet"], default=None, help="overrides [model] type")
    s.add_argument("--preset", default=None, help="overrides [model] preset")
    s.add_argument("--max-epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", parents=[common], help="noisy student training from a frozen teacher")
    s.add_argument("--split", required=True, help="split file from the split command")
    s.add_argument("--teacher", required=True, help="teacher checkpoint")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--mode", choices=["ke", "kd"], default=None, help="ke: student copies the teacher size; kd: smaller student")
    s.add_argument("--iterations", type=int, default=None, help="rounds of student-becomes-teacher")
    s.add_argument("--max-epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.set_defaults(func=cmd_train_student)

    s = sub.add_parser("evaluate", parents=[common], help="track-level ROC-AUC and PR-AUC")
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--split", required=True, help="split file")
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--on", default=None, help="partition to evaluate (default test)")
    s.add_argument("--chunk-seconds", type=float, default=None)
    s.add_argument("--length-sweep", default=None, help="comma-separated chunk lengths in seconds")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("augment-preview", parents=[common], help="write augmented versions of a WAV file")
    s.add_argument("--input", required=True, help="WAV file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=4, help="number of augmented copies")
    s.set_defaults(func=cmd_augment_preview)

    s = sub.add_parser("config-reference", parents=[common], help="list every config key with its default")
    s.set_defaults(func=cmd_config_reference)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except TagformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
