"""Command-line entry point.

Verbs: ``train``, ``sample``, ``evaluate``, ``ablate``, ``synth-data``.
Every command resolves its configuration from (preset -> config file -> CLI
flags), derives all randomness from one root seed and writes a resolved
config snapshot next to its outputs, so any run can be reproduced from the
snapshot alone. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from .audio import align_to_frames, encode_audio, make_backend
from .config import (
    PRESET_NAMES,
    RunConfig,
    apply_document,
    apply_overrides,
    load_config_file,
    make_preset,
    subsystem_seed,
)
from .container import write_rig_csv
from .data import AnimationSequence, DatasetEntry, RegionMask, generate_synthetic_dataset, make_split
from .diffusion import build_linear_schedule, sample_loop
from .errors import ConfigurationError, ContractError, DataError, NumericDivergenceError
from .model import build_decoder_variant, config_hash, load_checkpoint
from .training import TrainConfig, fit, prepare_items, style_map_for

DATA_ROOT_ENV = "SPEECHANIM_DATA_ROOT"


def _resolve_config(args) -> RunConfig:
    cfg = make_preset(args.preset) if getattr(args, "preset", None) else RunConfig()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, base=cfg)
    overrides: dict[str, object] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = str(args.out)
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    if getattr(args, "steps", None) is not None:
        overrides["sample.steps"] = args.steps
    if getattr(args, "data_root", None):
        overrides["data.root"] = str(args.data_root)
    if getattr(args, "manifest", None):
        overrides["data.manifest"] = str(args.manifest)
    if getattr(args, "set", None):
        for item in args.set:
            if "=" not in item:
                raise ConfigurationError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            overrides[key] = _parse_scalar(raw)
    return apply_overrides(cfg, overrides)


def _parse_scalar(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    for caster in (int, float):
        try:
            return caster(raw)
        except ValueError:
            pass
    return raw


def _data_root(cfg: RunConfig) -> Path:
    if cfg.data.root:
        return Path(cfg.data.root)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    if cfg.data.manifest:
        return Path(cfg.data.manifest).parent
    return Path(".")


def _load_entries(cfg: RunConfig) -> list[DatasetEntry]:
    if cfg.data.manifest:
        root = _data_root(cfg)
        if cfg.data.kind == "vertex":
            return D.load_vertex_dataset(root, cfg.data.manifest)
        return D.load_rig_dataset(root, cfg.data.manifest)
    return generate_synthetic_dataset(
        cfg.data.synthetic_sequences,
        cfg.data.synthetic_frames,
        cfg.data.synthetic_dims,
        seed=subsystem_seed(cfg.seed, "data"),
        fps=cfg.data.fps,
        kind=cfg.data.kind,
    )


def _resolve_split(entries: list[DatasetEntry], policy: str | None):
    """Return (train, val) entry lists; no policy means overfit on everything."""
    if policy is None:
        return entries, entries
    split = make_split(entries, policy)
    by_pair = {(e.subject, e.sentence): e for e in entries}
    train = [by_pair[e.pair] for e in split.train]
    val = [by_pair[e.pair] for e in split.val] or train
    return train, val


def _build_run(cfg: RunConfig):
    """Shared setup: data, features, schedule and a freshly seeded model."""
    entries = _load_entries(cfg)
    train_entries, val_entries = _resolve_split(entries, cfg.data.policy)
    if not train_entries:
        raise ConfigurationError("resolved training split is empty")
    backend = make_backend(cfg.encoder.name, cfg.encoder.weights_path)
    cfg.encoder.feature_dim = backend.feature_dim
    style_map = style_map_for(train_entries) if cfg.model.use_style else None
    n_styles = len(style_map) if style_map else 0
    train_items = prepare_items(train_entries, backend, style_map)
    val_items = prepare_items(val_entries, backend, style_map)
    output_dim = train_entries[0].motion.dim
    dec_cfg = cfg.decoder_config(output_dim=output_dim, n_styles=n_styles)
    model = build_decoder_variant(dec_cfg, seed=subsystem_seed(cfg.seed, "init"))
    sched = build_linear_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    return entries, train_entries, train_items, val_items, style_map, model, sched, backend


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, _, train_items, val_items, _, model, sched, _ = _build_run(cfg)
    cfg.snapshot(out_dir / "config.yaml")
    train_cfg = TrainConfig(
        optimizer=cfg.train.optimizer,
        learning_rate=cfg.train.learning_rate,
        epochs=cfg.train.epochs,
        batch_policy=cfg.train.batch_policy,
        batch_size=cfg.train.batch_size,
        seed=subsystem_seed(cfg.seed, "train"),
        loss=cfg.diffusion.loss,
    )
    # observed motion range, used to clamp rig exports (never the training loss)
    motion_lo = min(float(item.motion.min()) for item in train_items)
    motion_hi = max(float(item.motion.max()) for item in train_items)
    best = fit(
        train_items,
        val_items,
        model,
        sched,
        train_cfg,
        out_dir,
        diffusion_enabled=cfg.diffusion.enabled,
        resume=args.resume,
        static_extra={"run_config": cfg.to_dict(), "motion_range": [motion_lo, motion_hi]},
    )
    print(f"best checkpoint: {best}")
    print(f"last checkpoint: {out_dir / 'last.ckpt'}")
    return 0


def cmd_sample(args) -> int:
    model, doc = load_checkpoint(args.checkpoint)
    run_doc = doc["extra"].get("run_config")
    cfg = RunConfig()
    if run_doc is not None:
        cfg = apply_document(cfg, run_doc)
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed

    sched = build_linear_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    steps = args.steps or cfg.sample.steps or sched.steps
    if not cfg.diffusion.enabled:
        steps = 1  # no-diffusion baseline: one deterministic pass
    style = args.style
    if style is not None:
        if model.cfg.n_styles == 0:
            raise ConfigurationError("checkpoint was trained without style conditioning")
        if not 0 <= style < model.cfg.n_styles:
            raise ConfigurationError(
                f"style id {style} out of range [0, {model.cfg.n_styles})"
            )

    backend = make_backend(cfg.encoder.name, cfg.encoder.weights_path)
    clip = D.load_audio(args.audio)
    fps = args.fps or cfg.data.fps
    n_frames = max(1, int(round(clip.duration * fps)))
    feats = align_to_frames(encode_audio(clip, backend), n_frames)

    seed = args.seed if args.seed is not None else (
        cfg.sample.seed if cfg.sample.seed is not None else subsystem_seed(cfg.seed, "sample")
    )
    rng = np.random.default_rng(seed)
    counter: list = []
    kind = D.VERTEX_KIND if model.cfg.kind == "vertex" else D.RIG_KIND
    if not cfg.diffusion.enabled:
        x0 = model.predict(feats, np.zeros((n_frames, model.output_dim), dtype=np.float32), 0, style)
        seq = AnimationSequence(
            frames=x0.astype(np.float32), kind=kind, fps=fps,
            subject=f"style{style}" if style is not None else "none",
            sentence=Path(args.audio).stem,
        )
        counter.append(0)
    else:
        seq = sample_loop(
            feats,
            style,
            sched,
            model.predict,
            rng,
            steps=steps,
            out_dim=model.output_dim,
            kind=kind,
            fps=fps,
            subject=f"style{style}" if style is not None else "none",
            sentence=Path(args.audio).stem,
            eval_counter=counter,
        )

    motion_range = doc["extra"].get("motion_range")
    if kind == D.RIG_KIND and motion_range is not None:
        # keep exported controls inside the range seen in training data
        seq = AnimationSequence(
            frames=np.clip(seq.frames, motion_range[0], motion_range[1]),
            kind=seq.kind, fps=seq.fps, subject=seq.subject, sentence=seq.sentence,
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        if kind != D.RIG_KIND:
            raise ConfigurationError("CSV export is only available for rig-control motion")
        write_rig_csv(out, seq.frames)
    else:
        D.save_sequence(out, seq)
    sidecar = {
        "seed": int(seed),
        "steps": int(steps),
        "style": style,
        "checkpoint": str(args.checkpoint),
        "config_hash": config_hash(model.cfg),
        "audio": str(args.audio),
        "n_frames": n_frames,
        "denoise_iterations": len(counter),
    }
    Path(str(out) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    print(f"wrote {out} ({len(counter)} denoise iterations)")
    return 0


def _load_motion_file(path: Path, fps: float) -> AnimationSequence:
    if path.suffix.lower() == ".csv":
        from .container import read_rig_csv

        return AnimationSequence(
            frames=read_rig_csv(path), kind=D.RIG_KIND, fps=fps, sentence=path.stem
        )
    return D.load_sequence(path)


def _evaluate_one(pred_path: Path, gt_seq, mask, fps: float, dataset: str):
    pred_seq = _load_motion_file(pred_path, fps)
    return pred_seq, M.evaluate_pair(pred_seq, gt_seq, mask, dataset=dataset)


_MOTION_SUFFIXES = (".anim", ".csv")


def _motion_files(directory: Path) -> dict[str, Path]:
    return {
        p.name: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in _MOTION_SUFFIXES
    }


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} does not exist")
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory {gt_dir} does not exist")
    mask = RegionMask.load(args.mask)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    gt_files = _motion_files(gt_dir)
    style_dirs = sorted(p for p in pred_dir.iterdir() if p.is_dir())
    reports: list[M.MetricReport] = []
    skipped: list[str] = []
    diversity_values: list[float] = []
    per_seq: dict[str, dict] = {}

    def eval_one(pred_path: Path, gt_seq: AnimationSequence, label: str):
        pred_seq, report = _evaluate_one(pred_path, gt_seq, mask, args.fps, args.dataset)
        reports.append(report)
        per_seq[label] = json.loads(report.to_json())
        return pred_seq

    for name, gt_path in gt_files.items():
        gt_seq = _load_motion_file(gt_path, args.fps)
        if style_dirs:
            samples = []
            for sdir in style_dirs:
                cand = sdir / name
                if cand.exists():
                    samples.append(eval_one(cand, gt_seq, f"{sdir.name}/{name}"))
            if not samples:
                skipped.append(name)
                continue
            if len(samples) >= 2:
                diversity_values.append(M.diversity(samples))
        else:
            cand = pred_dir / name
            if not cand.exists():
                skipped.append(name)
                continue
            eval_one(cand, gt_seq, name)

    if skipped:
        (out_dir / "skipped.json").write_text(json.dumps(sorted(skipped), indent=1))
    if not reports:
        raise DataError(
            f"no prediction/ground-truth pairs found ({len(skipped)} unpaired, see skipped.json)"
        )

    diversity_value = float(np.mean(diversity_values)) if diversity_values else None
    aggregate = M.aggregate_reports(reports, diversity_value=diversity_value)
    (out_dir / "per_sequence.json").write_text(json.dumps(per_seq, indent=1, sort_keys=True))
    aggregate.to_json(out_dir / "aggregate.json")
    print(aggregate.summary())

    if args.motion_stats:
        for label, directory in (("pred", pred_dir), ("gt", gt_dir)):
            seqs = []
            source = style_dirs[0] if (label == "pred" and style_dirs) else directory
            for name in gt_files:
                p = source / name
                if p.exists():
                    seqs.append(_load_motion_file(p, args.fps))
            if seqs:
                means, stds = M.mean_motion_stats(seqs)
                M.write_motion_stats_csv(out_dir / f"motion_stats_{label}.csv", means, stds)
    if args.graph_controls:
        controls = [int(c) for c in args.graph_controls.split(",")]
        rows = []
        for name, gt_path in gt_files.items():
            gt_seq = _load_motion_file(gt_path, args.fps)
            sources = style_dirs if style_dirs else [pred_dir]
            samples, labels = [gt_seq], ["gt"]
            for sdir in sources:
                p = sdir / name
                if p.exists():
                    samples.append(_load_motion_file(p, args.fps))
                    labels.append(f"{sdir.name}" if style_dirs else "pred")
            rows.extend(
                (f"{name}:{label}", c, f, v)
                for label, c, f, v in M.animation_graphs(samples, controls, labels)
            )
        M.write_animation_graphs_csv(out_dir / "animation_graphs.csv", rows)
    return 0


def _ablation_grid(name: str, steps_list: list[int]) -> list[tuple[str, dict]]:
    if name == "steps":
        return [(f"steps-{s}", {"diffusion.steps": s}) for s in steps_list]
    if name == "decoder":
        return [
            (f"decoder-{v}", {"model.decoder_variant": v})
            for v in ("gru", "rnn", "transformer-tf", "transformer-ar")
        ]
    if name == "noise-encoder":
        return [
            (f"noise-encoder-{v}", {"data.kind": "vertex", "model.noise_encoder_variant": v,
                                    "model.input_embedding_dim": 16})
            for v in ("mlp", "conv-max", "conv-avg", "conv-max-x3", "conv-avg-x3")
        ]
    if name == "encoder":
        return [(f"encoder-{v}", {"encoder.name": v}) for v in ("hubert", "wav2vec2", "stub")]
    if name == "diffusion":
        return [
            ("with-diffusion", {"diffusion.enabled": True}),
            ("without-diffusion", {"diffusion.enabled": False}),
        ]
    raise ConfigurationError(
        f"unknown ablation grid {name!r}; expected steps, decoder, noise-encoder, encoder or diffusion"
    )


def _run_ablation_preset(cfg: RunConfig, out_dir: Path) -> dict:
    """Train one configuration and evaluate it on its training set."""
    entries, train_entries, train_items, val_items, style_map, model, sched, _ = _build_run(cfg)
    train_cfg = TrainConfig(
        learning_rate=cfg.train.learning_rate,
        epochs=cfg.train.epochs,
        seed=subsystem_seed(cfg.seed, "train"),
        loss=cfg.diffusion.loss,
    )
    fit(
        train_items,
        val_items,
        model,
        sched,
        train_cfg,
        out_dir,
        diffusion_enabled=cfg.diffusion.enabled,
        static_extra={"run_config": cfg.to_dict()},
    )
    kind = D.VERTEX_KIND if cfg.data.kind == "vertex" else D.RIG_KIND
    mask = RegionMask.halves(
        train_entries[0].motion.dim // (3 if kind == D.VERTEX_KIND else 1)
    )
    styles = sorted(set(style_map.values())) if style_map else [None]
    rng = np.random.default_rng(subsystem_seed(cfg.seed, "sample"))
    reports, per_audio_div = [], []
    for item, entry in zip(train_items, train_entries):
        samples = []
        for style in styles:
            if cfg.diffusion.enabled:
                seq = sample_loop(
                    item.features, style, sched, model.predict, rng,
                    out_dim=model.output_dim, kind=kind, fps=entry.motion.fps,
                )
            else:
                x0 = model.predict(
                    item.features,
                    np.zeros((item.features.shape[0], model.output_dim), dtype=np.float32),
                    0,
                    style,
                )
                seq = AnimationSequence(frames=x0.astype(np.float32), kind=kind, fps=entry.motion.fps)
            samples.append(seq)
            reports.append(M.evaluate_pair(seq, entry.motion, mask))
        if len(samples) >= 2:
            per_audio_div.append(M.diversity(samples))
    diversity_value = float(np.mean(per_audio_div)) if per_audio_div else None
    agg = M.aggregate_reports(reports, diversity_value=diversity_value)
    return {
        "mve": agg.mve,
        "lve": agg.lve,
        "fdd": agg.fdd,
        "diversity": agg.diversity if agg.diversity is not None else "",
    }


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    steps_list = [int(s) for s in args.steps_list.split(",")] if args.steps_list else [100, 250, 500, 750, 1000]
    grid = _ablation_grid(args.grid, steps_list)
    out_dir = Path(base.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, overrides in grid:
        cfg = _resolve_config(args)  # fresh copy per preset
        cfg = apply_overrides(cfg, overrides)
        cfg.out_dir = str(out_dir / label)
        t0 = time.monotonic()
        try:
            row = _run_ablation_preset(cfg, Path(cfg.out_dir))
            status = "ok"
        except Exception as exc:  # a failed preset must not stop the others
            row = {"mve": "", "lve": "", "fdd": "", "diversity": ""}
            status = f"failed: {type(exc).__name__}"
            print(f"[{label}] failed: {exc}", file=sys.stderr)
        rows.append(
            {
                "preset": label,
                "status": status,
                "mve": row["mve"],
                "lve": row["lve"],
                "fdd": row["fdd"],
                "diversity": row["diversity"],
                "wall_seconds": f"{time.monotonic() - t0:.1f}",
            }
        )
    table = out_dir / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["preset", "status", "mve", "lve", "fdd", "diversity", "wall_seconds"]
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {table}")
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)}/{len(rows)} presets failed", file=sys.stderr)
    return 0


def cmd_synth_data(args) -> int:
    entries = generate_synthetic_dataset(
        args.sequences, args.frames, args.dims, seed=args.seed, fps=args.fps, kind=args.kind
    )
    out_dir = Path(args.out)
    manifest = D.write_dataset(entries, out_dir, rig_as_csv=args.csv)
    n_units = args.dims // (3 if args.kind == "vertex" else 1)
    RegionMask.halves(n_units).save(out_dir / "mask.json")
    print(f"wrote {manifest} and {out_dir / 'mask.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechanim",
        description="Speech-driven 3D facial animation: diffusion training, sampling, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_train=False):
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--preset", choices=PRESET_NAMES, help="named configuration preset")
        p.add_argument("--seed", type=int, default=None, help="root seed for all randomness")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--data-root", type=Path, help=f"dataset root (or ${DATA_ROOT_ENV})")
        p.add_argument("--manifest", type=Path, help="dataset manifest CSV")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if with_train:
            p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("train", help="train a model")
    add_common(p, with_train=True)
    p.add_argument("--resume", type=Path, default=None, help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate motion for an audio file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--audio", type=Path, required=True)
    p.add_argument("--style", type=int, default=None, help="training-subject style id")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="denoising iterations (<= diffusion steps)")
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--format", choices=("anim", "csv"), default="anim")
    p.add_argument("--config", type=Path, help="config overriding the checkpoint's snapshot")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="compute metrics for paired pred/gt directories")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True, help="region-mask JSON")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fps", type=float, default=30.0, help="fps assumed for bare CSV motion")
    p.add_argument("--dataset", default="", help="dataset id recorded in reports")
    p.add_argument("--motion-stats", action="store_true", help="write per-vertex motion tables")
    p.add_argument("--graph-controls", default="", help="comma-separated control ids to export")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation grid and emit a comparison table")
    add_common(p, with_train=True)
    p.add_argument(
        "--grid",
        required=True,
        choices=("steps", "decoder", "noise-encoder", "encoder", "diffusion"),
    )
    p.add_argument("--steps-list", default="", help="comma-separated steps grid override")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth-data", help="write a deterministic synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--dims", type=int, default=30)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--kind", choices=("rig", "vertex"), default="rig")
    p.add_argument("--csv", action="store_true", help="write rig motion as editable CSV")
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigurationError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericDivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
