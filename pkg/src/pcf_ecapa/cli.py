"""Command-line entry point: summary, rf, train, eval, score subcommands.

Exit codes: 0 success, 1 runtime error, 2 usage error. Every run writes a
manifest (key=value) into --out recording the resolved configuration,
seed, inputs, and sha256 hashes of the primary outputs; rerunning with the
same inputs yields byte-identical primary outputs. ``PCF_SEED`` is the
seed fallback when --seed is not given.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from . import evaluation as ev
from . import rf as rfmod
from . import training as tr
from .errors import ConfigError, ContractError, LoadError, ShapeError, TrainingDiverged
from .models import (
    ABLATION_STAGES,
    ModelConfig,
    build_ablation,
    build_model,
    count_params,
    read_config,
)

_VARIANT_CHOICES = ("ecapa", "ecapa-base", "ecapa-large", "pcf-ecapa")


def _default_seed() -> int:
    return int(os.environ.get("PCF_SEED", "0"))


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out_dir: str, subcommand: str, settings: dict, outputs: list[str], t0: float):
    lines = [f"subcommand={subcommand}"]
    lines += [f"{k}={v}" for k, v in settings.items()]
    for path in outputs:
        lines.append(f"output={os.path.basename(path)} sha256={_sha256(path)}")
    lines.append(f"wall_clock_sec={time.time() - t0:.3f}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _resolve_config(args) -> ModelConfig:
    import dataclasses

    flag_overrides = {}
    for key in ("mfa_out", "attn_bottleneck", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            flag_overrides[key] = val
    if getattr(args, "config", None):
        cfg = read_config(args.config)  # flags win over config-file values
        if args.variant is not None:
            cfg = ModelConfig.from_variant(
                args.variant,
                args.channels if args.channels is not None else cfg.channels,
                mfa_out=cfg.mfa_out,
                attn_bottleneck=cfg.attn_bottleneck,
                se_bottleneck=cfg.se_bottleneck,
                seed=cfg.seed,
            )
        elif args.channels is not None:
            cfg = dataclasses.replace(cfg, channels=args.channels)
        return dataclasses.replace(cfg, **flag_overrides) if flag_overrides else cfg
    flag_overrides.setdefault("seed", _default_seed())
    return ModelConfig.from_variant(args.variant or "pcf-ecapa", args.channels,
                                    **flag_overrides)


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value model config file")
    p.add_argument("--variant", choices=_VARIANT_CHOICES, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--mfa-out", dest="mfa_out", type=int, default=None)
    p.add_argument("--attn-bottleneck", dest="attn_bottleneck", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)


# -- summary -------------------------------------------------------------------


def cmd_summary(args) -> int:
    t0 = time.time()
    if args.ablation:
        net = build_ablation(args.ablation, channels=args.channels or 512)
    else:
        net = build_model(_resolve_config(args))
    if args.include_classifier and net.classifier is None:
        net.attach_classifier(args.num_speakers)
    audit = count_params(net, include_classifier=args.include_classifier)
    print(f"model: {net.config.variant} (channels={net.config.channels})")
    print(audit.table())
    total = (
        audit.total_including_classifier
        if args.include_classifier
        else audit.total_excluding_classifier
    )
    print(f"total parameters: {total:,}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        audit_path = os.path.join(args.out, "param_audit.txt")
        with open(audit_path, "w") as fh:
            fh.write(audit.table() + "\n")
        _write_manifest(
            args.out,
            "summary",
            {"variant": net.config.variant, "channels": net.config.channels,
             "include_classifier": args.include_classifier},
            [audit_path],
            t0,
        )
    return 0


# -- rf ------------------------------------------------------------------------


def cmd_rf(args) -> int:
    t0 = time.time()
    cfg = _resolve_config(args)
    net = build_model(cfg)
    blocks = (
        list(range(1, len(cfg.dilations()) + 1)) if args.block is None else [args.block]
    )
    os.makedirs(args.out, exist_ok=True)
    maps = []
    agree = True
    for b in blocks:
        analytic = rfmod.analytic_rf_tdnn(cfg, b, args.channel)
        oracle = rfmod.gradient_rf_oracle(net, b, args.channel)
        ok = analytic == oracle
        agree &= ok
        cov = analytic.frequency_coverage()
        print(
            f"block {b}: frequency coverage {cov}/{cfg.feat_dim}, "
            f"time extent {analytic.time_extent()}, "
            f"{'AGREE' if ok else 'DISAGREE'}"
        )
        maps.append(analytic)
    written = rfmod.emit_rf_panel(maps, args.out)
    print("AGREE" if agree else "DISAGREE")
    _write_manifest(
        args.out,
        "rf",
        {"variant": cfg.variant, "channels": cfg.channels, "channel": args.channel,
         "seed": cfg.seed},
        written,
        t0,
    )
    if not agree:
        print("analytic and gradient-oracle maps disagree", file=sys.stderr)
        return 1
    return 0


# -- train ----------------------------------------------------------------------


def cmd_train(args) -> int:
    t0 = time.time()
    cfg = _resolve_config(args)
    net = build_model(cfg)
    data_cfg = tr.SyntheticConfig(
        n_speakers=args.speakers,
        utterances_per_speaker=args.utterances,
        frames=args.frames,
        seed=args.data_seed if args.data_seed is not None else cfg.seed,
    )
    dataset = tr.SyntheticSpeakers(data_cfg)
    train_cfg = tr.TrainConfig(
        loss=tr.LossConfig(kind=args.loss, margin=args.margin, scale=args.loss_scale),
        schedule=tr.ScheduleConfig(
            cycle_steps=args.cycle_steps,
            lr_min=args.lr_min,
            lr_max=args.lr_max,
            cycles=args.cycles,
            weight_decay=args.weight_decay,
        ),
        batch_size=args.batch_size,
        chunk_frames=args.chunk_frames,
        seed=cfg.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    report = tr.train_toy(net, dataset, train_cfg)
    ckpt_path = os.path.join(args.out, "checkpoint.pcfm")
    loss_path = os.path.join(args.out, "loss.csv")
    tr.save_checkpoint(net, None, ckpt_path)
    with open(loss_path, "w") as fh:
        fh.write(report.to_csv())
    print(f"final training accuracy: {report.final_accuracy:.4f}")
    outputs = [ckpt_path, loss_path]
    if args.emit_eval_set:
        feats, labels = dataset.held_out(args.eval_utterances, seed=data_cfg.seed + 1)
        store, trials = _held_out_trials(feats, labels, seed=data_cfg.seed + 2)
        feat_dir = os.path.join(args.out, "eval_features")
        store.save_dir(feat_dir)
        trials_path = os.path.join(args.out, "trials.txt")
        ev.write_trials(trials, trials_path)
        outputs.append(trials_path)
    _write_manifest(
        args.out,
        "train",
        {"variant": cfg.variant, "channels": cfg.channels, "seed": cfg.seed,
         "speakers": args.speakers, "loss": args.loss,
         "cycle_steps": args.cycle_steps, "cycles": args.cycles},
        outputs,
        t0,
    )
    return 0


def _held_out_trials(feats: np.ndarray, labels: np.ndarray, seed: int):
    """Balanced target/nontarget trials over a held-out utterance set."""
    store = ev.FeatureStore()
    ids = []
    for i in range(len(labels)):
        utt_id = f"spk{labels[i]:03d}_utt{i:04d}"
        store.add(utt_id, feats[i])
        ids.append(utt_id)
    rng = np.random.default_rng(seed)
    trials = []
    n = len(ids)
    for i in range(n):
        same = np.flatnonzero(labels == labels[i])
        same = same[same > i]
        for j in same:
            trials.append(ev.Trial(True, ids[i], ids[int(j)]))
        diff = np.flatnonzero(labels != labels[i])
        for j in rng.choice(diff, size=min(3, len(diff)), replace=False):
            trials.append(ev.Trial(False, ids[i], ids[int(j)]))
    return store, trials


# -- eval / score ------------------------------------------------------------------


def _load_eval_inputs(args):
    net, _ = tr.load_checkpoint(args.checkpoint)
    store = ev.FeatureStore.load_dir(args.features)
    with open(args.trials) as fh:
        trials = ev.parse_trials(fh.read())
    return net, store, trials


def cmd_eval(args) -> int:
    t0 = time.time()
    net, store, trials = _load_eval_inputs(args)
    metrics, rows = ev.run_eval(net, store, trials, args.chunk_len, args.stride)
    os.makedirs(args.out, exist_ok=True)
    scores_path = os.path.join(args.out, "scores.txt")
    metrics_path = os.path.join(args.out, "metrics.txt")
    ev.write_scores(rows, scores_path)
    with open(metrics_path, "w") as fh:
        fh.write(metrics.to_text())
    print(metrics.to_text(), end="")
    _write_manifest(
        args.out,
        "eval",
        {"checkpoint": args.checkpoint, "trials": args.trials,
         "chunk_len": args.chunk_len, "stride": args.stride},
        [scores_path, metrics_path],
        t0,
    )
    return 0


def cmd_score(args) -> int:
    t0 = time.time()
    net, store, trials = _load_eval_inputs(args)
    needed = sorted({t.enroll for t in trials} | {t.test for t in trials})
    missing = [u for u in needed if u not in store]
    if missing:
        raise ConfigError(f"unresolved utterance ids: {', '.join(missing)}")
    cache = {
        u: ev.extract_embeddings(net, store.get(u), args.chunk_len, args.stride)
        for u in needed
    }
    rows = [(t.enroll, t.test, ev.score_trial(cache[t.enroll], cache[t.test])) for t in trials]
    os.makedirs(args.out, exist_ok=True)
    scores_path = os.path.join(args.out, "scores.txt")
    ev.write_scores(rows, scores_path)
    print(f"scored {len(rows)} trials -> {scores_path}")
    _write_manifest(
        args.out,
        "score",
        {"checkpoint": args.checkpoint, "trials": args.trials},
        [scores_path],
        t0,
    )
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcf-ecapa",
        description="Progressive channel fusion speaker-embedding toolkit",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("summary", help="per-layer and total parameter counts")
    _add_model_flags(p)
    p.add_argument("--ablation", choices=ABLATION_STAGES, default=None)
    p.add_argument("--include-classifier", action="store_true")
    p.add_argument("--num-speakers", type=int, default=5994)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("rf", help="receptive-field maps (analytic vs gradient oracle)")
    _add_model_flags(p)
    p.add_argument("--block", type=int, default=None, help="block index; default all")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("train", help="toy training on synthetic speakers")
    _add_model_flags(p)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--utterances", type=int, default=50)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--loss", choices=("circle", "aam"), default="circle")
    p.add_argument("--margin", type=float, default=0.35)
    p.add_argument("--loss-scale", type=float, default=60.0)
    p.add_argument("--cycle-steps", type=int, default=1000)
    p.add_argument("--cycles", type=int, default=3)
    p.add_argument("--lr-min", type=float, default=1e-8)
    p.add_argument("--lr-max", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=5e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--chunk-frames", type=int, default=80)
    p.add_argument("--emit-eval-set", action="store_true")
    p.add_argument("--eval-utterances", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("score", cmd_score)):
        p = sub.add_parser(name, help=f"{name} trials against a checkpoint")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--features", required=True, help="feature dir with manifest.txt")
        p.add_argument("--trials", required=True)
        p.add_argument("--chunk-len", type=int, default=300)
        p.add_argument("--stride", type=int, default=150)
        p.add_argument("--out", required=True)
        p.set_defaults(func=fn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError, LoadError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
