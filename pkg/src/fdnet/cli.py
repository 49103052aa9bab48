"""Command-line entry point: gen-data, train, predict, evaluate, render.

Exit codes: 0 ok, 1 invalid configuration or input, 2 runtime failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as rc
from .checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint
from .data import (
    DataError,
    filter_noisy,
    gen_synthetic,
    load_sequence_dir,
    load_sequences,
    make_windows,
    read_pgm,
    write_dataset,
    write_pgm,
)
from .model import FDNet, ModelConfig
from .tensor import NonFiniteError, Tensor
from .metrics import evaluate_rollout
from .trainer import TrainingError, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

ABLATIONS = {
    "no-deformation": {"use_def_output": False},
    "no-flow": {"use_flow_output": False},
    "shared-encoder": {"separate_encoders": False},
}


class UsageError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(
        prog="fdnet",
        description="Flow/deformation recurrent nowcasting on radar-like frames.",
        epilog="Any config key can be overridden as --<section>.<key> VALUE, e.g. --train.lr 0.0001",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--format", choices=["pgm", "grd"], help="frame file format")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset root (default data.root)")
    t.add_argument("--ablation", choices=sorted(ABLATIONS), help="switch off one model component")
    t.add_argument("--resume", help="checkpoint to resume from")

    pr = sub.add_parser("predict", parents=[common], help="forecast K frames from a sequence directory")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help="directory of frame_NNN.pgm (the last J frames are used)")
    pr.add_argument("--K", type=int, default=20, help="frames to forecast")
    pr.add_argument("--J", type=int, help="observed frames (default: the checkpoint's training J)")

    e = sub.add_parser("evaluate", parents=[common], help="score a split")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset root (default data.root)")
    e.add_argument("--split", default="test")
    e.add_argument("--thresholds", help="comma-separated thresholds (default eval.thresholds)")
    e.add_argument("--baseline", choices=["persistence", "truth"], help="score a reference forecast instead of a model")
    e.add_argument("--J", type=int)
    e.add_argument("--K", type=int)

    r = sub.add_parser("render", parents=[common], help="draw sequences side by side as one PGM strip")
    r.add_argument("--input", required=True, help="sequence directory")
    r.add_argument("--pred", help="directory of frame_pred_NNN.pgm to append")
    r.add_argument("--scale", type=int, default=1)
    return p


def _split_overrides(argv: list[str]) -> tuple[list[str], list[tuple[str, object]]]:
    """Pull ``--section.key VALUE`` / ``--section.key=VALUE`` pairs out of argv."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and "." in a.split("=", 1)[0]:
            key, eq, val = a[2:].partition("=")
            if not eq:
                if i + 1 >= len(argv):
                    raise UsageError(f"override {a} needs a value")
                val = argv[i + 1]
                i += 1
            overrides.append((key, rc.parse_value(val)))
        else:
            rest.append(a)
        i += 1
    return rest, overrides


def _explicit_model(args, overrides) -> bool:
    if any(k.startswith("model.") for k, _ in overrides):
        return True
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        return "model" in doc
    return False


# commands -------------------------------------------------------------------------


def cmd_gen_data(args, cfg: rc.RunConfig) -> int:
    fmt = args.format or cfg.data.format
    out = Path(args.out or cfg.data.root)
    counts = {"train": cfg.synth.num_sequences, "val": cfg.data.val_sequences, "test": cfg.data.test_sequences}
    splits = {}
    for offset, (split, n) in enumerate(counts.items()):
        sc = dataclasses.replace(cfg.synth, seed=cfg.synth.seed + offset, num_sequences=n)
        splits[split] = gen_synthetic(sc, prefix=split)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out, splits, fmt)
    print(f"wrote {sum(len(s) for s in splits.values())} sequences to {out}")
    return EXIT_OK


def _load_split(root, split: str, cfg: rc.RunConfig):
    if not Path(root).is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist (run gen-data first)")
    seqs = load_sequences(root, split)
    if cfg.data.filter_noisy:
        seqs = filter_noisy(seqs, cfg.data.eps_act)
    return seqs


def cmd_train(args, cfg: rc.RunConfig) -> int:
    model_cfg = cfg.model
    if args.ablation:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), **ABLATIONS[args.ablation]})
    out = Path(args.out or "run")
    root = args.data or cfg.data.root
    train_seqs = _load_split(root, "train", cfg)
    val_seqs = _load_split(root, "val", cfg)
    if not train_seqs:
        raise DataError("training split is empty after filtering")
    resume = load_checkpoint(args.resume, model_cfg) if args.resume else None
    out.mkdir(parents=True, exist_ok=True)
    tcfg = dataclasses.replace(
        cfg.train,
        checkpoint_dir=cfg.train.checkpoint_dir or str(out / "checkpoints"),
        log_path=cfg.train.log_path or str(out / "metrics.csv"),
    )
    run_doc = cfg.to_dict()
    run_doc["model"] = model_cfg.to_dict()
    (out / "config.json").write_text(json.dumps(run_doc, indent=1, sort_keys=True) + "\n")
    result = train(tcfg, model_cfg, train_seqs, val_seqs, resume=resume)
    losses = [r["loss_total"] for r in result.log if r["split"] == "train"]
    last = f"{losses[-1]:.6g}" if losses else "n/a"
    print(f"finished at iteration {result.iteration}; last training loss {last}; checkpoints in {tcfg.checkpoint_dir}")
    return EXIT_OK


def _model_from_checkpoint(path, cfg: rc.RunConfig, explicit: bool):
    ckpt = load_checkpoint(path, cfg.model if explicit else None)
    params = {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in ckpt.params.items()}
    return FDNet(ckpt.config, params), ckpt


def render_strip(groups: list[np.ndarray], gap: int = 2, scale: int = 1) -> np.ndarray:
    """Frames (each (H, W) in [0, 1]) laid left to right; groups separated by a white bar."""
    tiles = []
    for gi, frames in enumerate(groups):
        if gi:
            h = frames[0].shape[0] if len(frames) else groups[0][0].shape[0]
            tiles.append(np.ones((h, gap * 2)))
        for k, f in enumerate(frames):
            if k:
                tiles.append(np.zeros((f.shape[0], gap)))
            tiles.append(f)
    strip = np.concatenate(tiles, axis=1)
    if scale > 1:
        strip = np.kron(strip, np.ones((scale, scale)))
    return strip


def cmd_predict(args, cfg: rc.RunConfig, explicit: bool) -> int:
    if args.K < 1:
        raise UsageError("--K must be >= 1")
    model, ckpt = _model_from_checkpoint(args.checkpoint, cfg, explicit)
    J = args.J or int(ckpt.extra.get("J", cfg.train.J))
    if J < 2:
        raise UsageError("J must be >= 2")
    seq = load_sequence_dir(args.input)
    if seq.length < J:
        raise UsageError(f"input has {seq.length} frames, need at least J={J}")
    if seq.frames.shape[-2:] != model.config.input_size:
        raise UsageError(f"input frames are {seq.frames.shape[-2:]}, model expects {model.config.input_size}")
    inputs = seq.frames[-J:][:, None]  # (J, 1, 1, H, W)
    preds = model.predict(inputs, args.K)[:, 0, 0]
    out = Path(args.out or "pred")
    out.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(preds):
        write_pgm(out / f"frame_pred_{k:03d}.pgm", frame)
    write_pgm(out / "strip.pgm", render_strip([seq.frames[-J:, 0], preds]))
    print(f"wrote {args.K} predicted frames and strip.pgm to {out}")
    return EXIT_OK


def persistence_forecast(inputs: np.ndarray, K: int) -> np.ndarray:
    """Repeat the last observed frame; sample-major (S, J, ...) -> (S, K, ...)."""
    last = inputs[:, -1:]
    return np.repeat(last, K, axis=1)


def cmd_evaluate(args, cfg: rc.RunConfig, explicit: bool) -> int:
    thresholds = [float(t) for t in args.thresholds.split(",")] if args.thresholds else cfg.eval.thresholds
    if args.baseline is None and not args.checkpoint:
        raise UsageError("evaluate needs --checkpoint or --baseline")
    model = ckpt = None
    if args.checkpoint:
        model, ckpt = _model_from_checkpoint(args.checkpoint, cfg, explicit)
    J = args.J or int((ckpt.extra if ckpt else {}).get("J", cfg.train.J))
    K = args.K or int((ckpt.extra if ckpt else {}).get("K", cfg.train.K))
    seqs = _load_split(args.data or cfg.data.root, args.split, cfg)
    inputs, targets = make_windows(seqs, J, K)
    if len(inputs) == 0:
        raise DataError(f"split {args.split!r} has no windows of length J+K={J + K}")
    weights = cfg.loss.weight_scheme
    if args.baseline == "persistence":
        preds = persistence_forecast(inputs, K)
    elif args.baseline == "truth":
        preds = targets
    else:
        report = evaluate(model, inputs, targets, weights, thresholds, cfg.eval.batch_size)
        preds = None
    if preds is not None:
        report = evaluate_rollout(np.swapaxes(preds, 0, 1), np.swapaxes(targets, 0, 1), thresholds, weights)
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "skill.csv")
    report.write_curves(out / "curves.csv")
    summary = report.summary()
    print(",".join(["BMSE"] + list(summary)))
    print(",".join(["value"] + ["n/a" if np.isnan(v) else f"{v:.6g}" for v in summary.values()]))
    for th in thresholds:
        print(f"threshold {th:g}: CSI {report.mean_csi(th):.4f} HSS {report.mean_hss(th):.4f}")
    return EXIT_OK


def cmd_render(args, cfg: rc.RunConfig) -> int:
    if args.scale < 1:
        raise UsageError("--scale must be >= 1")
    seq = load_sequence_dir(args.input)
    groups = [seq.frames[:, 0]]
    if args.pred:
        pred_dir = Path(args.pred)
        files = sorted(pred_dir.glob("frame_pred_*.pgm"))
        if not files:
            raise FileNotFoundError(f"no frame_pred_*.pgm in {pred_dir}")
        groups.append(np.stack([read_pgm(f) / 255.0 for f in files]))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "strip.pgm", render_strip(groups, scale=args.scale))
    print(f"wrote {out / 'strip.pgm'}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        rest, overrides = _split_overrides(argv)
        args = _parser().parse_args(rest)
        cfg = rc.load(args.config, overrides, args.seed)
        explicit = _explicit_model(args, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(args, cfg)
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "predict":
            return cmd_predict(args, cfg, explicit)
        if args.command == "evaluate":
            return cmd_evaluate(args, cfg, explicit)
        return cmd_render(args, cfg)
    except SystemExit as e:  # argparse usage errors
        return EXIT_CONFIG if e.code else EXIT_OK
    except (ConfigMismatchError, rc.ConfigError, UsageError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
