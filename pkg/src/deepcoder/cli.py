"""Command line entry point.

Subcommands: synth, train, eval, infer, export-latents.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
error.  Thread use is capped by DEEPCODER_THREADS (default 4).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import backend, dataio, trainer, vcae, vogpae
from .errors import (ConfigError, DeepCoderError, FormatError,
                     InvalidArgumentError, NumericalError, ShapeError,
                     TrainingError)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so codes stay ours."""

    def error(self, message):
        raise InvalidArgumentError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="deepcoder",
                     description="Train and query the two-coder model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON config (synth section)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the synth seed")

    p = sub.add_parser("train", help="train on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON config")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", required=True, help="per-epoch CSV path")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--split", choices=["R", "L", "all"], default="R",
                   help="which stored split to evaluate (default R)")

    p = sub.add_parser("infer", help="predict labels for one sample")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--recon-out",
                   help="path for the raw float32 reconstruction "
                        "(default recon_<index>.f32)")

    p = sub.add_parser("export-latents",
                       help="CSV of Z_1 and Z_0 coordinates per sample")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_config(path: str | None) -> dataio.TrainConfig:
    if path is None:
        return dataio.TrainConfig()
    return dataio.parse_config(path)


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    spec = cfg.synth
    if args.seed is not None:
        spec.seed = args.seed
    ds = dataio.generate_synthetic(spec)
    dataio.save_dataset(args.out, ds)
    print(f"samples={ds.n} outputs={ds.q} levels={ds.levels}")
    return EXIT_OK


def _write_history_csv(path: str, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=trainer.HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({key: row[key]
                             for key in trainer.HISTORY_COLUMNS})


def cmd_train(args) -> int:
    ds = dataio.load_dataset(args.data)
    if args.resume:
        state = dataio.load_checkpoint(args.resume)
        cfg = dataio.parse_config(args.config) if args.config else None
        state = trainer.train_joint(ds, cfg, resume_state=state)
    else:
        cfg = _load_config(args.config)
        state = trainer.train_joint(ds, cfg)
    dataio.save_checkpoint(args.out, state)
    _write_history_csv(args.log, state.history)
    last = state.history[-1] if state.history else None
    if state.epoch < state.config.max_epochs:
        print(f"converged after {state.epoch} joint epochs")
    else:
        print(f"stopped at max_epochs={state.config.max_epochs}")
    if last is not None:
        print(f"final L_DC={last['L_DC']:.6f}")
    return EXIT_OK


def _select_split(state, ds, which: str) -> np.ndarray:
    if which == "R":
        return state.idx_r
    if which == "L":
        return state.idx_l
    return np.arange(ds.n, dtype=np.int64)


def cmd_eval(args) -> int:
    ds = dataio.load_dataset(args.data)
    state = dataio.load_checkpoint(args.model)
    idx = _select_split(state, ds, args.split)
    report = trainer.evaluate_split(state, ds, idx)
    doc = report.to_dict()
    doc["split"] = args.split
    with open(args.report, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    avg = doc["average"]
    icc_txt = "undefined" if avg["icc"] is None else f"{avg['icc']:.4f}"
    print(f"n={doc['n_samples']} avg_icc={icc_txt} "
          f"avg_accuracy={avg['accuracy']:.4f} nlpd={doc['nlpd']:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ds = dataio.load_dataset(args.data)
    state = dataio.load_checkpoint(args.model)
    if not 0 <= args.index < ds.n:
        raise InvalidArgumentError(
            f"index {args.index} out of range 0..{ds.n - 1}")
    levels, recon = trainer.infer(state,
                                  ds.images[args.index].astype(np.float64))
    out = args.recon_out or f"recon_{args.index}.f32"
    with open(out, "wb") as fh:
        fh.write(np.ascontiguousarray(recon, dtype="<f4").tobytes())
    print(" ".join(str(int(v)) for v in levels))
    return EXIT_OK


def cmd_export_latents(args) -> int:
    ds = dataio.load_dataset(args.data)
    state = dataio.load_checkpoint(args.model)
    z0 = vcae.encode_mean(state.vcae_params, state.arch,
                          ds.images.astype(np.float64))
    z1 = vogpae.encode_new(state.vog, z0)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "subject"]
                        + [f"z1_{d}" for d in range(z1.shape[1])]
                        + [f"z0_{d}" for d in range(z0.shape[1])])
        for i in range(ds.n):
            writer.writerow([i, int(ds.subjects[i])]
                            + [repr(float(v)) for v in z1[i]]
                            + [repr(float(v)) for v in z0[i]])
    print(f"wrote {ds.n} rows to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "export-latents": cmd_export_latents,
}


def _limit_threads() -> None:
    # DEEPCODER_THREADS is a cap, not a demand: never raise the BLAS
    # pool above the machine's CPU count (forcing extra threads on a
    # constrained host can crash the BLAS runtime).
    cap = min(backend.thread_limit(), os.cpu_count() or 1)
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=cap)
    except ImportError:
        pass


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _limit_threads()
        return _COMMANDS[args.command](args)
    except (InvalidArgumentError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except DeepCoderError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
