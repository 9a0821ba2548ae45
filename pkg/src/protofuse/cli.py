"""Command-line interface.

All machine-readable reports go to stdout as JSON; logs go to stderr.
Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric failure,
5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import trainer_eval
from .aggregation import mean_pool, statistical_pool
from .embedding_io import (
    MODALITIES,
    EmbeddingMatrix,
    SynthSpec,
    generate_synthetic_dataset,
    read_embedding_file,
    write_embedding_file,
)
from .errors import ConfigError, DatasetError, NumericError, VerificationError
from .fusion_model import FusionConfig, fusion_gradcheck, load_checkpoint, save_checkpoint
from .trainer_eval import (
    TrainConfig,
    ensemble_average,
    hard_labels,
    load_dataset,
    macro_f1,
    predict_dataset,
    train,
    write_history_csv,
)

log = logging.getLogger("protofuse")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VERIFY = 5

#: Input dims used by `gradcheck` when no config file overrides them.
GRADCHECK_INPUT_DIMS = (64, 64, 64, 64)


def _emit(report: dict) -> None:
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _parse_dims(text: str) -> dict:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != len(MODALITIES):
        raise ConfigError(f"--dims needs {len(MODALITIES)} comma-separated ints "
                          f"(order: {', '.join(MODALITIES)})")
    try:
        dims = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"--dims must be integers: {exc}") from exc
    return dict(zip(MODALITIES, dims))


def _load_config_file(path):
    if path is None:
        return {}, {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - {"fusion", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return raw.get("fusion", {}), raw.get("train", {})


def _fusion_config_for(dataset, fusion_raw: dict) -> FusionConfig:
    fusion_raw = dict(fusion_raw)
    if "input_dims" in fusion_raw:
        declared = tuple(fusion_raw["input_dims"])
        if declared != tuple(dataset.input_dims):
            raise DatasetError(
                f"config input_dims {declared} disagree with dataset dims "
                f"{tuple(dataset.input_dims)}")
    fusion_raw["input_dims"] = list(dataset.input_dims)
    fusion_raw.setdefault("modalities", list(dataset.modalities))
    if tuple(fusion_raw["modalities"]) != tuple(dataset.modalities):
        raise DatasetError("config modalities disagree with dataset modalities")
    return FusionConfig.from_dict(fusion_raw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_train=args.n - round(args.n * args.devel_frac) - round(args.n * args.test_frac),
        n_devel=round(args.n * args.devel_frac),
        n_test=round(args.n * args.test_frac),
        dims=_parse_dims(args.dims),
        seed=args.seed,
        drop_fraction=args.drop_frac,
        feature_noise=args.feature_noise,
        label_noise=args.label_noise,
        unlabeled_test=args.unlabeled_test,
    )
    manifest = generate_synthetic_dataset(spec, args.out)
    dropped = sum(1 for rec in manifest.samples if not all(rec.mask.values()))
    _emit({
        "manifest": str(Path(args.out) / "manifest.json"),
        "counts": {s: len(manifest.split_samples(s)) for s in ("train", "devel", "test")},
        "samples_with_dropped_modality": dropped,
        "seed": args.seed,
    })
    return EXIT_OK


def cmd_train(args) -> int:
    fusion_raw, train_raw = _load_config_file(args.config)
    dataset = load_dataset(args.data)
    fusion_config = _fusion_config_for(dataset, fusion_raw)
    train_config = TrainConfig.from_dict(train_raw)

    def progress(row):
        log.info("epoch %d loss %.4f devel_mf1 %.2f lr %.3g",
                 row.epoch, row.loss, row.devel_mf1, row.lr)

    result = train(dataset, fusion_config, train_config, args.seed, log=progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.model)
    history_path = Path(str(out) + ".history.csv")
    write_history_csv(history_path, result.history)
    _emit({
        "checkpoint": str(out),
        "history_csv": str(history_path),
        "seed": args.seed,
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "best_devel_mf1": None if np.isnan(result.best_devel_mf1) else result.best_devel_mf1,
        "final_loss": result.history[-1].loss if result.history else None,
    })
    return EXIT_OK


def _split_metrics(model, dataset, split, modality_filter=None):
    indices = dataset.split_indices(split)
    if len(indices) == 0:
        raise DatasetError(f"split '{split}' is empty")
    labels = dataset.labels[indices]
    if np.any(labels < 0):
        raise DatasetError(f"split '{split}' contains unlabeled samples")
    ids, probs = predict_dataset(model, dataset, split, modality_filter)
    return ids, probs, labels


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    dataset = load_dataset(args.data)
    modality_filter = args.modalities.split(",") if args.modalities else None
    _, probs, labels = _split_metrics(model, dataset, args.split, modality_filter)
    report = macro_f1(hard_labels(probs), labels,
                      metadata={"split": args.split, "checkpoint": str(ckpt),
                                "seed": model.seed})
    _emit(report.to_dict())
    return EXIT_OK


def cmd_ensemble(args) -> int:
    dataset = load_dataset(args.data)
    prob_sets = []
    per_model = []
    labels = None
    for path in args.ckpts:
        ckpt = Path(path)
        if not ckpt.is_file():
            raise ConfigError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        ids, probs, labels = _split_metrics(model, dataset, args.split)
        prob_sets.append((ids, probs))
        per_model.append(macro_f1(hard_labels(probs), labels).mf1)
    _, mean_probs, ens_labels = ensemble_average(prob_sets)
    report = macro_f1(ens_labels, labels,
                      metadata={"split": args.split, "n_models": len(args.ckpts)})
    payload = report.to_dict()
    payload["ensemble_mf1"] = report.mf1
    payload["per_model_mf1"] = per_model
    _emit(payload)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.probes < 1:
        raise ConfigError("--probes must be >= 1")
    fusion_raw, _ = _load_config_file(args.config)
    fusion_raw = dict(fusion_raw)
    fusion_raw.setdefault("input_dims", list(GRADCHECK_INPUT_DIMS))
    fusion_raw.setdefault("dropout", 0.0)  # disabled during checking anyway
    config = FusionConfig.from_dict(fusion_raw)
    corrupt = None
    if args.inject_fault:
        corrupt = "classifier.W"
    report = fusion_gradcheck(config, probes=args.probes, tolerance=args.tolerance,
                              seed=args.seed, corrupt_group=corrupt)
    _emit(report.to_dict())
    if not report.passed:
        raise VerificationError(
            f"gradient check failed for groups: {report.failed_groups}")
    return EXIT_OK


def cmd_pool(args) -> int:
    matrix = read_embedding_file(args.infile)
    if args.mode == "mean":
        pooled = mean_pool(matrix)
    else:
        pooled = statistical_pool(matrix)
    out_mat = EmbeddingMatrix(pooled.data.astype(np.float32)[None, :])
    write_embedding_file(args.out, out_mat)
    _emit({"out": str(args.out), "kind": pooled.kind,
           "rows": 1, "cols": int(out_mat.cols)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofuse",
        description="Prototype-augmented multimodal fusion on precomputed embeddings.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic parity dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="total sample count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="16,16,16,16",
                   help=f"per-modality dims, order {','.join(MODALITIES)}")
    p.add_argument("--drop-frac", type=float, default=0.0,
                   help="fraction of samples losing one random modality")
    p.add_argument("--devel-frac", type=float, default=0.2)
    p.add_argument("--test-frac", type=float, default=0.0)
    p.add_argument("--feature-noise", type=float, default=0.1)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--unlabeled-test", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one fusion model")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--config", default=None, help="JSON config file (fusion/train sections)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="devel", choices=("train", "devel", "test"))
    p.add_argument("--modalities", default=None,
                   help="comma-separated subset to keep unmasked")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="average probabilities of several checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpts", nargs="+", required=True)
    p.add_argument("--split", default="devel", choices=("train", "devel", "test"))
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", default=None)
    p.add_argument("--probes", type=int, default=10, help="probes per parameter group")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true",
                   help="flip one analytic gradient to prove the harness catches it")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pool", help="pool a sequence EMB1 file to a vector")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mode", required=True, choices=("mean", "stat"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pool)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DatasetError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except VerificationError as exc:
        log.error("%s", exc)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
