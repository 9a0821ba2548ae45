"""Training loop, evaluation metrics, seed sweeps, and probability
ensembling for the fusion model.

Datasets arrive as manifests of per-sample embedding files. Sequence
files (rows > 1) are reduced to video-level vectors on load: face
sequences by statistical pooling (doubling the feature dim), all other
modalities by temporal mean pooling. Vector files pass through
unchanged, so a modality mixing both stays dimensionally consistent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embedding_io
from .aggregation import mean_pool, statistical_pool
from .embedding_io import DatasetManifest
from .errors import ConfigError, DatasetError, NumericError
from .fusion_model import FusionConfig, FusionModel, save_checkpoint
from .nn_core import OptimizerState, RngStream, clip_global_norm, cosine_lr, rmsprop_step

DEFAULT_SEEDS = (42, 2025, 7777, 12345, 31415)

#: How sequence files are reduced per modality (vectors pass through).
SEQUENCE_POOLING = {"face": "statistical", "scene": "mean", "audio": "mean", "text": "mean"}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, scheduler, and loop hyperparameters."""

    epochs: int = 100
    batch_size: int = 32
    lr_max: float = 9.44e-5
    lr_min: float = 0.0
    weight_decay: float = 5.55e-4
    clip_norm: float = 0.5
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    seeds: tuple = DEFAULT_SEEDS
    shuffle: bool = True
    patience: int | None = None
    overfit_stop_mf1: float | None = None  # stop once train-split MF1 reaches this

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_max <= 0 or self.lr_min < 0:
            raise ConfigError("lr_max must be > 0 and lr_min >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be non-empty and distinct")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_max": self.lr_max,
            "lr_min": self.lr_min,
            "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm,
            "rms_alpha": self.rms_alpha,
            "rms_eps": self.rms_eps,
            "seeds": list(self.seeds),
            "shuffle": self.shuffle,
            "patience": self.patience,
            "overfit_stop_mf1": self.overfit_stop_mf1,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(kwargs["seeds"])
        return cls(**kwargs)


class FusionDataset:
    """Manifest plus in-memory, pooled, fusion-ready arrays."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.modalities = manifest.modalities
        arrays = embedding_io.load_arrays(manifest)

        seq_present = {m: False for m in self.modalities}
        for (sid, mod), arr in arrays.items():
            if arr.shape[0] > 1:
                seq_present[mod] = True
        self.input_dims = tuple(
            manifest.dims[m] * (2 if seq_present[m] and SEQUENCE_POOLING[m] == "statistical" else 1)
            for m in self.modalities
        )
        self._pool_stat = {m for m in self.modalities
                           if seq_present[m] and SEQUENCE_POOLING[m] == "statistical"}

        n = len(manifest.samples)
        self.ids = [rec.id for rec in manifest.samples]
        self.splits = [rec.split for rec in manifest.samples]
        self.labels = np.array(
            [-1 if rec.label is None else rec.label for rec in manifest.samples],
            dtype=np.int64,
        )
        self.mask = np.zeros((n, len(self.modalities)), dtype=np.float32)
        self.features = [
            np.zeros((n, d), dtype=np.float32) for d in self.input_dims
        ]
        for i, rec in enumerate(manifest.samples):
            for m, mod in enumerate(self.modalities):
                if not rec.mask.get(mod):
                    continue
                arr = arrays[(rec.id, mod)]
                vec = self._pool(mod, arr)
                self.features[m][i] = vec.astype(np.float32)
                self.mask[i, m] = 1.0

    def _pool(self, modality: str, arr: np.ndarray) -> np.ndarray:
        if modality in self._pool_stat:
            return statistical_pool(arr).data
        if arr.shape[0] == 1:
            return arr[0]
        return mean_pool(arr).data

    def __len__(self):
        return len(self.ids)

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def batch(self, indices):
        xs = [f[indices] for f in self.features]
        return xs, self.mask[indices], self.labels[indices]

    def filtered_mask(self, modality_filter=None) -> np.ndarray:
        """Dataset mask ANDed with a modality subset (by name)."""
        if modality_filter is None:
            return self.mask
        unknown = set(modality_filter) - set(self.modalities)
        if unknown:
            raise ConfigError(f"unknown modalities in filter: {sorted(unknown)}")
        selector = np.array([1.0 if m in modality_filter else 0.0 for m in self.modalities],
                            dtype=np.float32)
        return self.mask * selector


def load_dataset(path) -> FusionDataset:
    return FusionDataset(embedding_io.load_manifest(path))


def config_for_dataset(dataset: FusionDataset, **overrides) -> FusionConfig:
    overrides.pop("modalities", None)
    overrides.pop("input_dims", None)
    return FusionConfig(input_dims=dataset.input_dims,
                        modalities=tuple(dataset.modalities), **overrides)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    confusion: list  # confusion[true][pred] counts, 2x2
    per_class: list  # [{precision, recall, f1}, ...]
    mf1: float  # percentage
    n: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion,
            "per_class": self.per_class,
            "mf1": self.mf1,
            "n": self.n,
            "metadata": self.metadata,
        }


def macro_f1(predictions, truth, metadata: dict | None = None) -> MetricsReport:
    """Macro F1 over the two classes, as a percentage.

    Precision/recall default to 0 where undefined, and a class F1 is 0
    whenever precision + recall is 0.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predictions and truth must be equal-length 1-D")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction set")
    for arr, what in ((pred, "predictions"), (true, "truth")):
        if np.any((arr != 0) & (arr != 1)):
            raise ValueError(f"{what} must be binary labels (0/1)")

    confusion = [[int(np.sum((true == t) & (pred == p))) for p in (0, 1)] for t in (0, 1)]
    per_class = []
    f1s = []
    for c in (0, 1):
        tp = confusion[c][c]
        fp = confusion[1 - c][c]
        fn = confusion[c][1 - c]
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append({"precision": precision, "recall": recall, "f1": f1})
        f1s.append(f1)
    return MetricsReport(
        confusion=confusion,
        per_class=per_class,
        mf1=100.0 * float(np.mean(f1s)),
        n=int(pred.size),
        metadata=metadata or {},
    )


def hard_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax with ties resolved toward class 0."""
    return np.argmax(probs, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# prediction


def predict_dataset(model: FusionModel, dataset: FusionDataset, split: str,
                    modality_filter=None, batch_size: int = 256):
    """Class probabilities for every sample of a split, in manifest order.

    Samples whose mask is emptied by ``modality_filter`` get a uniform
    distribution (the model cannot run without a modality).
    """
    if tuple(dataset.input_dims) != tuple(model.config.input_dims) or \
            tuple(dataset.modalities) != tuple(model.config.modalities):
        raise DatasetError(
            f"checkpoint expects {model.config.modalities}/{model.config.input_dims}, "
            f"dataset provides {tuple(dataset.modalities)}/{dataset.input_dims}")
    indices = dataset.split_indices(split)
    mask_all = dataset.filtered_mask(modality_filter)
    ids = [dataset.ids[i] for i in indices]
    probs = np.full((len(indices), model.config.classes), 1.0 / model.config.classes,
                    dtype=np.float32)
    usable = indices[mask_all[indices].sum(axis=1) >= 1]
    pos_of = {int(i): k for k, i in enumerate(indices)}
    for start in range(0, len(usable), batch_size):
        chunk = usable[start:start + batch_size]
        xs = [f[chunk] for f in dataset.features]
        out = model.forward_batch(xs, mask_all[chunk], mode="eval")
        for local, i in enumerate(chunk):
            probs[pos_of[int(i)]] = out[local]
    return ids, probs


def evaluate_split(model: FusionModel, dataset: FusionDataset, split: str,
                   modality_filter=None, metadata: dict | None = None) -> MetricsReport:
    indices = dataset.split_indices(split)
    if len(indices) == 0:
        raise DatasetError(f"split '{split}' is empty")
    labels = dataset.labels[indices]
    if np.any(labels < 0):
        raise DatasetError(f"split '{split}' contains unlabeled samples")
    _, probs = predict_dataset(model, dataset, split, modality_filter)
    meta = {"split": split}
    meta.update(metadata or {})
    return macro_f1(hard_labels(probs), labels, metadata=meta)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    loss: float
    loss_cls: float
    loss_proto: float
    loss_div: float
    lr: float
    devel_mf1: float  # nan when no devel split


@dataclass
class TrainResult:
    model: FusionModel
    history: list  # EpochStats per completed epoch
    best_devel_mf1: float  # nan when no devel split
    best_epoch: int
    seed: int


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_cls", "loss_proto", "loss_div", "lr", "devel_mf1"])
        for row in history:
            writer.writerow([row.epoch, f"{row.loss_cls:.8f}", f"{row.loss_proto:.8f}",
                             f"{row.loss_div:.8f}", f"{row.lr:.10g}",
                             f"{row.devel_mf1:.4f}"])


def train(dataset: FusionDataset, fusion_config: FusionConfig,
          train_config: TrainConfig, seed: int, modality_filter=None,
          log=None) -> TrainResult:
    """Train one model; deterministic given (data, configs, seed).

    Per step: forward -> composite loss -> backward -> global-norm clip
    -> RMSprop with the cosine schedule. The checkpoint with the best
    devel MF1 is returned (final parameters when there is no devel split).
    """
    mask_all = dataset.filtered_mask(modality_filter)
    train_idx = dataset.split_indices("train")
    train_idx = train_idx[mask_all[train_idx].sum(axis=1) >= 1]
    if len(train_idx) == 0:
        raise DatasetError("train split is empty (or fully masked away)")
    if np.any(dataset.labels[train_idx] < 0):
        raise DatasetError("train split contains unlabeled samples")
    devel_idx = dataset.split_indices("devel")
    has_devel = len(devel_idx) > 0 and not np.any(dataset.labels[devel_idx] < 0)

    model = FusionModel(fusion_config, seed=seed)
    params = model.params()
    opt = OptimizerState(lr=train_config.lr_max, alpha=train_config.rms_alpha,
                         eps=train_config.rms_eps,
                         weight_decay=train_config.weight_decay)
    shuffle_rng = RngStream(seed, stream=1)
    dropout_rng = RngStream(seed, stream=2)

    n = len(train_idx)
    steps_per_epoch = math.ceil(n / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch

    history = []
    best_mf1 = float("nan")
    best_epoch = -1
    best_state = None
    stale = 0
    step = 0
    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(n) if train_config.shuffle else np.arange(n)
        epoch_idx = train_idx[order]
        sums = {"loss": 0.0, "loss_cls": 0.0, "loss_proto": 0.0, "loss_div": 0.0}
        last_lr = train_config.lr_max
        for start in range(0, n, train_config.batch_size):
            batch_idx = epoch_idx[start:start + train_config.batch_size]
            xs, _, labels = dataset.batch(batch_idx)
            model.zero_grad()
            parts = model.loss_and_grad(xs, mask_all[batch_idx], labels,
                                        mode="train", rng=dropout_rng)
            if not np.isfinite(parts["loss"]):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {step}: {parts}")
            clip_global_norm(params, train_config.clip_norm)
            last_lr = cosine_lr(step, total_steps, train_config.lr_max,
                                train_config.lr_min)
            rmsprop_step(params, opt, lr=last_lr)
            step += 1
            for key in sums:
                sums[key] += parts[key]

        devel_mf1 = float("nan")
        if has_devel:
            devel_mf1 = evaluate_split(model, dataset, "devel",
                                       modality_filter=modality_filter).mf1
        history.append(EpochStats(
            epoch=epoch,
            loss=sums["loss"] / steps_per_epoch,
            loss_cls=sums["loss_cls"] / steps_per_epoch,
            loss_proto=sums["loss_proto"] / steps_per_epoch,
            loss_div=sums["loss_div"] / steps_per_epoch,
            lr=last_lr,
            devel_mf1=devel_mf1,
        ))
        if log:
            log(history[-1])

        improved = has_devel and (best_epoch < 0 or devel_mf1 > best_mf1)
        if improved:
            best_mf1 = devel_mf1
            best_epoch = epoch
            best_state = {p.name: p.value.copy() for p in params}
            stale = 0
        else:
            stale += 1

        if train_config.overfit_stop_mf1 is not None:
            train_mf1 = evaluate_split(model, dataset, "train",
                                       modality_filter=modality_filter).mf1
            if train_mf1 >= train_config.overfit_stop_mf1:
                # Overfit-probe mode keeps the stopping-point parameters.
                best_state = None
                best_epoch = epoch
                break
        if train_config.patience is not None and has_devel and stale > train_config.patience:
            break

    if best_state is not None:
        model.load_state_arrays(best_state)
    return TrainResult(model=model, history=history, best_devel_mf1=best_mf1,
                       best_epoch=best_epoch if best_epoch >= 0 else len(history) - 1,
                       seed=seed)


# ---------------------------------------------------------------------------
# ensembling


def ensemble_average(prob_sets):
    """Average aligned probability sets; ties go to class 0.

    ``prob_sets`` is a list of (ids, probs) pairs covering the same
    samples in the same order. Returns (ids, mean_probs, hard_labels).
    """
    if not prob_sets:
        raise ValueError("need at least one probability set")
    ids0 = list(prob_sets[0][0])
    mats = []
    for ids, probs in prob_sets:
        if list(ids) != ids0:
            raise DatasetError("probability sets cover different samples or orders")
        mats.append(np.asarray(probs, dtype=np.float64))
        if mats[-1].shape != mats[0].shape:
            raise DatasetError("probability sets have mismatched shapes")
    # Mean via deviations from the first set: averaging N copies of one
    # model is then exactly the identity, bitwise.
    base = mats[0]
    mean = base + np.mean(np.stack(mats) - base, axis=0)
    return ids0, mean, hard_labels(mean)


@dataclass
class SweepResult:
    seeds: list
    results: list  # TrainResult per seed
    per_seed_mf1: dict
    mean_mf1: float
    ensemble_mf1: float
    checkpoint_paths: list

    def report(self) -> dict:
        return {
            "seeds": self.seeds,
            "per_seed_mf1": {str(s): self.per_seed_mf1[s] for s in self.seeds},
            "mean_mf1": self.mean_mf1,
            "ensemble_mf1": self.ensemble_mf1,
            "checkpoints": [str(p) for p in self.checkpoint_paths],
        }


def seed_sweep(dataset: FusionDataset, fusion_config: FusionConfig,
               train_config: TrainConfig, out_dir=None, eval_split: str = "devel",
               modality_filter=None, log=None) -> SweepResult:
    """Train one model per seed and ensemble their probabilities.

    Reports each seed's best devel MF1, their mean, and the MF1 of the
    probability-averaged ensemble on ``eval_split``.
    """
    results = []
    paths = []
    prob_sets = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    eval_idx = dataset.split_indices(eval_split)
    if len(eval_idx) == 0:
        raise DatasetError(f"split '{eval_split}' is empty")
    labels = dataset.labels[eval_idx]
    if np.any(labels < 0):
        raise DatasetError(f"split '{eval_split}' contains unlabeled samples")

    for seed in train_config.seeds:
        result = train(dataset, fusion_config, train_config, seed,
                       modality_filter=modality_filter, log=log)
        results.append(result)
        prob_sets.append(predict_dataset(result.model, dataset, eval_split,
                                         modality_filter=modality_filter))
        if out_dir is not None:
            path = out_dir / f"model_seed{seed}.fck"
            save_checkpoint(path, result.model)
            paths.append(path)

    per_seed = {}
    for seed, (ids, probs) in zip(train_config.seeds, prob_sets):
        per_seed[seed] = macro_f1(hard_labels(probs), labels).mf1
    _, _, ens_labels = ensemble_average(prob_sets)
    ensemble_mf1 = macro_f1(ens_labels, labels).mf1
    return SweepResult(
        seeds=list(train_config.seeds),
        results=results,
        per_seed_mf1=per_seed,
        mean_mf1=float(np.mean([per_seed[s] for s in train_config.seeds])),
        ensemble_mf1=ensemble_mf1,
        checkpoint_paths=paths,
    )
