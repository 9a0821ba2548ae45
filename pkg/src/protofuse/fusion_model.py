"""The fusion model: per-modality projectors, learnable modality
embeddings, a masked Transformer encoder over modality tokens, masked
mean pooling, a linear classifier, and an auxiliary prototype head.

The prototype head scores the fused representation by a temperature-
scaled log-sum-exp of cosine similarities against learnable per-class
prototype vectors; it only ever contributes a training loss term, the
returned probabilities always come from the linear classifier.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .embedding_io import MODALITIES
from .errors import ConfigError, DatasetError
from .nn_core import (
    Dropout,
    EncoderBlock,
    Gelu,
    LayerNorm,
    Linear,
    Param,
    RngStream,
    cross_entropy_batch,
    l2_normalize,
    l2_normalize_backward,
    softmax,
)

CHECKPOINT_MAGIC = b"FCK1"


@dataclass(frozen=True)
class FusionConfig:
    """Architecture and loss hyperparameters of the fusion model."""

    input_dims: tuple
    modalities: tuple = MODALITIES
    dim: int = 128
    layers: int = 6
    heads: int = 4
    ff_factor: int = 6
    dropout: float = 0.45
    use_cls_token: bool = False
    prototypes_per_class: int = 16
    temperature: float = 0.3
    proto_weight: float = 0.2
    diversity_weight: float = 0.0
    label_smoothing: float = 0.02
    classes: int = 2
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        self.validate()

    @property
    def ff_hidden(self) -> int:
        return self.ff_factor * self.dim

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    def validate(self):
        if len(self.modalities) < 1:
            raise ConfigError("at least one modality required")
        if len(self.input_dims) != len(self.modalities):
            raise ConfigError("input_dims must align with modalities")
        if any(d < 1 for d in self.input_dims):
            raise ConfigError("input dims must be >= 1")
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must be positive and divisible by heads {self.heads}")
        if self.layers < 0 or self.ff_factor < 1:
            raise ConfigError("layers must be >= 0 and ff_factor >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.prototypes_per_class < 1:
            raise ConfigError("prototypes_per_class must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.proto_weight < 0 or self.diversity_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be > 0")

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "input_dims": list(self.input_dims),
            "dim": self.dim,
            "layers": self.layers,
            "heads": self.heads,
            "ff_factor": self.ff_factor,
            "dropout": self.dropout,
            "use_cls_token": self.use_cls_token,
            "prototypes_per_class": self.prototypes_per_class,
            "temperature": self.temperature,
            "proto_weight": self.proto_weight,
            "diversity_weight": self.diversity_weight,
            "label_smoothing": self.label_smoothing,
            "classes": self.classes,
            "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FusionConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown fusion config keys: {sorted(unknown)}")
        if "input_dims" not in data:
            raise ConfigError("fusion config needs 'input_dims'")
        kwargs = dict(data)
        kwargs["input_dims"] = tuple(kwargs["input_dims"])
        if "modalities" in kwargs:
            kwargs["modalities"] = tuple(kwargs["modalities"])
        return cls(**kwargs)


class PrototypeHead:
    """Log-sum-exp of cosine similarities to per-class prototypes."""

    def __init__(self, classes: int, per_class: int, dim: int, temperature: float,
                 rng: RngStream, dtype=np.float32):
        self.temperature = temperature
        self.bank = Param("proto.bank",
                          rng.normal((classes, per_class, dim)).astype(dtype))
        self._cache = None

    def params(self):
        return [self.bank]

    def forward(self, z: np.ndarray) -> np.ndarray:
        zn = l2_normalize(z)
        pn = l2_normalize(self.bank.value)
        cos = np.einsum("bd,ckd->bck", zn, pn)
        scores = cos / np.asarray(self.temperature, dtype=z.dtype)
        top = scores.max(axis=-1, keepdims=True)
        logits = top[..., 0] + np.log(np.sum(np.exp(scores - top), axis=-1))
        self._cache = (z, zn, pn, scores)
        return logits

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        z, zn, pn, scores = self._cache
        weights = softmax(scores, axis=-1)  # (B, C, K)
        dcos = dlogits[:, :, None] * weights / np.asarray(self.temperature, dtype=z.dtype)
        dzn = np.einsum("bck,ckd->bd", dcos, pn)
        dpn = np.einsum("bck,bd->ckd", dcos, zn)
        self.bank.grad += l2_normalize_backward(self.bank.value, dpn)
        return l2_normalize_backward(z, dzn)

    def diversity_penalty(self):
        """Mean within-class pairwise cosine similarity of the prototypes.

        Returns (value, dvalue/dbank); zero (and zero grad) when K == 1.
        """
        bank = self.bank.value
        c, k, _ = bank.shape
        if k == 1:
            return 0.0, np.zeros_like(bank)
        pn = l2_normalize(bank)
        gram = np.einsum("cid,cjd->cij", pn, pn)
        idx = np.arange(k)
        offdiag = gram.sum(axis=(1, 2)) - gram[:, idx, idx].sum(axis=1)
        pairs = k * (k - 1)
        value = float(np.mean(offdiag / pairs))
        # d/dq_i of sum_{i != j} q_i . q_j is 2 * sum_{j != i} q_j
        dq = 2.0 * (pn.sum(axis=1, keepdims=True) - pn) / (pairs * c)
        dbank = l2_normalize_backward(bank, dq.astype(bank.dtype))
        return value, dbank


@dataclass
class ForwardTrace:
    """Intermediate activations captured for debugging and tests."""

    tokens_projected: np.ndarray  # U
    tokens_in: np.ndarray  # Z^(0)
    tokens_out: np.ndarray  # Z^(L)
    fused: np.ndarray
    logits: np.ndarray
    proto_logits: np.ndarray | None
    loss_components: dict | None = None


class FusionModel:
    """Owns the parameters and runs forward/backward for one model."""

    def __init__(self, config: FusionConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = dtype
        rng = RngStream(seed, stream=0)
        cfg = config
        self.projectors = []
        for name, d_in in zip(cfg.modalities, cfg.input_dims):
            self.projectors.append({
                "linear": Linear(f"proj.{name}", d_in, cfg.dim, rng, dtype),
                "norm": LayerNorm(f"proj.{name}.ln", cfg.dim, cfg.ln_eps, dtype),
                "act": Gelu(),
                "drop": Dropout(cfg.dropout),
            })
        self.e_mod = Param("e_mod", rng.normal((cfg.n_modalities, cfg.dim), std=0.02).astype(dtype))
        self.cls_vec = None
        if cfg.use_cls_token:
            self.cls_vec = Param("cls_vec", rng.normal((cfg.dim,), std=0.02).astype(dtype))
        self.blocks = [
            EncoderBlock(f"enc.{i}", cfg.dim, cfg.heads, cfg.ff_hidden,
                         cfg.dropout, rng, cfg.ln_eps, dtype)
            for i in range(cfg.layers)
        ]
        self.classifier = Linear("classifier", cfg.dim, cfg.classes, rng, dtype)
        self.proto = PrototypeHead(cfg.classes, cfg.prototypes_per_class, cfg.dim,
                                   cfg.temperature, rng, dtype)
        self._loss_cache = None

    # -- parameter bookkeeping ------------------------------------------------

    def params(self):
        out = []
        for proj in self.projectors:
            out += proj["linear"].params() + proj["norm"].params()
        out.append(self.e_mod)
        if self.cls_vec is not None:
            out.append(self.cls_vec)
        for block in self.blocks:
            out += block.params()
        out += self.classifier.params()
        out += self.proto.params()
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def clone_as(self, dtype) -> "FusionModel":
        other = FusionModel(self.config, self.seed, dtype=dtype)
        for mine, theirs in zip(self.params(), other.params()):
            theirs.value[...] = mine.value.astype(dtype)
        return other

    def state_arrays(self) -> dict:
        return {p.name: p.value for p in self.params()}

    def load_state_arrays(self, arrays: dict):
        for p in self.params():
            if p.name not in arrays:
                raise DatasetError(f"checkpoint missing tensor '{p.name}'")
            src = np.asarray(arrays[p.name], dtype=self.dtype)
            if src.shape != p.value.shape:
                raise DatasetError(
                    f"tensor '{p.name}' shape {src.shape} != expected {p.value.shape}")
            p.value[...] = src
            p.zero_grad()

    # -- forward pieces --------------------------------------------------------

    def _check_batch(self, xs, mask):
        cfg = self.config
        if len(xs) != cfg.n_modalities:
            raise ValueError(f"expected {cfg.n_modalities} modality arrays, got {len(xs)}")
        b = xs[0].shape[0]
        for name, d_in, x in zip(cfg.modalities, cfg.input_dims, xs):
            if x.shape != (b, d_in):
                raise ValueError(f"modality '{name}': expected shape {(b, d_in)}, got {x.shape}")
        mask = np.asarray(mask, dtype=self.dtype)
        if mask.shape != (b, cfg.n_modalities):
            raise ValueError(f"mask shape {mask.shape} != {(b, cfg.n_modalities)}")
        if np.any(mask.sum(axis=1) < 1):
            raise ValueError("every sample needs at least one unmasked modality")
        return mask

    def project_modalities(self, xs, mask, mode: str, rng: RngStream | None):
        """Project each modality vector into the shared space.

        Masked entries are zero-filled before projection and their output
        rows forced to zero; correctness never depends on their content.
        """
        cfg = self.config
        rows = []
        for m, proj in enumerate(self.projectors):
            col = mask[:, m:m + 1]
            x = np.asarray(xs[m], dtype=self.dtype) * col
            u = proj["linear"].forward(x)
            u = proj["norm"].forward(u)
            u = proj["act"].forward(u)
            u = proj["drop"].forward(u, mode, rng)
            rows.append(u * col)
        return np.stack(rows, axis=1)  # (B, M, d)

    def _project_backward(self, d_tokens, mask):
        for m, proj in enumerate(self.projectors):
            col = mask[:, m:m + 1]
            du = d_tokens[:, m, :] * col
            du = proj["drop"].backward(du)
            du = proj["act"].backward(du)
            du = proj["norm"].backward(du)
            proj["linear"].backward(du)  # input grads not needed further

    def assemble_tokens(self, tokens_projected, mask):
        """Add modality embeddings; optionally prepend the CLS token."""
        z0 = tokens_projected + self.e_mod.value
        if self.cls_vec is None:
            return z0, mask
        b = z0.shape[0]
        cls_row = np.broadcast_to(self.cls_vec.value, (b, 1, z0.shape[-1]))
        z0 = np.concatenate([cls_row, z0], axis=1)
        mask_ext = np.concatenate([np.ones((b, 1), dtype=mask.dtype), mask], axis=1)
        return z0, mask_ext

    def _assemble_backward(self, dz0):
        if self.cls_vec is not None:
            self.cls_vec.grad += dz0[:, 0, :].sum(axis=0)
            dz0 = dz0[:, 1:, :]
        self.e_mod.grad += dz0.sum(axis=0)
        return dz0

    def encode(self, z0, mask_ext, mode: str, rng: RngStream | None):
        z = z0
        for block in self.blocks:
            z = block.forward(z, mask_ext, mode, rng)
        return z

    def _encode_backward(self, dz):
        for block in reversed(self.blocks):
            dz = block.backward(dz)
        return dz

    def masked_mean_pool(self, tokens_out, mask):
        """Average the output modality tokens over the available ones."""
        if self.cls_vec is not None:
            return tokens_out[:, 0, :]
        denom = mask.sum(axis=1, keepdims=True)
        return np.einsum("bmd,bm->bd", tokens_out, mask) / denom

    def _pool_backward(self, dz, mask, n_tokens):
        b, d = dz.shape
        if self.cls_vec is not None:
            out = np.zeros((b, n_tokens, d), dtype=dz.dtype)
            out[:, 0, :] = dz
            return out
        denom = mask.sum(axis=1, keepdims=True)
        return (dz / denom)[:, None, :] * mask[:, :, None]

    def classifier_logits(self, fused):
        return self.classifier.forward(fused)

    def prototype_logits(self, fused):
        return self.proto.forward(fused)

    # -- public entry points ---------------------------------------------------

    def forward_batch(self, xs, mask, mode: str = "eval",
                      rng: RngStream | None = None, return_trace: bool = False):
        """Run the model; returns class probabilities (B, C)."""
        mask = self._check_batch(xs, mask)
        u = self.project_modalities(xs, mask, mode, rng)
        z0, mask_ext = self.assemble_tokens(u, mask)
        zl = self.encode(z0, mask_ext, mode, rng)
        fused = self.masked_mean_pool(zl, mask)
        logits = self.classifier_logits(fused)
        probs = softmax(logits)
        if return_trace:
            trace = ForwardTrace(tokens_projected=u, tokens_in=z0, tokens_out=zl,
                                 fused=fused, logits=logits,
                                 proto_logits=self.prototype_logits(fused))
            return probs, trace
        return probs

    def forward(self, sample_xs, sample_mask, mode: str = "eval",
                rng: RngStream | None = None):
        """Single-sample convenience wrapper; returns a C-vector of probabilities."""
        xs = [np.asarray(x)[None, :] for x in sample_xs]
        mask = np.asarray(sample_mask)[None, :]
        return self.forward_batch(xs, mask, mode=mode, rng=rng)[0]

    def loss_forward(self, xs, mask, labels, mode: str, rng: RngStream | None = None):
        """Forward pass plus composite loss; caches for loss_backward."""
        cfg = self.config
        mask = self._check_batch(xs, mask)
        u = self.project_modalities(xs, mask, mode, rng)
        z0, mask_ext = self.assemble_tokens(u, mask)
        zl = self.encode(z0, mask_ext, mode, rng)
        fused = self.masked_mean_pool(zl, mask)
        logits = self.classifier_logits(fused)

        labels = np.asarray(labels)
        loss_cls, dlogits, _ = cross_entropy_batch(logits, labels, cfg.label_smoothing)
        loss_proto, dproto_logits = 0.0, None
        if cfg.proto_weight > 0:
            proto_logits = self.prototype_logits(fused)
            loss_proto, dproto_logits, _ = cross_entropy_batch(proto_logits, labels, 0.0)
        loss_div, ddiv_bank = 0.0, None
        if cfg.diversity_weight > 0:
            loss_div, ddiv_bank = self.proto.diversity_penalty()
        total = loss_cls + cfg.proto_weight * loss_proto + cfg.diversity_weight * loss_div
        self._loss_cache = (mask, zl.shape[1], dlogits, dproto_logits, ddiv_bank)
        return {
            "loss": float(total),
            "loss_cls": float(loss_cls),
            "loss_proto": float(loss_proto),
            "loss_div": float(loss_div),
        }

    def loss_backward(self):
        """Backpropagate the most recent loss_forward into Param.grad."""
        cfg = self.config
        mask, n_tokens, dlogits, dproto_logits, ddiv_bank = self._loss_cache
        dfused = self.classifier.backward(dlogits)
        if dproto_logits is not None:
            dfused = dfused + self.proto.backward(
                dproto_logits * np.asarray(cfg.proto_weight, dtype=dproto_logits.dtype))
        if ddiv_bank is not None:
            self.proto.bank.grad += np.asarray(cfg.diversity_weight, dtype=ddiv_bank.dtype) * ddiv_bank
        dzl = self._pool_backward(dfused, mask, n_tokens)
        dz0 = self._encode_backward(dzl)
        d_tokens = self._assemble_backward(dz0)
        self._project_backward(d_tokens, mask)

    def loss_and_grad(self, xs, mask, labels, mode: str = "train",
                      rng: RngStream | None = None) -> dict:
        components = self.loss_forward(xs, mask, labels, mode, rng)
        self.loss_backward()
        return components


def total_loss_components(logits, proto_logits, label, config: FusionConfig):
    """Composite loss for one sample's logits; mirrors the batched path."""
    from .nn_core import cross_entropy_label_smoothing

    loss_cls, _ = cross_entropy_label_smoothing(logits, label, config.label_smoothing)
    loss_proto = 0.0
    if proto_logits is not None:
        loss_proto, _ = cross_entropy_label_smoothing(proto_logits, label, 0.0)
    total = loss_cls + config.proto_weight * loss_proto
    return {"loss": total, "loss_cls": loss_cls, "loss_proto": loss_proto}


def init_model(config: FusionConfig, seed: int) -> FusionModel:
    """Deterministically initialize a model for (config, seed)."""
    return FusionModel(config, seed=seed, dtype=np.float32)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: FusionModel) -> None:
    """Write config + float32 tensors in the FCK1 container format."""
    tensors = []
    payloads = []
    offset = 0
    for p in model.params():
        data = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
        tensors.append({"name": p.name, "shape": list(p.value.shape), "offset": offset})
        payloads.append(data)
        offset += len(data)
    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for data in payloads:
            fh.write(data)


def load_checkpoint(path) -> FusionModel:
    """Read an FCK1 checkpoint back into a float32 model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path}: not an FCK1 checkpoint")
    (header_len,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + header_len
    if len(blob) < header_end:
        raise DatasetError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except ValueError as exc:
        raise DatasetError(f"{path}: bad checkpoint header: {exc}") from exc
    config = FusionConfig.from_dict(header["config"])
    model = FusionModel(config, seed=int(header.get("seed", 0)), dtype=np.float32)
    arrays = {}
    payload = blob[header_end:]
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise DatasetError(f"{path}: tensor '{entry['name']}' payload truncated")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=count,
                                              offset=start).reshape(shape).copy()
    model.load_state_arrays(arrays)
    return model


# ---------------------------------------------------------------------------
# verification entry point


def fusion_gradcheck(config: FusionConfig, probes: int = 10, tolerance: float = 1e-4,
                     seed: int = 0, batch: int = 2, corrupt_group: str | None = None):
    """Finite-difference check of the full forward+loss at 64-bit.

    Dropout is disabled (eval-mode forward); the loss itself is the
    training composite, including the prototype term.
    """
    from .nn_core import gradcheck

    model = FusionModel(config, seed=seed, dtype=np.float32).clone_as(np.float64)
    data_rng = RngStream(seed, stream=11)
    xs = [data_rng.normal((batch, d)) for d in config.input_dims]
    mask = np.ones((batch, config.n_modalities))
    if batch > 1 and config.n_modalities > 1:
        mask[1, 0] = 0.0  # exercise the masked path too
    labels = np.arange(batch) % config.classes

    def loss_and_grad():
        model.zero_grad()
        return model.loss_and_grad(xs, mask, labels, mode="eval")["loss"]

    def loss_only():
        return model.loss_forward(xs, mask, labels, mode="eval")["loss"]

    return gradcheck(loss_and_grad, model.params(), probes=probes,
                     tolerance=tolerance, seed=seed, loss_only=loss_only,
                     corrupt_group=corrupt_group)
