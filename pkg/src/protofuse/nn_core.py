"""Differentiable numerical core with handwritten backward passes.

Everything the fusion model needs is here: linear layers, layer norm,
exact (erf) GELU, inverted dropout, masked multi-head self-attention,
label-smoothed cross-entropy, l2 normalization, global-norm gradient
clipping, RMSprop, the cosine learning-rate schedule, and a finite
difference gradient checker.

Layers accumulate gradients into Param.grad; one model instance must be
driven by a single thread. Computation preserves the parameter dtype
(float32 in training, float64 under the gradient checker).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError

NEG_INF_SCORE = -1e9
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Param:
    """A learnable tensor with a same-shape gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> "Param":
        return Param(self.name, self.value.astype(dtype))


class RngStream:
    """Seeded, platform-stable random stream (PCG64).

    Substreams are derived from (seed, stream) so e.g. init, shuffling,
    and dropout never share draws.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, self.stream]))
        )

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * std

    def glorot_uniform(self, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        shape = shape if shape is not None else (fan_in, fan_out)
        return self._gen.uniform(-limit, limit, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# elementwise ops


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF."""
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Normalize the last axis to unit length (epsilon-guarded)."""
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / (norm + 1e-12)


def l2_normalize_backward(v: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Gradient of l2_normalize w.r.t. its input."""
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    n = norm + 1e-12
    vn = v / n
    # d vn_i / d v_j = delta_ij / n - v_i v_j / (n^2 * ||v||)
    dot = np.sum(v * d_out, axis=-1, keepdims=True)
    return d_out / n - vn * dot / (np.maximum(norm, 1e-12) * n)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# layers


class Linear:
    """y = x W + b over the last axis; arbitrary leading axes."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: RngStream,
                 dtype=np.float32):
        self.d_in, self.d_out = d_in, d_out
        self.W = Param(f"{name}.W", rng.glorot_uniform(d_in, d_out).astype(dtype))
        self.b = Param(f"{name}.b", np.zeros(d_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"{self.W.name}: expected last dim {self.d_in}, got {x.shape}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.W.grad += x2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        return (dy2 @ self.W.value.T).reshape(x.shape)


class LayerNorm:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""

    def __init__(self, name: str, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.dim = dim
        self.eps = eps
        self.gain = Param(f"{name}.gain", np.ones(dim, dtype=dtype))
        self.bias = Param(f"{name}.bias", np.zeros(dim, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.gain, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.dim:
            raise ValueError(f"{self.gain.name}: expected last dim {self.dim}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return self.gain.value * xhat + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        flat_axes = tuple(range(dy.ndim - 1))
        self.gain.grad += np.sum(dy * xhat, axis=flat_axes)
        self.bias.grad += np.sum(dy, axis=flat_axes)
        dxhat = dy * self.gain.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class Gelu:
    def __init__(self):
        self._x = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return gelu(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * gelu_grad(self._x)


class Dropout:
    """Inverted dropout: train mode zeroes with prob p and rescales by 1/(1-p)."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._scale_mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, mode: str, rng: RngStream | None) -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "eval" or self.p == 0.0:
            self._scale_mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an RngStream")
        keep = (rng.uniform(x.shape) >= self.p).astype(x.dtype)
        self._scale_mask = keep / np.asarray(1.0 - self.p, dtype=x.dtype)
        return x * self._scale_mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._scale_mask is None:
            return dy
        return dy * self._scale_mask


class MaskedSelfAttention:
    """Multi-head self-attention over modality tokens with key masking.

    Masked tokens get an additive -1e9 score as keys, so their softmax
    weight underflows to exactly zero and no unmasked token attends to
    them. Outputs at masked query rows are computed but carry no meaning;
    downstream pooling ignores them.
    """

    def __init__(self, name: str, dim: int, heads: int, rng: RngStream,
                 dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(f"{name}.q", dim, dim, rng, dtype)
        self.k = Linear(f"{name}.k", dim, dim, rng, dtype)
        self.v = Linear(f"{name}.v", dim, dim, rng, dtype)
        self.out = Linear(f"{name}.out", dim, dim, rng, dtype)
        self._cache = None

    def params(self):
        return self.q.params() + self.k.params() + self.v.params() + self.out.params()

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, m, _ = x.shape
        return x.reshape(b, m, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, m, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, m, h * hd)

    def forward(self, z: np.ndarray, mask: np.ndarray) -> np.ndarray:
        squeeze = z.ndim == 2
        if squeeze:
            z = z[None]
            mask = np.asarray(mask)[None]
        mask = np.asarray(mask, dtype=z.dtype)
        if np.any(mask.sum(axis=-1) < 1):
            raise ValueError("attention needs at least one unmasked token per sample")

        q = self._split(self.q.forward(z))
        k = self._split(self.k.forward(z))
        v = self._split(self.v.forward(z))
        scale = np.asarray(1.0 / math.sqrt(self.head_dim), dtype=z.dtype)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = scores + (mask[:, None, None, :] - 1.0) * np.asarray(-NEG_INF_SCORE, dtype=z.dtype)
        weights = softmax(scores, axis=-1)
        ctx = weights @ v
        y = self.out.forward(self._merge(ctx))
        self._cache = (q, k, v, weights, scale, squeeze)
        return y[0] if squeeze else y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        q, k, v, weights, scale, squeeze = self._cache
        if squeeze:
            dy = dy[None]
        dctx = self._split(self.out.backward(dy))
        dweights = dctx @ v.transpose(0, 1, 3, 2)
        dv = weights.transpose(0, 1, 3, 2) @ dctx
        # softmax backward; zero weights (masked keys) contribute nothing
        dscores = weights * (dweights - np.sum(dweights * weights, axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
        dz = self.q.backward(self._merge(dq))
        dz = dz + self.k.backward(self._merge(dk))
        dz = dz + self.v.backward(self._merge(dv))
        return dz[0] if squeeze else dz

    def last_attention_weights(self) -> np.ndarray:
        return self._cache[3]


class EncoderBlock:
    """Pre-norm Transformer block: attention + residual, then FF + residual.

    The feed-forward path is linear -> GELU -> dropout -> linear, per the
    projector/encoder composition used throughout the model.
    """

    def __init__(self, name: str, dim: int, heads: int, ff_hidden: int,
                 dropout_p: float, rng: RngStream, eps: float = 1e-5,
                 dtype=np.float32):
        self.ln1 = LayerNorm(f"{name}.ln1", dim, eps, dtype)
        self.attn = MaskedSelfAttention(f"{name}.attn", dim, heads, rng, dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", dim, eps, dtype)
        self.ff1 = Linear(f"{name}.ff1", dim, ff_hidden, rng, dtype)
        self.act = Gelu()
        self.drop = Dropout(dropout_p)
        self.ff2 = Linear(f"{name}.ff2", ff_hidden, dim, rng, dtype)

    def params(self):
        return (self.ln1.params() + self.attn.params() + self.ln2.params()
                + self.ff1.params() + self.drop.params() + self.ff2.params())

    def forward(self, z: np.ndarray, mask: np.ndarray, mode: str,
                rng: RngStream | None) -> np.ndarray:
        z = z + self.attn.forward(self.ln1.forward(z), mask)
        hidden = self.drop.forward(self.act.forward(self.ff1.forward(self.ln2.forward(z))),
                                   mode, rng)
        return z + self.ff2.forward(hidden)

    def backward(self, dz: np.ndarray) -> np.ndarray:
        d_ff = self.ln2.backward(self.ff1.backward(self.act.backward(
            self.drop.backward(self.ff2.backward(dz)))))
        dz = dz + d_ff
        d_attn = self.ln1.backward(self.attn.backward(dz))
        return dz + d_attn


# ---------------------------------------------------------------------------
# losses


def cross_entropy_label_smoothing(logits: np.ndarray, label: int, eps_ls: float):
    """Label-smoothed cross-entropy for one C-vector of logits.

    Returns (loss, dloss/dlogits). The target mixes (1-eps) one-hot with
    eps/C uniform mass.
    """
    logits = np.asarray(logits)
    c = logits.shape[-1]
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps_ls}")
    if not 0 <= label < c:
        raise ValueError(f"label {label} out of range for {c} classes")
    target = np.full(c, eps_ls / c, dtype=np.float64)
    target[label] += 1.0 - eps_ls
    logp = log_softmax(logits.astype(np.float64))
    loss = -np.sum(target * logp)
    dlogits = (np.exp(logp) - target).astype(logits.dtype)
    return float(loss), dlogits


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray, eps_ls: float):
    """Mean label-smoothed cross-entropy over a batch.

    Returns (mean_loss, dlogits, per_sample_losses); dlogits already
    carries the 1/B factor of the mean reduction.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b, c = logits.shape
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps_ls}")
    if labels.shape != (b,) or np.any(labels < 0) or np.any(labels >= c):
        raise ValueError("labels must be one valid class index per row")
    target = np.full((b, c), eps_ls / c, dtype=logits.dtype)
    target[np.arange(b), labels] += np.asarray(1.0 - eps_ls, dtype=logits.dtype)
    logp = log_softmax(logits)
    per_sample = -np.sum(target * logp, axis=-1)
    dlogits = (np.exp(logp) - target) / np.asarray(b, dtype=logits.dtype)
    return float(per_sample.mean()), dlogits, per_sample


# ---------------------------------------------------------------------------
# optimization


def clip_global_norm(params, cap: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``cap``.

    Returns the factor applied (1.0 when under the cap).
    """
    if cap <= 0:
        raise ValueError(f"clip cap must be positive, got {cap}")
    total = 0.0
    for p in params:
        g = p.grad
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if norm <= cap or norm == 0.0:
        return 1.0
    factor = cap / norm
    for p in params:
        p.grad *= factor
    return factor


@dataclass
class OptimizerState:
    lr: float
    alpha: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    square_avg: dict = field(default_factory=dict)  # param name -> running E[g^2]


def rmsprop_step(params, state: OptimizerState, lr: float | None = None) -> None:
    """One RMSprop update; weight decay is coupled into the gradient.

    v <- alpha v + (1-alpha) g^2 ; theta <- theta - lr g / (sqrt(v) + eps)
    with g = grad + weight_decay * theta. No momentum.
    """
    lr = state.lr if lr is None else lr
    for p in params:
        v = state.square_avg.get(p.name)
        if v is None:
            v = np.zeros_like(p.value)
            state.square_avg[p.name] = v
        elif v.shape != p.value.shape:
            raise ValueError(f"optimizer state shape mismatch for {p.name}")
        g = p.grad
        if state.weight_decay != 0.0:
            g = g + np.asarray(state.weight_decay, dtype=p.value.dtype) * p.value
        v *= np.asarray(state.alpha, dtype=v.dtype)
        v += np.asarray(1.0 - state.alpha, dtype=v.dtype) * g * g
        p.value -= np.asarray(lr, dtype=p.value.dtype) * g / (np.sqrt(v) + np.asarray(state.eps, dtype=v.dtype))
    state.step_count += 1


def cosine_lr(step: int, horizon: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine decay from lr_max at step 0 to lr_min at step == horizon."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if not 0 <= step <= horizon:
        raise ValueError(f"step {step} outside [0, {horizon}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / horizon))


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradcheckEntry:
    group: str
    max_rel_err: float
    probes: int


@dataclass
class GradcheckReport:
    entries: list
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def failed_groups(self) -> list:
        return [e.group for e in self.entries if e.max_rel_err > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed_groups

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "failed_groups": self.failed_groups,
            "groups": [
                {"group": e.group, "max_rel_err": e.max_rel_err, "probes": e.probes}
                for e in self.entries
            ],
        }


def gradcheck(loss_and_grad, params, probes: int = 10, tolerance: float = 1e-4,
              h: float = 1e-5, seed: int = 0, loss_only=None,
              corrupt_group: str | None = None) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_and_grad()`` must recompute the scalar loss from the current
    parameter values and fill every Param.grad; ``loss_only`` (optional,
    defaults to the same callable) is used for the perturbed evaluations.
    Parameters should be float64 and any dropout disabled, otherwise the
    comparison is meaningless. ``corrupt_group`` flips the sign of that
    group's analytic gradient first; it exists so tests can confirm the
    harness catches a broken backward.

    Relative error uses max(|analytic|, |numeric|, 1e-3) as denominator,
    which keeps finite-difference roundoff on near-zero coordinates from
    registering as a gradient bug.
    """
    loss_only = loss_only or loss_and_grad
    for p in params:
        p.zero_grad()
    base_loss = loss_and_grad()
    if not np.isfinite(base_loss):
        raise NumericError(f"gradcheck loss is non-finite: {base_loss}")
    analytic = {p.name: p.grad.copy() for p in params}
    if corrupt_group is not None:
        analytic[corrupt_group] = -analytic[corrupt_group]

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 97])))
    entries = []
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.shape[0]
        count = min(probes, n)
        coords = rng.choice(n, size=count, replace=False)
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            hi = loss_only()
            flat[idx] = orig - h
            lo = loss_only()
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * h)
            a = analytic[p.name].reshape(-1)[idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            worst = max(worst, rel)
        entries.append(GradcheckEntry(group=p.name, max_rel_err=worst, probes=count))
    return GradcheckReport(entries=entries, tolerance=tolerance)
