"""Minimal neural substrate on top of numpy.

Parameters live in :class:`ParamGroup` containers. Every layer function
returns ``(output, backward)`` where ``backward(d_output)`` accumulates
gradients into the parameter groups it touched and returns the gradient
with respect to the layer input. All math runs in float64; checkpoint
files store raw float32.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    AllMasked,
    ConfigError,
    FormatError,
    IndexOutOfRange,
    NonFiniteGradient,
    ShapeMismatch,
)

CHECKPOINT_MAGIC = b"EQNN"
CHECKPOINT_VERSION = 1


@dataclass
class ParamGroup:
    """One named parameter matrix with its gradient and optimizer state."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ShapeMismatch(f"{self.name}: parameters must be 2-D matrices")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[:] = 0.0

    def copy(self) -> "ParamGroup":
        return ParamGroup(
            self.name,
            self.value.copy(),
            self.grad.copy(),
            self.adam_m.copy(),
            self.adam_v.copy(),
            self.step,
        )


@dataclass(frozen=True)
class AdamWConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


Backward = Callable[[np.ndarray], np.ndarray]


def affine(x: np.ndarray, w: ParamGroup, b: ParamGroup) -> tuple[np.ndarray, Backward]:
    """y = x @ W + b with row-broadcast bias."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.value.shape[0]:
        raise ShapeMismatch(
            f"affine: x {x.shape} incompatible with W {w.value.shape}"
        )
    if b.value.shape != (1, w.value.shape[1]):
        raise ShapeMismatch(
            f"affine: b {b.value.shape} incompatible with W {w.value.shape}"
        )
    y = x @ w.value + b.value

    def backward(dy: np.ndarray) -> np.ndarray:
        w.grad += x.T @ dy
        b.grad += dy.sum(axis=0, keepdims=True)
        return dy @ w.value.T

    return y, backward


def layer_norm(
    x: np.ndarray, gain: ParamGroup, bias: ParamGroup, eps: float = 1e-5
) -> tuple[np.ndarray, Backward]:
    """Per-row normalization to zero mean / unit variance, then scale-shift."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[1]
    if gain.value.shape != (1, n) or bias.value.shape != (1, n):
        raise ShapeMismatch("layer_norm: gain/bias length must equal cols")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.value + bias.value

    def backward(dy: np.ndarray) -> np.ndarray:
        gain.grad += (dy * xhat).sum(axis=0, keepdims=True)
        bias.grad += dy.sum(axis=0, keepdims=True)
        dxhat = dy * gain.value
        return inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )

    return y, backward


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> tuple[np.ndarray, Backward]:
    """Smooth GELU activation (tanh form)."""
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(dy: np.ndarray) -> np.ndarray:
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        return dy * dydx

    return y, backward


def dropout(
    x: np.ndarray, rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, Backward]:
    """Inverted dropout; only called in training mode."""
    if rate <= 0.0:
        return x, lambda dy: dy
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, lambda dy: dy * mask


def embedding_lookup(
    table: ParamGroup, ids: np.ndarray
) -> tuple[np.ndarray, Backward]:
    """Gather rows of an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    y = table.value[ids]

    def backward(dy: np.ndarray) -> np.ndarray:
        np.add.at(table.grad, ids, dy)
        return dy  # no meaningful input gradient

    return y, backward


@dataclass
class AttentionParams:
    """Projection parameters for one self-attention layer."""

    wq: ParamGroup
    wk: ParamGroup
    wv: ParamGroup
    wo: ParamGroup
    bq: ParamGroup
    bk: ParamGroup
    bv: ParamGroup
    bo: ParamGroup

    def groups(self) -> list[ParamGroup]:
        return [self.wq, self.wk, self.wv, self.wo, self.bq, self.bk, self.bv, self.bo]


def multi_head_self_attention(
    x: np.ndarray,
    params: AttentionParams,
    n_heads: int,
    mask: Sequence[bool],
    return_attn: bool = False,
):
    """Scaled dot-product self-attention over unmasked key positions.

    ``mask[j]`` is True for real tokens; False positions (padding) never
    receive attention weight. Returns ``(y, backward)`` or
    ``(y, backward, attn)`` with ``attn`` of shape [heads, m, m].
    """
    x = np.asarray(x, dtype=np.float64)
    m, d = x.shape
    if d % n_heads != 0:
        raise ShapeMismatch(f"d_model {d} not divisible by n_heads {n_heads}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (m,):
        raise ShapeMismatch(f"mask length {mask.shape} does not match {m} rows")
    if not mask.any():
        raise AllMasked("attention with no unmasked key position")
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)

    q, back_q = affine(x, params.wq, params.bq)
    k, back_k = affine(x, params.wk, params.bk)
    v, back_v = affine(x, params.wv, params.bv)

    def to_heads(z):
        return z.reshape(m, n_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = to_heads(q), to_heads(k), to_heads(v)
    scores = qh @ kh.transpose(0, 2, 1) * scale
    scores = np.where(mask[None, None, :], scores, -np.inf)
    smax = scores.max(axis=2, keepdims=True)
    ex = np.exp(scores - smax)
    attn = ex / ex.sum(axis=2, keepdims=True)
    oh = attn @ vh
    concat = oh.transpose(1, 0, 2).reshape(m, d)
    y, back_o = affine(concat, params.wo, params.bo)

    def backward(dy: np.ndarray) -> np.ndarray:
        dconcat = back_o(dy)
        doh = dconcat.reshape(m, n_heads, dh).transpose(1, 0, 2)
        dattn = doh @ vh.transpose(0, 2, 1)
        dvh = attn.transpose(0, 2, 1) @ doh
        dscores = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
        dqh = dscores @ kh * scale
        dkh = dscores.transpose(0, 2, 1) @ qh * scale

        def from_heads(z):
            return z.transpose(1, 0, 2).reshape(m, d)

        dx = back_q(from_heads(dqh))
        dx += back_k(from_heads(dkh))
        dx += back_v(from_heads(dvh))
        return dx

    if return_attn:
        return y, backward, attn
    return y, backward


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over a 1-D logit vector; -inf entries get zero mass."""
    z = np.asarray(logits, dtype=np.float64)
    zm = z - z.max()
    e = np.exp(zm)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    zm = z - z.max()
    return zm - np.log(np.exp(zm).sum())


def softmax_cross_entropy(
    logits: np.ndarray, target: int
) -> tuple[float, np.ndarray]:
    """-log softmax(logits)[target] and its gradient wrt the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeMismatch("softmax_cross_entropy expects a 1-D logit vector")
    if not 0 <= target < z.shape[0]:
        raise IndexOutOfRange(f"target {target} outside [0, {z.shape[0]})")
    if not np.isfinite(z[target]):
        raise IndexOutOfRange(f"target {target} has -inf logit (masked position)")
    zm = z - z.max()
    lse = np.log(np.exp(zm).sum())
    loss = lse - zm[target]
    grad = np.exp(zm - lse)
    grad[target] -= 1.0
    return float(loss), grad


def adamw_step(groups: Iterable[ParamGroup], cfg: AdamWConfig) -> None:
    """One AdamW update with decoupled weight decay; zeroes grads afterwards."""
    groups = list(groups)
    for g in groups:
        if not np.isfinite(g.grad).all():
            raise NonFiniteGradient(f"non-finite gradient in group {g.name!r}")
    lr = cfg.learning_rate
    for g in groups:
        g.step += 1
        g.adam_m *= cfg.beta1
        g.adam_m += (1.0 - cfg.beta1) * g.grad
        g.adam_v *= cfg.beta2
        g.adam_v += (1.0 - cfg.beta2) * g.grad * g.grad
        mhat = g.adam_m / (1.0 - cfg.beta1**g.step)
        vhat = g.adam_v / (1.0 - cfg.beta2**g.step)
        g.value -= lr * cfg.weight_decay * g.value
        g.value -= lr * mhat / (np.sqrt(vhat) + cfg.epsilon)
        g.zero_grad()


def linear_lr(
    base_lr: float, step: int, total_steps: int, warmup_frac: float = 0.0
) -> float:
    """Linear schedule: optional warmup from 0 to base, then decay to 0."""
    if total_steps <= 0:
        return base_lr
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps == warmup:
        return base_lr
    frac = (total_steps - step) / (total_steps - warmup)
    return base_lr * max(0.0, frac)


def grad_check(
    loss_fn: Callable[[], float],
    groups: Sequence[ParamGroup],
    eps: float = 1e-5,
    max_coords_per_group: int = 10,
    seed: int = 0,
    atol: float = 1e-7,
    fallback_eps: float = 1e-3,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must run forward AND backward for the current parameter
    values (accumulating into ``group.grad``) and return the scalar loss.
    Checks up to ``max_coords_per_group`` sampled coordinates per group and
    returns the worst relative error.

    Two guards keep the check meaningful where finite differences are
    dominated by float64 roundoff rather than by the gradient itself:
    coordinates where both sides fall below ``atol`` count as exact
    (structurally-zero gradients), and coordinates that disagree at ``eps``
    are re-measured at the coarser ``fallback_eps`` with the better
    agreement reported. A wrong analytic gradient disagrees at every step
    size; only noise-regime mismatches are rescued.
    """
    for g in groups:
        g.zero_grad()
    loss_fn()
    analytic = {g.name: g.grad.copy() for g in groups}
    rng = np.random.default_rng(seed)

    def central_diff(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = loss_fn()
        flat[i] = orig - step
        f_minus = loss_fn()
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * step)

    def rel_err(numeric, ana):
        if abs(numeric) < atol and abs(ana) < atol:
            return 0.0
        return abs(numeric - ana) / (abs(numeric) + abs(ana))

    worst = 0.0
    for g in groups:
        size = g.value.size
        if size <= max_coords_per_group:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords_per_group, replace=False))
        flat = g.value.reshape(-1)
        ana_flat = analytic[g.name].reshape(-1)
        for i in coords:
            err = rel_err(central_diff(flat, i, eps), ana_flat[i])
            if err > 1e-6 and fallback_eps != eps:
                err = min(err, rel_err(central_diff(flat, i, fallback_eps), ana_flat[i]))
            worst = max(worst, err)
    for g in groups:
        g.zero_grad()
    return worst


def save_checkpoint(path, groups: Iterable[ParamGroup]) -> None:
    """Write parameter values: magic, version, then one record per group."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for g in groups:
            name = g.name.encode("utf-8")
            rows, cols = g.value.shape
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(g.value, dtype="<f4").tobytes())


def load_checkpoint(path) -> list[ParamGroup]:
    """Read a checkpoint; returns fresh groups with zeroed optimizer state."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a parameter checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    groups = []
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise FormatError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + name_len + 8 > len(blob):
            raise FormatError(f"{path}: truncated record for group at byte {pos}")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        nbytes = rows * cols * 4
        if pos + nbytes > len(blob):
            raise FormatError(f"{path}: truncated data for group {name!r}")
        data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=pos)
        pos += nbytes
        value = data.astype(np.float64).reshape(rows, cols)
        groups.append(ParamGroup(name, value))
    return groups
