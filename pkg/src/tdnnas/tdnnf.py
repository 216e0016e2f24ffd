"""Factored TDNN layers with hand-written backward passes.

Activations are batched as ``(batch, time, features)`` float64 arrays.  A
layer reads two left taps ``{-c, 0}`` through the semi-orthogonal linear
factor and two right taps ``{0, d}`` through the affine factor::

    b[t] = [x[t-c], x[t]] @ W_lin            # (taps_left * D_in, n)
    z[t] = sum_j b[t + r_j] @ W_aff[j].T + bias
    y[t] = relu(z[t])

Frames outside the sequence are replaced by the nearest edge frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence as Seq

import numpy as np

from .numcore import Rng, Stream, random_semi_orthogonal

LOSS_KINDS = ("ce", "mse")


@dataclass(frozen=True)
class ContextSpec:
    left: int = 0
    right: int = 0

    def __post_init__(self):
        if self.left < 0 or self.right < 0:
            raise ValueError(f"context offsets must be non-negative magnitudes, got {self.left}, {self.right}")

    @property
    def left_offsets(self) -> tuple[int, ...]:
        return (-self.left, 0) if self.left > 0 else (0,)

    @property
    def right_offsets(self) -> tuple[int, ...]:
        return (0, self.right) if self.right > 0 else (0,)


@dataclass(frozen=True)
class LayerSpec:
    """One concrete hidden layer: left context c, right context d, bottleneck n."""

    left: int
    right: int
    dim: int
    skip: bool = False

    @property
    def context(self) -> ContextSpec:
        return ContextSpec(self.left, self.right)


@dataclass(frozen=True)
class CandidateSpec:
    layers: tuple[LayerSpec, ...]
    input_dim: int
    output_dim: int
    hidden_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a candidate needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.dim < 1:
                raise ValueError(f"layer {i + 1}: bottleneck dim must be >= 1")
            if layer.left < 0 or layer.right < 0:
                raise ValueError(f"layer {i + 1}: negative context magnitude")
            if layer.skip and self.layer_input_dim(i) != self.hidden_dim:
                raise ValueError(f"layer {i + 1}: skip requires equal adjacent widths")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer_input_dim(self, index: int) -> int:
        return self.input_dim if index == 0 else self.hidden_dim

    @property
    def receptive_field(self) -> tuple[int, int]:
        """Total (past, future) reach in frames."""
        return sum(l.left for l in self.layers), sum(l.right for l in self.layers)


@dataclass
class Sequence:
    frames: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not (len(self.frames) == len(self.labels) == len(self.mask)):
            raise ValueError("frames, labels and mask must share length")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class Batch:
    frames: np.ndarray  # (B, T, F)
    labels: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) bool

    @classmethod
    def stack(cls, seqs: Seq[Sequence]) -> "Batch":
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise ValueError("sequences in a batch must share length")
        return cls(
            frames=np.stack([np.asarray(s.frames, dtype=np.float64) for s in seqs]),
            labels=np.stack([np.asarray(s.labels, dtype=np.int64) for s in seqs]),
            mask=np.stack([np.asarray(s.mask, dtype=bool) for s in seqs]),
        )

    @classmethod
    def of(cls, data) -> "Batch":
        if isinstance(data, Batch):
            return data
        if isinstance(data, Sequence):
            return cls.stack([data])
        return cls.stack(list(data))


# -- splicing ---------------------------------------------------------------


def _as_batched(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def shift_frames(x: np.ndarray, offset: int) -> np.ndarray:
    """``out[:, t] = x[:, clamp(t + offset, 0, T - 1)]``."""
    if offset == 0:
        return x
    idx = np.clip(np.arange(x.shape[1]) + offset, 0, x.shape[1] - 1)
    return x[:, idx]


def shift_frames_backward(g: np.ndarray, offset: int) -> np.ndarray:
    """Adjoint of :func:`shift_frames`: scatter-add into the clamped sources."""
    if offset == 0:
        return g
    T = g.shape[1]
    out = np.zeros_like(g)
    if offset > 0:
        k = max(T - 1 - offset, 0)
        if k:
            out[:, offset:offset + k] = g[:, :k]
        out[:, T - 1] += g[:, k:].sum(axis=1)
    else:
        o = -offset
        k = max(T - 1 - o, 0)
        if k:
            out[:, 1:1 + k] = g[:, o + 1:o + 1 + k]
        out[:, 0] += g[:, :T - k].sum(axis=1)
    return out


def splice(seq: np.ndarray, offsets: Seq[int]) -> np.ndarray:
    """Concatenate edge-clamped shifted copies of ``seq`` along features.

    Accepts ``(T, D)`` or ``(B, T, D)`` input; returns the same rank.
    """
    if len(offsets) == 0:
        raise ValueError("splice needs at least one offset")
    x = np.asarray(seq, dtype=np.float64)
    squeeze = x.ndim == 2
    x = _as_batched(x)
    out = np.concatenate([shift_frames(x, o) for o in offsets], axis=-1)
    return out[0] if squeeze else out


def splice_backward(grad: np.ndarray, offsets: Seq[int], dim: int) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    squeeze = g.ndim == 2
    g = _as_batched(g)
    if g.shape[-1] != dim * len(offsets):
        raise ValueError("gradient width does not match offsets * dim")
    out = np.zeros(g.shape[:-1] + (dim,))
    for j, o in enumerate(offsets):
        out += shift_frames_backward(g[..., j * dim:(j + 1) * dim], o)
    return out[0] if squeeze else out


def _mm(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``(..., k) @ (k, m)`` through a single 2-D GEMM."""
    return (a.reshape(-1, a.shape[-1]) @ w).reshape(a.shape[:-1] + (w.shape[1],))


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum over frames of a[..., :, None] * b[..., None, :]``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# -- factored layer ---------------------------------------------------------


@dataclass
class LayerParams:
    w_lin: np.ndarray  # (taps_left * D_in, n)
    w_aff: np.ndarray  # (taps_right, H, n)
    bias: np.ndarray  # (H,)


@dataclass
class LayerCache:
    name: str
    context: ContextSpec
    params: LayerParams
    x: np.ndarray
    xl: np.ndarray
    b: np.ndarray
    z: np.ndarray
    consumed: bool = field(default=False)


def layer_param_count(input_dim: int, hidden_dim: int, left: int, right: int, dim: int) -> int:
    taps_left = 2 if left > 0 else 1
    taps_right = 2 if right > 0 else 1
    return taps_left * input_dim * dim + taps_right * dim * hidden_dim + hidden_dim


def _check_layer(x: np.ndarray, spec: ContextSpec, params: LayerParams, name: str) -> None:
    tl, tr = len(spec.left_offsets), len(spec.right_offsets)
    rows, n = params.w_lin.shape
    if rows != tl * x.shape[-1]:
        raise ValueError(f"{name}: linear factor has {rows} rows, expected {tl} taps x {x.shape[-1]} inputs")
    if params.w_aff.ndim != 3 or params.w_aff.shape[0] != tr or params.w_aff.shape[2] != n:
        raise ValueError(f"{name}: affine factor shape {params.w_aff.shape} inconsistent with {tr} taps, dim {n}")
    if params.bias.shape != (params.w_aff.shape[1],):
        raise ValueError(f"{name}: bias shape {params.bias.shape} inconsistent with affine factor")


def factored_layer_forward(seq: np.ndarray, spec: ContextSpec, params: LayerParams, name: str = "layer"):
    x = _as_batched(seq)
    _check_layer(x, spec, params, name)
    xl = splice(x, spec.left_offsets)
    b = _mm(xl, params.w_lin)
    z = np.broadcast_to(params.bias, b.shape[:-1] + params.bias.shape).copy()
    for j, o in enumerate(spec.right_offsets):
        z += _mm(shift_frames(b, o), params.w_aff[j].T)
    y = np.maximum(z, 0.0)
    cache = LayerCache(name=name, context=spec, params=params, x=x, xl=xl, b=b, z=z)
    return (y[0] if np.ndim(seq) == 2 else y), cache


def factored_layer_backward(cache: LayerCache, grad_out: np.ndarray):
    """Returns ``(grad_in, grad_w_lin, grad_w_aff, grad_bias)``."""
    if cache.consumed:
        raise RuntimeError(f"{cache.name}: stale cache (already consumed by a backward pass)")
    cache.consumed = True
    g = _as_batched(grad_out)
    if g.shape != cache.z.shape:
        raise ValueError(f"{cache.name}: grad shape {g.shape} does not match output {cache.z.shape}")
    p = cache.params
    gz = g * (cache.z > 0)
    g_bias = gz.sum(axis=(0, 1))
    g_aff = np.empty_like(p.w_aff)
    gb = np.zeros_like(cache.b)
    for j, o in enumerate(cache.context.right_offsets):
        g_aff[j] = _outer_sum(gz, shift_frames(cache.b, o))
        gb += shift_frames_backward(_mm(gz, p.w_aff[j]), o)
    g_lin = _outer_sum(cache.xl, gb)
    g_in = splice_backward(_mm(gb, p.w_lin.T), cache.context.left_offsets, cache.x.shape[-1])
    if np.ndim(grad_out) == 2:
        g_in = g_in[0]
    return g_in, g_lin, g_aff, g_bias


# -- candidate model --------------------------------------------------------


def layer_names(index: int) -> tuple[str, str, str]:
    return f"layer{index + 1}.w_lin", f"layer{index + 1}.w_aff", f"layer{index + 1}.bias"


def init_params(spec: CandidateSpec, rng: Rng) -> dict[str, np.ndarray]:
    """Fresh random parameters.

    The linear factor starts column-orthonormal when its shape allows it.
    """
    params: dict[str, np.ndarray] = {}
    H = spec.hidden_dim
    for i, layer in enumerate(spec.layers):
        ctx = layer.context
        rows = len(ctx.left_offsets) * spec.layer_input_dim(i)
        tr = len(ctx.right_offsets)
        n_lin, n_aff, n_bias = layer_names(i)
        if layer.dim <= rows:
            params[n_lin] = random_semi_orthogonal(rows, layer.dim, rng)
        else:
            params[n_lin] = rng.normal((rows, layer.dim)) / np.sqrt(rows)
        params[n_aff] = rng.normal((tr, H, layer.dim)) * np.sqrt(2.0 / (tr * layer.dim))
        params[n_bias] = np.zeros(H)
    params["out.weight"] = rng.normal((spec.output_dim, H)) * (0.1 / np.sqrt(H))
    params["out.bias"] = np.zeros(spec.output_dim)
    return params


def layer_params(params: dict[str, np.ndarray], index: int) -> LayerParams:
    n_lin, n_aff, n_bias = layer_names(index)
    return LayerParams(params[n_lin], params[n_aff], params[n_bias])


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def model_param_count(spec: CandidateSpec) -> int:
    total = 0
    for i, layer in enumerate(spec.layers):
        total += layer_param_count(spec.layer_input_dim(i), spec.hidden_dim, layer.left, layer.right, layer.dim)
    return total + spec.output_dim * spec.hidden_dim + spec.output_dim


def masked_loss(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray, kind: str = "ce"):
    """Masked mean frame loss and its gradient w.r.t. the logits.

    ``mse`` is ``sum_k (logit_k - onehot_k)^2`` averaged over frames.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    m = mask.astype(np.float64)
    count = m.sum()
    if count == 0:
        raise ValueError("no supervised frames")
    classes = logits.shape[-1]
    safe_labels = np.where(mask, labels, 0)
    onehot = np.eye(classes)[safe_labels]
    if kind == "ce":
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - logz
        frame = -(logp * onehot).sum(axis=-1)
        grad = (np.exp(logp) - onehot) * (m / count)[..., None]
    else:
        diff = logits - onehot
        frame = (diff**2).sum(axis=-1)
        grad = 2.0 * diff * (m / count)[..., None]
    return float((frame * m).sum() / count), grad


@dataclass
class ModelCache:
    spec: CandidateSpec
    layers: list[LayerCache]
    hidden: np.ndarray
    logits_grad: np.ndarray
    out_weight: np.ndarray


def model_logits(spec: CandidateSpec, params: dict[str, np.ndarray], frames: np.ndarray):
    h = _as_batched(frames)
    if h.shape[-1] != spec.input_dim:
        raise ValueError(f"input has {h.shape[-1]} features, model expects {spec.input_dim}")
    caches = []
    for i, layer in enumerate(spec.layers):
        y, cache = factored_layer_forward(h, layer.context, layer_params(params, i), name=f"layer{i + 1}")
        caches.append(cache)
        h = y + h if layer.skip else y
    logits = _mm(h, params["out.weight"].T) + params["out.bias"]
    return logits, h, caches


def model_forward_loss(spec: CandidateSpec, params: dict[str, np.ndarray], seq, loss: str = "ce"):
    """Forward a batch through the candidate and return ``(loss, cache)``."""
    batch = Batch.of(seq)
    logits, h, caches = model_logits(spec, params, batch.frames)
    value, g_logits = masked_loss(logits, batch.labels, batch.mask, loss)
    return value, ModelCache(spec, caches, h, g_logits, params["out.weight"])


def model_backward(cache: ModelCache) -> dict[str, np.ndarray]:
    spec = cache.spec
    grads: dict[str, np.ndarray] = {
        "out.weight": _outer_sum(cache.logits_grad, cache.hidden),
        "out.bias": cache.logits_grad.sum(axis=(0, 1)),
    }
    g = _mm(cache.logits_grad, cache.out_weight)
    for i in reversed(range(spec.num_layers)):
        g_in, g_lin, g_aff, g_bias = factored_layer_backward(cache.layers[i], g)
        if spec.layers[i].skip:
            g_in = g_in + g
        n_lin, n_aff, n_bias = layer_names(i)
        grads[n_lin], grads[n_aff], grads[n_bias] = g_lin, g_aff, g_bias
        g = g_in
    return grads


def predict(spec: CandidateSpec, params: dict[str, np.ndarray], frames: np.ndarray) -> np.ndarray:
    logits, _, _ = model_logits(spec, params, frames)
    return logits


def init_for(spec: CandidateSpec, seed: int, *sub: int) -> dict[str, np.ndarray]:
    return init_params(spec, Rng.for_stream(seed, Stream.INIT, *sub))
