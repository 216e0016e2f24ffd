"""Weight-sharing supernets over context offsets, bottleneck dims and skips.

Each hidden layer has up to four independent search axes: ``left`` (c in
``{-c, 0}``), ``right`` (d in ``{0, d}``), ``dim`` (bottleneck width) and
``skip``.  An axis with one choice is fixed; a layer's candidate set is the
cross product of its axes.  Every searched ``(layer, axis)`` pair owns a
log-domain weight vector whose simplex weights mix that axis' candidates.

Shared storage per layer::

    w_lin   (n_left_blocks,  D_in, n_max)   one block per left offset, block 0 = offset 0
    w_aff   (n_right_blocks, H,    n_max)   one block per right offset, block 0 = offset 0
    bias    (H,)

A candidate with width n uses columns ``[:n]`` of every block; a candidate
with left context c reads blocks ``{c, 0}``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .numcore import Rng, Stream, gumbel_noise, random_semi_orthogonal, semi_orthogonal_step, softmax, softmax_jacobian_vjp
from .tdnnf import (
    Batch,
    CandidateSpec,
    LayerSpec,
    _mm,
    _outer_sum,
    layer_names,
    layer_param_count,
    masked_loss,
    shift_frames,
    shift_frames_backward,
)

AXES = ("left", "right", "dim", "skip")
SIMPLEX_TOL = 1e-9

ArchKey = tuple[int, str]


@dataclass(frozen=True)
class LayerSpace:
    left: tuple[int, ...] = (0,)
    right: tuple[int, ...] = (0,)
    dims: tuple[int, ...] = (8,)
    skip: tuple[bool, ...] = (False,)

    def __post_init__(self):
        for axis in AXES:
            values = tuple(getattr(self, _attr(axis)))
            object.__setattr__(self, _attr(axis), values)
            if not values:
                raise ValueError(f"axis {axis!r} has no choices")
            if len(set(values)) != len(values):
                raise ValueError(f"axis {axis!r} has duplicate choices {values}")
            if list(values) != sorted(values):
                raise ValueError(f"axis {axis!r} choices must be sorted ascending, got {values}")
        if min(self.left) < 0 or min(self.right) < 0:
            raise ValueError("context offsets are non-negative magnitudes")
        if min(self.dims) < 1:
            raise ValueError("bottleneck dims must be >= 1")

    def choices(self, axis: str) -> tuple:
        return getattr(self, _attr(axis))

    @property
    def searched_axes(self) -> tuple[str, ...]:
        return tuple(a for a in AXES if len(self.choices(a)) >= 2)

    @property
    def size(self) -> int:
        return int(np.prod([len(self.choices(a)) for a in AXES], dtype=object))

    @property
    def n_max(self) -> int:
        return max(self.dims)

    def left_blocks(self) -> tuple[int, ...]:
        """Offset magnitude stored in each w_lin block (block 0 is offset 0)."""
        return (0,) + tuple(c for c in self.left if c > 0)

    def right_blocks(self) -> tuple[int, ...]:
        return (0,) + tuple(d for d in self.right if d > 0)

    def layer_spec(self, idx: Mapping[str, int]) -> LayerSpec:
        return LayerSpec(
            left=self.left[idx.get("left", 0)],
            right=self.right[idx.get("right", 0)],
            dim=self.dims[idx.get("dim", 0)],
            skip=self.skip[idx.get("skip", 0)],
        )

    def choice_index(self, layer: LayerSpec) -> dict[str, int]:
        values = {"left": layer.left, "right": layer.right, "dim": layer.dim, "skip": layer.skip}
        out = {}
        for axis in AXES:
            try:
                out[axis] = self.choices(axis).index(values[axis])
            except ValueError:
                raise ValueError(f"{axis}={values[axis]!r} is not a choice of this layer") from None
        return out


def _attr(axis: str) -> str:
    return "dims" if axis == "dim" else axis


@dataclass(frozen=True)
class SearchSpace:
    layers: tuple[LayerSpace, ...]
    input_dim: int
    output_dim: int
    hidden_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("search space needs at least one layer")
        for i, ls in enumerate(self.layers):
            if any(ls.skip) and self.layer_input_dim(i) != self.hidden_dim:
                raise ValueError(f"layer {i + 1}: skip requires equal adjacent widths")

    def layer_input_dim(self, index: int) -> int:
        return self.input_dim if index == 0 else self.hidden_dim

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def searched(self) -> tuple[ArchKey, ...]:
        return tuple((l, a) for l, ls in enumerate(self.layers) for a in ls.searched_axes)

    def size(self) -> int:
        return search_space_size(self)

    def _radices(self) -> list[tuple[int, str, int]]:
        return [(l, a, len(ls.choices(a))) for l, ls in enumerate(self.layers) for a in AXES]

    def candidate(self, index: int) -> CandidateSpec:
        """Decode a mixed-radix candidate index (last axis varies fastest)."""
        if not 0 <= index < self.size():
            raise IndexError(f"candidate index {index} outside space of size {self.size()}")
        picks: list[dict[str, int]] = [{} for _ in self.layers]
        rest = index
        for l, a, radix in reversed(self._radices()):
            rest, picks[l][a] = divmod(rest, radix)
        return self._spec([ls.layer_spec(p) for ls, p in zip(self.layers, picks)])

    def index_of(self, spec: CandidateSpec) -> int:
        if len(spec.layers) != self.num_layers:
            raise ValueError("layer count mismatch between spec and space")
        index = 0
        picks = [ls.choice_index(layer) for ls, layer in zip(self.layers, spec.layers)]
        for l, a, radix in self._radices():
            index = index * radix + picks[l][a]
        return index

    def candidates(self) -> Iterator[CandidateSpec]:
        per_layer = [
            [ls.layer_spec(dict(zip(AXES, combo))) for combo in itertools.product(*(range(len(ls.choices(a))) for a in AXES))]
            for ls in self.layers
        ]
        for layers in itertools.product(*per_layer):
            yield self._spec(list(layers))

    def _spec(self, layers: list[LayerSpec]) -> CandidateSpec:
        return CandidateSpec(tuple(layers), self.input_dim, self.output_dim, self.hidden_dim)

    def sample(self, rng: Rng) -> CandidateSpec:
        """Uniform draw from the space (independent uniform choice per axis)."""
        layers = []
        for ls in self.layers:
            idx = {a: int(rng.integers(0, len(ls.choices(a)))) for a in AXES}
            layers.append(ls.layer_spec(idx))
        return self._spec(layers)

    def contains(self, spec: CandidateSpec) -> bool:
        try:
            self.index_of(spec)
        except ValueError:
            return False
        return (spec.input_dim, spec.output_dim, spec.hidden_dim) == (self.input_dim, self.output_dim, self.hidden_dim)


def search_space_size(space: SearchSpace) -> int:
    """Exact number of candidate architectures (arbitrary precision)."""
    total = 1
    for ls in space.layers:
        total *= ls.size
    return total


def candidate_param_count(input_dim: int, hidden_dim: int, layer: LayerSpec, dim_menu=None) -> int:
    """Parameters of one hidden layer; the skip choice adds none."""
    if layer.dim <= 0:
        raise ValueError(f"bottleneck dim must be positive, got {layer.dim}")
    if dim_menu is not None and layer.dim not in dim_menu:
        raise ValueError(f"bottleneck dim {layer.dim} not in menu {tuple(dim_menu)}")
    return layer_param_count(input_dim, hidden_dim, layer.left, layer.right, layer.dim)


def context_space(num_layers: int, d_max: int, input_dim: int, output_dim: int, hidden_dim: int, dim: int) -> SearchSpace:
    offsets = tuple(range(d_max + 1))
    layer = LayerSpace(left=offsets, right=offsets, dims=(dim,))
    return SearchSpace((layer,) * num_layers, input_dim, output_dim, hidden_dim)


def dim_space(num_layers: int, menu, input_dim: int, output_dim: int, hidden_dim: int,
              left: int | Sequence[int] = 1, right: int | Sequence[int] = 1) -> SearchSpace:
    """Widths from ``menu`` searched per layer; ``left``/``right`` fix each layer's
    context (one value for all layers or one per layer)."""
    lefts = (left,) * num_layers if isinstance(left, int) else tuple(left)
    rights = (right,) * num_layers if isinstance(right, int) else tuple(right)
    if len(lefts) != num_layers or len(rights) != num_layers:
        raise ValueError(f"need one context per layer ({num_layers})")
    dims = tuple(sorted(menu))
    layers = tuple(LayerSpace(left=(c,), right=(d,), dims=dims) for c, d in zip(lefts, rights))
    return SearchSpace(layers, input_dim, output_dim, hidden_dim)


# -- architecture weights ---------------------------------------------------


@dataclass
class ArchWeights:
    """Log-domain weights for every searched (layer, axis) pair."""

    log_alpha: dict[ArchKey, np.ndarray]

    @classmethod
    def uniform(cls, space: SearchSpace) -> "ArchWeights":
        return cls({(l, a): np.zeros(len(space.layers[l].choices(a))) for l, a in space.searched})

    def softmax(self) -> dict[ArchKey, np.ndarray]:
        return {k: softmax(v) for k, v in self.log_alpha.items()}

    def gumbel(self, temperature: float, rng: Rng) -> tuple[dict[ArchKey, np.ndarray], dict[ArchKey, np.ndarray]]:
        """One relaxed draw per key, independent across layers; returns (weights, noise)."""
        if not temperature > 0:
            raise ValueError("invalid temperature")
        lam, noise = {}, {}
        for k in sorted(self.log_alpha):
            g = gumbel_noise(rng.uniform_open(self.log_alpha[k].shape))
            noise[k] = g
            lam[k] = softmax((self.log_alpha[k] + g) / temperature)
        return lam, noise

    def tensors(self) -> dict[str, np.ndarray]:
        return {arch_tensor_name(k): v for k, v in sorted(self.log_alpha.items())}

    @classmethod
    def from_tensors(cls, space: SearchSpace, tensors: Mapping[str, np.ndarray]) -> "ArchWeights":
        out = {}
        for k in space.searched:
            name = arch_tensor_name(k)
            if name not in tensors:
                raise ValueError(f"missing architecture tensor {name!r}")
            out[k] = np.array(tensors[name], dtype=np.float64)
        return cls(out)


def arch_tensor_name(key: ArchKey) -> str:
    return f"arch.layer{key[0] + 1}.{key[1]}"


def one_hot_weights(space: SearchSpace, spec: CandidateSpec) -> dict[ArchKey, np.ndarray]:
    lam = {}
    for l, a in space.searched:
        v = np.zeros(len(space.layers[l].choices(a)))
        v[space.layers[l].choice_index(spec.layers[l])[a]] = 1.0
        lam[(l, a)] = v
    return lam


def sample_one_hot(space: SearchSpace, rng: Rng) -> dict[ArchKey, np.ndarray]:
    """Uniform one-hot draw per searched (layer, axis)."""
    lam = {}
    for l, a in space.searched:
        n = len(space.layers[l].choices(a))
        v = np.zeros(n)
        v[int(rng.integers(0, n))] = 1.0
        lam[(l, a)] = v
    return lam


def _layer_weights(space: SearchSpace, layer: int, lam: Mapping[ArchKey, np.ndarray]) -> dict[str, np.ndarray]:
    ls = space.layers[layer]
    out = {}
    for a in AXES:
        n = len(ls.choices(a))
        if n == 1:
            out[a] = np.ones(1)
            continue
        if (layer, a) not in lam:
            raise ValueError(f"missing weights for layer {layer + 1} axis {a!r}")
        v = np.asarray(lam[(layer, a)], dtype=np.float64)
        if v.shape != (n,):
            raise ValueError(f"layer {layer + 1} axis {a!r}: expected {n} weights, got shape {v.shape}")
        if np.any(v < -SIMPLEX_TOL) or abs(v.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"layer {layer + 1} axis {a!r}: weights off the simplex")
        out[a] = v
    return out


# -- parameters -------------------------------------------------------------


def init_supernet(space: SearchSpace, rng: Rng) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    H = space.hidden_dim
    for i, ls in enumerate(space.layers):
        d_in, n = space.layer_input_dim(i), ls.n_max
        kl, kr = len(ls.left_blocks()), len(ls.right_blocks())
        n_lin, n_aff, n_bias = layer_names(i)
        rows = kl * d_in
        if n <= rows:
            w = random_semi_orthogonal(rows, n, rng)
        else:
            w = rng.normal((rows, n)) / np.sqrt(rows)
        params[n_lin] = np.ascontiguousarray(w.reshape(kl, d_in, n))
        tr = 2 if max(ls.right) > 0 else 1
        params[n_aff] = rng.normal((kr, H, n)) * np.sqrt(2.0 / (tr * n))
        params[n_bias] = np.zeros(H)
    params["out.weight"] = rng.normal((space.output_dim, H)) * (0.1 / np.sqrt(H))
    params["out.bias"] = np.zeros(space.output_dim)
    return params


def constrain_supernet(space: SearchSpace, params: dict[str, np.ndarray], nu: float = 0.125) -> None:
    """One semi-orthogonal step on each layer's stacked linear factor, in place.

    Layers whose stacked factor is wider than tall are left alone.
    """
    for i in range(space.num_layers):
        w = params[layer_names(i)[0]]
        stacked = w.reshape(-1, w.shape[-1])
        if stacked.shape[1] <= stacked.shape[0]:
            w[...] = semi_orthogonal_step(stacked, nu).reshape(w.shape)


def candidate_params(space: SearchSpace, params: Mapping[str, np.ndarray], spec: CandidateSpec) -> dict[str, np.ndarray]:
    """Standalone candidate parameters cut out of the shared tensors."""
    out: dict[str, np.ndarray] = {}
    for i, (ls, layer) in enumerate(zip(space.layers, spec.layers)):
        ls.choice_index(layer)
        n_lin, n_aff, n_bias = layer_names(i)
        lb, rb = ls.left_blocks(), ls.right_blocks()
        w_lin = params[n_lin]
        if layer.left > 0:
            lin = np.concatenate([w_lin[lb.index(layer.left)], w_lin[0]], axis=0)[:, :layer.dim]
        else:
            lin = w_lin[0][:, :layer.dim]
        taps = [0] if layer.right == 0 else [0, rb.index(layer.right)]
        out[n_lin] = np.ascontiguousarray(lin)
        out[n_aff] = np.ascontiguousarray(params[n_aff][taps][:, :, :layer.dim])
        out[n_bias] = params[n_bias].copy()
    out["out.weight"] = params["out.weight"].copy()
    out["out.bias"] = params["out.bias"].copy()
    return out


def linear_factor(params: Mapping[str, np.ndarray], layer: int, dim: int | None = None) -> np.ndarray:
    """Stacked linear factor of a layer; ``dim`` selects the leading columns (a view)."""
    w = params[layer_names(layer)[0]]
    stacked = w.reshape(-1, w.shape[-1])
    return stacked if dim is None else stacked[:, :dim]


# -- mixture layer ----------------------------------------------------------


@dataclass
class SupernetLayerCache:
    layer: int
    weights: dict[str, np.ndarray]
    x: np.ndarray
    shifted_x: dict[int, np.ndarray]
    p0: np.ndarray
    pc: dict[int, np.ndarray]
    b: np.ndarray
    m: np.ndarray
    bm: np.ndarray
    shifted_bm: dict[int, np.ndarray]
    r0: np.ndarray
    rd: dict[int, np.ndarray]
    z: np.ndarray
    y: np.ndarray
    skip_weight: float
    w_lin: np.ndarray
    w_aff: np.ndarray
    choices: dict[str, tuple] = field(default_factory=dict)


def supernet_layer_forward(h_prev, lam: Mapping[ArchKey, np.ndarray], params: Mapping[str, np.ndarray], space: SearchSpace, layer: int):
    """``h = sum_i lambda_i * candidate_i(h_prev)`` for every searched axis of the layer."""
    ls = space.layers[layer]
    wts = _layer_weights(space, layer, lam)
    x = np.asarray(h_prev, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    n_lin, n_aff, n_bias = layer_names(layer)
    w_lin, w_aff, bias = params[n_lin], params[n_aff], params[n_bias]
    if x.shape[-1] != w_lin.shape[1]:
        raise ValueError(f"layer {layer + 1}: input has {x.shape[-1]} features, expected {w_lin.shape[1]}")
    lb, rb = ls.left_blocks(), ls.right_blocks()

    p0 = _mm(x, w_lin[0])
    shifted_x, pc = {}, {}
    b = p0 * wts["left"].sum()
    for lam_c, c in zip(wts["left"], ls.left):
        if c > 0:
            shifted_x[c] = shift_frames(x, -c)
            pc[c] = _mm(shifted_x[c], w_lin[lb.index(c)])
            b = b + lam_c * pc[c]

    m = np.zeros(ls.n_max)
    for lam_i, n in zip(wts["dim"], ls.dims):
        m[:n] += lam_i
    bm = b * m

    r0 = _mm(bm, w_aff[0].T)
    z = r0 * wts["right"].sum() + bias
    shifted_bm, rd = {}, {}
    for lam_d, d in zip(wts["right"], ls.right):
        if d > 0:
            shifted_bm[d] = shift_frames(bm, d)
            rd[d] = _mm(shifted_bm[d], w_aff[rb.index(d)].T)
            z = z + lam_d * rd[d]
    y = np.maximum(z, 0.0)
    skip_weight = float(sum(w for w, s in zip(wts["skip"], ls.skip) if s))
    h = y + skip_weight * x if skip_weight else y
    cache = SupernetLayerCache(
        layer=layer, weights=wts, x=x, shifted_x=shifted_x, p0=p0, pc=pc, b=b, m=m, bm=bm,
        shifted_bm=shifted_bm, r0=r0, rd=rd, z=z, y=y, skip_weight=skip_weight, w_lin=w_lin, w_aff=w_aff,
        choices={a: ls.choices(a) for a in AXES},
    )
    return (h[0] if np.ndim(h_prev) == 2 else h), cache


def supernet_layer_backward(cache: SupernetLayerCache, grad_h: np.ndarray):
    """Returns ``(grad_in, param_grads, scores)``.

    ``scores[axis][i]`` is the inner product of ``grad_h``'s pull-back with
    candidate i's output on that axis, i.e. ``dL/dlambda_i`` with the other
    axes held at their mixture.
    """
    if cache is None:
        raise ValueError("missing cache")
    c = cache
    g = np.asarray(grad_h, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    if g.shape != c.y.shape:
        raise ValueError(f"layer {c.layer + 1}: grad shape {g.shape} does not match output {c.y.shape}")
    n_lin, n_aff, n_bias = layer_names(c.layer)
    scores: dict[str, np.ndarray] = {}

    g_x = c.skip_weight * g if c.skip_weight else np.zeros_like(c.x)
    skip_choices = _choices_from(c, "skip")
    if len(skip_choices) > 1:
        gy, gx = float(np.vdot(g, c.y)), float(np.vdot(g, c.x))
        scores["skip"] = np.array([gy + (gx if s else 0.0) for s in skip_choices])

    gz = g * (c.z > 0)
    g_bias = gz.sum(axis=(0, 1))
    lam_r = c.weights["right"]
    right = _choices_from(c, "right")
    rb = _blocks(right)
    g_aff = np.zeros_like(c.w_aff)
    g_aff[0] = lam_r.sum() * _outer_sum(gz, c.bm)
    g_bm = lam_r.sum() * _mm(gz, c.w_aff[0])
    s0 = float(np.vdot(gz, c.r0))
    s_right = []
    for lam_d, d in zip(lam_r, right):
        if d > 0:
            k = rb.index(d)
            g_aff[k] = lam_d * _outer_sum(gz, c.shifted_bm[d])
            g_bm = g_bm + shift_frames_backward(lam_d * _mm(gz, c.w_aff[k]), d)
            s_right.append(s0 + float(np.vdot(gz, c.rd[d])))
        else:
            s_right.append(s0)
    if len(right) > 1:
        scores["right"] = np.array(s_right)

    dims = _choices_from(c, "dim")
    if len(dims) > 1:
        g_m = (g_bm * c.b).sum(axis=(0, 1))
        csum = np.concatenate([[0.0], np.cumsum(g_m)])
        scores["dim"] = np.array([csum[n] for n in dims])
    g_b = g_bm * c.m

    lam_l = c.weights["left"]
    left = _choices_from(c, "left")
    lb = _blocks(left)
    g_lin = np.zeros_like(c.w_lin)
    g_lin[0] = lam_l.sum() * _outer_sum(c.x, g_b)
    g_x = g_x + lam_l.sum() * _mm(g_b, c.w_lin[0].T)
    s0 = float(np.vdot(g_b, c.p0))
    s_left = []
    for lam_c, cc in zip(lam_l, left):
        if cc > 0:
            k = lb.index(cc)
            g_lin[k] = lam_c * _outer_sum(c.shifted_x[cc], g_b)
            g_x = g_x + shift_frames_backward(lam_c * _mm(g_b, c.w_lin[k].T), -cc)
            s_left.append(s0 + float(np.vdot(g_b, c.pc[cc])))
        else:
            s_left.append(s0)
    if len(left) > 1:
        scores["left"] = np.array(s_left)

    grads = {n_lin: g_lin, n_aff: g_aff, n_bias: g_bias}
    if np.ndim(grad_h) == 2:
        g_x = g_x[0]
    return g_x, grads, scores


def _choices_from(cache: SupernetLayerCache, axis: str) -> tuple:
    return cache.choices[axis]


def _blocks(offsets) -> tuple[int, ...]:
    return (0,) + tuple(o for o in offsets if o > 0)


def arch_grad_softmax(grad_h, cache: SupernetLayerCache) -> dict[ArchKey, np.ndarray]:
    """Gradient w.r.t. log-alpha of every searched axis of one layer."""
    if cache is None:
        raise ValueError("missing cache")
    _, _, scores = supernet_layer_backward(cache, grad_h)
    return {(cache.layer, a): softmax_jacobian_vjp(cache.weights[a], s) for a, s in scores.items()}


def arch_grad_gumbel(grad_hs, caches, temperature: float) -> dict[ArchKey, np.ndarray]:
    """Average over J relaxed samples of the tempered softmax Jacobian term."""
    if not temperature > 0:
        raise ValueError("invalid temperature")
    if len(grad_hs) != len(caches) or not caches:
        raise ValueError("need one gradient per cached sample")
    total: dict[ArchKey, np.ndarray] = {}
    for g, cache in zip(grad_hs, caches):
        if cache is None:
            raise ValueError("missing cache")
        _, _, scores = supernet_layer_backward(cache, g)
        for a, s in scores.items():
            v = softmax_jacobian_vjp(cache.weights[a], s, temperature)
            key = (cache.layer, a)
            total[key] = total.get(key, 0.0) + v
    return {k: v / len(caches) for k, v in total.items()}


# -- whole network ----------------------------------------------------------


@dataclass
class SupernetCache:
    layers: list[SupernetLayerCache]
    hidden: np.ndarray
    logits_grad: np.ndarray
    out_weight: np.ndarray


def supernet_logits(space: SearchSpace, params: Mapping[str, np.ndarray], lam: Mapping[ArchKey, np.ndarray], frames: np.ndarray):
    h = np.asarray(frames, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    caches = []
    for i in range(space.num_layers):
        h, cache = supernet_layer_forward(h, lam, params, space, i)
        caches.append(cache)
    logits = _mm(h, params["out.weight"].T) + params["out.bias"]
    return logits, h, caches


def supernet_forward_loss(space: SearchSpace, params, lam, batch, loss: str = "ce"):
    batch = Batch.of(batch)
    logits, h, caches = supernet_logits(space, params, lam, batch.frames)
    value, g_logits = masked_loss(logits, batch.labels, batch.mask, loss)
    return value, SupernetCache(caches, h, g_logits, params["out.weight"])


def supernet_backward(cache: SupernetCache):
    """Returns ``(param_grads, scores)`` with ``scores[(layer, axis)] = dL/dlambda``."""
    grads = {
        "out.weight": _outer_sum(cache.logits_grad, cache.hidden),
        "out.bias": cache.logits_grad.sum(axis=(0, 1)),
    }
    scores: dict[ArchKey, np.ndarray] = {}
    g = _mm(cache.logits_grad, cache.out_weight)
    for lc in reversed(cache.layers):
        g, layer_grads, layer_scores = supernet_layer_backward(lc, g)
        grads.update(layer_grads)
        for a, s in layer_scores.items():
            scores[(lc.layer, a)] = s
    return grads, scores


def arch_grads_from_scores(lam, scores, temperature: float = 1.0) -> dict[ArchKey, np.ndarray]:
    return {k: softmax_jacobian_vjp(lam[k], s, temperature) for k, s in scores.items()}


# -- resource penalty -------------------------------------------------------


def layer_expected_counts(space: SearchSpace, layer: int, lam: Mapping[ArchKey, np.ndarray]):
    """Expected layer parameter count and per-axis conditional counts.

    With one searched axis the conditional counts are exactly the candidates'
    parameter counts ``C_i``; with several they are expectations over the
    other axes, so the penalty is the exact expected layer size.
    """
    ls = space.layers[layer]
    wts = _layer_weights(space, layer, lam)
    d_in, H = space.layer_input_dim(layer), space.hidden_dim
    cond = {a: np.zeros(len(ls.choices(a))) for a in ls.searched_axes}
    expected = 0.0
    for combo in itertools.product(*(range(len(ls.choices(a))) for a in AXES)):
        idx = dict(zip(AXES, combo))
        spec = ls.layer_spec(idx)
        count = layer_param_count(d_in, H, spec.left, spec.right, spec.dim)
        prob = float(np.prod([wts[a][idx[a]] for a in AXES]))
        expected += prob * count
        for a in cond:
            others = float(np.prod([wts[o][idx[o]] for o in AXES if o != a]))
            cond[a][idx[a]] += others * count
    return expected, cond


def penalized_loss(base_loss: float, lam: Mapping[ArchKey, np.ndarray], space: SearchSpace, eta: float, temperature: float = 1.0):
    """``base_loss + eta * sum_{l,i} lambda_i^l C_i^l`` and its log-alpha gradient.

    ``temperature`` is 1 for softmax weights and T for relaxed Gumbel draws.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if eta == 0:
        return float(base_loss), {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in lam.items()}
    penalty = 0.0
    grads: dict[ArchKey, np.ndarray] = {}
    layers = sorted({l for l, _ in space.searched})
    for l in layers:
        expected, cond = layer_expected_counts(space, l, lam)
        penalty += expected
        for a, c in cond.items():
            grads[(l, a)] = softmax_jacobian_vjp(lam[(l, a)], eta * c, temperature)
    return float(base_loss) + eta * penalty, grads


def expected_param_count(space: SearchSpace, lam: Mapping[ArchKey, np.ndarray]) -> float:
    return sum(layer_expected_counts(space, l, lam)[0] for l in range(space.num_layers))


def init_supernet_for(space: SearchSpace, seed: int) -> dict[str, np.ndarray]:
    return init_supernet(space, Rng.for_stream(seed, Stream.INIT))
