"""Deterministic numeric primitives shared by every other module.

Matrices are plain ``numpy.ndarray`` objects in float64.  Randomness comes
from :class:`Rng`, a thin wrapper over numpy's counter-based Philox
generator whose key is derived from ``(root seed, stream id)`` through
``numpy.random.SeedSequence``::

    key = SeedSequence(entropy=seed, spawn_key=(stream, *sub))

so every purpose (data, init, Gumbel noise, ...) gets an independent,
replayable stream and one root seed reproduces a whole run.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Stream",
    "Rng",
    "softmax",
    "softmax_jacobian_vjp",
    "gumbel_noise",
    "gumbel_softmax_sample",
    "OptimState",
    "sgd_step",
    "finite_diff_grad",
    "semi_orthogonal_step",
    "orthonormality_error",
    "random_semi_orthogonal",
]


class Stream(enum.IntEnum):
    """Sub-stream identifiers; the integer value is part of the key."""

    DATA = 1
    INIT = 2
    GUMBEL = 3
    ARCH_SAMPLE = 4
    SHUFFLE = 5
    SPLIT = 6
    TEACHER = 7


_TWO_53 = float(2**53)


@dataclass
class Rng:
    """Seeded random stream.

    Identical ``(seed, stream, sub)`` and an identical call sequence give
    bit-identical output.
    """

    seed: int
    stream: int = 0
    sub: tuple[int, ...] = ()
    algorithm: str = field(default="philox4x64-10", init=False)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(self.stream), *self.sub))
        self._gen = np.random.Generator(np.random.Philox(ss))

    @classmethod
    def for_stream(cls, seed: int, stream: Stream | int, *sub: int) -> "Rng":
        return cls(seed=seed, stream=int(stream), sub=tuple(int(s) for s in sub))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform_open(self, size=None) -> np.ndarray:
        """Uniform draws strictly inside (0, 1)."""
        k = self._gen.integers(0, 2**53, size=size, dtype=np.int64)
        return (k.astype(np.float64) + 0.5) / _TWO_53

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian_vjp(lam: np.ndarray, scores: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Pull ``dL/dlambda`` back through ``lambda = softmax(z / T)``.

    Returns ``sum_i (1[i=k] lam_i - lam_i lam_k) / T * scores_i`` for each k.
    """
    lam = np.asarray(lam, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    return lam * (scores - np.dot(lam, scores)) / temperature


def gumbel_noise(u) -> np.ndarray:
    """Map uniforms in (0, 1) to standard Gumbel variables ``-log(-log u)``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("uniform samples must lie strictly in (0, 1)")
    return -np.log(-np.log(u))


def gumbel_softmax_sample(log_alpha, temperature: float, rng: Rng | None = None, *, noise=None) -> np.ndarray:
    """Relaxed categorical draw ``softmax((log_alpha + G) / T)``.

    ``noise`` overrides the Gumbel draw (used to replay or zero the noise).
    """
    if not temperature > 0:
        raise ValueError("invalid temperature")
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = gumbel_noise(rng.uniform_open(log_alpha.shape))
    return softmax((log_alpha + noise) / temperature)


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState) -> None:
    """Momentum SGD, in place: ``v <- m v - lr g``; ``p <- p + v``.

    Parameters absent from ``grads`` are left untouched.
    """
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {p.shape} vs grad {g.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.velocity[name] = v
        elif v.shape != p.shape:
            raise ValueError(f"velocity shape mismatch for {name!r}")
        v *= state.momentum
        v -= state.lr * g
        p += v


def finite_diff_grad(loss_fn: Callable[[], float], params, eps: float = 1e-6):
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``params``.

    ``params`` is an array or a mapping of arrays; entries are perturbed in
    place and restored, so ``loss_fn`` must read them by reference and must
    replay any randomness it consumes.
    """
    if isinstance(params, Mapping):
        return {k: finite_diff_grad(loss_fn, v, eps) for k, v in params.items()}
    p = params
    grad = np.zeros(p.shape, dtype=np.float64)
    flat = p.reshape(-1)
    if not np.shares_memory(flat, p):
        raise ValueError("params must be contiguous to be perturbed in place")
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn())
        flat[i] = orig - eps
        down = float(loss_fn())
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"non-finite loss at coordinate {i}")
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def semi_orthogonal_step(w: np.ndarray, nu: float = 0.125) -> np.ndarray:
    """One step of ``W <- W - nu W (W^T W - I)`` toward orthonormal columns."""
    w = np.asarray(w, dtype=np.float64)
    rows, cols = w.shape
    if cols > rows:
        raise ValueError(f"{rows}x{cols} matrix cannot be column-orthonormal")
    if not 0.0 < nu <= 0.5:
        raise ValueError("nu must lie in (0, 0.5]")
    p = w.T @ w
    p[np.diag_indices(cols)] -= 1.0
    return w - nu * (w @ p)


def orthonormality_error(w: np.ndarray) -> float:
    """Frobenius norm of ``W^T W - I``."""
    p = w.T @ w
    p[np.diag_indices(p.shape[0])] -= 1.0
    return float(np.linalg.norm(p))


def random_semi_orthogonal(rows: int, cols: int, rng: Rng) -> np.ndarray:
    if cols > rows:
        raise ValueError(f"{rows}x{cols} matrix cannot be column-orthonormal")
    q, r = np.linalg.qr(rng.normal((rows, cols)))
    # sign fix makes the draw a deterministic function of the gaussian sample
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)
