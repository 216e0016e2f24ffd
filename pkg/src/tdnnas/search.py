"""Architecture search procedures and their baselines.

Seed policy (all streams derive from ``config.seed``):

* supernet init ``(INIT)``, minibatch order ``(SHUFFLE)``, Gumbel noise
  ``(GUMBEL)``, stage-1 one-hot draws ``(ARCH_SAMPLE, 0)``, random-search
  draws ``(ARCH_SAMPLE, 1)``;
* retraining candidate ``i`` of a space uses ``(INIT, i)`` and
  ``(SHUFFLE, i)``, so the oracle, random search and derived-architecture
  retraining all train a given candidate identically.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .formats import format_spec, spec_to_dict
from .numcore import OptimState, Rng, Stream, semi_orthogonal_step, sgd_step, softmax
from .supernet import (
    ArchKey,
    ArchWeights,
    SearchSpace,
    arch_grads_from_scores,
    constrain_supernet,
    init_supernet,
    layer_expected_counts,
    one_hot_weights,
    penalized_loss,
    sample_one_hot,
    supernet_backward,
    supernet_forward_loss,
    supernet_logits,
)
from .tasks import Dataset, Metrics, TrainedModel, evaluate, split_heldout
from .tdnnf import CandidateSpec, init_params, layer_names, model_backward, model_forward_loss, model_param_count

log = logging.getLogger(__name__)

METHODS = ("softmax-darts", "gumbel-darts", "pipe-softmax", "pipe-gumbel", "random", "exhaustive")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class SearchConfig:
    method: str = "pipe-gumbel"
    eta: float = 0.0
    t_start: float = 1.0
    t_end: float = 0.03
    samples: int = 4
    epochs_search: int = 3
    epochs_arch: int = 3
    epochs_retrain: int = 3
    heldout_frac: float = 0.05
    seed: int = 0
    batch_size: int = 8
    arch_batch_size: int = 8
    lr: float = 0.01
    lr_final_ratio: float = 1.0
    arch_lr: float = 0.003
    momentum: float = 0.9
    orth_every: int = 4
    orth_nu: float = 0.125
    loss: str = "ce"
    arch_on_train: bool = False
    random_samples: int = 5
    enum_cap: int = 256

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0 < self.t_end <= self.t_start:
            raise ValueError("temperatures must satisfy 0 < t_end <= t_start")
        if not 0 < self.heldout_frac < 1:
            raise ValueError("heldout_frac must lie in (0, 1)")
        for name in ("samples", "epochs_search", "epochs_arch", "epochs_retrain", "batch_size",
                     "arch_batch_size", "orth_every", "random_samples", "enum_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValueError("lr_final_ratio must lie in (0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskData:
    train: Dataset
    heldout: Dataset
    test: Dataset

    @classmethod
    def from_split(cls, train_full: Dataset, test: Dataset, frac: float = 0.05, seed: int = 0) -> "TaskData":
        train, held = split_heldout(train_full, frac, Rng.for_stream(seed, Stream.SPLIT))
        return cls(train, held, test)


@dataclass
class RunRecord:
    system_id: str
    method: str
    eta: float
    seed: int
    config: dict
    spec: dict
    arch: str
    epochs: list[dict] = field(default_factory=list)
    heldout: dict | None = None
    test: dict | None = None
    param_count: int = 0
    wall_time: float = 0.0
    trajectory: str | None = None
    config_hash: str = ""

    def as_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        d = self.as_dict()
        d.pop("wall_time")
        return d


@dataclass
class SearchResult:
    params: dict[str, np.ndarray]
    arch: ArchWeights
    spec: CandidateSpec
    record: RunRecord
    trajectory: list[dict]
    stage1_params: dict[str, np.ndarray] | None = None
    stage1_counts: dict[ArchKey, np.ndarray] | None = None


@dataclass
class RetrainResult:
    spec: CandidateSpec
    params: dict[str, np.ndarray]
    epochs: list[dict]
    heldout: Metrics
    test: Metrics
    param_count: int
    index: int = 0

    @property
    def model(self) -> TrainedModel:
        return TrainedModel(self.spec, self.params)


# -- schedules and derivation -----------------------------------------------


def anneal_temperature(step: int, total_steps: int, t_start: float = 1.0, t_end: float = 0.03) -> float:
    """Exponential schedule from ``t_start`` (step 0) to ``t_end`` (last step)."""
    if not 0 < t_end <= t_start:
        raise ValueError("temperatures must satisfy 0 < t_end <= t_start")
    if total_steps == 0:
        return t_end
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return t_end
    return t_start * (t_end / t_start) ** (step / total_steps)


def decayed_lr(lr: float, ratio: float, step: int, total_steps: int) -> float:
    """Exponential decay from ``lr`` at step 0 to ``lr * ratio`` at the last step."""
    if total_steps <= 1:
        return lr
    return lr * ratio ** (min(step, total_steps - 1) / (total_steps - 1))


def select_index(weights, costs) -> int:
    """Argmax of ``weights``; exact ties go to the lower cost, then the lower index."""
    v = np.asarray(weights)
    tied = np.flatnonzero(v == v.max())
    return int(min(tied, key=lambda i: (costs[i], i)))


def derive_architecture(arch: ArchWeights, space: SearchSpace) -> CandidateSpec:
    """Per searched axis keep the highest-weighted candidate.

    Exact ties go to the candidate with fewer parameters, then the lower index.
    """
    lam = arch.softmax()
    for k, v in lam.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite architecture weights at {k}")
    layers = []
    for l, ls in enumerate(space.layers):
        pick = {}
        counts = layer_expected_counts(space, l, lam)[1] if ls.searched_axes else {}
        for a in ls.searched_axes:
            pick[a] = select_index(lam[(l, a)], counts[a])
        layers.append(ls.layer_spec(pick))
    return CandidateSpec(tuple(layers), space.input_dim, space.output_dim, space.hidden_dim)


# -- supernet training --------------------------------------------------------


class SupernetModel:
    def __init__(self, space: SearchSpace, params, lam):
        self.space, self.params, self.lam = space, params, lam
        self.input_dim = space.input_dim

    def logits(self, frames):
        return supernet_logits(self.space, self.params, self.lam, frames)[0]


def _check_finite(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(step, loss)


def _average_step(space, params, samples: list[dict], batch, loss_kind: str, eta: float, temperature: float):
    """Mean loss and gradients over architecture-weight samples."""
    J = len(samples)
    total_loss, base_total = 0.0, 0.0
    p_grads: dict[str, np.ndarray] = {}
    a_grads: dict[ArchKey, np.ndarray] = {}
    for lam in samples:
        base, cache = supernet_forward_loss(space, params, lam, batch, loss_kind)
        g, scores = supernet_backward(cache)
        ag = arch_grads_from_scores(lam, scores, temperature)
        value, pen = penalized_loss(base, lam, space, eta, temperature) if eta > 0 else (base, {})
        for k, v in g.items():
            p_grads[k] = p_grads.get(k, 0.0) + v / J
        for k in sorted(set(ag) | set(pen)):
            a_grads[k] = a_grads.get(k, 0.0) + (ag.get(k, 0.0) + pen.get(k, 0.0)) / J
        total_loss += value / J
        base_total += base / J
    return base_total, total_loss, p_grads, a_grads


def _mask_frozen(grads: dict[str, np.ndarray], frozen: Mapping[str, np.ndarray] | None) -> None:
    if not frozen:
        return
    for name, mask in frozen.items():
        if name in grads:
            grads[name] = np.where(mask, 0.0, grads[name])


def _trajectory_rows(arch: ArchWeights, step: int, temperature: float) -> list[dict]:
    return [
        {"step": step, "layer": l + 1, "axis": a, "lambda": softmax(v).tolist(), "T": temperature}
        for (l, a), v in sorted(arch.log_alpha.items())
    ]


def _supernet_metrics(space, params, arch: ArchWeights, data: TaskData) -> dict:
    m = evaluate(SupernetModel(space, params, arch.softmax()), data.heldout)
    return {"heldout_loss": m.loss, "heldout_accuracy": m.accuracy}


def _finish(config: SearchConfig, space: SearchSpace, params, arch: ArchWeights, data: TaskData, epochs, trajectory,
            t0: float, **extra) -> SearchResult:
    spec = derive_architecture(arch, space)
    one_hot = SupernetModel(space, params, one_hot_weights(space, spec))
    record = RunRecord(
        system_id=f"{config.method}-eta{config.eta:g}-seed{config.seed}",
        method=config.method,
        eta=config.eta,
        seed=config.seed,
        config=config.as_dict(),
        spec=spec_to_dict(spec),
        arch=format_spec(spec),
        epochs=epochs,
        heldout=evaluate(one_hot, data.heldout).as_dict(),
        test=evaluate(one_hot, data.test).as_dict(),
        param_count=model_param_count(spec),
        wall_time=time.perf_counter() - t0,
    )
    return SearchResult(params, arch, spec, record, trajectory, **extra)


def joint_darts_search(config: SearchConfig, space: SearchSpace, data: TaskData, *,
                       frozen: Mapping[str, np.ndarray] | None = None,
                       params: dict[str, np.ndarray] | None = None) -> SearchResult:
    """Softmax or Gumbel DARTS: model and architecture weights share every step."""
    if config.method not in ("softmax-darts", "gumbel-darts"):
        raise ValueError(f"joint search does not run method {config.method!r}")
    t0 = time.perf_counter()
    gumbel = config.method == "gumbel-darts"
    if params is None:
        params = init_supernet(space, Rng.for_stream(config.seed, Stream.INIT))
    arch = ArchWeights.uniform(space)
    opt = OptimState(config.lr, config.momentum)
    arch_opt = OptimState(config.arch_lr, config.momentum)
    shuffle = Rng.for_stream(config.seed, Stream.SHUFFLE)
    noise = Rng.for_stream(config.seed, Stream.GUMBEL)
    n_batches = -(-len(data.train) // config.batch_size)
    total = config.epochs_search * n_batches
    step = 0
    trajectory, epochs = [], []
    for epoch in range(config.epochs_search):
        losses = []
        for batch in data.train.batches(config.batch_size, shuffle.permutation(len(data.train))):
            if gumbel:
                T = anneal_temperature(step, max(total - 1, 0), config.t_start, config.t_end)
                samples = [arch.gumbel(T, noise)[0] for _ in range(config.samples)]
            else:
                T = 1.0
                samples = [arch.softmax()]
            base, value, p_grads, a_grads = _average_step(space, params, samples, batch, config.loss, config.eta, T)
            _check_finite(value, step)
            _mask_frozen(p_grads, frozen)
            opt.lr = decayed_lr(config.lr, config.lr_final_ratio, step, total)
            sgd_step(params, p_grads, opt)
            sgd_step(arch.log_alpha, a_grads, arch_opt)
            step += 1
            if step % config.orth_every == 0:
                constrain_supernet(space, params, config.orth_nu)
            trajectory.extend(_trajectory_rows(arch, step, T))
            losses.append(base)
        epochs.append({"stage": "search", "epoch": epoch + 1, "train_loss": float(np.mean(losses)),
                       **_supernet_metrics(space, params, arch, data)})
        log.info("%s epoch %d: %s", config.method, epoch + 1, epochs[-1])
    return _finish(config, space, params, arch, data, epochs, trajectory, t0)


def pipelined_search(config: SearchConfig, space: SearchSpace, data: TaskData, *,
                     stage1: Mapping[str, np.ndarray] | None = None) -> SearchResult:
    """Stage 1 trains shared weights under uniform one-hot architectures; stage 2
    freezes them and fits only the architecture weights on held-out data.

    Passing ``stage1`` (e.g. ``result.stage1_params`` of an earlier run with the
    same seed) skips stage 1, so a penalty sweep can share one weight-training run.
    """
    if config.method not in ("pipe-softmax", "pipe-gumbel"):
        raise ValueError(f"pipelined search does not run method {config.method!r}")
    arch_data = data.train if config.arch_on_train else data.heldout
    if len(arch_data) == 0:
        raise ValueError("held-out split is empty")
    t0 = time.perf_counter()
    gumbel = config.method == "pipe-gumbel"
    params = init_supernet(space, Rng.for_stream(config.seed, Stream.INIT))
    arch = ArchWeights.uniform(space)
    opt = OptimState(config.lr, config.momentum)
    shuffle = Rng.for_stream(config.seed, Stream.SHUFFLE)
    picks = Rng.for_stream(config.seed, Stream.ARCH_SAMPLE, 0)
    counts = {k: np.zeros(len(v), dtype=np.int64) for k, v in arch.log_alpha.items()}
    stage1_total = config.epochs_search * -(-len(data.train) // config.batch_size)
    epochs, trajectory = [], []
    step = 0
    if stage1 is not None:
        missing = set(params) ^ set(stage1)
        if missing:
            raise ValueError(f"stage-1 weights do not match the space: {sorted(missing)}")
        params = {k: np.array(v, dtype=np.float64) for k, v in stage1.items()}
        # replay the shuffle draws so stage 2 sees the same batch order as a full run
        for _ in range(config.epochs_search):
            shuffle.permutation(len(data.train))
        step, counts = stage1_total, None
    for epoch in range(config.epochs_search if stage1 is None else 0):
        losses = []
        for batch in data.train.batches(config.batch_size, shuffle.permutation(len(data.train))):
            lam = sample_one_hot(space, picks)
            for k, v in lam.items():
                counts[k] += v.astype(np.int64)
            loss, cache = supernet_forward_loss(space, params, lam, batch, config.loss)
            _check_finite(loss, step)
            grads, _ = supernet_backward(cache)
            opt.lr = decayed_lr(config.lr, config.lr_final_ratio, step, stage1_total)
            sgd_step(params, grads, opt)
            step += 1
            if step % config.orth_every == 0:
                constrain_supernet(space, params, config.orth_nu)
            losses.append(loss)
        epochs.append({"stage": "weights", "epoch": epoch + 1, "train_loss": float(np.mean(losses))})
        log.info("%s stage 1 epoch %d: %s", config.method, epoch + 1, epochs[-1])
    stage1 = {k: v.copy() for k, v in params.items()}

    arch_opt = OptimState(config.arch_lr, config.momentum)
    noise = Rng.for_stream(config.seed, Stream.GUMBEL)
    n_batches = -(-len(arch_data) // config.arch_batch_size)
    total = config.epochs_arch * n_batches
    arch_step = 0
    for epoch in range(config.epochs_arch):
        losses = []
        for batch in arch_data.batches(config.arch_batch_size, shuffle.permutation(len(arch_data))):
            if gumbel:
                T = anneal_temperature(arch_step, max(total - 1, 0), config.t_start, config.t_end)
                samples = [arch.gumbel(T, noise)[0] for _ in range(config.samples)]
            else:
                T = 1.0
                samples = [arch.softmax()]
            base, value, _, a_grads = _average_step(space, params, samples, batch, config.loss, config.eta, T)
            _check_finite(value, step + arch_step)
            sgd_step(arch.log_alpha, a_grads, arch_opt)
            arch_step += 1
            trajectory.extend(_trajectory_rows(arch, step + arch_step, T))
            losses.append(base)
        epochs.append({"stage": "arch", "epoch": epoch + 1, "arch_loss": float(np.mean(losses)),
                       **_supernet_metrics(space, params, arch, data)})
        log.info("%s stage 2 epoch %d: %s", config.method, epoch + 1, epochs[-1])
    return _finish(config, space, params, arch, data, epochs, trajectory, t0,
                   stage1_params=stage1, stage1_counts=counts)


def run_search(config: SearchConfig, space: SearchSpace, data: TaskData) -> SearchResult:
    if config.method in ("softmax-darts", "gumbel-darts"):
        return joint_darts_search(config, space, data)
    if config.method in ("pipe-softmax", "pipe-gumbel"):
        return pipelined_search(config, space, data)
    raise ValueError(f"{config.method!r} is not a differentiable search method")


# -- retraining and baselines -----------------------------------------------


def retrain(spec: CandidateSpec, data: TaskData, config: SearchConfig, *, index: int = 0,
            epochs: int | None = None) -> RetrainResult:
    """Train ``spec`` from a fresh initialisation keyed by ``(config.seed, index)``."""
    epochs = config.epochs_retrain if epochs is None else epochs
    params = init_params(spec, Rng.for_stream(config.seed, Stream.INIT, index))
    opt = OptimState(config.lr, config.momentum)
    shuffle = Rng.for_stream(config.seed, Stream.SHUFFLE, index)
    constrained = [
        layer_names(i)[0] for i in range(spec.num_layers)
        if params[layer_names(i)[0]].shape[1] <= params[layer_names(i)[0]].shape[0]
    ]
    total = epochs * -(-len(data.train) // config.batch_size)
    history = []
    step = 0
    for epoch in range(epochs):
        losses = []
        for batch in data.train.batches(config.batch_size, shuffle.permutation(len(data.train))):
            loss, cache = model_forward_loss(spec, params, batch, config.loss)
            _check_finite(loss, step)
            opt.lr = decayed_lr(config.lr, config.lr_final_ratio, step, total)
            sgd_step(params, model_backward(cache), opt)
            step += 1
            if step % config.orth_every == 0:
                for name in constrained:
                    params[name][...] = semi_orthogonal_step(params[name], config.orth_nu)
            losses.append(loss)
        held = evaluate(TrainedModel(spec, params), data.heldout)
        history.append({"stage": "retrain", "epoch": epoch + 1, "train_loss": float(np.mean(losses)),
                        "heldout_loss": held.loss, "heldout_accuracy": held.accuracy})
    model = TrainedModel(spec, params)
    return RetrainResult(spec, params, history, evaluate(model, data.heldout), evaluate(model, data.test),
                         model_param_count(spec), index)


def _rank_key(r: RetrainResult):
    return (-r.heldout.accuracy, r.param_count, r.index)


def _retrain_job(args):
    spec, data, config, index = args
    return retrain(spec, data, config, index=index)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("TDNNAS_THREADS", "1")))
    except ValueError:
        return 1


def _retrain_many(jobs: list, workers: int | None = None) -> list[RetrainResult]:
    workers = _workers() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_retrain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_retrain_job, jobs))


def random_search(config: SearchConfig, space: SearchSpace, data: TaskData, n: int | None = None) -> tuple[RetrainResult, list[RetrainResult]]:
    """Retrain ``n`` uniformly drawn candidates and keep the best on held-out data."""
    n = config.random_samples if n is None else n
    if n < 1:
        raise ValueError("random search needs at least one sample")
    rng = Rng.for_stream(config.seed, Stream.ARCH_SAMPLE, 1)
    specs = [space.sample(rng) for _ in range(n)]
    results = _retrain_many([(s, data, config, space.index_of(s)) for s in specs])
    return min(results, key=_rank_key), results


def exhaustive_oracle(config: SearchConfig, space: SearchSpace, data: TaskData, epochs: int | None = None,
                      cap: int | None = None) -> list[RetrainResult]:
    """Retrain every candidate; returns them ranked best-first on held-out accuracy."""
    cap = config.enum_cap if cap is None else cap
    size = space.size()
    if size > cap:
        raise ValueError(f"search space has {size} candidates, exceeds enumeration cap {cap}")
    jobs = [(space.candidate(i), data, config, i) for i in range(size)]
    if epochs is not None:
        config = SearchConfig(**{**config.as_dict(), "epochs_retrain": epochs})
        jobs = [(s, data, config, i) for s, _, _, i in jobs]
    return sorted(_retrain_many(jobs), key=_rank_key)


def retrain_record(result: RetrainResult, config: SearchConfig, method: str, system_id: str, wall_time: float) -> RunRecord:
    return RunRecord(
        system_id=system_id,
        method=method,
        eta=config.eta,
        seed=config.seed,
        config=config.as_dict(),
        spec=spec_to_dict(result.spec),
        arch=format_spec(result.spec),
        epochs=result.epochs,
        heldout=result.heldout.as_dict(),
        test=result.test.as_dict(),
        param_count=result.param_count,
        wall_time=wall_time,
    )
