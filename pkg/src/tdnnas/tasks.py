"""Synthetic planted-structure frame classification tasks.

Two generators stand in for real speech corpora:

* ``lagged-product``: ``y[t] = 1`` iff ``x[t-k][0] * x[t+k][0] > 0``.  Only a
  model that sees both offsets ``-k`` and ``+k`` can beat chance.
* ``planted-bottleneck``: labels are the argmax of a frozen teacher
  ``V relu(U splice(x, {-1, 0, 1})) + bias`` where ``U`` has ``r`` rows.

Frames are float32-representable so a dataset written to disk and read
back is identical to the in-memory one.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .numcore import Rng, Stream
from .tdnnf import Batch, CandidateSpec, Sequence, masked_loss, predict, splice

DATASET_MAGIC = b"TDNNAS-DS1"
DATASET_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    sequences: list[Sequence]
    feature_dim: int
    num_classes: int
    generator: str = "custom"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.sequences[i] for i in indices], self.feature_dim, self.num_classes,
                       self.generator, dict(self.params), self.seed)

    @property
    def provenance(self) -> dict:
        return {"generator": self.generator, "params": self.params, "seed": self.seed}

    def batches(self, batch_size: int, order=None):
        idx = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(idx), batch_size):
            yield Batch.stack([self.sequences[i] for i in idx[start:start + batch_size]])

    def frame_count(self) -> int:
        return int(sum(s.mask.sum() for s in self.sequences))


@dataclass
class Metrics:
    accuracy: float
    loss: float
    class_counts: list[int]
    class_correct: list[int]

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "loss": self.loss,
                "class_counts": self.class_counts, "class_correct": self.class_correct}


class FrameModel(Protocol):
    input_dim: int

    def logits(self, frames: np.ndarray) -> np.ndarray: ...


@dataclass
class TrainedModel:
    spec: CandidateSpec
    params: dict

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    def logits(self, frames):
        return predict(self.spec, self.params, frames)


@dataclass
class Teacher:
    u: np.ndarray  # (r, 3F)
    v: np.ndarray  # (classes, r)
    bias: np.ndarray  # (classes,)

    @property
    def input_dim(self) -> int:
        return self.u.shape[1] // 3

    def logits(self, frames):
        xs = splice(np.asarray(frames, dtype=np.float64), (-1, 0, 1))
        hidden = np.maximum(xs @ self.u.T, 0.0)
        return hidden @ self.v.T + self.bias


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _edge_mask(T: int, lag: int) -> np.ndarray:
    mask = np.zeros(T, dtype=bool)
    mask[lag:T - lag] = True
    return mask


def gen_lagged_product(seed: int, k: int = 2, n_seq: int = 2000, T_seq: int = 200, F: int = 8, part: int = 0) -> Dataset:
    if k < 1:
        raise ValueError("lag must be >= 1")
    if T_seq <= 2 * k:
        raise ValueError(f"sequence length {T_seq} must exceed twice the lag {k}")
    rng = Rng.for_stream(seed, Stream.DATA, part)
    mask = _edge_mask(T_seq, k)
    seqs = []
    for _ in range(n_seq):
        x = _f32(rng.normal((T_seq, F)))
        labels = np.zeros(T_seq, dtype=np.int64)
        prod = x[:T_seq - 2 * k, 0] * x[2 * k:, 0]
        labels[k:T_seq - k] = (prod > 0).astype(np.int64)
        seqs.append(Sequence(x, labels, mask.copy()))
    params = {"lag": k, "n_seq": n_seq, "T_seq": T_seq, "F": F, "part": part}
    return Dataset(seqs, F, 2, "lagged-product", params, seed)


def planted_teacher(seed: int, r: int, F: int, classes: int, probe: np.ndarray | None = None, min_frac: float = 0.05) -> Teacher:
    """Draw the teacher; the output bias is resampled until every class
    takes at least ``min_frac`` of the probe frames."""
    if not 1 <= r <= F:
        raise ValueError(f"planted rank must satisfy 1 <= r <= F, got r={r}, F={F}")
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = Rng.for_stream(seed, Stream.TEACHER)
    # U is drawn in factored form: rank-r linear taps {-1,0} feeding rank-r
    # affine taps {0,+1}, so a factored student of width r can express it
    w0, w1 = rng.normal((F, r)), rng.normal((F, r))
    a0, a1 = rng.normal((r, r)), rng.normal((r, r))
    u = np.concatenate([a0 @ w1.T, a0 @ w0.T + a1 @ w1.T, a1 @ w0.T], axis=1)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = rng.normal((classes, r))
    if probe is None:
        probe = Rng.for_stream(seed, Stream.TEACHER, 1).normal((4096, F))
    hidden = np.maximum(splice(probe, (-1, 0, 1)) @ u.T, 0.0)
    base = hidden @ v.T
    centre = -base.mean(axis=0)
    spread = base.std(axis=0).mean()
    for _ in range(1000):
        bias = centre + 0.5 * spread * rng.normal(classes)
        hist = np.bincount((base + bias).argmax(axis=1), minlength=classes) / len(base)
        if hist.min() >= min_frac:
            return Teacher(u, v, bias)
    raise RuntimeError("could not draw a teacher with a non-degenerate class histogram")


def gen_planted_bottleneck(seed: int, r: int = 4, n_seq: int = 2000, T_seq: int = 200, F: int = 8,
                           classes: int = 4, part: int = 0) -> Dataset:
    if T_seq <= 2:
        raise ValueError("sequence length must exceed 2")
    teacher = planted_teacher(seed, r, F, classes)
    rng = Rng.for_stream(seed, Stream.DATA, part)
    mask = _edge_mask(T_seq, 1)
    seqs = []
    for _ in range(n_seq):
        x = _f32(rng.normal((T_seq, F)))
        labels = teacher.logits(x).argmax(axis=-1).astype(np.int64)
        labels[~mask] = 0
        seqs.append(Sequence(x, labels, mask.copy()))
    params = {"rank": r, "n_seq": n_seq, "T_seq": T_seq, "F": F, "classes": classes, "part": part}
    return Dataset(seqs, F, classes, "planted-bottleneck", params, seed)


GENERATORS = {
    "lagged-product": lambda seed, p: gen_lagged_product(seed, p["lag"], p["n_seq"], p["T_seq"], p["F"], p.get("part", 0)),
    "planted-bottleneck": lambda seed, p: gen_planted_bottleneck(seed, p["rank"], p["n_seq"], p["T_seq"], p["F"], p["classes"], p.get("part", 0)),
}


def regenerate(provenance: dict) -> Dataset:
    try:
        gen = GENERATORS[provenance["generator"]]
    except KeyError:
        raise ValueError(f"unknown generator {provenance.get('generator')!r}") from None
    return gen(provenance["seed"], provenance["params"])


def teacher_for(dataset: Dataset) -> Teacher:
    if dataset.generator != "planted-bottleneck":
        raise ValueError("only planted-bottleneck datasets have a teacher")
    p = dataset.params
    return planted_teacher(dataset.seed, p["rank"], p["F"], p["classes"])


def split_heldout(dataset: Dataset, frac: float = 0.05, rng: Rng | None = None) -> tuple[Dataset, Dataset]:
    """Partition whole sequences into (train, heldout)."""
    if not 0.0 < frac < 1.0:
        raise ValueError("heldout fraction must lie in (0, 1)")
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two sequences to split")
    if rng is None:
        rng = Rng.for_stream(dataset.seed, Stream.SPLIT)
    n_held = int(np.floor(frac * n + 0.5))
    n_held = min(max(n_held, 1), n - 1)
    perm = rng.permutation(n)
    held = np.sort(perm[:n_held])
    train = np.sort(perm[n_held:])
    return dataset.subset(train), dataset.subset(held)


def evaluate(model: FrameModel, dataset: Dataset, batch_size: int = 64) -> Metrics:
    if model.input_dim != dataset.feature_dim:
        raise ValueError(f"model expects {model.input_dim} features, dataset has {dataset.feature_dim}")
    C = dataset.num_classes
    loss_sum, frames = 0.0, 0
    counts = np.zeros(C, dtype=np.int64)
    correct = np.zeros(C, dtype=np.int64)
    for batch in dataset.batches(batch_size):
        logits = model.logits(batch.frames)
        n = int(batch.mask.sum())
        if n == 0:
            continue
        loss, _ = masked_loss(logits, batch.labels, batch.mask, "ce")
        loss_sum += loss * n
        frames += n
        y = batch.labels[batch.mask]
        hit = logits.argmax(axis=-1)[batch.mask] == y
        counts += np.bincount(y, minlength=C)
        correct += np.bincount(y[hit], minlength=C)
    if frames == 0:
        raise ValueError("no supervised frames")
    return Metrics(float(correct.sum() / frames), loss_sum / frames, counts.tolist(), correct.tolist())


# -- dataset file -----------------------------------------------------------


def dataset_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    prov = json.dumps(dataset.provenance, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<IIIII", DATASET_VERSION, dataset.feature_dim, dataset.num_classes, len(dataset), len(prov)))
    buf.write(prov)
    for s in dataset.sequences:
        T = len(s)
        buf.write(struct.pack("<I", T))
        buf.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(s.labels, dtype="<i4").tobytes())
        buf.write(np.packbits(np.asarray(s.mask, dtype=bool), bitorder="little").tobytes())
    return buf.getvalue()


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(dataset))


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if not data.startswith(DATASET_MAGIC):
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    pos = len(DATASET_MAGIC)
    version, F, classes, n_seq, plen = struct.unpack_from("<IIIII", data, pos)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    pos += 20
    prov = json.loads(data[pos:pos + plen])
    pos += plen
    seqs = []
    for _ in range(n_seq):
        (T,) = struct.unpack_from("<I", data, pos)
        pos += 4
        frames = np.frombuffer(data, dtype="<f4", count=T * F, offset=pos).reshape(T, F).astype(np.float64)
        pos += 4 * T * F
        labels = np.frombuffer(data, dtype="<i4", count=T, offset=pos).astype(np.int64)
        pos += 4 * T
        nbytes = (T + 7) // 8
        mask = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos), bitorder="little")[:T].astype(bool)
        pos += nbytes
        seqs.append(Sequence(frames, labels, mask))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return Dataset(seqs, F, classes, prov["generator"], prov["params"], prov["seed"])
