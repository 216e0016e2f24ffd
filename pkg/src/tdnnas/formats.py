"""On-disk formats: architecture strings, checkpoints and text artifacts.

Architecture strings use the context-offset table notation, e.g.::

    {[1,3]}:{-1,1}; {4}:{0}; {[5,14]}:{-3,3}

``{[a,b]}:{-c,d}`` gives layers a..b left taps ``{-c,0}`` and right taps
``{0,d}``; ``{0}`` means no context on either side.  A group may carry a
bottleneck width ``/n`` (emitted only when widths differ across layers)
and a ``+skip`` flag.

Checkpoint layout (little-endian)::

    b"TDNNAS-CK1" | u32 version | u32 header_len | header JSON | payloads

The header lists ``{"name", "dtype", "shape"}`` for every tensor in name
order plus the config hash; payloads follow in the same order, row-major.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tdnnf import CandidateSpec, LayerSpec

CHECKPOINT_MAGIC = b"TDNNAS-CK1"
CHECKPOINT_VERSION = 1
SPEC_MAGIC = "TDNNAS-SPEC1"
RUN_MAGIC = "TDNNAS-RUN1"
TRAJECTORY_MAGIC = "TDNNAS-TRJ1"
METRICS_MAGIC = "TDNNAS-MET1"

_DTYPES = {"f32": "<f4", "f64": "<f8"}


class FormatError(ValueError):
    pass


class SpecParseError(ValueError):
    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at position {pos}: {text[:pos]}<<HERE>>{text[pos:]}")
        self.pos = pos


# -- architecture strings ---------------------------------------------------


def _layer_set(layers: list[int]) -> str:
    if len(layers) == 1:
        return f"{{{layers[0]}}}"
    if len(layers) == 2:
        return f"{{{layers[0]},{layers[1]}}}"
    return f"{{[{layers[0]},{layers[-1]}]}}"


def _context(layer: LayerSpec) -> str:
    if layer.left == 0 and layer.right == 0:
        return "{0}"
    left = f"-{layer.left}" if layer.left else "0"
    return f"{{{left},{layer.right}}}"


def format_spec(spec: CandidateSpec) -> str:
    show_dims = len({l.dim for l in spec.layers}) > 1

    def key(layer: LayerSpec):
        return layer.left, layer.right, layer.dim if show_dims else None, layer.skip

    groups: list[tuple[list[int], LayerSpec]] = []
    for i, layer in enumerate(spec.layers, start=1):
        if groups and key(groups[-1][1]) == key(layer):
            groups[-1][0].append(i)
        else:
            groups.append(([i], layer))
    parts = []
    for layers, layer in groups:
        text = f"{_layer_set(layers)}:{_context(layer)}"
        if show_dims:
            text += f"/{layer.dim}"
        if layer.skip:
            text += "+skip"
        parts.append(text)
    return "; ".join(parts)


class _Cursor:
    def __init__(self, text: str):
        self.text, self.pos = text, 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, s: str):
        self.skip_ws()
        if not self.text.startswith(s, self.pos):
            self.fail(f"expected {s!r}")
        self.pos += len(s)

    def accept(self, s: str) -> bool:
        self.skip_ws()
        if self.text.startswith(s, self.pos):
            self.pos += len(s)
            return True
        return False

    def integer(self) -> int:
        self.skip_ws()
        start = self.pos
        if self.pos < len(self.text) and self.text[self.pos] == "-":
            self.pos += 1
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if self.pos == start or self.text[start:self.pos] == "-":
            self.pos = start
            self.fail("expected an integer")
        return int(self.text[start:self.pos])

    def fail(self, message: str):
        raise SpecParseError(message, self.text, self.pos)


def _parse_groups(text: str):
    cur = _Cursor(text)
    groups = []
    while True:
        cur.expect("{")
        layers: list[int] = []
        while True:
            if cur.accept("["):
                a = cur.integer()
                cur.expect(",")
                b = cur.integer()
                cur.expect("]")
                if b < a:
                    cur.fail(f"empty layer range [{a},{b}]")
                layers.extend(range(a, b + 1))
            else:
                layers.append(cur.integer())
            if not cur.accept(","):
                break
        cur.expect("}")
        cur.expect(":")
        cur.expect("{")
        first = cur.integer()
        if cur.accept(","):
            second = cur.integer()
            if first > 0:
                cur.fail("left offset must be <= 0")
            if second < 0:
                cur.fail("right offset must be >= 0")
            left, right = -first, second
        elif first == 0:
            left = right = 0
        else:
            cur.fail("single-offset context must be {0}")
        cur.expect("}")
        dim = cur.integer() if cur.accept("/") else None
        skip = cur.accept("+skip")
        groups.append((layers, left, right, dim, skip, cur.pos))
        if not cur.accept(";"):
            break
    cur.skip_ws()
    if cur.pos != len(text):
        cur.fail("unexpected trailing text")
    return groups


def parse_spec(text: str, *, input_dim: int, output_dim: int, hidden_dim: int, bottleneck: int | None = None) -> CandidateSpec:
    groups = _parse_groups(text)
    assigned: dict[int, LayerSpec] = {}
    for layers, left, right, dim, skip, pos in groups:
        if dim is None:
            if bottleneck is None:
                raise SpecParseError("group has no /dim and no default bottleneck was given", text, pos)
            dim = bottleneck
        for l in layers:
            if l < 1:
                raise SpecParseError(f"layer numbers start at 1, got {l}", text, pos)
            if l in assigned:
                raise SpecParseError(f"layer {l} assigned twice", text, pos)
            assigned[l] = LayerSpec(left, right, dim, skip)
    n = max(assigned)
    missing = sorted(set(range(1, n + 1)) - set(assigned))
    if missing:
        raise SpecParseError(f"layers {missing} not assigned", text, len(text))
    return CandidateSpec(tuple(assigned[i] for i in range(1, n + 1)), input_dim, output_dim, hidden_dim)


def spec_to_dict(spec: CandidateSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "output_dim": spec.output_dim,
        "hidden_dim": spec.hidden_dim,
        "layers": [{"left": l.left, "right": l.right, "dim": l.dim, "skip": l.skip} for l in spec.layers],
    }


def spec_from_dict(d: Mapping) -> CandidateSpec:
    layers = tuple(LayerSpec(int(l["left"]), int(l["right"]), int(l["dim"]), bool(l["skip"])) for l in d["layers"])
    return CandidateSpec(layers, int(d["input_dim"]), int(d["output_dim"]), int(d["hidden_dim"]))


# -- hashing ----------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


# -- checkpoints ------------------------------------------------------------


def checkpoint_bytes(tensors: Mapping[str, np.ndarray], config_digest: str) -> bytes:
    manifest, payloads = [], []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = "f32" if arr.dtype == np.float32 else "f64"
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    header = canonical_json({"config_hash": config_digest, "tensors": manifest}).encode()
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header, *payloads])


def parse_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], str]:
    if not data.startswith(CHECKPOINT_MAGIC[:-1]):
        raise FormatError("not a checkpoint file (bad magic)")
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"unsupported checkpoint version {data[:len(CHECKPOINT_MAGIC)]!r}")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 8:
        raise FormatError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen])
    except ValueError:
        raise FormatError("corrupt checkpoint header") from None
    pos += hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if pos + count * dt.itemsize > len(data):
            raise FormatError(f"truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32 if entry["dtype"] == "f32" else np.float64)
        pos += count * dt.itemsize
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes in checkpoint")
    return tensors, header["config_hash"]


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], config_digest: str) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors, config_digest))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    try:
        return parse_checkpoint(Path(path).read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


# -- text artifacts ---------------------------------------------------------


def _write_text(path, magic: str, body: str) -> None:
    Path(path).write_text(f"{magic}\n{body}")


def _read_text(path, magic: str) -> str:
    text = Path(path).read_text()
    first, _, body = text.partition("\n")
    family = magic.rstrip("0123456789")
    if not first.startswith(family):
        raise FormatError(f"{path}: expected a {family} file, found header {first[:32]!r}")
    if first != magic:
        raise FormatError(f"{path}: unsupported version {first!r}, this build reads {magic}")
    return body


def save_spec_file(path, spec: CandidateSpec, config_digest: str | None = None) -> None:
    body = dict(spec_to_dict(spec), arch=format_spec(spec))
    if config_digest is not None:
        body["config_hash"] = config_digest
    _write_text(path, SPEC_MAGIC, json.dumps(body, indent=2, sort_keys=True) + "\n")


def load_spec_file(path) -> CandidateSpec:
    body = json.loads(_read_text(path, SPEC_MAGIC))
    spec = spec_from_dict(body)
    if "arch" in body and format_spec(spec) != body["arch"]:
        raise FormatError(f"{path}: architecture string does not match layer table")
    return spec


def save_run_record(path, record: Mapping) -> None:
    _write_text(path, RUN_MAGIC, json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_run_record(path) -> dict:
    return json.loads(_read_text(path, RUN_MAGIC))


def save_metrics(path, metrics: Mapping) -> None:
    _write_text(path, METRICS_MAGIC, json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def load_metrics(path) -> dict:
    return json.loads(_read_text(path, METRICS_MAGIC))


def save_trajectory(path, rows, config_digest: str | None = None) -> None:
    head = [] if config_digest is None else [{"config_hash": config_digest}]
    _write_text(path, TRAJECTORY_MAGIC, "".join(canonical_json(r) + "\n" for r in head + list(rows)))


def load_trajectory(path) -> list[dict]:
    rows = [json.loads(line) for line in _read_text(path, TRAJECTORY_MAGIC).splitlines() if line.strip()]
    return [r for r in rows if set(r) != {"config_hash"}]


def artifact_config_hash(path) -> str | None:
    """Config hash recorded in any artifact written by this package, or None."""
    raw = Path(path).read_bytes()
    if raw.startswith(CHECKPOINT_MAGIC):
        return parse_checkpoint(raw)[1]
    first, _, body = raw.decode().partition("\n")
    if first == TRAJECTORY_MAGIC:
        line = body.split("\n", 1)[0]
        head = json.loads(line) if line.strip() else {}
        return head.get("config_hash") if set(head) == {"config_hash"} else None
    if first in (SPEC_MAGIC, RUN_MAGIC, METRICS_MAGIC):
        return json.loads(body).get("config_hash")
    raise FormatError(f"{path}: not a recognised artifact")
