import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdnnas.formats import (
    CHECKPOINT_MAGIC,
    FormatError,
    SpecParseError,
    artifact_config_hash,
    checkpoint_bytes,
    config_hash,
    format_spec,
    load_checkpoint,
    load_run_record,
    load_spec_file,
    load_trajectory,
    parse_checkpoint,
    parse_spec,
    save_checkpoint,
    save_run_record,
    save_spec_file,
    save_trajectory,
)
from tdnnas.tdnnf import CandidateSpec, LayerSpec

DIMS = dict(input_dim=40, output_dim=10, hidden_dim=64)


def baseline_spec():
    ctx = [(1, 1)] * 3 + [(0, 0)] + [(3, 3)] * 10
    return CandidateSpec(tuple(LayerSpec(c, d, 16) for c, d in ctx), **DIMS)


# -- architecture strings -------------------------------------------------------


def test_baseline_string():
    assert format_spec(baseline_spec()) == "{[1,3]}:{-1,1}; {4}:{0}; {[5,14]}:{-3,3}"


def test_no_context_single_layer():
    assert format_spec(CandidateSpec((LayerSpec(0, 0, 4),), 2, 2, 8)) == "{1}:{0}"


def test_one_sided_contexts_and_pairs():
    spec = CandidateSpec((LayerSpec(0, 2, 4), LayerSpec(0, 2, 4), LayerSpec(3, 0, 4)), 2, 2, 8)
    assert format_spec(spec) == "{1,2}:{0,2}; {3}:{-3,0}"


def test_widths_and_skip_are_shown_when_needed():
    spec = CandidateSpec((LayerSpec(1, 1, 4), LayerSpec(1, 1, 8, skip=True)), 2, 2, 8)
    text = format_spec(spec)
    assert text == "{1}:{-1,1}/4; {2}:{-1,1}/8+skip"
    assert parse_spec(text, input_dim=2, output_dim=2, hidden_dim=8) == spec


def test_parse_baseline():
    text = "{[1,3]}:{-1,1}; {4}:{0}; {[5,14]}:{-3,3}"
    assert parse_spec(text, bottleneck=16, **DIMS) == baseline_spec()


def test_parse_tolerates_whitespace():
    spec = parse_spec(" { [1, 2] } : { -1 , 2 } ", bottleneck=4, input_dim=2, output_dim=2, hidden_dim=8)
    assert spec.layers == (LayerSpec(1, 2, 4), LayerSpec(1, 2, 4))


@pytest.mark.parametrize("text,fragment", [
    ("{1}:{-1,1", "expected '}'"),
    ("{1}:{1,1}", "left offset"),
    ("{1}:{-1,-2}", "right offset"),
    ("{1}:{2}", "single-offset"),
    ("{[3,1]}:{0}", "empty layer range"),
    ("{1}:{0}; {1}:{0}", "assigned twice"),
    ("{2}:{0}", "not assigned"),
    ("{1}:{0} junk", "trailing"),
    ("{x}:{0}", "expected an integer"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(SpecParseError, match=fragment) as info:
        parse_spec(text, bottleneck=4, input_dim=2, output_dim=2, hidden_dim=8)
    assert "position" in str(info.value)
    assert 0 <= info.value.pos <= len(text)


def test_parse_error_points_at_offender():
    with pytest.raises(SpecParseError) as info:
        parse_spec("{1}:{-1,1}; {2}:{-1 1}", bottleneck=4, input_dim=2, output_dim=2, hidden_dim=8)
    assert info.value.pos == 20


def test_parse_requires_width_source():
    with pytest.raises(SpecParseError, match="bottleneck"):
        parse_spec("{1}:{0}", input_dim=2, output_dim=2, hidden_dim=8)


layer_specs = st.builds(LayerSpec, st.integers(0, 5), st.integers(0, 5), st.sampled_from([2, 4, 8]), st.booleans())


@settings(max_examples=1000, deadline=None)
@given(st.lists(layer_specs, min_size=1, max_size=16))
def test_string_round_trip(layers):
    # skip needs equal widths on both sides of the layer
    layers[0] = LayerSpec(layers[0].left, layers[0].right, layers[0].dim)
    spec = CandidateSpec(tuple(layers), 3, 2, 8)
    # uniform widths are omitted from the string, so the caller supplies them
    text = format_spec(spec)
    assert parse_spec(text, input_dim=3, output_dim=2, hidden_dim=8, bottleneck=layers[0].dim) == spec


# -- checkpoints -----------------------------------------------------------------


def tensors():
    rng = np.random.default_rng(0)
    return {"model.w": rng.normal(size=(3, 4)), "arch.x": rng.normal(size=5).astype(np.float32),
            "model.b": np.zeros(0)}


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.ck", tmp_path / "b.ck"
    save_checkpoint(a, tensors(), "abc")
    loaded, digest = load_checkpoint(a)
    save_checkpoint(b, loaded, digest)
    assert a.read_bytes() == b.read_bytes()
    assert digest == "abc"
    for k, v in tensors().items():
        assert loaded[k].dtype == v.dtype and np.array_equal(loaded[k], v)


def test_checkpoint_bytes_ignore_insertion_order():
    t = tensors()
    assert checkpoint_bytes(t, "h") == checkpoint_bytes(dict(reversed(list(t.items()))), "h")


def test_checkpoint_layout():
    raw = checkpoint_bytes({"w": np.arange(2.0)}, "h")
    assert raw.startswith(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack("<II", raw[10:18])
    header = json.loads(raw[18:18 + hlen])
    assert version == 1
    assert header["tensors"] == [{"name": "w", "dtype": "f64", "shape": [2]}]
    assert np.frombuffer(raw[18 + hlen:], "<f8").tolist() == [0.0, 1.0]


def test_checkpoint_rejects_other_versions():
    raw = bytearray(checkpoint_bytes({"w": np.ones(1)}, "h"))
    raw[9:10] = b"2"
    with pytest.raises(FormatError, match="version"):
        parse_checkpoint(bytes(raw))
    raw = bytearray(checkpoint_bytes({"w": np.ones(1)}, "h"))
    raw[10:14] = struct.pack("<I", 7)
    with pytest.raises(FormatError, match="version"):
        parse_checkpoint(bytes(raw))


def test_checkpoint_rejects_truncation_and_garbage():
    raw = checkpoint_bytes({"w": np.ones(4)}, "h")
    with pytest.raises(FormatError):
        parse_checkpoint(raw[:-3])
    with pytest.raises(FormatError):
        parse_checkpoint(b"hello world")


# -- text artifacts ----------------------------------------------------------------


def test_spec_file_round_trip(tmp_path):
    path = tmp_path / "m.spec"
    save_spec_file(path, baseline_spec(), "d1")
    assert load_spec_file(path) == baseline_spec()
    body = json.loads(path.read_text().split("\n", 1)[1])
    assert body["arch"] == "{[1,3]}:{-1,1}; {4}:{0}; {[5,14]}:{-3,3}"
    assert artifact_config_hash(path) == "d1"


def test_spec_file_detects_inconsistent_string(tmp_path):
    path = tmp_path / "m.spec"
    save_spec_file(path, baseline_spec())
    path.write_text(path.read_text().replace("{4}:{0}", "{4}:{-1,0}"))
    with pytest.raises(FormatError, match="does not match"):
        load_spec_file(path)


def test_text_artifact_version_check(tmp_path):
    path = tmp_path / "m.spec"
    save_spec_file(path, baseline_spec())
    path.write_text(path.read_text().replace("TDNNAS-SPEC1", "TDNNAS-SPEC2", 1))
    with pytest.raises(FormatError, match="unsupported version"):
        load_spec_file(path)
    with pytest.raises(FormatError, match="expected a TDNNAS-RUN"):
        load_run_record(path)


def test_trajectory_and_run_record(tmp_path):
    rows = [{"step": 0, "layer": 0, "axis": "left", "lambda": [0.5, 0.5]}]
    save_trajectory(tmp_path / "t.trj", rows, "d2")
    assert load_trajectory(tmp_path / "t.trj") == rows
    assert artifact_config_hash(tmp_path / "t.trj") == "d2"
    save_run_record(tmp_path / "r.json", {"config_hash": "d3", "x": 1})
    assert load_run_record(tmp_path / "r.json") == {"config_hash": "d3", "x": 1}
    assert artifact_config_hash(tmp_path / "r.json") == "d3"
    save_checkpoint(tmp_path / "c.ck", {"w": np.ones(1)}, "d4")
    assert artifact_config_hash(tmp_path / "c.ck") == "d4"


def test_config_hash_is_order_insensitive_and_value_sensitive():
    a = config_hash({"x": 1, "y": {"a": [1, 2]}})
    assert a == config_hash({"y": {"a": [1, 2]}, "x": 1})
    assert a != config_hash({"x": 2, "y": {"a": [1, 2]}})
    assert len(a) == 64
