import json
import math
import os
import struct
import subprocess

import numpy as np
import pytest

import avss


def write_avtrace(path, layers, point="block_output", dtype="f64"):
    """Independent AVTRACE v1 writer built on struct."""
    header = {
        "model_id": "py-writer",
        "layer_count": len(layers),
        "dtype": dtype,
        "activation_point": point,
        "creator": "test_smoke",
        "created": "",
        "layers": [{"index": i, "samples": a.shape[0], "width": a.shape[1]}
                   for i, a in enumerate(layers)],
    }
    text = json.dumps(header).encode()
    code = "<%dd" if dtype == "f64" else "<%df"
    with open(path, "wb") as f:
        f.write(b"AVTR")
        f.write(struct.pack("<IQ", 1, len(text)))
        f.write(text)
        for a in layers:
            flat = np.ascontiguousarray(a).ravel().tolist()
            f.write(struct.pack(code % len(flat), *flat))


def fixture_layers():
    r = math.sqrt(16.0 / 6.0)
    return [np.array([0, 0, 0, 0, 2, -2, 2, -2], dtype=float).reshape(8, 1),
            np.array([0, 0, r, -r, r, -r, r, -r], dtype=float).reshape(8, 1)]


def test_reader_accepts_struct_written_file(tmp_path):
    rng = np.random.default_rng(0)
    layers = [rng.normal(size=(20, 6)) for _ in range(3)]
    path = tmp_path / "t.avtrace"
    write_avtrace(path, layers, point="mlp_output")
    trace = avss.read_trace(str(path))
    assert trace.layer_count == 3
    assert trace.activation_point == "mlp_output"
    for i, a in enumerate(layers):
        assert np.array_equal(trace.layer(i), a)
    assert avss.validate_file(str(path)) == []


def test_f32_and_writer_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    layers = [rng.normal(size=(10, 4)).astype(np.float32) for _ in range(2)]
    path = tmp_path / "f.avtrace"
    write_avtrace(path, layers, dtype="f32")
    trace = avss.read_trace(str(path))
    assert trace.dtype == "f32"
    out = tmp_path / "g.avtrace"
    avss.write_trace(trace, str(out))
    assert avss.read_trace(str(out)) == trace
    assert out.read_bytes()[:4] == b"AVTR"


def test_validation_errors(tmp_path):
    bad = tmp_path / "nan.avtrace"
    write_avtrace(bad, [np.array([[1.0], [float("nan")]])])
    with pytest.raises(avss.ValidationError):
        avss.read_trace(str(bad))
    assert avss.validate_file(str(bad))[0].startswith("layer 0: finite")
    junk = tmp_path / "junk.avtrace"
    junk.write_bytes(b"nope")
    with pytest.raises(avss.FormatError):
        avss.read_trace(str(junk))
    full = tmp_path / "full.avtrace"
    write_avtrace(full, fixture_layers())
    (tmp_path / "cut.avtrace").write_bytes(full.read_bytes()[:-5])
    with pytest.raises(avss.CorruptionError):
        avss.read_trace(str(tmp_path / "cut.avtrace"))


def test_stats_match_numpy():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, size=10000)
    mean, var = avss.mean_variance(x)
    assert mean == pytest.approx(x.mean(), rel=1e-12)
    assert var == pytest.approx(x.var(), rel=1e-12)
    assert avss.sparsity(np.array([0.0, 0.005, -0.02, 0.5]), 0.01) == 0.5
    assert avss.normalize([1.0, 3.0]) == [0.25, 0.75]
    assert avss.normalize([0.0, 0.0]) == [0.5, 0.5]


def test_analyze_fixture_and_plan():
    trace = avss.TraceSet(fixture_layers())
    report = json.loads(avss.analyze(trace))
    avss_scores = [layer["avss"] for layer in report["layers"]]
    assert avss_scores == pytest.approx([4.0, 8.0], rel=1e-14)
    assert [layer["norm_avss"] for layer in report["layers"]] == pytest.approx([1 / 3, 2 / 3])
    plan = json.loads(avss.plan(avss.analyze(trace), parameter=0.5))
    assert plan["pruned_layers"] == [0]
    assert avss.report_csv(avss.analyze(trace)).startswith("layer_index,")
    with pytest.raises(avss.UsageError):
        avss.analyze(trace, policy="greedy")
    with pytest.raises(avss.DomainError):
        avss.analyze(trace, epsilon=-1.0)
    uneven = avss.TraceSet([np.ones((4, 2)), np.ones((8, 1))])
    assert avss.validate_trace(uneven) == ["layer 1: sample_count: sample count 8 differs from 4"]
    with pytest.raises(avss.ValidationError):
        avss.analyze(uneven)


def test_toy_model_end_to_end(tmp_path):
    corpus = "the small model reads the same words again. " * 200
    cfg = {"n_layers": "3", "d_model": "16", "n_heads": "2", "context_len": "16",
           "train_steps": "10"}
    ckpt = avss.train(corpus, cfg)
    assert ckpt.n_layers == 3
    assert len(ckpt.train_loss_history) == 10
    assert ckpt == avss.train(corpus, cfg)
    path = str(tmp_path / "m.avckpt")
    avss.write_checkpoint(ckpt, path)
    assert avss.read_checkpoint(path) == ckpt

    base = avss.perplexity(ckpt, corpus[:500])
    assert 1.0 <= base <= 256.0
    assert avss.perplexity(ckpt, corpus[:500], skip=set()) == base
    trace = avss.capture(ckpt, corpus[:100])
    assert trace.layer_count == 3
    assert trace.layer(0).shape == (100, 16)
    report = json.loads(avss.analyze(trace))
    assert sum(layer["norm_avss"] for layer in report["layers"]) == pytest.approx(1.0, abs=1e-12)


def test_uniform_head_perplexity():
    ckpt = avss.initialize({"n_layers": "1", "d_model": "8", "n_heads": "2", "context_len": "8"})
    ppl = avss.perplexity(ckpt, bytes(range(64)))
    assert 200 < ppl < 320


@pytest.mark.skipif(not os.environ.get("AVSS_CLI"), reason="CLI path not provided")
def test_cli_reads_python_written_trace(tmp_path):
    path = tmp_path / "t.avtrace"
    write_avtrace(path, fixture_layers())
    cli = os.environ["AVSS_CLI"]
    assert subprocess.run([cli, "validate", str(path)]).returncode == 0
    out = tmp_path / "r.json"
    assert subprocess.run([cli, "analyze", str(path), "--out", str(out)]).returncode == 0
    assert json.loads(out.read_text())["layers"][1]["avss"] == pytest.approx(8.0)
    assert subprocess.run([cli, "analyze", str(path)]).returncode == 1
