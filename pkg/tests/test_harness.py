import json

import numpy as np
import pytest

from loopdyn import cli
from loopdyn import harness as H
from loopdyn import model as M
from loopdyn.errors import InvalidInputError, SpecError

SMALL_MODEL = "model: {d_model: 32, n_heads: 4, d_head: 8, recurrent_layers: 3, input_injection: true}\n"


def write(tmp_path, text, name="spec.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_spec_defaults(tmp_path):
    spec = H.load_spec(write(tmp_path, "kind: Classify\n"))
    assert spec.classifier.tau == 0.05 and spec.classifier.rho == 0.9
    assert spec.reference == 128 and spec.loops == 128 and spec.seeds == [0]
    assert spec.n_tokens == 32


def test_unknown_keys_rejected_with_location(tmp_path):
    with pytest.raises(SpecError) as exc:
        H.load_spec(write(tmp_path, "kind: Dynamics\nloopz: 3\n"))
    assert "loopz" in str(exc.value) and "line 2" in str(exc.value)
    with pytest.raises(SpecError) as exc:
        H.load_spec(write(tmp_path, "kind: Dynamics\nclassifier:\n  tua: 0.1\n"))
    assert exc.value.location.startswith("classifier.tua")
    with pytest.raises(SpecError) as exc:
        H.load_spec(write(tmp_path, "kind: Dynamics\nmodel: {d_modl: 8}\n"))
    assert "d_modl" in str(exc.value)


def test_parse_error_has_line_column(tmp_path):
    with pytest.raises(SpecError) as exc:
        H.load_spec(write(tmp_path, "kind: Dynamics\nseeds: [1, 2\n"))
    assert ":3:" in exc.value.location or ":2:" in exc.value.location


def test_schema_violations(tmp_path):
    for text, where in [
        ("kind: Nope\n", "kind"),
        ("kind: Dynamics\nseeds: []\n", "seeds"),
        ("kind: Dynamics\nloops: 0\n", "loops"),
        ("kind: Dynamics\nmodel: {d_model: 30}\n", "model"),
        ("kind: Dynamics\nclassifier: {tau: 2}\n", "classifier"),
        ("kind: Dynamics\ngrid: {schemes: [Foo]}\n", "grid.schemes"),
    ]:
        with pytest.raises(SpecError) as exc:
            H.load_spec(write(tmp_path, text))
        assert exc.value.location.startswith(where), text


def test_spec_round_trip(tmp_path):
    spec = H.load_spec(write(tmp_path, "kind: Metrics\n" + SMALL_MODEL + "loops: 4\nseeds: [3, 5]\nsink_k: 0\n"))
    text = spec.dumps()
    again = H.parse_spec(text)
    assert again == spec and again.dumps() == text


def test_emit_validates_csv(tmp_path):
    with pytest.raises(InvalidInputError):
        H.emit_outputs({"prop2_seed0.csv": "a,b\n1,2\n"}, tmp_path)
    with pytest.raises(InvalidInputError):
        H.emit_outputs({"prop2_seed0.csv": "layer,recurrence,lhs,rhs,holds\n1,2\n"}, tmp_path)
    paths = H.emit_outputs({"x.json": {"b": 1, "a": 2}}, tmp_path)
    assert paths[0].read_text() == '{\n "a": 2,\n "b": 1\n}\n'


def _spec(kind, loops=10, seeds=(0, 1), extra=""):
    return H.parse_spec(f"kind: {kind}\n" + SMALL_MODEL + f"loops: {loops}\nseeds: {list(seeds)}\nsequence: {{random_embeddings: 6}}\n" + extra)


def test_dynamics_outputs_and_symmetry():
    arts = H.run_dynamics(_spec("Dynamics", loops=8))
    assert "similarity_AttentionFrobenius_seed0.csv" in arts
    rows = [l.split(",") for l in arts["similarity_AttentionFrobenius_seed0.csv"].splitlines()[1:]]
    n = int(np.sqrt(len(rows)))
    m = np.zeros((n, n))
    for _, i, j, v in rows:
        m[int(i), int(j)] = float(v)
    assert np.array_equal(m, m.T) and np.all(np.diag(m) == 0)


def test_dynamics_single_loop_reports_error():
    arts = H.run_dynamics(_spec("Dynamics", loops=1, seeds=(0,)))
    rep = arts["dynamics_report.json"]
    assert rep["runs"][0]["errors"][0]["error"] == "InsufficientRecurrencesError"


@pytest.mark.parametrize("layers", [4, 16])
def test_layer_count_variants_match(layers):
    spec = H.parse_spec(
        f"kind: Dynamics\nmodel: {{d_model: 64, n_heads: 4, d_head: 16, recurrent_layers: {layers}, input_injection: true}}\n"
        "loops: 64\nsequence: {random_embeddings: 8}\n"
    )
    rep = H.run_dynamics(spec)["dynamics_report.json"]["runs"][0]
    assert all(rep["converged"]) and rep["degenerate"] is False


def test_classify_converged_model_all_fixed_points():
    arts = H.run_classify(_spec("Classify", loops=48, seeds=(0,)))
    stats = json.loads(arts["label_statistics.json"])
    assert stats["fractions"]["FixedPoint"] == 1.0


def test_classify_planted_rotation_and_mix():
    from loopdyn import classify as C

    cfg = M.ModelConfig(d_model=4, n_heads=1, d_head=4, recurrent_layers=2, positional="None")
    loops, t = 65, 4
    tr = M.Trace(cfg, loops, M.CaptureFlags(), np.zeros((t, 4)))
    states = np.zeros((loops, 2, t, 4))
    r = np.arange(1, loops + 1)
    for tok in range(t):
        # tokens 0,1 rotate with period 8; tokens 2,3 stay fixed
        ang = 2 * np.pi * r / 8 if tok < 2 else 0 * r
        states[:, :, tok, 0] = np.cos(ang)[:, None]
        states[:, :, tok, 1] = np.sin(ang)[:, None]
    tr.recurrent = states
    recs = H.classify_trace(tr, C.ClassifierParams())
    stats = C.label_statistics(recs)
    assert stats["fractions"]["Orbit"] == 0.5 and stats["fractions"]["FixedPoint"] == 0.5
    assert all(rec.label.freq == 8 / 64 for rec in recs if rec.token < 2)


def test_metrics_single_loop_one_group():
    from loopdyn import metrics as Mt

    arts = H.run_metrics(_spec("Metrics", loops=1))
    recs = json.loads(arts["metrics_ByRecurrence.json"])
    assert {r["recurrence"] for r in recs} == {0}
    assert {r["name"] for r in recs} == {m.value for m in Mt.AttentionMetric}


def test_trajectory_converged_final_points():
    arts = H.run_trajectory(_spec("Trajectory", loops=48, seeds=(0,)))
    run = arts["trajectory_report.json"]["runs"][0]
    assert run["final_projection_gap"] <= 1e-4 and run["final_recurrence_gap"] <= 1e-4


def test_prop2_audit_no_violations():
    arts = H.run_prop2_audit(_spec("Prop2Audit", loops=12, seeds=tuple(range(4))))
    assert arts["prop2_report.json"]["violations"] == 0
    assert arts["prop2_report.json"]["checks"] == 4 * 3 * 11


def test_small_grid_complete_and_marks_divergence():
    spec = H.parse_spec(
        "kind: StabilityGrid\nmodel: {d_model: 32, n_heads: 4, d_head: 8}\nloops: 6\nseeds: [0, 1]\nreference: 6\n"
        "sequence: {random_embeddings: 4}\n"
    )
    res = H.run_stability_grid(spec)
    assert len(res.cells) == 3 * 2 * 2
    assert all(c.layer1_cosine.shape == (6,) for c in res.cells)
    arts = H.grid_artifacts(spec, res)
    assert arts["grid_cells.csv"].count("\n") == 1 + 12 * 6
    bad = H.parse_spec(spec.dumps().replace("init_std: 0.02", "init_std: 1.0e+200"))
    with pytest.warns(RuntimeWarning):
        res = H.run_stability_grid(bad)
    assert len(res.cells) == 12 and all(c.status == "diverged" for c in res.cells)


def _cli(args):
    return cli.main([str(a) for a in args])


def test_cli_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "kind: Dynamics\nbogus: 1\n")
    assert _cli(["dynamics", "--spec", bad, "--out", tmp_path / "o"]) == 1
    assert "bogus" in capsys.readouterr().err
    wrong = write(tmp_path, "kind: Metrics\n", "m.yaml")
    assert _cli(["dynamics", "--spec", wrong]) == 1
    div = write(tmp_path, "kind: Dynamics\nmodel: {d_model: 32, n_heads: 4, d_head: 8, recurrent_layers: 2, init_std: 1.0e+200}\nloops: 2\n", "d.yaml")
    with pytest.warns(RuntimeWarning):
        assert _cli(["dynamics", "--spec", div, "--out", tmp_path / "d"]) == 2


def test_cli_weights_roundtrip(tmp_path, capsys):
    spec = write(tmp_path, "kind: Dynamics\n" + SMALL_MODEL)
    assert _cli(["init-weights", "--spec", spec, "--file", tmp_path / "w.bin", "--seed", 4]) == 0
    capsys.readouterr()
    assert _cli(["inspect-weights", tmp_path / "w.bin"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["checksum"] == M.init_random(M.ModelConfig(d_model=32, n_heads=4, d_head=8, recurrent_layers=3, input_injection=True, seed=4)).checksum()
    dyn = write(tmp_path, f"kind: Dynamics\nmodel: {{weights: {tmp_path / 'w.bin'}}}\nloops: 3\n", "dw.yaml")
    assert _cli(["dynamics", "--spec", dyn, "--out", tmp_path / "dw"]) == 0


def _read_all(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.mark.parametrize("cmd,kind", [("dynamics", "Dynamics"), ("metrics", "Metrics"), ("prop2-audit", "Prop2Audit"), ("trajectory", "Trajectory"), ("classify", "Classify")])
def test_cli_deterministic_across_runs_and_threads(tmp_path, cmd, kind):
    spec = write(tmp_path, f"kind: {kind}\n" + SMALL_MODEL + "loops: 10\nseeds: [0, 1, 2]\nsequence: {random_embeddings: 5}\n")
    outs = []
    for i, threads in enumerate((1, 1, 3)):
        d = tmp_path / f"o{i}"
        assert _cli([cmd, "--spec", spec, "--out", d, "--threads", threads]) == 0
        outs.append(_read_all(d))
    assert outs[0] == outs[1] == outs[2]
