import pytest

from topocorr.model import ValidationError
from topocorr.pipeline import (
    BUNDLED_CONFIGS,
    PipelineConfig,
    StageError,
    bundled_config,
    doe_summary,
    run_pipeline,
)


def bundle(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.mark.parametrize("name", ["substitution", "characterization", "time-sequence-sq-equalized",
                                  "time-sequence-height"])
def test_reruns_are_byte_identical(tmp_path, name):
    cfg = bundled_config(name)
    run_pipeline(cfg, out=tmp_path / "a")
    run_pipeline(cfg, out=tmp_path / "b")
    a, b = bundle(tmp_path / "a"), bundle(tmp_path / "b")
    assert a.keys() == b.keys() and "summary.json" in a
    assert a == b


def test_substitution_golden(tmp_path):
    s = run_pipeline(bundled_config("substitution"), out=tmp_path)
    r = s["results"]
    assert r["result"]["value"] == pytest.approx(102.028, abs=1e-3)
    assert r["fit_gauge"]["coeffs"][0] == pytest.approx(0.98009, abs=1e-5)


def test_characterization_golden(tmp_path):
    s = run_pipeline(bundled_config("characterization"), out=tmp_path)
    t1 = s["results"]["surfaces"]["T1"]
    assert t1["corrected"]["value"] == pytest.approx(48.48, abs=1e-9)
    assert t1["corrected"]["U"] == pytest.approx(27.67, abs=0.01)
    assert t1["uncorrected"]["U"] == pytest.approx(34.84, abs=0.01)
    assert len(s["results"]["surfaces"]["T3"]["replaced"]) == 4
    for f in ("budget_corrected.csv", "budget_uncorrected.csv", "doe_budgets.csv", "doe_interactions.csv"):
        assert (tmp_path / f).exists()


def test_equalized_time_sequence_golden(tmp_path):
    r = run_pipeline(bundled_config("time-sequence-sq-equalized"), out=tmp_path)["results"]
    assert [x["seq"] for x in r["replaced"]] == [9, 30, 29, 10]
    assert r["fit"]["eps_rep"] == pytest.approx(0.0693, abs=1e-4)
    assert r["residuals"]["flagged"] is False


def test_all_bundled_configs_load():
    for name in BUNDLED_CONFIGS:
        assert bundled_config(name).case in ("Comparison", "TimeSequence", "Substitution", "Characterization")


def test_config_validation(tmp_path):
    with pytest.raises(ValidationError):
        PipelineConfig.from_dict({"case": "Nope", "inputs": {}, "output": "x"})
    with pytest.raises(ValidationError):
        PipelineConfig.from_dict({"case": "Substitution", "inputs": {}, "output": "x", "bogus": 1})
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises((ValidationError, ValueError)):
        PipelineConfig.load(p)


def test_missing_input_is_stage_error(tmp_path):
    cfg = PipelineConfig.from_dict({
        "case": "TimeSequence", "inputs": {"records": str(tmp_path / "none.csv")},
        "output": str(tmp_path / "o"), "order": 1,
        "reference": {"x_ci": 1.0, "U": 0.1, "n_input": 12},
    })
    with pytest.raises(StageError) as e:
        run_pipeline(cfg)
    assert e.value.stage


def test_doe_summary_flat_and_degenerate():
    rows = [{"corrected": c, "area": a, "surface": "T1", "U": 2.0}
            for c in (True, False) for a in ("p", "q")]
    with pytest.warns(UserWarning, match="surface"):
        out = doe_summary(rows)
    assert all(r[4] == 2.0 for r in out)
    ab = [r for r in out if r[0] == "corrected" and r[2] == "area"]
    assert len(ab) == 4 and all(r[5] == 1 for r in ab)


def test_doe_summary_cell_means():
    rows = [{"a": "x", "b": "u", "U": 1.0}, {"a": "x", "b": "u", "U": 3.0}, {"a": "y", "b": "u", "U": 5.0}]
    with pytest.warns(UserWarning):
        out = doe_summary(rows, factors=("a", "b"))
    assert out == [("a", "x", "b", "u", 2.0, 2), ("a", "y", "b", "u", 5.0, 1)]
