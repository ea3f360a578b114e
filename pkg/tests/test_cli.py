import hashlib
import json
import math

import pandas as pd
import pytest

from n400kit import ingest
from n400kit.cli import main


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--preset", "exp1", "--seed", "3", "--subjects", "6", "--frames", "20",
                 "--electrodes", "8", "--out", str(out)]) == 0
    return out


def test_synth_is_reproducible(bundle, tmp_path):
    assert main(["synth", "--preset", "exp1", "--seed", "3", "--subjects", "6", "--frames", "20",
                 "--electrodes", "8", "--out", str(tmp_path)]) == 0
    names = ["table.csv", "eeg.csv", "stimuli.tsv", "lm_output.jsonl", "truth.json",
             "synth_spec.json"]
    for name in names:
        assert _digest(bundle / name) == _digest(tmp_path / name), name
    a = json.loads((bundle / "manifest.json").read_text())
    b = json.loads((tmp_path / "manifest.json").read_text())
    a["arguments"].pop("out")
    b["arguments"].pop("out")
    assert a == b
    assert a["seed"] == 3 and sorted(a["outputs"]) == sorted(names)


def test_metrics_rebuilds_table(bundle, tmp_path):
    before = {p.name: _digest(p) for p in bundle.iterdir()}
    rc = main(["metrics", "--stimuli", str(bundle / "stimuli.tsv"), "--lm", str(bundle / "lm_output.jsonl"),
               "--eeg", str(bundle / "eeg.csv"), "--out", str(tmp_path)])
    assert rc == 0
    assert {p.name: _digest(p) for p in bundle.iterdir()} == before
    rebuilt = ingest.read_table(tmp_path / "table.csv")
    orig = ingest.read_table(bundle / "table.csv")
    for c in ("surprisal_A", "cossim_A", "surprisal_B", "cossim_B"):
        assert (rebuilt[c] - orig[c]).abs().max() <= 1e-9
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["inputs"][str(bundle / "eeg.csv")] == _digest(bundle / "eeg.csv")


def test_metrics_base_two(bundle, tmp_path):
    common = ["metrics", "--stimuli", str(bundle / "stimuli.tsv"), "--lm", str(bundle / "lm_output.jsonl")]
    assert main(common + ["--out", str(tmp_path / "e")]) == 0
    assert main(common + ["--base", "2", "--out", str(tmp_path / "two")]) == 0
    e = pd.read_csv(tmp_path / "e" / "stimulus_predictors.csv")
    two = pd.read_csv(tmp_path / "two" / "stimulus_predictors.csv")
    ratio = two["surprisal_A"] / e["surprisal_A"]
    # tables are written with 9 significant digits
    assert (ratio * math.log(2)).sub(1).abs().max() < 2e-8
    assert e["cossim_A"].equals(two["cossim_A"])


def test_missing_lm_file(bundle, tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    rc = main(["metrics", "--stimuli", str(bundle / "stimuli.tsv"), "--lm", str(missing),
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["holdout", "--table", "t.csv", "--predictor", "x", "--out", "o"],  # no seed
    ["synth", "--preset", "exp9", "--seed", "1", "--out", "o"],
    ["compare", "--table", "t.csv", "--fdr", "holm", "--out", "o"],
    ["nosuch"],
])
def test_bad_arguments(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 4


def test_bad_base(bundle, tmp_path):
    rc = main(["metrics", "--stimuli", str(bundle / "stimuli.tsv"), "--lm", str(bundle / "lm_output.jsonl"),
               "--base", "1", "--out", str(tmp_path)])
    assert rc == 4


def test_compare_flags_planted_predictor(bundle, tmp_path):
    rc = main(["compare", "--table", str(bundle / "table.csv"), "--predictor", "surprisal_A",
               "--predictor", "surprisal_B", "--out", str(tmp_path)])
    assert rc == 0
    df = pd.read_csv(tmp_path / "ladder.csv")
    a = df[(df["ladder"] == "surprisal_A") & (df["rung"] == 1)].iloc[0]
    assert a["p_adjusted"] < 0.01
    assert (tmp_path / "summary.md").is_file()


def test_holdout_and_report(bundle, tmp_path):
    argv = ["holdout", "--table", str(bundle / "table.csv"), "--predictor", "surprisal_A",
            "--seed", "1", "--out", str(tmp_path)]
    assert main(argv) == 0
    first = _digest(tmp_path / "contrasts.csv")
    df = pd.read_csv(tmp_path / "contrasts.csv")
    assert len(df) == 6 and set(df["alternative"]) == {"less"}
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["n_train"] + manifest["n_test"] == len(ingest.read_table(bundle / "table.csv"))
    assert main(argv) == 0
    assert _digest(tmp_path / "contrasts.csv") == first
    (tmp_path / "summary.md").unlink()
    assert main(["report", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "summary.md").is_file()


def test_corr_recovers_planted_correlation(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--preset", "exp2", "--seed", "8", "--subjects", "2", "--frames", "290",
                 "--electrodes", "2", "--out", str(data)]) == 0
    assert main(["corr", "--table", str(data / "table.csv"), "--out", str(tmp_path / "c")]) == 0
    df = pd.read_csv(tmp_path / "c" / "correlation.csv")
    row = df[(df["name"] == "A") & (df["condition"] == "all")].iloc[0]
    assert abs(row["r"] - (-0.48)) <= 0.05
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["strongest"] == "A"


def test_report_missing_dir(tmp_path):
    assert main(["report", "--out", str(tmp_path / "absent")]) == 2
