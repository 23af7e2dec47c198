import csv
import json

import numpy as np
import pytest

from batchconf.cli import main
from batchconf.pvalues import batch_conformal_pvalue
from batchconf.scores import SampleGroup, apply_scores, control_arm_specs
from batchconf.simulate import gen_control_arm_fixture
from batchconf.testing import QuantileRule, batch_pvalues, bh_procedure


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def two_files(tmp_path):
    ref = write_csv(tmp_path / "ref.csv", ["value"], [[1.0], [2.0], [3.0], [5.5], [0.2]])
    grp = write_csv(tmp_path / "grp.csv", ["value"], [[4.0], [2.7], [6.1]])
    return ref, grp


# --- detect -------------------------------------------------------------------------

def test_detect_matches_library(capsys, two_files):
    ref, grp = two_files
    code, out, _ = run(capsys, "detect", "--reference", ref, "--groups", grp,
                       "--q", "0.5", "--seed", "5")
    assert code == 0
    report = json.loads(out)
    scores = apply_scores_identity([1.0, 2.0, 3.0, 5.5, 0.2], [4.0, 2.7, 6.1], seed=5)
    expected = batch_conformal_pvalue(scores[0], scores[1], 2).p
    rec = report["pvalues"][0]
    assert rec["group_id"] == "grp" and rec["eta_used"] == 2 and rec["n"] == 3
    assert rec["p"] == expected
    assert set(report) == {"version", "config", "n_reference", "pvalues", "bh"}


def apply_scores_identity(ref, cmp, seed):
    from batchconf.scores import fit_score
    out = apply_scores(fit_score("identity"), SampleGroup("reference", ref),
                       [SampleGroup("grp", cmp)], seed=seed)
    return out.reference, out.groups["grp"]


def test_long_format_matches_per_file(capsys, tmp_path):
    rng = np.random.default_rng(0)
    data = {"ref": rng.standard_normal(30), "a": rng.standard_normal(12) + 1,
            "b": rng.standard_normal(9)}
    files = {g: write_csv(tmp_path / f"{g}.csv", ["value"], [[v] for v in x]) for g, x in data.items()}
    long = write_csv(tmp_path / "long.csv", ["site", "value"],
                     [[g, v] for g, x in data.items() for v in x])
    _, per_file, _ = run(capsys, "detect", "--reference", files["ref"], "--groups",
                         files["a"], files["b"], "--seed", "2")
    _, long_out, _ = run(capsys, "detect", "--long", long, "--group-column", "site",
                         "--reference-group", "ref", "--seed", "2")
    a, b = json.loads(per_file), json.loads(long_out)
    assert a["pvalues"] == b["pvalues"] and a["bh"] == b["bh"]


def test_report_round_trips_through_bh(capsys, tmp_path):
    rng = np.random.default_rng(1)
    rows = [["r", v] for v in rng.standard_normal(80)]
    for k in range(10):
        rows += [[f"g{k}", v] for v in rng.standard_normal(20) + (2.5 if k < 4 else 0)]
    long = write_csv(tmp_path / "long.csv", ["g", "value"], rows)
    out_path = tmp_path / "report.json"
    code, _, _ = run(capsys, "detect", "--long", long, "--group-column", "g",
                     "--reference-group", "r", "--alpha", "0.2", "-o", str(out_path))
    assert code == 0
    report = json.loads(out_path.read_text())
    ids = [r["group_id"] for r in report["pvalues"]]
    again = bh_procedure([r["p"] for r in report["pvalues"]], 0.2, ids)
    assert again.to_dict()["rejected"] == report["bh"]["rejected"]
    assert {"g0", "g1", "g2", "g3"} <= set(report["bh"]["rejected"])


def test_detect_is_deterministic(capsys, two_files):
    ref, grp = two_files
    outs = {run(capsys, "detect", "--reference", ref, "--groups", grp, "--seed", "9")[1]
            for _ in range(2)}
    assert len(outs) == 1


def test_seed_from_environment(capsys, two_files, monkeypatch):
    ref, grp = two_files
    monkeypatch.setenv("BATCHCONF_SEED", "9")
    env = run(capsys, "detect", "--reference", ref, "--groups", grp)[1]
    flag = run(capsys, "detect", "--reference", ref, "--groups", grp, "--seed", "9")[1]
    assert json.loads(env)["pvalues"] == json.loads(flag)["pvalues"]


def test_fitted_score_detect(capsys, tmp_path):
    rng = np.random.default_rng(3)
    rows = []
    for g, shift, n in [("r", 0, 120), ("a", 0, 30), ("b", 3, 30)]:
        x = rng.uniform(size=n)
        y = 2 * x + 0.2 * rng.standard_normal(n) + shift
        rows += [[g, xi, yi] for xi, yi in zip(x, y)]
    long = write_csv(tmp_path / "l.csv", ["g", "x", "y"], rows)
    code, out, _ = run(capsys, "detect", "--long", long, "--group-column", "g",
                       "--reference-group", "r", "--outcome", "y", "--features", "x",
                       "--score", "abs-residual", "--alpha", "0.1")
    assert code == 0
    report = json.loads(out)
    assert report["n_reference"] == 60 and report["bh"]["rejected"] == ["b"]


def test_control_arm_fixture_detects_planted_shift(capsys, tmp_path):
    rows, truth = gen_control_arm_fixture(K=8, shifts={"site02": 3.0, "site05": 3.0}, seed=4)
    long = write_csv(tmp_path / "trial.csv", ["group", "arm", "value"],
                     [[r["group"], r["arm"], r["value"]] for r in rows])
    code, out, _ = run(capsys, "detect", "--long", long, "--group-column", "group",
                       "--reference-group", "reference", "--arm-column", "arm",
                       "--score", "empirical-cdf", "--alpha", "0.2")
    assert code == 0
    rejected = set(json.loads(out)["bh"]["rejected"])
    assert rejected & {g for g, null in truth.items() if not null}


def test_control_arm_fixture_null_pvalues_are_valid():
    # rejection rate of single-group p-values under the all-null fixture; large
    # control arms make the empirical-CDF scores nearly exchangeable
    hits = total = 0
    for seed in range(300):
        rows, truth = gen_control_arm_fixture(K=4, seed=seed, control_size=2000)
        groups = {}
        for r in rows:
            groups.setdefault(r["group"], {0: [], 1: []})[r["arm"]].append(r["value"])
        ref = SampleGroup("reference", groups.pop("reference")[1],
                          control=groups_ref_control(rows))
        comp = [SampleGroup(g, v[1], control=v[0]) for g, v in groups.items()]
        scores = apply_scores(control_arm_specs(ref, comp), ref, comp, seed=seed)
        ps = [r.p for r in batch_pvalues(scores, QuantileRule("q-ceil", 0.5))]
        hits += sum(p <= 0.1 for p in ps)
        total += len(ps)
    rate = hits / total
    assert rate <= 0.1 + 3 * np.sqrt(0.09 / total)


def groups_ref_control(rows):
    return [r["value"] for r in rows if r["group"] == "reference" and r["arm"] == 0]


# --- detect errors ----------------------------------------------------------------------

def test_missing_value_is_io_error(capsys, tmp_path, two_files):
    ref, _ = two_files
    bad = write_csv(tmp_path / "bad.csv", ["value"], [[1.0], [""], [3.0]])
    code, _, err = run(capsys, "detect", "--reference", ref, "--groups", bad)
    assert code == 2 and "bad.csv:3" in err


def test_unparseable_and_missing_files(capsys, tmp_path, two_files):
    ref, _ = two_files
    bad = write_csv(tmp_path / "bad.csv", ["value"], [["1,5"]])
    assert run(capsys, "detect", "--reference", ref, "--groups", bad)[0] == 2
    assert run(capsys, "detect", "--reference", ref, "--groups", str(tmp_path / "nope.csv"))[0] == 2
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert run(capsys, "detect", "--reference", ref, "--groups", str(empty))[0] == 2
    wrong = write_csv(tmp_path / "w.csv", ["other"], [[1.0]])
    assert run(capsys, "detect", "--reference", ref, "--groups", wrong)[0] == 2


@pytest.mark.parametrize("extra", [["--alpha", "1.5"], ["--eta", "1", "--q", "0.5"],
                                   ["--q", "0"], ["--score", "empirical-cdf"],
                                   ["--tie-policy", "shuffle"]])
def test_config_errors(capsys, two_files, extra):
    ref, grp = two_files
    assert run(capsys, "detect", "--reference", ref, "--groups", grp, *extra)[0] == 3


def test_detect_needs_input(capsys):
    assert run(capsys, "detect")[0] == 3


# --- simulate ---------------------------------------------------------------------------

def test_simulate_workers_byte_identical(capsys, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(capsys, "simulate", "fig2_scaled", "--replicates", "16", "-o", str(a))[0] == 0
    assert run(capsys, "simulate", "fig2_scaled", "--replicates", "16", "--workers", "8",
               "-o", str(b))[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_single_replicate_warns(capsys):
    with pytest.warns(UserWarning):
        code, out, _ = run(capsys, "simulate", "fig2_scaled", "--replicates", "1")
    assert code == 0
    rows = list(csv.DictReader(out.splitlines()))
    assert all(r["fdr_se"] == "0.0" and r["warning"] for r in rows)


def test_simulate_list_and_errors(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--list")
    assert code == 0 and "fig6_two_sample" in out.split()
    assert run(capsys, "simulate", "nonexistent")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "kind": "weird"}))
    assert run(capsys, "simulate", str(bad))[0] == 3
    assert run(capsys, "simulate", "fig2_scaled", "--replicates", "0")[0] == 3


# --- pvalue -----------------------------------------------------------------------------

@pytest.fixture
def tiny(tmp_path):
    ref = write_csv(tmp_path / "ref.csv", ["x"], [[1], [2], [3]])
    cmp = write_csv(tmp_path / "cmp.csv", ["x"], [[4]])
    return ref, cmp


def test_pvalue_batch_example(capsys, tiny):
    code, out, _ = run(capsys, "pvalue", "batch", *tiny, "--eta", "1")
    assert code == 0 and json.loads(out)["p"] == pytest.approx(0.25)


def test_pvalue_ranksum_example(capsys, tmp_path):
    ref = write_csv(tmp_path / "r.csv", ["x"], [[0.0]])
    cmp = write_csv(tmp_path / "c.csv", ["x"], [[1.0]])
    code, out, _ = run(capsys, "pvalue", "ranksum", ref, cmp, "--mode", "exact")
    assert code == 0 and json.loads(out)["p"] == pytest.approx(0.5)


def test_pvalue_permutation_deterministic(capsys, tmp_path):
    rng = np.random.default_rng(0)
    ref = write_csv(tmp_path / "r.csv", ["x"], [[v] for v in rng.standard_normal(20)])
    cmp = write_csv(tmp_path / "c.csv", ["x"], [[v] for v in rng.standard_normal(15)])
    a = run(capsys, "pvalue", "permutation", ref, cmp, "--L", "199", "--seed", "7")
    b = run(capsys, "pvalue", "permutation", ref, cmp, "--L", "199", "--seed", "7")
    assert a == b and a[0] == 0


def test_pvalue_other_methods(capsys, tmp_path):
    rng = np.random.default_rng(1)
    ref = write_csv(tmp_path / "r.csv", ["x"], [[v] for v in rng.standard_normal(20)])
    cmp = write_csv(tmp_path / "c.csv", ["x"], [[v] for v in rng.standard_normal(9)])
    for argv in (["multiquantile", "--eta", "2", "--eta2", "7"], ["subsample", "--seed", "1"],
                 ["ztest", "--sigma", "1"], ["ztest"], ["batch", "--q", "0.75", "--rounding", "floor"]):
        code, out, _ = run(capsys, "pvalue", argv[0], ref, cmp, *argv[1:])
        assert code == 0 and 0 < json.loads(out)["p"] <= 1


@pytest.mark.parametrize("argv", [["batch", "--eta2", "2"], ["ranksum", "--seed", "1"],
                                  ["ztest", "--L", "9"], ["multiquantile", "--eta", "1"],
                                  ["batch", "--eta", "5"], ["ranksum", "--mode", "fast"]])
def test_pvalue_flag_mismatch_exits_3(capsys, tiny, argv):
    assert run(capsys, "pvalue", argv[0], *tiny, *argv[1:])[0] == 3
