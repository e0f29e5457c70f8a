import numpy as np
import pytest

from advids import nn
from advids.attacks import AttackConfig
from advids.errors import ConfigError
from advids.experiments import (ExperimentManifest, SweepResult, SweepRow, check_completeness,
                                clean_accuracy_table, emit_report, plot_script, ratio_slice,
                                run_attack_comparison, run_defense_grid, sub_seed)

FAST = AttackConfig(iterations=3, restarts=2)


@pytest.fixture(scope="module")
def sample(synthetic_split):
    return synthetic_split[2].sample(150, seed=4)


@pytest.fixture(scope="module")
def comparison(small_detector, sample):
    return run_attack_comparison(small_detector, sample, (0.0, 0.2, 0.6), FAST, master_seed=7)


def test_comparison_grid_complete(comparison):
    check_completeness(comparison, 1, (0.0, 0.2, 0.6), ("FGSM", "BIM", "PGD"))
    assert [r.attack for r in comparison][:3] == ["FGSM"] * 3


def test_zero_eps_rows_identical_across_attacks(comparison, small_detector, sample):
    zero = [r.accuracy for r in comparison.select(eps_attack=0.0)]
    assert len(zero) == 3 and len(set(zero)) == 1
    assert zero[0] == nn.evaluate(small_detector, sample).accuracy


def test_accuracy_drops_with_eps(comparison):
    for kind in ("FGSM", "BIM", "PGD"):
        _, acc = comparison.curve("baseline", kind)
        assert acc[-1] < acc[0]


def test_iterative_attacks_agree(comparison):
    bim = comparison.curve("baseline", "BIM")[1]
    pgd = comparison.curve("baseline", "PGD")[1]
    assert max(abs(a - b) for a, b in zip(bim, pgd)) <= 0.05


def test_csv_roundtrip_and_rerun_bytes(comparison, small_detector, sample):
    text = comparison.to_csv()
    assert SweepResult.from_csv(text) == comparison
    again = run_attack_comparison(small_detector, sample, (0.0, 0.2, 0.6), FAST, master_seed=7, jobs=2)
    assert again.to_csv() == text
    other = run_attack_comparison(small_detector, sample, (0.6,), FAST, master_seed=8)
    assert other.select(attack="PGD")[0].seed != comparison.select(attack="PGD", eps_attack=0.6)[0].seed


def test_bad_csv_header():
    with pytest.raises(ConfigError):
        SweepResult.from_csv("a,b\n1,2\n")


@pytest.mark.parametrize("grid", [(), (0.1, -0.2)])
def test_bad_grid_rejected(small_detector, sample, grid):
    with pytest.raises(ConfigError):
        run_attack_comparison(small_detector, sample, grid)


def test_sub_seed_stable():
    assert sub_seed(0, "baseline", "PGD", 0.5) == sub_seed(0, "baseline", "PGD", 0.5)
    assert sub_seed(0, "baseline", "PGD", 0.5) != sub_seed(1, "baseline", "PGD", 0.5)
    assert 0 <= sub_seed(3, "x") < 2**31


def test_completeness_detects_gaps(comparison):
    with pytest.raises(ConfigError):
        check_completeness(SweepResult(comparison.rows[:-1]), 1, (0.0, 0.2, 0.6), ("FGSM", "BIM", "PGD"))
    with pytest.raises(ConfigError):
        check_completeness(SweepResult(comparison.rows[:-1] + comparison.rows[:1]), 1,
                           (0.0, 0.2, 0.6), ("FGSM", "BIM", "PGD"))


def test_defense_grid_shape(synthetic_split, small_detector):
    _, train, test = synthetic_split
    tcfg = nn.TrainConfig(epochs=1, hidden=(64, 64), seed=5)
    res = run_defense_grid(train.subset(np.arange(600)), test.sample(80, seed=1), (0.3, 0.7), (0.5,),
                           (0.0, 0.7), tcfg, FAST, AttackConfig("PGD", iterations=2, restarts=1),
                           baseline=small_detector)
    assert len(res) == (2 * 1 + 1) * 2
    assert res.model_ids() == ["baseline", "hardened_ed0.3_r0.5", "hardened_ed0.7_r0.5"]
    assert {r.attack for r in res} == {"PGD"}
    assert len(ratio_slice(res)) == 2
    table = clean_accuracy_table(res)
    assert [t[0] for t in table] == res.model_ids()
    assert table[0][1] is None and table[1][1:3] == (0.3, 0.5)


def test_defense_grid_rejects_empty_ratios(synthetic_split):
    _, train, test = synthetic_split
    with pytest.raises(ConfigError):
        run_defense_grid(train, test, (0.5,), ())


@pytest.mark.parametrize("experiment", ["attacks", "defense"])
def test_plot_script_compiles(experiment):
    src = plot_script(experiment, f"{experiment}.csv")
    compile(src, f"plot_{experiment}.py", "exec")
    assert f"{experiment}.csv" in src


def test_emit_report(tmp_path, comparison):
    manifest = ExperimentManifest("attacks", {"eps": [0.0, 0.2]}, {"model": "abc"}, created="fixed")
    paths = emit_report(comparison, tmp_path / "rep", "attacks", manifest)
    assert [p.name for p in paths] == ["attacks.csv", "plot_attacks.py", "attacks.manifest"]
    assert (tmp_path / "rep" / "attacks.csv").read_text() == comparison.to_csv()
    text = (tmp_path / "rep" / "attacks.manifest").read_text()
    assert "sha256.attacks.csv=" in text and "config.eps=0.0,0.2" in text
    with pytest.raises(ConfigError):
        emit_report(SweepResult(), tmp_path, "empty")
    assert not (tmp_path / "empty.csv").exists()


def test_rows_sorted_by_model_attack_eps():
    rows = [SweepRow("b", "PGD", 0.1, None, None, 0.5, 10, 1),
            SweepRow("a", "PGD", 0.2, None, None, 0.5, 10, 1),
            SweepRow("a", "FGSM", 0.3, None, None, 0.5, 10, 1)]
    res = SweepResult(rows)
    assert [(r.model_id, r.attack) for r in res] == [("a", "FGSM"), ("a", "PGD"), ("b", "PGD")]
    assert res.min_accuracy("PGD") == 0.5
