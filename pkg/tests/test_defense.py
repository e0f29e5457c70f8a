import numpy as np
import pytest
from hypothesis import given, strategies as st

from advids import nn
from advids.attacks import AttackConfig, attack_batch
from advids.defense import (AdvTrainConfig, OnlineMixer, adversarial_train, build_mixed_set,
                            n_adversarial)
from advids.errors import ConfigError

TINY = nn.TrainConfig(epochs=2, hidden=(16, 16), seed=2)


@pytest.fixture(scope="module")
def clean_1000(synthetic_split):
    _, train, _ = synthetic_split
    return train.subset(np.arange(1000))


def test_half_mix_doubles_rows(clean_1000, small_detector):
    cfg = AdvTrainConfig(0.3, 0.5, AttackConfig("PGD", iterations=2), seed=1)
    mixed = build_mixed_set(clean_1000, small_detector, cfg)
    assert int(mixed.adversarial.sum()) == 1000
    assert len(mixed.dataset) == 2000
    assert mixed.adversarial_fraction == 0.5


@given(n=st.integers(1, 5000), rho=st.floats(0.01, 0.99))
def test_mix_ratio_within_one_row(n, rho):
    k = n_adversarial(n, rho)
    assert k / (n + k) >= rho - 1e-12
    assert (k - 1) / (n + k - 1) < rho + 1e-12


def test_zero_budget_gives_exact_copies(clean_1000, small_detector):
    cfg = AdvTrainConfig(0.0, 0.3, seed=4)
    mixed = build_mixed_set(clean_1000, small_detector, cfg)
    adv_rows = mixed.dataset.features[mixed.adversarial]
    src = clean_1000.features[mixed.source_index[mixed.adversarial]]
    assert np.array_equal(adv_rows, src)


def test_adversarial_rows_stay_in_budget_and_keep_labels(clean_1000, small_detector):
    cfg = AdvTrainConfig(0.7, 0.7, AttackConfig("PGD", iterations=3), seed=5)
    mixed = build_mixed_set(clean_1000, small_detector, cfg)
    idx = mixed.source_index
    dev = np.max(np.abs(mixed.dataset.features - clean_1000.features[idx]), axis=1)
    assert np.all(dev <= 0.7 + 1e-9)
    assert np.array_equal(mixed.dataset.labels, clean_1000.labels[idx])
    assert np.all(dev[~mixed.adversarial] == 0)


@pytest.mark.parametrize("rho", [0.0, 1.0, -0.2, 1.5])
def test_mix_ratio_bounds(rho):
    with pytest.raises(ConfigError):
        AdvTrainConfig(0.5, rho)


def test_config_forces_pgd_at_defense_budget():
    cfg = AdvTrainConfig(0.9, 0.5, AttackConfig("FGSM", epsilon=0.1))
    assert cfg.attack.kind == "PGD" and cfg.attack.epsilon == 0.9
    with pytest.raises(ConfigError):
        AdvTrainConfig(-0.1, 0.5)
    with pytest.raises(ConfigError):
        AdvTrainConfig(0.5, 0.5, generation="lazy")


def test_online_mixer_batch_composition(small_detector, clean_1000):
    cfg = AdvTrainConfig(0.4, 0.3, AttackConfig("PGD", iterations=2), seed=1)
    mixer = OnlineMixer(cfg)
    x, y = clean_1000.features[:100], clean_1000.labels[:100]
    xb, yb = mixer(small_detector, x, y, 0, 0)
    k = n_adversarial(100, 0.3)
    assert xb.shape == (100 + k, x.shape[1]) and len(yb) == 100 + k
    assert np.array_equal(xb[:100], x)
    assert mixer.adversarial_rows == k and mixer.total_rows == 100 + k
    xb2, _ = OnlineMixer(cfg)(small_detector, x, y, 0, 0)
    assert xb.tobytes() == xb2.tobytes()


@pytest.mark.parametrize("generation", ["online", "static"])
def test_adversarial_training_deterministic(clean_1000, generation):
    cfg = AdvTrainConfig(0.5, 0.5, AttackConfig("PGD", iterations=2), TINY, seed=3, generation=generation)
    a = adversarial_train(clean_1000, cfg)
    b = adversarial_train(clean_1000, cfg)
    assert a.hardened.fingerprint() == b.hardened.fingerprint()
    assert a.hardened.sizes == a.baseline.sizes
    assert a.hardened.dropout_rate == a.baseline.dropout_rate
    assert a.adversarial_rows > 0


def test_donor_topology_must_match(clean_1000):
    donor = nn.build_detector(clean_1000.features.shape[1], nn.TrainConfig(hidden=(8,)))
    with pytest.raises(ConfigError):
        adversarial_train(clean_1000, AdvTrainConfig(0.5, 0.5, train=TINY), donor=donor)


def test_hardened_model_file_records_defense(tmp_path, clean_1000):
    cfg = AdvTrainConfig(0.5, 0.3, AttackConfig("PGD", iterations=2), TINY, seed=3)
    res = adversarial_train(clean_1000, cfg)
    res.save(tmp_path / "h.mdl")
    model, header = nn.load_model(tmp_path / "h.mdl")
    assert model.fingerprint() == res.hardened.fingerprint()
    assert float(header["defense.epsilon_defense"]) == 0.5
    assert float(header["defense.mix_ratio"]) == 0.3
    assert header["defense.donor_fingerprint"] == res.baseline.fingerprint()


@pytest.mark.slow
def test_hardening_improves_robustness_on_synthetic(synthetic_split):
    _, train, test = synthetic_split
    tcfg = nn.TrainConfig(epochs=10, hidden=(128, 128), batch_size=64, seed=1)
    res = adversarial_train(train, AdvTrainConfig(0.7, 0.5, train=tcfg, seed=1))
    sample = test.sample(600, seed=0)
    attack = AttackConfig("PGD", 0.7, restarts=2, seed=9)
    acc = {}
    for name, model in (("baseline", res.baseline), ("hardened", res.hardened)):
        adv = attack_batch(model, sample, attack)
        acc[name] = nn.evaluate(model, adv.as_dataset(sample)).accuracy
    assert acc["hardened"] - acc["baseline"] >= 0.20, acc
    clean = {n: nn.evaluate(m, test).accuracy for n, m in (("b", res.baseline), ("h", res.hardened))}
    assert clean["b"] - clean["h"] <= 0.03
