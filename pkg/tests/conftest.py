import os
import sys
from pathlib import Path

import numpy as np
import pytest

from advids import data, nn, synth

ROOT = Path(__file__).resolve().parents[1]


def nslkdd_path():
    """Location of the real KDDTrain+ file (override with ADVIDS_NSLKDD)."""
    return Path(os.environ.get("ADVIDS_NSLKDD", ROOT / "data" / "KDDTrain+.txt"))


@pytest.fixture(scope="session")
def synthetic_records():
    return synth.generate_records(6000, seed=11)


@pytest.fixture(scope="session")
def synthetic_split(synthetic_records):
    train, test = data.split(synthetic_records, data.SplitSpec(0.2, 3))
    schema = data.fit_schema(train)
    return schema, data.encode(train, schema, "train"), data.encode(test, schema, "test")


@pytest.fixture(scope="session")
def small_detector(synthetic_split):
    """Narrow detector trained on synthetic records; enough to exercise attacks."""
    _, train, _ = synthetic_split
    cfg = nn.TrainConfig(epochs=4, hidden=(64, 64), seed=5)
    model = nn.build_detector(train.features.shape[1], cfg)
    model, _ = nn.train(model, train, cfg)
    return model


def random_mlp(sizes, seed, dropout_rate=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    layers = [nn.DenseLayer(rng.normal(0, scale, (o, i)), rng.normal(0, scale, o))
              for i, o in zip(sizes, sizes[1:])]
    return nn.Mlp(layers, dropout_rate)


def one_hot(classes, k=2):
    out = np.zeros((len(classes), k))
    out[np.arange(len(classes)), classes] = 1.0
    return out


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
