"""Accuracy-vs-epsilon sweeps for undefended and adversarially trained detectors."""

import csv
import hashlib
import io
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, fileio
from .attacks import KINDS, AttackConfig, attack_batch
from .defense import DEFAULT_MIX_RATIOS, AdvTrainConfig, adversarial_train
from .errors import ConfigError
from .nn import TrainConfig, build_detector, evaluate, train

log = logging.getLogger(__name__)

CSV_COLUMNS = ("model_id", "attack", "eps_attack", "eps_defense", "mix_ratio", "accuracy", "n", "seed")
DEFAULT_EPS_GRID = tuple(round(0.05 * i, 2) for i in range(21))
DEFAULT_DEFENSE_EPS = (0.1, 0.3, 0.5, 0.7, 0.9)
RATIO_SLICE_EPS = 0.7


@dataclass(frozen=True)
class SweepRow:
    model_id: str
    attack: str
    eps_attack: float
    eps_defense: float
    mix_ratio: float
    accuracy: float
    n: int
    seed: int

    @property
    def key(self):
        return (self.model_id, KINDS.index(self.attack) if self.attack in KINDS else 99, self.eps_attack)


class SweepResult:
    def __init__(self, rows=()):
        self.rows = sorted(rows, key=lambda r: r.key)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, SweepResult) and self.rows == other.rows

    def __iter__(self):
        return iter(self.rows)

    def select(self, **criteria):
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def curve(self, model_id, attack):
        rows = self.select(model_id=model_id, attack=attack)
        return [r.eps_attack for r in rows], [r.accuracy for r in rows]

    def model_ids(self):
        return sorted({r.model_id for r in self.rows})

    def min_accuracy(self, attack, model_id=None):
        rows = [r for r in self.rows if r.attack == attack and (model_id is None or r.model_id == model_id)]
        return min(r.accuracy for r in rows)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ConfigError(f"unexpected CSV header {header}")
        rows = []
        for rec in reader:
            d = dict(zip(CSV_COLUMNS, rec))
            rows.append(SweepRow(
                d["model_id"], d["attack"], float(d["eps_attack"]),
                float(d["eps_defense"]) if d["eps_defense"] else None,
                float(d["mix_ratio"]) if d["mix_ratio"] else None,
                float(d["accuracy"]), int(d["n"]), int(d["seed"])))
        return cls(rows)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def sub_seed(master_seed, *coords):
    """Stable 31-bit seed for one grid point."""
    text = "|".join([str(master_seed)] + [repr(c) for c in coords])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little") & 0x7FFFFFFF


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _check_grid(name, grid):
    grid = tuple(float(e) for e in grid)
    if not grid:
        raise ConfigError(f"{name} grid is empty")
    if any(e < 0 for e in grid):
        raise ConfigError(f"{name} grid has negative entries")
    return grid


def evaluate_under_attack(model, test_set, config):
    adv = attack_batch(model, test_set, config)
    return evaluate(model, adv.as_dataset(test_set)).accuracy


def run_attack_comparison(model, test_set, eps_grid=DEFAULT_EPS_GRID, attack=AttackConfig(),
                          attacks=KINDS, model_id="baseline", master_seed=0, jobs=1,
                          eps_defense=None, mix_ratio=None):
    """Accuracy of ``model`` on the attacked test set for every (attack, eps)."""
    eps_grid = _check_grid("eps_attack", eps_grid)
    points = [(kind, eps) for kind in attacks for eps in eps_grid]

    def one(point):
        kind, eps = point
        seed = sub_seed(master_seed, model_id, kind, eps)
        cfg = replace(attack, kind=kind, epsilon=eps, seed=seed)
        acc = evaluate_under_attack(model, test_set, cfg)
        log.info("%s %s eps=%g accuracy=%.4f", model_id, kind, eps, acc)
        return SweepRow(model_id, kind, eps, eps_defense, mix_ratio, acc, len(test_set), seed)

    return SweepResult(_map(one, points, jobs))


def hardened_id(eps_defense, mix_ratio):
    return f"hardened_ed{eps_defense:g}_r{mix_ratio:g}"


def run_defense_grid(clean_train, test_set, eps_defense_grid=DEFAULT_DEFENSE_EPS,
                     mix_ratios=DEFAULT_MIX_RATIOS, eps_attack_grid=DEFAULT_EPS_GRID,
                     train_config=TrainConfig(), attack=AttackConfig(), defense_attack=None,
                     generation="online", master_seed=0, baseline=None, jobs=1):
    """One hardened model per (eps_defense, mix_ratio), each swept with PGD.

    The result also carries the baseline's PGD curve (model_id ``baseline``,
    empty eps_defense / mix_ratio), so it holds
    (|eps_defense| * |mix_ratios| + 1) * |eps_attack| rows.
    """
    eps_defense_grid = _check_grid("eps_defense", eps_defense_grid)
    eps_attack_grid = _check_grid("eps_attack", eps_attack_grid)
    mix_ratios = tuple(float(r) for r in mix_ratios)
    if not mix_ratios:
        raise ConfigError("mix_ratio grid is empty")
    if baseline is None:
        baseline = build_detector(clean_train.features.shape[1], train_config)
        baseline, _ = train(baseline, clean_train, train_config)
    defense_attack = defense_attack or AttackConfig(kind="PGD", restarts=1)

    rows = list(run_attack_comparison(baseline, test_set, eps_attack_grid, attack, ("PGD",),
                                      "baseline", master_seed))

    def one(point):
        ed, rho = point
        cfg = AdvTrainConfig(ed, rho, defense_attack, train_config,
                             seed=sub_seed(master_seed, "defense", ed, rho), generation=generation)
        result = adversarial_train(clean_train, cfg, donor=baseline)
        mid = hardened_id(ed, rho)
        return list(run_attack_comparison(result.hardened, test_set, eps_attack_grid, attack, ("PGD",),
                                          mid, master_seed, eps_defense=ed, mix_ratio=rho))

    points = [(ed, rho) for ed in eps_defense_grid for rho in mix_ratios]
    for chunk in _map(one, points, jobs):
        rows += chunk
    return SweepResult(rows)


def ratio_slice(result, eps_defense=RATIO_SLICE_EPS):
    """Rows of the hardened models trained at ``eps_defense`` (all mix ratios)."""
    return [r for r in result.rows if r.eps_defense is not None and np.isclose(r.eps_defense, eps_defense)]


def clean_accuracy_table(result):
    """(model_id, eps_defense, mix_ratio, accuracy) at eps_attack = 0."""
    return [(r.model_id, r.eps_defense, r.mix_ratio, r.accuracy)
            for r in result.rows if r.eps_attack == 0.0]


def check_completeness(result, n_models, eps_grid, attacks):
    expected = n_models * len(eps_grid) * len(attacks)
    if len(result) != expected:
        raise ConfigError(f"sweep has {len(result)} rows, expected {expected}")
    seen = {(r.model_id, r.attack, r.eps_attack) for r in result.rows}
    if len(seen) != expected:
        raise ConfigError("sweep has duplicate grid points")


@dataclass
class ExperimentManifest:
    experiment: str
    config: dict
    fingerprints: dict
    tool_version: str = __version__
    created: str = ""  # optional label; left out by default so reruns stay byte-identical

    def to_kv(self):
        items = {"experiment": self.experiment, "tool_version": self.tool_version,
                 "python": platform.python_version(), "numpy": np.__version__}
        if self.created:
            items["created"] = self.created
        for k, v in self.config.items():
            items[f"config.{k}"] = v
        for k, v in self.fingerprints.items():
            items[f"sha256.{k}"] = v
        return items

    def save(self, path):
        fileio.write_kv(path, self.to_kv(), header=f"advids manifest ({self.experiment})")


def flatten_config(prefix, obj):
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    out = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            out.update(flatten_config(f"{prefix}{k}.", v))
        else:
            out[f"{prefix}{k}"] = v
    return out


def emit_report(result, out_dir, experiment, manifest=None):
    """Write ``<experiment>.csv`` and ``plot_<experiment>.py`` (+ manifest) to ``out_dir``."""
    if not len(result):
        raise ConfigError("refusing to write a report for an empty sweep")
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{experiment}.csv"
    plot_path = out_dir / f"plot_{experiment}.py"
    try:
        with fileio.atomic_write(csv_path) as fh:
            fh.write(result.to_csv())
        with fileio.atomic_write(plot_path) as fh:
            fh.write(plot_script(experiment, csv_path.name))
        paths = [csv_path, plot_path]
        if manifest is not None:
            manifest.fingerprints[csv_path.name] = fileio.sha256_file(csv_path)
            manifest.save(out_dir / f"{experiment}.manifest")
            paths.append(out_dir / f"{experiment}.manifest")
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return paths


_PLOT_HEADER = '''"""Plot {csv} (generated by advids; run with: python {script})."""
import csv
import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(HERE, "{csv}")) as fh:
    rows = list(csv.DictReader(fh))
curves = defaultdict(list)
for r in rows:
    curves[(r["model_id"], r["attack"], r["eps_defense"], r["mix_ratio"])].append(
        (float(r["eps_attack"]), 100 * float(r["accuracy"])))
'''

_PLOT_ATTACKS = '''
fig, ax = plt.subplots(figsize=(6, 4))
for (model, attack, _, _), pts in sorted(curves.items()):
    pts.sort()
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=attack)
ax.set_xlabel("epsilon (attack)")
ax.set_ylabel("accuracy (%)")
ax.set_title("Detector accuracy under FGSM / BIM / PGD")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, "attacks.png"), dpi=150)
'''

_PLOT_DEFENSE = '''
ratios = sorted({r["mix_ratio"] for r in rows if r["mix_ratio"]}, key=float)
baseline = sorted(curves.get(("baseline", "PGD", "", ""), []))
cols = 2
nrows = max(1, (len(ratios) + 1) // 2)
fig, axes = plt.subplots(nrows, cols, figsize=(11, 4 * nrows), squeeze=False)
for ax, ratio in zip(axes.flat, ratios):
    if baseline:
        ax.plot([p[0] for p in baseline], [p[1] for p in baseline], "k--", label="clean training")
    for (model, attack, ed, mr), pts in sorted(curves.items(), key=lambda kv: float(kv[0][2] or 0)):
        if mr != ratio:
            continue
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"eps_defense={ed}")
    ax.set_title(f"adversarial share of training data = {float(ratio):.0%}")
    ax.set_xlabel("epsilon (attack)")
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(os.path.join(HERE, "defense_grid.png"), dpi=150)

eds = sorted({r["eps_defense"] for r in rows if r["eps_defense"]}, key=float)
pick = min(eds, key=lambda e: abs(float(e) - {slice_eps})) if eds else None
fig, ax = plt.subplots(figsize=(6, 4))
for (model, attack, ed, mr), pts in sorted(curves.items()):
    if ed == pick:
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{float(mr):.0%} adversarial")
ax.set_title(f"effect of adversarial share, eps_defense={{pick}}")
ax.set_xlabel("epsilon (attack)")
ax.set_ylabel("accuracy (%)")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, "ratio_effect.png"), dpi=150)

fig, ax = plt.subplots(figsize=(6, 4))
clean = [r for r in rows if float(r["eps_attack"]) == 0.0]
base = [100 * float(r["accuracy"]) for r in clean if r["model_id"] == "baseline"]
for ratio in ratios:
    pts = sorted((float(r["eps_defense"]), 100 * float(r["accuracy"])) for r in clean if r["mix_ratio"] == ratio)
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{float(ratio):.0%} adversarial")
if base:
    ax.axhline(base[0], color="k", linestyle="--", label="clean training")
ax.set_xlabel("eps_defense")
ax.set_ylabel("clean test accuracy (%)")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, "clean_accuracy.png"), dpi=150)
'''


def plot_script(experiment, csv_name):
    script = f"plot_{experiment}.py"
    body = _PLOT_HEADER.format(csv=csv_name, script=script)
    if experiment.startswith("defense"):
        body += _PLOT_DEFENSE.replace("{slice_eps}", repr(RATIO_SLICE_EPS)).replace("{{pick}}", "{pick}")
    else:
        body += _PLOT_ATTACKS
    return body
