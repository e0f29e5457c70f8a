"""Adversarial training: augment clean training data with PGD copies and retrain."""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, attack_batch, run_attack
from .data import EncodedDataset
from .errors import ConfigError
from .nn import TrainConfig, build_detector, save_model, train

log = logging.getLogger(__name__)

DEFAULT_MIX_RATIOS = (0.3, 0.5, 0.7, 0.9)
GENERATION_MODES = ("online", "static")


def _defense_attack():
    return AttackConfig(kind="PGD", restarts=1)


@dataclass(frozen=True)
class AdvTrainConfig:
    """``generation="online"`` regenerates the adversarial rows of every minibatch
    against the model being trained; ``"static"`` attacks the donor model once
    and trains on the resulting fixed mixed set."""

    epsilon_defense: float = 0.7
    mix_ratio: float = 0.5
    attack: AttackConfig = field(default_factory=_defense_attack)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    generation: str = "online"

    def __post_init__(self):
        if not self.epsilon_defense >= 0:
            raise ConfigError(f"epsilon_defense must be >= 0, got {self.epsilon_defense}")
        if not 0.0 < self.mix_ratio < 1.0:
            raise ConfigError(f"mix_ratio must lie in (0, 1), got {self.mix_ratio}")
        if self.generation not in GENERATION_MODES:
            raise ConfigError(f"generation must be one of {GENERATION_MODES}, got {self.generation!r}")
        # the defense always uses PGD at eps_defense
        attack = replace(self.attack, kind="PGD", epsilon=float(self.epsilon_defense))
        object.__setattr__(self, "attack", attack)

    def header(self):
        items = {"defense.epsilon_defense": self.epsilon_defense,
                 "defense.mix_ratio": self.mix_ratio,
                 "defense.seed": self.seed,
                 "defense.generation": self.generation}
        for k, v in self.attack.as_dict().items():
            items[f"defense.attack.{k}"] = v
        return items


@dataclass
class MixedTrainingSet:
    dataset: EncodedDataset
    adversarial: np.ndarray  # bool per row
    source_index: np.ndarray  # clean row each row came from

    @property
    def adversarial_fraction(self):
        return float(self.adversarial.mean())


def n_adversarial(n_clean, mix_ratio):
    """Smallest k with k / (n_clean + k) >= mix_ratio."""
    k = math.ceil(mix_ratio * n_clean / (1.0 - mix_ratio) - 1e-9)
    return max(k, 0)


def build_mixed_set(clean_train, donor_model, config):
    nc = len(clean_train)
    k = n_adversarial(nc, config.mix_ratio)
    rng = np.random.default_rng([config.seed, 3])
    picked = rng.choice(nc, size=k, replace=k > nc)
    sources = clean_train.subset(picked)
    adv = attack_batch(donor_model, sources, config.attack)
    features = np.concatenate([clean_train.features, adv.perturbed])
    labels = np.concatenate([clean_train.labels, sources.labels])
    is_adv = np.concatenate([np.zeros(nc, bool), np.ones(k, bool)])
    src = np.concatenate([np.arange(nc), picked])
    order = rng.permutation(nc + k)
    cats = tuple(clean_train.categories) + tuple(sources.categories) if clean_train.categories else ()
    if cats:
        cats = tuple(np.asarray(cats, dtype=object)[order])
    mixed = EncodedDataset(features[order], labels[order], "mixed", cats)
    log.info("mixed set: %d clean + %d adversarial rows (eps_defense=%g)", nc, k, config.epsilon_defense)
    return MixedTrainingSet(mixed, is_adv[order], src[order])


class OnlineMixer:
    """Minibatch hook: appends PGD copies of sampled batch rows, attacked against
    the current model, so each batch is ``mix_ratio`` adversarial."""

    def __init__(self, config):
        self.config = config
        self.adversarial_rows = 0
        self.total_rows = 0

    def __call__(self, model, x, y, epoch, batch):
        cfg = self.config
        k = n_adversarial(len(x), cfg.mix_ratio)
        seed = int(np.random.SeedSequence([cfg.seed, 4, epoch, batch]).generate_state(1)[0])
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(x), size=k, replace=k > len(x))
        attack = replace(cfg.attack, seed=seed)
        adv, _ = run_attack(model, x[picked], y[picked], attack)
        self.adversarial_rows += k
        self.total_rows += len(x) + k
        return np.concatenate([x, adv]), np.concatenate([y, y[picked]])


@dataclass
class HardenedResult:
    hardened: object
    baseline: object
    mixed: MixedTrainingSet  # None for online generation
    config: AdvTrainConfig
    baseline_history: list
    hardened_history: list
    adversarial_rows: int = 0
    total_rows: int = 0

    def save(self, path):
        extra = self.config.header()
        extra["defense.donor_fingerprint"] = self.baseline.fingerprint()
        extra["defense.adversarial_rows"] = self.adversarial_rows
        extra["defense.total_rows"] = self.total_rows
        save_model(path, self.hardened, self.config.train, extra)


def adversarial_train(clean_train, config, donor=None):
    """Train a baseline on clean data (unless ``donor`` is given) and a fresh model
    of the same architecture on clean plus adversarial rows."""
    baseline_history = []
    if donor is None:
        donor = build_detector(clean_train.features.shape[1], config.train)
        donor, baseline_history = train(donor, clean_train, config.train)
    hardened = build_detector(clean_train.features.shape[1], config.train)
    if hardened.sizes != donor.sizes:
        raise ConfigError(f"donor topology {donor.sizes} differs from {hardened.sizes}")
    if config.generation == "static":
        mixed = build_mixed_set(clean_train, donor, config)
        hardened, history = train(hardened, mixed.dataset, config.train)
        n_adv, n_total = int(mixed.adversarial.sum()), len(mixed.adversarial)
    else:
        mixed = None
        mixer = OnlineMixer(config)
        hardened, history = train(hardened, clean_train, config.train, augment=mixer)
        n_adv, n_total = mixer.adversarial_rows, mixer.total_rows
    return HardenedResult(hardened, donor, mixed, config, baseline_history, history, n_adv, n_total)
