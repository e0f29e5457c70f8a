"""White-box untargeted evasion attacks (FGSM, BIM, PGD) under an L-inf budget.

All attacks work on encoded (standardized) feature vectors, take gradients in
inference mode and never modify the model or their inputs.
"""

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import fileio
from .errors import ConfigError, ShapeError
from .nn import forward, input_gradient, loss

log = logging.getLogger(__name__)

KINDS = ("FGSM", "BIM", "PGD")

# PGD restart noise is drawn per block of rows so results do not depend on
# how a dataset is chunked.
NOISE_BLOCK = 512
CHUNK = 8 * NOISE_BLOCK


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "PGD"
    epsilon: float = 0.1
    step_size: float = None  # None -> epsilon / 4
    iterations: int = 10
    restarts: int = 5
    seed: int = 0
    use_sign: bool = True

    def __post_init__(self):
        kind = str(self.kind).upper()
        if kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        _check_eps(self.epsilon)
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")

    @property
    def alpha(self):
        return self.step_size if self.step_size is not None else self.epsilon / 4.0

    def with_epsilon(self, epsilon):
        return replace(self, epsilon=float(epsilon))

    def as_dict(self):
        d = asdict(self)
        d["step_size"] = self.alpha
        return d

    @classmethod
    def from_kv(cls, items, prefix="attack."):
        get = lambda k: items.get(prefix + k)  # noqa: E731
        step = get("step_size")
        return cls(
            kind=get("kind"),
            epsilon=float(get("epsilon")),
            step_size=float(step) if step else None,
            iterations=int(get("iterations")),
            restarts=int(get("restarts")),
            seed=int(get("seed")),
            use_sign=get("use_sign") == "true",
        )


def _check_eps(epsilon):
    if not epsilon >= 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")


def _check_alpha(alpha, iterations):
    if not alpha > 0:
        raise ConfigError(f"step size must be > 0, got {alpha}")
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")


def _as_batch(model, x, y):
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=model.dtype)
    single = x.ndim == 1
    if single:
        x, y = x[None, :], y[None, :]
    if y.shape != (len(x), model.sizes[-1]):
        raise ShapeError(f"labels shape {y.shape} does not match inputs {x.shape}")
    return x, y, single


def project_linf(x_candidate, x_origin, epsilon):
    """Clamp each coordinate of ``x_candidate`` into [x_origin - eps, x_origin + eps]."""
    x_candidate = np.asarray(x_candidate)
    x_origin = np.asarray(x_origin)
    if x_candidate.shape != x_origin.shape:
        raise ShapeError(f"shape mismatch {x_candidate.shape} vs {x_origin.shape}")
    return np.clip(x_candidate, x_origin - epsilon, x_origin + epsilon)


def _step(grad, use_sign):
    return np.sign(grad) if use_sign else grad


def fgsm(model, x, y, epsilon, use_sign=True):
    """x' = x + eps * sign(grad_x J(x, y)).

    With ``use_sign=False`` the raw gradient is scaled by eps instead; that
    variant is kept for comparison and is not confined to the eps-ball.
    """
    _check_eps(epsilon)
    xb, yb, single = _as_batch(model, x, y)
    if epsilon == 0:
        out = xb.copy()
    else:
        _, grad = input_gradient(model, xb, yb)
        out = xb + epsilon * _step(grad, use_sign)
    return out[0] if single else out


def _iterate(model, x_orig, x_start, y, epsilon, alpha, iterations, use_sign):
    xt = x_start
    for _ in range(iterations):
        _, grad = input_gradient(model, xt, y)
        xt = project_linf(xt + alpha * _step(grad, use_sign), x_orig, epsilon)
    return xt


def bim(model, x, y, epsilon, alpha, iterations, use_sign=True):
    """Iterated FGSM with step ``alpha``, clipped back into the eps-ball after each step."""
    _check_eps(epsilon)
    _check_alpha(alpha, iterations)
    xb, yb, single = _as_batch(model, x, y)
    if epsilon == 0:
        out = xb.copy()
    else:
        out = _iterate(model, xb, xb, yb, epsilon, alpha, iterations, use_sign)
    return out[0] if single else out


def restart_noise(seed, restart, n_rows, dim, epsilon, row_offset=0, dtype=np.float64):
    """Uniform [-eps, eps] start offsets for rows ``row_offset .. row_offset + n_rows``."""
    if row_offset % NOISE_BLOCK:
        raise ValueError(f"row_offset must be a multiple of {NOISE_BLOCK}")
    out = np.empty((n_rows, dim), dtype=dtype)
    first = row_offset // NOISE_BLOCK
    for j, start in enumerate(range(0, n_rows, NOISE_BLOCK)):
        rows = min(NOISE_BLOCK, n_rows - start)
        rng = np.random.default_rng([seed, restart, first + j])
        out[start:start + rows] = rng.uniform(-epsilon, epsilon, size=(rows, dim))
    return out


def _pgd(model, xb, yb, epsilon, alpha, iterations, restarts, seed, use_sign, row_offset):
    best = xb.copy()
    best_loss = np.full(len(xb), -np.inf)
    for r in range(restarts):
        start = xb + restart_noise(seed, r, len(xb), xb.shape[1], epsilon, row_offset, xb.dtype)
        if use_sign:
            start = project_linf(start, xb, epsilon)
        cand = _iterate(model, xb, start, yb, epsilon, alpha, iterations, use_sign)
        cand_loss = loss(forward(model, cand)[0].logits, yb)
        better = cand_loss > best_loss
        best[better] = cand[better]
        best_loss[better] = cand_loss[better]
    return best, best_loss


def pgd(model, x, y, epsilon, alpha, iterations, restarts=1, seed=0, use_sign=True, row_offset=0):
    """BIM started from uniform random points in the eps-ball; the restart with
    the highest final loss is kept per sample."""
    _check_eps(epsilon)
    _check_alpha(alpha, iterations)
    if restarts < 1:
        raise ConfigError(f"restarts must be >= 1, got {restarts}")
    xb, yb, single = _as_batch(model, x, y)
    if epsilon == 0:
        out = xb.copy()
    else:
        out, _ = _pgd(model, xb, yb, epsilon, alpha, iterations, restarts, seed, use_sign, row_offset)
    return out[0] if single else out


def run_attack(model, x, y, config, row_offset=0):
    """Apply ``config`` to a batch; returns (x_adv, per-sample loss at x_adv)."""
    xb, yb, _ = _as_batch(model, x, y)
    eps = config.epsilon
    if eps == 0:
        adv = xb.copy()
    elif config.kind == "FGSM":
        adv = fgsm(model, xb, yb, eps, config.use_sign)
    elif config.kind == "BIM":
        adv = bim(model, xb, yb, eps, config.alpha, config.iterations, config.use_sign)
    else:
        adv, _ = _pgd(model, xb, yb, eps, config.alpha, config.iterations, config.restarts,
                      config.seed, config.use_sign, row_offset)
    return adv, loss(forward(model, adv)[0].logits, yb)


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    losses: np.ndarray
    linf: np.ndarray
    config: AttackConfig = None

    def as_dataset(self, like):
        from .data import EncodedDataset
        return EncodedDataset(self.perturbed, self.labels, f"{like.source_split}-adv", like.categories)

    def max_violation(self):
        """Largest amount by which any row exceeds the eps budget (<= 0 when inside)."""
        return float(np.max(self.linf - self.config.epsilon)) if len(self.linf) else 0.0

    def save(self, path, sidecar=None):
        with fileio.atomic_write(path, "wb") as fh:
            fileio.write_matrix(fh, self.perturbed)
            fileio.write_matrix(fh, self.labels)
            fileio.write_matrix(fh, self.losses)
            fileio.write_matrix(fh, self.linf)
        if sidecar is not None:
            items = {f"attack.{k}": v for k, v in self.config.as_dict().items()}
            items["rows"] = len(self.perturbed)
            items["max_linf"] = float(self.linf.max()) if len(self.linf) else 0.0
            items["mean_loss"] = float(self.losses.mean()) if len(self.losses) else 0.0
            fileio.write_kv(sidecar, items, header="adversarial batch configuration")


def attack_batch(model, dataset, config, progress=None):
    """Attack every row of ``dataset``; the dataset itself is left untouched."""
    x = np.asarray(dataset.features, dtype=model.dtype)
    y = np.asarray(dataset.labels, dtype=model.dtype)
    adv = np.empty_like(x)
    losses = np.empty(len(x))
    for start in range(0, len(x), CHUNK):
        sl = slice(start, start + CHUNK)
        adv[sl], losses[sl] = run_attack(model, x[sl], y[sl], config, row_offset=start)
        if progress:
            progress(min(start + CHUNK, len(x)), len(x))
    linf = np.max(np.abs(adv - x), axis=1) if x.size else np.zeros(len(x))
    return AdversarialBatch(x.copy(), adv, y.copy(), losses, linf, config)
