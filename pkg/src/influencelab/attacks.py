"""Poisoning attacks against a trained victim model.

Untargeted (availability): loss-maximizing PGD, delusive targeted-class
perturbation (DAP), and class-wise universal random perturbation (DURP).
Targeted (integrity): feature collision against a frozen feature extractor
and gradient matching of a chosen adversarial gradient.

Every attack is clean-label (labels never change), keeps pixels in [0, 1],
and respects its l_inf budget; all are deterministic given the victim
parameters, inputs, and seed.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import nn


class DegenerateTargetError(ValueError):
    """The adversarial target gradient vanishes; nothing to match."""


class NonFiniteObjectiveError(RuntimeError):
    """An attack objective left the finite range; diagnostics in the message."""


@dataclass(frozen=True)
class AttackBudget:
    """l_inf bound, iteration count, and step size of a perturbation attack.

    step_size=None resolves to xi/4.
    """

    xi: float
    steps: int = 40
    step_size: float | None = None

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("perturbation budget must be non-negative")
        if self.steps < 0:
            raise ValueError("step count must be non-negative")

    @property
    def resolved_step(self) -> float:
        return self.step_size if self.step_size is not None else self.xi / 4.0


@dataclass(frozen=True)
class TargetSpec:
    """A targeted attack instance: the example to flip, the class to flip it
    to, and the training rows the attacker may perturb."""

    target_example: nn.Example
    y_adv: int
    base_indices: np.ndarray

    def __post_init__(self):
        if int(self.y_adv) == self.target_example.y:
            raise ValueError("adversarial class must differ from the target's true class")
        object.__setattr__(self, "y_adv", int(self.y_adv))
        idx = np.ascontiguousarray(self.base_indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "base_indices", idx)


def _project(X: np.ndarray, X0: np.ndarray, xi: float) -> np.ndarray:
    return X0 + np.clip(X - X0, -xi, xi)


def pgd_untargeted_rows(victim: nn.ParamVector, X: np.ndarray, y: np.ndarray,
                        budget: AttackBudget) -> np.ndarray:
    """Loss-maximizing signed-gradient ascent within the xi ball, batched."""
    X0 = np.asarray(X, dtype=np.float64)
    Xp = X0.copy()
    step = budget.resolved_step
    for _ in range(budget.steps):
        g = nn.grad_input_rows(victim, Xp, y)
        Xp = np.clip(_project(Xp + step * np.sign(g), X0, budget.xi), 0.0, 1.0)
    return Xp


def pgd_untargeted(victim: nn.ParamVector, z: nn.Example, budget: AttackBudget,
                   rng: np.random.Generator | None = None) -> nn.Example:
    """PGD availability poison for one example; the label is kept."""
    rows = pgd_untargeted_rows(victim, z.x[None, :], np.asarray([z.y]), budget)
    return nn.Example(rows[0], z.y)


def least_likely_classes(victim: nn.ParamVector, X: np.ndarray) -> np.ndarray:
    """The victim's least-probable class per row (the delusion target)."""
    return nn.forward(victim, X).argmin(axis=1)


def dap_rows(victim: nn.ParamVector, X: np.ndarray, y: np.ndarray,
             budget: AttackBudget) -> np.ndarray:
    """Delusive perturbation: descend the loss toward the victim's least
    probable class at the original input, within the xi ball."""
    X0 = np.asarray(X, dtype=np.float64)
    t = least_likely_classes(victim, X0)
    Xp = X0.copy()
    step = budget.resolved_step
    for _ in range(budget.steps):
        g = nn.grad_input_rows(victim, Xp, t)
        Xp = np.clip(_project(Xp - step * np.sign(g), X0, budget.xi), 0.0, 1.0)
    return Xp


def dap(victim: nn.ParamVector, z: nn.Example, budget: AttackBudget,
        rng: np.random.Generator | None = None) -> nn.Example:
    rows = dap_rows(victim, z.x[None, :], np.asarray([z.y]), budget)
    return nn.Example(rows[0], z.y)


def durp(subset, xi: float, rng: np.random.Generator,
         num_classes: int | None = None) -> np.ndarray:
    """Class-wise universal random perturbation: one uniform [-xi, xi]^d draw
    per class, shared by every row of that class, then clipped to [0, 1]."""
    X, y = nn.as_xy(subset)
    d = X.shape[1]
    n_classes = num_classes if num_classes is not None else (int(y.max()) + 1 if y.size else 0)
    mu = rng.uniform(-xi, xi, size=(n_classes, d))
    return np.clip(X + mu[y], 0.0, 1.0)


def feature_collision(victim: nn.ParamVector, base: nn.Example, target_x: np.ndarray,
                      iters: int = 1000, beta_fc: float | None = None,
                      step_size: float = 0.05, xi: float | None = None) -> nn.Example:
    """Clean-label collision poison: move the base image so its penultimate
    features match the target's while staying visually close to the base.

    Forward step on the feature term, proximal step on the base-proximity
    term (so a huge beta_fc pins the output at the base), then the pixel clip
    and optional xi-ball projection.
    """
    if victim.spec.n_affine < 2:
        raise ValueError("feature collision needs a victim with at least one hidden layer")
    x0 = np.asarray(base.x, dtype=np.float64)
    phi_t = nn.features(victim, np.asarray(target_x, dtype=np.float64))
    if beta_fc is None:
        # balances the pixel term against the (smaller) feature space
        beta_fc = 0.1 * phi_t.size / x0.size
    x = x0.copy()
    for it in range(iters):
        diff = nn.features(victim, x) - phi_t
        obj = float(diff @ diff + beta_fc * ((x - x0) @ (x - x0)))
        if not np.isfinite(obj):
            raise NonFiniteObjectiveError(
                f"feature-collision objective became non-finite at iteration {it} (beta_fc={beta_fc})"
            )
        g = nn.feature_input_grad(victim, x, 2.0 * diff)
        x = (x - step_size * g + step_size * beta_fc * x0) / (1.0 + step_size * beta_fc)
        if xi is not None:
            x = _project(x, x0, xi)
        x = np.clip(x, 0.0, 1.0)
    return nn.Example(x, base.y)


def feature_distance(victim: nn.ParamVector, x: np.ndarray, target_x: np.ndarray) -> float:
    return float(np.linalg.norm(nn.features(victim, x) - nn.features(victim, target_x)))


def gradient_cosine(victim: nn.ParamVector, rows, tspec: TargetSpec) -> float:
    """Alignment of the mean base-row gradient with the adversarial gradient."""
    X, y = nn.as_xy(rows)
    a = nn.grad_params(victim, tspec.target_example.x, tspec.y_adv)
    g = nn.mean_grad(victim, (X, y))
    na, ng = np.linalg.norm(a), np.linalg.norm(g)
    if na == 0.0:
        raise DegenerateTargetError("adversarial gradient at the target is zero")
    if ng == 0.0:
        return 0.0
    return float(a @ g / (na * ng))


def gradient_matching(victim: nn.ParamVector, bases, tspec: TargetSpec,
                      budget: AttackBudget) -> np.ndarray:
    """Witch-style gradient matching: signed-gradient descent on
    1 - cos(adversarial gradient, mean gradient of the perturbed bases),
    each perturbation projected to the xi ball and pixels clipped."""
    X0, y = nn.as_xy(bases)
    a = nn.grad_params(victim, tspec.target_example.x, tspec.y_adv)
    na = np.linalg.norm(a)
    if na == 0.0:
        raise DegenerateTargetError("adversarial gradient at the target is zero")
    m = X0.shape[0]
    Xp = X0.copy()
    step = budget.resolved_step
    for _ in range(budget.steps):
        g = nn.mean_grad(victim, (Xp, y))
        ng = np.linalg.norm(g)
        if ng == 0.0:
            break
        cos = a @ g / (na * ng)
        # d cos / d g, then chain through the per-row mean gradient
        u = a / (na * ng) - (cos / (ng * ng)) * g
        rowgrad = nn.mixed_grad_rows(victim, Xp, y, u) / m
        # descend 1 - cos  <=>  ascend cos
        Xp = np.clip(_project(Xp + step * np.sign(rowgrad), X0, budget.xi), 0.0, 1.0)
    return Xp


def write_manifest(path, records: list[dict]):
    """Sidecar manifest for a persisted poisoned set: one record per attacked
    row (origin_index, attack, xi, seed)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["origin_index", "attack", "xi", "seed"])
        writer.writeheader()
        for rec in records:
            writer.writerow(rec)


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
