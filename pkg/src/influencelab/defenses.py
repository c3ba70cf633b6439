"""Training defenses: influential-noise training (subset selection plus
healthy-noise rounds), plain undefended SGD, friendly-noise training, and
margin-capped adversarial training.

Every trainer derives two child RNG streams from the caller's generator, one
for SGD batch order and one for influence estimation, so degenerate
configurations (empty schedule, zero noise scale) reproduce plain SGD
bit-for-bit.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import influence, nn
from .data import LabeledSet
from .influence import LissaConfig


@dataclass(frozen=True)
class HintConfig:
    """Influential-noise training settings.

    epochs is the total epoch count T, pretrain_epochs the warm-up prefix;
    schedule lists the (global) epochs at which healthy noise is refreshed and
    must sit inside (pretrain_epochs, epochs]. select_ratio is the fraction of
    training rows that receive noise; beta bounds the accumulated noise in
    l_inf and gamma scales each update step.
    """

    epochs: int = 30
    pretrain_epochs: int = 2
    gamma: float = 0.1
    beta: float = 0.062
    select_ratio: float = 0.5
    schedule: tuple[int, ...] = (5, 15)
    learning_rate: float = 0.2
    batch_size: int = 128
    lissa: LissaConfig = field(default_factory=LissaConfig)
    noise_lissa: LissaConfig = field(
        default_factory=lambda: LissaConfig(depth=300, repetitions=2, batch_size=32)
    )
    select_method: str = "lissa"
    trainable: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(sorted(int(t) for t in self.schedule)))
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.schedule:
            if not self.pretrain_epochs < self.schedule[0]:
                raise ValueError("noise updates must come after the pre-training epochs")
            if self.schedule[-1] > self.epochs:
                raise ValueError("noise update scheduled past the final epoch")
        if not 0.0 < self.select_ratio <= 1.0:
            raise ValueError("select_ratio must lie in (0, 1]")
        if not self.beta > 0:
            raise ValueError("noise bound beta must be positive")
        if self.gamma < 0:
            raise ValueError("scaling factor gamma must be non-negative")
        if self.learning_rate < 0 or self.batch_size < 1:
            raise ValueError("bad optimizer settings")
        if self.select_method not in ("lissa", "exact"):
            raise ValueError(f"unknown select_method {self.select_method!r}")
        if self.trainable not in ("all", "top"):
            raise ValueError(f"unknown trainable mode {self.trainable!r}")


@dataclass(frozen=True)
class NoisyTrainState:
    """Selected rows with their accumulated healthy noise.

    x_hat always equals clip01(x_clean + delta) with delta recovered as
    x_hat - x_clean, so the noise-bound invariants are checkable at any time.
    """

    sel_idx: np.ndarray
    unsel_idx: np.ndarray
    x_clean: np.ndarray
    x_hat: np.ndarray
    y_sel: np.ndarray

    def deltas(self) -> np.ndarray:
        return self.x_hat - self.x_clean

    def validate(self, beta: float):
        d = self.deltas()
        if d.size and np.abs(d).max() > beta + 1e-12:
            raise AssertionError(f"healthy noise exceeds bound: {np.abs(d).max()} > {beta}")
        if self.x_hat.size and (self.x_hat.min() < 0.0 or self.x_hat.max() > 1.0):
            raise AssertionError("perturbed pixels left [0, 1]")


def _trainable_mask(spec: nn.ModelSpec, trainable: str) -> np.ndarray | None:
    return nn.top_layer_mask(spec) if trainable == "top" else None


def sgd_epoch(params: nn.ParamVector, X: np.ndarray, y: np.ndarray, lr: float,
              batch_size: int, rng: np.random.Generator,
              mask: np.ndarray | None = None) -> nn.ParamVector:
    """One pass of minibatch SGD with a fresh seeded shuffle."""
    order = rng.permutation(len(y))
    for start in range(0, len(y), batch_size):
        take = order[start : start + batch_size]
        params = nn.sgd_step(params, (X[take], y[take]), lr, mask=mask)
    return params


def pretrain(params: nn.ParamVector, train_set, epochs: int, lr: float,
             batch_size: int, rng: np.random.Generator,
             mask: np.ndarray | None = None) -> nn.ParamVector:
    """Warm-up epochs of plain minibatch SGD on the raw training set."""
    X, y = nn.as_xy(train_set)
    for _ in range(epochs):
        params = sgd_epoch(params, X, y, lr, batch_size, rng, mask=mask)
    return params


def sgd_train(cfg: HintConfig, train_set, params_init: nn.ParamVector,
              rng: np.random.Generator) -> nn.ParamVector:
    """Undefended baseline: cfg.epochs of minibatch SGD."""
    rng_sgd, _ = rng.spawn(2)
    mask = _trainable_mask(params_init.spec, cfg.trainable)
    return pretrain(params_init, train_set, cfg.epochs, cfg.learning_rate,
                    cfg.batch_size, rng_sgd, mask=mask)


def secinf(params: nn.ParamVector, train_set: LabeledSet, val_set, select_ratio: float,
           lissa_cfg: LissaConfig, rng: np.random.Generator | None = None,
           method: str = "lissa") -> tuple[np.ndarray, np.ndarray]:
    """Pick the ceil(r*n) rows with the largest absolute upweighting influence.

    The IHVP against the validation gradient is computed once over the top
    layers and reused for every row. Ties in |score| break by ascending
    origin index, which makes the selection stable under row shuffling.
    Returns (selected, unselected) row positions, selection in rank order.
    """
    if not 0.0 < select_ratio <= 1.0:
        raise ValueError("select_ratio must lie in (0, 1]")
    mask = nn.top_layer_mask(params.spec)
    s_vec = influence.compute_influence_vector(
        params, train_set, val_set, lissa_cfg, mask=mask, rng=rng, method=method
    )
    scores = np.array([
        influence.influence_up_loss(nn.Example(train_set.X[i], train_set.y[i]), s_vec, params)
        for i in range(len(train_set))
    ])
    order = np.lexsort((train_set.origin_index, -np.abs(scores)))
    k = math.ceil(select_ratio * len(train_set))
    return order[:k], np.sort(order[k:])


def addnoise(state: NoisyTrainState, params: nn.ParamVector, hessian_set, val_set,
             gamma: float, beta: float, lissa_cfg: LissaConfig,
             rng: np.random.Generator | None = None,
             scale_retries: int = 2) -> NoisyTrainState:
    """One healthy-noise round over the selected rows.

    Recomputes the full-network influence vector against the current
    parameters, steps each accumulated noise opposite its perturbation
    influence, projects to the l_inf beta ball, and clips pixels.

    The full-network Hessian of a non-convex net is indefinite, which the
    plain recursion cannot invert; one spectrum probe lifts the damping past
    the most negative eigenvalue and fixes the recursion scale, and a LiSSA
    divergence still triggers a retry with a 10x larger scale.
    """
    rng = rng or np.random.default_rng(0)
    Xh, yh = nn.as_xy(hessian_set)
    probe = rng.choice(len(yh), size=min(256, len(yh)), replace=False)
    lam_min, lam_max = influence.estimate_eigen_bounds(
        params, (Xh[probe], yh[probe]), rng=rng)
    damping = max(lissa_cfg.damping, 1.5 * max(0.0, -lam_min))
    if lissa_cfg.scale is None:
        cfg = replace(lissa_cfg, damping=damping,
                      scale=max(1.5 * (lam_max + damping), 1.0))
    else:
        cfg = replace(lissa_cfg, damping=damping)
    for attempt in range(scale_retries + 1):
        try:
            s_vec = influence.compute_influence_vector(
                params, hessian_set, val_set, cfg, mask=None, rng=rng, method="lissa"
            )
            break
        except influence.ScaleTooSmallError:
            if attempt == scale_retries:
                raise
            base = cfg.scale if cfg.scale is not None else 10.0
            cfg = replace(cfg, scale=base * 10.0)

    pert = influence.pert_loss_rows(state.x_hat, state.y_sel, s_vec, params)
    delta = np.clip(state.deltas() - gamma * pert, -beta, beta)
    x_hat = np.clip(state.x_clean + delta, 0.0, 1.0)
    new_state = replace(state, x_hat=x_hat)
    new_state.validate(beta)
    return new_state


def hint_train(cfg: HintConfig, train_set: LabeledSet, val_set,
               params_init: nn.ParamVector, rng: np.random.Generator,
               monitor=None) -> nn.ParamVector:
    """Influential-noise training.

    Warm up, select the influential subset once, then run the remaining
    epochs of SGD, refreshing the healthy noise of the selected rows at each
    scheduled epoch before that epoch's parameter updates. monitor, if given,
    is called as monitor(epoch, state) after every noise round.
    """
    rng_sgd, rng_inf = rng.spawn(2)
    mask = _trainable_mask(params_init.spec, cfg.trainable)
    X, y = np.array(train_set.X), np.array(train_set.y)

    params = pretrain(params_init, (X, y), cfg.pretrain_epochs, cfg.learning_rate,
                      cfg.batch_size, rng_sgd, mask=mask)

    state = None
    if cfg.schedule:
        sel, unsel = secinf(params, train_set, val_set, cfg.select_ratio,
                            cfg.lissa, rng=rng_inf, method=cfg.select_method)
        state = NoisyTrainState(sel_idx=sel, unsel_idx=unsel,
                                x_clean=X[sel].copy(), x_hat=X[sel].copy(),
                                y_sel=y[sel].copy())

    for epoch in range(cfg.pretrain_epochs + 1, cfg.epochs + 1):
        if state is not None and epoch in cfg.schedule:
            state = addnoise(state, params, (X, y), val_set, cfg.gamma, cfg.beta,
                             cfg.noise_lissa, rng=rng_inf)
            X[state.sel_idx] = state.x_hat
            if monitor is not None:
                monitor(epoch, state)
        params = sgd_epoch(params, X, y, cfg.learning_rate, cfg.batch_size,
                           rng_sgd, mask=mask)
    return params


@dataclass(frozen=True)
class FriendsConfig:
    """Friendly-noise training settings; bernoulli defaults to beta/2 and the
    optimization step to beta/4."""

    epochs: int = 30
    pretrain_epochs: int = 2
    learning_rate: float = 0.2
    batch_size: int = 128
    beta: float = 0.062
    lam: float = 1.0
    noise_steps: int = 10
    noise_step_size: float | None = None
    bernoulli: float | None = None
    trainable: str = "all"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("noise bound beta must be positive")
        if self.noise_steps < 0 or self.lam < 0:
            raise ValueError("bad friendly-noise settings")

    @property
    def resolved_step(self) -> float:
        return self.noise_step_size if self.noise_step_size is not None else self.beta / 4.0

    @property
    def resolved_bernoulli(self) -> float:
        return self.bernoulli if self.bernoulli is not None else self.beta / 2.0


def generate_friendly_noise(params: nn.ParamVector, X: np.ndarray, cfg: FriendsConfig) -> np.ndarray:
    """Per-row perturbation maximizing its own size while keeping the model's
    prediction distribution: projected gradient steps on
    KL(f(x+eps) || f(x)) - lam * ||eps||_2, starting from eps = 0."""
    logq = nn._log_softmax(nn.forward(params, X))
    eps = np.zeros_like(X)
    for _ in range(cfg.noise_steps):
        logits = nn.forward(params, X + eps)
        logp = nn._log_softmax(logits)
        P = np.exp(logp)
        kl = (P * (logp - logq)).sum(axis=1, keepdims=True)
        dlogits = P * ((logp - logq) - kl)
        g = nn.backprop_to_input(params, X + eps, dlogits)
        norms = np.linalg.norm(eps, axis=1, keepdims=True)
        g -= cfg.lam * np.divide(eps, norms, out=np.zeros_like(eps), where=norms > 0)
        eps = np.clip(eps - cfg.resolved_step * g, -cfg.beta, cfg.beta)
    return eps


def friends_train(cfg: FriendsConfig, train_set, val_set, params_init: nn.ParamVector,
                  rng: np.random.Generator) -> nn.ParamVector:
    """Friendly-noise baseline: warm up, fit one friendly perturbation per
    row, then train on the perturbed rows plus fresh Bernoulli pixel noise
    each epoch."""
    rng_sgd, rng_noise = rng.spawn(2)
    mask = _trainable_mask(params_init.spec, cfg.trainable)
    X, y = nn.as_xy(train_set)

    params = pretrain(params_init, (X, y), cfg.pretrain_epochs, cfg.learning_rate,
                      cfg.batch_size, rng_sgd, mask=mask)
    eps = generate_friendly_noise(params, X, cfg)

    b = cfg.resolved_bernoulli
    for _ in range(cfg.pretrain_epochs, cfg.epochs):
        rademacher = rng_noise.integers(0, 2, size=X.shape) * 2 - 1
        X_epoch = np.clip(X + eps + b * rademacher, 0.0, 1.0)
        params = sgd_epoch(params, X_epoch, y, cfg.learning_rate, cfg.batch_size,
                           rng_sgd, mask=mask)
    return params


@dataclass(frozen=True)
class AtdaConfig:
    """Margin-capped adversarial training settings."""

    epochs: int = 30
    learning_rate: float = 0.2
    batch_size: int = 128
    beta: float = 0.25
    tau: float = 0.5
    inner_steps: int = 7
    inner_step_size: float | None = None
    trainable: str = "all"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("margin tau must be positive")
        if self.beta <= 0 or self.inner_steps < 0:
            raise ValueError("bad adversarial-training settings")

    @property
    def resolved_step(self) -> float:
        return self.inner_step_size if self.inner_step_size is not None else self.beta / 4.0


def _loss_margins(params: nn.ParamVector, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """l(x, y) - min_c l(x, c) per row."""
    logp = nn._log_softmax(nn.forward(params, X))
    losses = -logp
    return losses[np.arange(len(y)), y] - losses.min(axis=1)


def craft_margin_adversarial(params: nn.ParamVector, Xb: np.ndarray, yb: np.ndarray,
                             cfg: AtdaConfig) -> tuple[np.ndarray, bool]:
    """Push rows up the loss inside the beta ball, per-row early exit once the
    loss margin clears tau. Returns (crafted rows, stopped-before-budget)."""
    Xa = Xb.copy()
    step = cfg.resolved_step
    for _ in range(cfg.inner_steps):
        active = _loss_margins(params, Xa, yb) < cfg.tau
        if not active.any():
            return Xa, True
        g = nn.grad_input_rows(params, Xa[active], yb[active])
        Xa[active] = np.clip(
            Xb[active] + np.clip(Xa[active] + step * np.sign(g) - Xb[active], -cfg.beta, cfg.beta),
            0.0, 1.0,
        )
    return Xa, False


def atda_train(cfg: AtdaConfig, train_set, params_init: nn.ParamVector,
               rng: np.random.Generator, stats: dict | None = None) -> nn.ParamVector:
    """Adversarial training with early exit: each minibatch is pushed up the
    loss within the beta ball until every row clears the margin tau (or the
    step budget runs out), then trained on."""
    rng_sgd, _ = rng.spawn(2)
    mask = _trainable_mask(params_init.spec, cfg.trainable)
    X, y = nn.as_xy(train_set)
    n = len(y)

    params = params_init
    for _ in range(cfg.epochs):
        order = rng_sgd.permutation(n)
        for start in range(0, n, cfg.batch_size):
            take = order[start : start + cfg.batch_size]
            Xa, early = craft_margin_adversarial(params, X[take], y[take], cfg)
            if stats is not None:
                stats["inner_loops"] = stats.get("inner_loops", 0) + 1
                stats["early_stops"] = stats.get("early_stops", 0) + int(early)
            params = nn.sgd_step(params, (Xa, y[take]), cfg.learning_rate, mask=mask)
    return params


def evaluate_accuracy(params: nn.ParamVector, dataset) -> float:
    """Mean 0/1 correctness of the argmax prediction."""
    X, y = nn.as_xy(dataset)
    if X.shape[0] == 0:
        raise ValueError("cannot evaluate accuracy of an empty set")
    return float((nn.forward(params, X).argmax(axis=1) == y).mean())


def evaluate_asr(params: nn.ParamVector, targets) -> float:
    """Fraction of targets predicted as their intended adversarial class.

    Misclassification into any other class does not count as success.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("cannot evaluate attack success on an empty target list")
    hits = sum(
        int(nn.forward(params, t.target_example.x).argmax()) == t.y_adv for t in targets
    )
    return hits / len(targets)


def save_noise_state(path, state: NoisyTrainState):
    np.savez(path, sel_idx=state.sel_idx, unsel_idx=state.unsel_idx,
             x_clean=state.x_clean, x_hat=state.x_hat, y_sel=state.y_sel)


def load_noise_state(path) -> NoisyTrainState:
    with np.load(path) as npz:
        return NoisyTrainState(sel_idx=npz["sel_idx"], unsel_idx=npz["unsel_idx"],
                               x_clean=npz["x_clean"], x_hat=npz["x_hat"], y_sel=npz["y_sel"])
