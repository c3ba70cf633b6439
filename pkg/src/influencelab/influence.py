"""Influence estimation: validation-group gradients, inverse-Hessian-vector
products (dense oracle and stochastic LiSSA recursion), and the two loss-space
influence scores built on a cached IHVP.

The cached vector s = H^{-1} grad L(D_val) is computed once per model
snapshot and reused across every per-example query; consumers must verify the
snapshot id so a stale cache is never silently applied.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from . import nn

EXACT_SOLVE_LIMIT = 2000  # dense Hessian materialization bound


class NonInvertibleHessianError(RuntimeError):
    """The (damped) Hessian is singular or indefinite; raise the damping."""


class ScaleTooSmallError(RuntimeError):
    """The LiSSA recursion diverged; raise the scale."""

    def __init__(self, message: str, norm_trace: list[float]):
        super().__init__(message)
        self.norm_trace = norm_trace


class StaleInfluenceError(RuntimeError):
    """A cached influence vector was used against different parameters."""


class RetrainingError(RuntimeError):
    """The retraining oracle did not reach the requested gradient norm."""


@dataclass(frozen=True)
class LissaConfig:
    """Stochastic IHVP settings: recursion depth, repetition count, scale,
    damping, and Hessian minibatch size. scale=None picks a scale from a
    power-iteration estimate of the damped Hessian norm at call time."""

    depth: int = 500
    repetitions: int = 4
    scale: float | None = None
    damping: float = 0.01
    batch_size: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class InfluenceVector:
    """Cached IHVP s = H^{-1} grad L(D_val) bound to one parameter snapshot.

    s is stored full-length with exact zeros outside the mask; mask=None means
    the vector spans the whole network.
    """

    s: np.ndarray
    mask: np.ndarray | None
    snapshot_id: str

    def check_snapshot(self, params: nn.ParamVector):
        if nn.params_digest(params) != self.snapshot_id:
            raise StaleInfluenceError(
                "influence vector was computed against a different parameter snapshot"
            )


def val_grad(params: nn.ParamVector, val_set, mask: np.ndarray | None = None) -> np.ndarray:
    """Mean parameter gradient over the validation set."""
    X, y = nn.as_xy(val_set)
    if X.shape[0] == 0:
        raise ValueError("validation set must be non-empty")
    return nn.mean_grad(params, (X, y), mask=mask)


def _masked_indices(p: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return np.arange(p)
    return np.flatnonzero(mask)


def ihvp_exact(
    params: nn.ParamVector,
    train_batch,
    v: np.ndarray,
    damping: float = 0.0,
    mask: np.ndarray | None = None,
    hvp_fn=None,
) -> np.ndarray:
    """Solve (H + damping I) s = v with a dense symmetric factorization.

    H is the Hessian of the batch-mean loss restricted to the masked block.
    Only valid when the masked parameter count stays small enough to
    materialize. hvp_fn(batch, s) overrides the Hessian-vector oracle (test
    surrogate hook).
    """
    p = params.spec.param_count
    idx = _masked_indices(p, mask)
    if idx.size > EXACT_SOLVE_LIMIT:
        raise ValueError(f"masked parameter count {idx.size} exceeds dense solve limit {EXACT_SOLVE_LIMIT}")
    v = np.asarray(v, dtype=np.float64)
    X, y = nn.as_xy(train_batch)
    if hvp_fn is None:
        hvp_fn = lambda batch, s: nn.hvp(params, batch, s, mask=mask)

    H = np.empty((idx.size, idx.size))
    basis = np.zeros(p)
    for j, k in enumerate(idx):
        basis[k] = 1.0
        H[:, j] = hvp_fn((X, y), basis)[idx]
        basis[k] = 0.0
    H = 0.5 * (H + H.T)  # symmetrize away residual round-off
    A = H + damping * np.eye(idx.size)

    try:
        chol = scipy.linalg.cho_factor(A)
        s_masked = scipy.linalg.cho_solve(chol, v[idx])
    except scipy.linalg.LinAlgError as err:
        raise NonInvertibleHessianError(
            f"damped Hessian is not positive definite (damping={damping}); raise the damping"
        ) from err

    residual = np.linalg.norm(A @ s_masked - v[idx])
    if residual > 1e-8 * max(np.linalg.norm(v[idx]), 1e-300):
        raise NonInvertibleHessianError(
            f"dense solve residual {residual:.3e} too large; system is near-singular"
        )
    s = np.zeros(p)
    s[idx] = s_masked
    return s


def estimate_hessian_norm(
    params: nn.ParamVector,
    batch,
    mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    iters: int = 20,
    sample: int | None = 512,
) -> float:
    """Power-iteration estimate of the spectral norm of the batch Hessian.

    A row subsample (default 512) is plenty for a scale estimate and keeps
    the probe cheap on large training sets.
    """
    rng = rng or np.random.default_rng(0)
    p = params.spec.param_count
    u = rng.normal(size=p)
    if mask is not None:
        u = u * mask
    u /= np.linalg.norm(u)
    est = 0.0
    X, y = nn.as_xy(batch)
    if sample is not None and X.shape[0] > sample:
        take = rng.choice(X.shape[0], size=sample, replace=False)
        X, y = X[take], y[take]
    for _ in range(iters):
        hu = nn.hvp(params, (X, y), u, mask=mask)
        est = np.linalg.norm(hu)
        if est == 0.0:
            return 0.0
        u = hu / est
    return float(est)


def estimate_eigen_bounds(
    params: nn.ParamVector,
    batch,
    mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    iters: int = 60,
) -> tuple[float, float]:
    """(lambda_min, lambda_max) estimates for the batch Hessian.

    Power iteration gives the dominant magnitude; a second, shifted power
    iteration on (lambda_max I - H) recovers the bottom of the spectrum. Both
    are needed to keep IHVP solves well-posed on indefinite (non-convex)
    losses.
    """
    rng = rng or np.random.default_rng(0)
    X, y = nn.as_xy(batch)
    p = params.spec.param_count

    def power(apply):
        u = rng.normal(size=p)
        if mask is not None:
            u = u * mask
        u /= np.linalg.norm(u)
        lam = 0.0
        for _ in range(iters):
            hu = apply(u)
            norm = np.linalg.norm(hu)
            if norm == 0.0:
                return 0.0, u
            lam = float(u @ hu)  # Rayleigh quotient tracks the signed eigenvalue
            u = hu / norm
        return lam, u

    hv = lambda u: nn.hvp(params, (X, y), u, mask=mask)
    lam_dom, _ = power(hv)
    top = abs(lam_dom)
    lam_shift, _ = power(lambda u: top * u - hv(u))
    lam_min = top - lam_shift
    lam_max = max(lam_dom, lam_min)
    return float(min(lam_min, lam_max)), float(max(top, lam_max))


def resolve_damping(
    params: nn.ParamVector,
    batch,
    base_damping: float,
    mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    margin: float = 1.5,
) -> float:
    """Damping that makes (H + damping I) positive definite with a margin.

    Returns base_damping unchanged when the spectrum estimate is already
    non-negative; otherwise lifts it just past the most negative eigenvalue.
    The margin also has to absorb the spread of the per-minibatch spectra the
    stochastic recursion actually multiplies by, which reach below the
    mean-Hessian bound.
    """
    lam_min, _ = estimate_eigen_bounds(params, batch, mask=mask, rng=rng)
    if lam_min >= 0.0:
        return base_damping
    return max(base_damping, margin * (-lam_min))


def resolve_scale(cfg: LissaConfig, params, train_set, mask, rng) -> float:
    """Default scale: 1.5x the damped-Hessian norm estimate, floored at 1.

    The margin keeps the recursion contractive when power iteration
    underestimates the top eigenvalue, while staying small enough that the
    low-curvature directions still converge within the default depth.
    """
    if cfg.scale is not None:
        return cfg.scale
    est = estimate_hessian_norm(params, train_set, mask=mask, rng=rng) + cfg.damping
    return max(1.5 * est, 1.0)


def ihvp_lissa(
    params: nn.ParamVector,
    train_set,
    v: np.ndarray,
    cfg: LissaConfig,
    mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    record=None,
    hvp_fn=None,
) -> np.ndarray:
    """LiSSA estimate of (H + damping I)^{-1} v over the training set.

    Per repetition the recursion runs
        s_0 = v,  s_t = v + (1 - damping/scale) s_{t-1} - H_batch s_{t-1}/scale
    and yields s_depth/scale; repetitions are averaged. A growth of more than
    10x in the iterate norm over any 10 consecutive steps aborts with the
    divergence error and its norm trace. The first two windows are exempt:
    when the solution norm is far above ||v|| the early iterates legitimately
    grow about linearly, which crosses the 10x ratio only at steps 10-11.

    record, when given, is called as record(rep, step, estimate) with the
    current estimate s_t/scale. hvp_fn(batch, s) overrides the Hessian-vector
    oracle (test surrogate hook).
    """
    X, y = nn.as_xy(train_set)
    n = X.shape[0]
    if n == 0:
        raise ValueError("training set must be non-empty")
    v = np.asarray(v, dtype=np.float64)
    if mask is not None:
        v = v * mask
    if not np.any(v):
        return np.zeros_like(v)
    rng = rng or np.random.default_rng(0)
    if hvp_fn is None:
        hvp_fn = lambda batch, s: nn.hvp(params, batch, s, mask=mask)
        scale = resolve_scale(cfg, params, (X, y), mask, rng)
    else:
        scale = cfg.scale if cfg.scale is not None else 1.0
    bs = min(cfg.batch_size, n)

    total = np.zeros_like(v)
    for rep in range(cfg.repetitions):
        s = v.copy()
        norms = [float(np.linalg.norm(s))]
        for t in range(1, cfg.depth + 1):
            take = rng.choice(n, size=bs, replace=False)
            hs = hvp_fn((X[take], y[take]), s)
            s = v + (1.0 - cfg.damping / scale) * s - hs / scale
            norms.append(float(np.linalg.norm(s)))
            if t >= 12 and norms[-1] > 10.0 * norms[-11]:
                raise ScaleTooSmallError(
                    f"LiSSA diverged at step {t} (norm {norms[-1]:.3e}); "
                    f"scale {scale:.3g} is too small for this Hessian",
                    norm_trace=norms[-11:],
                )
            if record is not None:
                record(rep, t, s / scale)
        total += s / scale
    return total / cfg.repetitions


def compute_influence_vector(
    params: nn.ParamVector,
    train_set,
    val_set,
    cfg: LissaConfig,
    mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    method: str = "lissa",
) -> InfluenceVector:
    """Build the reusable s = H^{-1} grad L(D_val) for the current snapshot."""
    v = val_grad(params, val_set, mask=mask)
    if method == "lissa":
        s = ihvp_lissa(params, train_set, v, cfg, mask=mask, rng=rng)
    elif method == "exact":
        s = ihvp_exact(params, train_set, v, damping=cfg.damping, mask=mask)
    else:
        raise ValueError(f"unknown IHVP method {method!r}")
    return InfluenceVector(s=s, mask=mask, snapshot_id=nn.params_digest(params))


def influence_up_loss(
    z: nn.Example,
    s_vec: InfluenceVector,
    params: nn.ParamVector,
    mask: np.ndarray | None = None,
) -> float:
    """Upweighting influence of z on the validation loss: -s . grad_theta l(z).

    Positive means adding weight to z pushes the validation loss up (and,
    first-order, that dropping z would pull it down).
    """
    s_vec.check_snapshot(params)
    if mask is not None and s_vec.mask is not None and not np.array_equal(mask, s_vec.mask):
        raise ValueError("mask disagrees with the mask the influence vector was built with")
    g = nn.grad_params(params, z.x, z.y, mask=s_vec.mask)
    return float(-(s_vec.s @ g))


def influence_pert_loss(
    z: nn.Example,
    s_vec: InfluenceVector,
    params: nn.ParamVector,
) -> np.ndarray:
    """Per-pixel influence of perturbing z on the validation loss.

    Requires a full-network influence vector: the mixed input/parameter
    derivative runs through every layer.
    """
    s_vec.check_snapshot(params)
    if s_vec.mask is not None:
        raise ValueError("perturbation influence needs an unmasked (full-network) influence vector")
    return -nn.mixed_grad(params, z.x, z.y, s_vec.s)


def pert_loss_rows(
    X: np.ndarray,
    y: np.ndarray,
    s_vec: InfluenceVector,
    params: nn.ParamVector,
) -> np.ndarray:
    """Row-batched influence_pert_loss for a shared influence vector."""
    s_vec.check_snapshot(params)
    if s_vec.mask is not None:
        raise ValueError("perturbation influence needs an unmasked (full-network) influence vector")
    return -nn.mixed_grad_rows(params, X, y, s_vec.s)


def _train_to_optimum(params_init: nn.ParamVector, X, y, budget: int, grad_tol: float):
    def fun(theta):
        p = params_init.replace(theta)
        return nn.batch_loss(p, (X, y)), nn.mean_grad(p, (X, y))

    res = scipy.optimize.minimize(
        fun,
        params_init.values,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": budget, "gtol": 1e-12, "ftol": 1e-16},
    )
    theta = params_init.replace(res.x)
    gnorm = float(np.linalg.norm(nn.mean_grad(theta, (X, y)), ord=np.inf))
    if gnorm > grad_tol:
        raise RetrainingError(
            f"retraining stalled at gradient norm {gnorm:.3e} > {grad_tol:.1e} within {budget} iterations"
        )
    return theta


def loo_retrain_oracle(
    params_init: nn.ParamVector,
    train_set,
    removed_index: int | None,
    val_set,
    train_budget: int = 1000,
    grad_tol: float = 1e-7,
) -> float:
    """Ground-truth leave-one-out effect: L(D_val, theta_without) - L(D_val, theta_full).

    Retrains from params_init to a gradient norm below grad_tol both with and
    without the removed row. Only meaningful for convex (single affine layer)
    models, which is enforced.
    """
    if params_init.spec.n_affine != 1:
        raise ValueError("the retraining oracle requires a convex single-layer model")
    X, y = nn.as_xy(train_set)
    theta_full = _train_to_optimum(params_init, X, y, train_budget, grad_tol)
    if removed_index is None:
        theta_away = _train_to_optimum(params_init, X, y, train_budget, grad_tol)
    else:
        keep = np.ones(X.shape[0], dtype=bool)
        keep[removed_index] = False
        theta_away = _train_to_optimum(params_init, X[keep], y[keep], train_budget, grad_tol)
    Xv, yv = nn.as_xy(val_set)
    return nn.batch_loss(theta_away, (Xv, yv)) - nn.batch_loss(theta_full, (Xv, yv))
