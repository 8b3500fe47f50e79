"""Exact Gaussian process regression with a constant mean.

Four stationary kernel families over the concatenated latent+site features:
RBF, Matern 2.5 (closed polynomial-exponential form), Periodic, and a
composite outputscale*(matern_unit + periodic_unit). Hyperparameters live in
log space so positivity is structural. The marginal likelihood is assembled
on a numcore tape (quadratic-form and log-determinant nodes) so its gradient
reaches both the hyperparameters and the training inputs, which is what lets
the encoder train jointly against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc
from .errors import (
    DegenerateInput,
    DimensionMismatch,
    Divergence,
    NonFiniteInput,
)
from .optim import Adam, OptimizerConfig

FAMILIES = ("rbf", "matern25", "periodic", "composite")
SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class KernelSpec:
    """Kernel family plus log-space hyperparameters.

    log_period and log_periodic_lengthscale only participate for the
    periodic and composite families; the composite keeps separate
    lengthscales for its Matern and periodic parts under one outputscale.
    """

    family: str = "matern25"
    log_outputscale: float = 0.0
    log_lengthscale: float = 0.0
    log_period: float = 0.0
    log_periodic_lengthscale: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DimensionMismatch(
                f"unknown kernel family {self.family!r}; expected one of {FAMILIES}"
            )

    def hyper_names(self) -> list:
        """Active hyperparameter field names, in flat-vector order."""
        names = ["log_outputscale", "log_lengthscale"]
        if self.family == "periodic":
            names.append("log_period")
        elif self.family == "composite":
            names += ["log_period", "log_periodic_lengthscale"]
        return names


def _unit_matern25(r, lengthscale):
    u = SQRT5 * r / lengthscale
    return (1.0 + u + u * u / 3.0) * np.exp(-u)


def _unit_periodic(r, lengthscale, period):
    s = np.sin(np.pi * r / period)
    return np.exp(-2.0 * s * s / (lengthscale * lengthscale))


def _kernel_from_sqdist_values(spec: KernelSpec, d2: np.ndarray) -> np.ndarray:
    os_ = math.exp(spec.log_outputscale)
    ls = math.exp(spec.log_lengthscale)
    if spec.family == "rbf":
        return os_ * np.exp(-d2 / (2.0 * ls * ls))
    r = np.sqrt(d2)
    if spec.family == "matern25":
        return os_ * _unit_matern25(r, ls)
    if spec.family == "periodic":
        return os_ * _unit_periodic(r, ls, math.exp(spec.log_period))
    per = _unit_periodic(r, math.exp(spec.log_periodic_lengthscale), math.exp(spec.log_period))
    return os_ * (_unit_matern25(r, ls) + per)


def kernel_value_at_zero(spec: KernelSpec) -> float:
    """Prior variance k(x, x); 2*outputscale for the composite, outputscale otherwise."""
    os_ = math.exp(spec.log_outputscale)
    return 2.0 * os_ if spec.family == "composite" else os_


def kernel_eval(spec: KernelSpec, a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise DimensionMismatch(f"kernel_eval on vectors of size {a.size} and {b.size}")
    d2 = float(np.sum((a - b) ** 2))
    return float(_kernel_from_sqdist_values(spec, np.array(d2)))


def _as_points(x) -> np.ndarray:
    """N x d float64 point set; a 1-D array is N points in one dimension."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    if x.ndim != 2:
        raise DimensionMismatch(f"point set must be 2-D, got shape {x.shape}")
    return x


def kernel_matrix(spec: KernelSpec, x, y) -> np.ndarray:
    """Gram matrix between rows of x (N x d) and y (M x d)."""
    x = _as_points(x)
    y = _as_points(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"kernel_matrix feature dims differ: {x.shape} vs {y.shape}")
    d2 = (
        (x * x).sum(axis=1, keepdims=True)
        + (y * y).sum(axis=1, keepdims=True).T
        - 2.0 * (x @ y.T)
    )
    np.maximum(d2, 0.0, out=d2)
    gram = x is y or (x.shape == y.shape and np.array_equal(x, y))
    if gram:
        np.fill_diagonal(d2, 0.0)
    k = _kernel_from_sqdist_values(spec, d2)
    if gram:
        k = 0.5 * (k + k.T)  # exact symmetry against matmul rounding
    return k


# ---------------------------------------------------------------------------
# Tape-side kernel assembly
# ---------------------------------------------------------------------------


@dataclass
class HyperNodes:
    """Tape leaves for the GP hyperparameters, each a 1x1 node."""

    family: str
    log_outputscale: nc.Node
    log_lengthscale: nc.Node
    log_period: nc.Node | None = None
    log_periodic_lengthscale: nc.Node | None = None
    log_noise: nc.Node | None = None
    mean_const: nc.Node | None = None

    def leaves(self) -> list:
        out = [self.log_outputscale, self.log_lengthscale]
        if self.log_period is not None:
            out.append(self.log_period)
        if self.log_periodic_lengthscale is not None:
            out.append(self.log_periodic_lengthscale)
        if self.log_noise is not None:
            out.append(self.log_noise)
        if self.mean_const is not None:
            out.append(self.mean_const)
        return out

    def grads_flat(self) -> np.ndarray:
        return np.concatenate([n.grad.ravel() for n in self.leaves()])


def hypers_to_nodes(tape: nc.Tape, state: "GPState") -> HyperNodes:
    k = state.kernel
    return HyperNodes(
        family=k.family,
        log_outputscale=tape.leaf(k.log_outputscale),
        log_lengthscale=tape.leaf(k.log_lengthscale),
        log_period=tape.leaf(k.log_period) if k.family in ("periodic", "composite") else None,
        log_periodic_lengthscale=(
            tape.leaf(k.log_periodic_lengthscale) if k.family == "composite" else None
        ),
        log_noise=tape.leaf(state.log_noise),
        mean_const=tape.leaf(state.mean_const),
    )


def _unit_matern25_node(r: nc.Node, inv_ls: nc.Node) -> nc.Node:
    u = nc.scale(nc.mul(r, inv_ls), SQRT5)
    poly = nc.add(nc.add(u.tape.constant(1.0), u), nc.scale(nc.mul(u, u), 1.0 / 3.0))
    return nc.mul(poly, nc.exp(nc.scale(u, -1.0)))


def _unit_periodic_node(r: nc.Node, inv_ls: nc.Node, inv_period: nc.Node) -> nc.Node:
    s = nc.sin(nc.scale(nc.mul(r, inv_period), math.pi))
    expo = nc.scale(nc.mul(nc.mul(s, s), nc.mul(inv_ls, inv_ls)), -2.0)
    return nc.exp(expo)


def kernel_node_from_sqdist(h: HyperNodes, d2: nc.Node) -> nc.Node:
    """Build the Gram matrix node from a pairwise squared-distance node."""
    outputscale = nc.exp(h.log_outputscale)
    inv_ls = nc.exp(nc.scale(h.log_lengthscale, -1.0))
    if h.family == "rbf":
        quad = nc.scale(nc.mul(d2, nc.mul(inv_ls, inv_ls)), -0.5)
        return nc.mul(outputscale, nc.exp(quad))
    r = nc.power(d2, 0.5)
    if h.family == "matern25":
        return nc.mul(outputscale, _unit_matern25_node(r, inv_ls))
    inv_period = nc.exp(nc.scale(h.log_period, -1.0))
    if h.family == "periodic":
        return nc.mul(outputscale, _unit_periodic_node(r, inv_ls, inv_period))
    inv_pls = nc.exp(nc.scale(h.log_periodic_lengthscale, -1.0))
    both = nc.add(
        _unit_matern25_node(r, inv_ls), _unit_periodic_node(r, inv_pls, inv_period)
    )
    return nc.mul(outputscale, both)


def nmll_node(tape: nc.Tape, h: HyperNodes, x_node: nc.Node, y: np.ndarray) -> nc.Node:
    """Negative log marginal likelihood as a scalar node.

    0.5*(y-m)^T A^-1 (y-m) + 0.5*log|A| + (n/2)*log(2*pi) with
    A = K(X,X) + noise*I. x_node may be a constant (hyper-only fits) or
    depend on encoder parameters (joint training).
    """
    y = nc.as_matrix(y)
    n = y.shape[0]
    d2 = nc.sqdist(x_node, x_node)
    k = kernel_node_from_sqdist(h, d2)
    a = nc.add_diag(k, nc.exp(h.log_noise))
    resid = nc.sub(tape.constant(y), h.mean_const)
    quad = nc.chol_quad_form(a, resid)
    logdet = nc.chol_logdet(a)
    return nc.add(
        nc.add(nc.scale(quad, 0.5), nc.scale(logdet, 0.5)),
        tape.constant(0.5 * n * LOG_2PI),
    )


# ---------------------------------------------------------------------------
# GP state, fitting, posterior
# ---------------------------------------------------------------------------


@dataclass
class GPState:
    kernel: KernelSpec
    log_noise: float
    mean_const: float
    train_inputs: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    train_targets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    chol: nc.CholeskyFactor | None = None
    alpha: np.ndarray | None = None

    def hyper_names(self) -> list:
        return self.kernel.hyper_names() + ["log_noise", "mean_const"]

    def hypers_flat(self) -> np.ndarray:
        vals = [getattr(self.kernel, nm) for nm in self.kernel.hyper_names()]
        return np.array(vals + [self.log_noise, self.mean_const])

    def with_hypers_flat(self, flat: np.ndarray) -> "GPState":
        names = self.kernel.hyper_names()
        kernel = replace(self.kernel, **{nm: float(flat[i]) for i, nm in enumerate(names)})
        return replace(
            self,
            kernel=kernel,
            log_noise=float(flat[len(names)]),
            mean_const=float(flat[len(names) + 1]),
            chol=None,
            alpha=None,
        )

    def refresh(self, inputs=None, targets=None) -> "GPState":
        """Recompute the Cholesky factor and alpha for the current hyperparameters."""
        x = self.train_inputs if inputs is None else _as_points(inputs)
        y = self.train_targets if targets is None else np.asarray(targets, float).ravel()
        if x.shape[0] != y.size:
            raise DimensionMismatch(f"{x.shape[0]} inputs vs {y.size} targets")
        k = kernel_matrix(self.kernel, x, x)
        a = k + math.exp(self.log_noise) * np.eye(x.shape[0])
        chol = nc.cholesky(a)
        alpha = nc.solve_spd(chol, (y - self.mean_const).reshape(-1, 1))
        return replace(self, train_inputs=x, train_targets=y, chol=chol, alpha=alpha)


def init_state(inputs, targets, family: str = "matern25") -> GPState:
    """Heuristic starting point: median-distance lengthscale, variance-scaled
    outputscale and noise, mean at the target mean. Degenerate statistics
    (single point, constant targets) fall back to safe floors."""
    x = _as_points(inputs)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("GP init saw NaN or Inf")
    if x.shape[0] != y.size:
        raise DimensionMismatch(f"{x.shape[0]} inputs vs {y.size} targets")

    if x.shape[0] > 1:
        d2 = (
            (x * x).sum(axis=1, keepdims=True)
            + (x * x).sum(axis=1, keepdims=True).T
            - 2.0 * (x @ x.T)
        )
        iu = np.triu_indices(x.shape[0], k=1)
        med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    else:
        med = 1.0
    lengthscale = max(med, 1e-3)
    var_y = float(np.var(y)) if y.size else 1.0
    var_y = max(var_y, 1e-8)

    # The composite's periodic part is only conditionally PSD over a
    # Euclidean norm; its worst eigenvalue dip scales like N/lengthscale^2,
    # so start that lengthscale above sqrt(80 N) to keep K + noise I
    # factorable. The optimizer is free to move it afterwards.
    periodic_ls = max(lengthscale, math.sqrt(80.0 * max(x.shape[0], 2)))
    kernel = KernelSpec(
        family=family,
        log_outputscale=math.log(var_y),
        log_lengthscale=math.log(lengthscale),
        log_period=0.0,
        log_periodic_lengthscale=math.log(periodic_ls),
    )
    return GPState(
        kernel=kernel,
        log_noise=math.log(0.1 * var_y),
        mean_const=float(np.mean(y)) if y.size else 0.0,
    )


def nmll(state: GPState, inputs=None, targets=None) -> float:
    """Plain-number marginal likelihood for traces and tests."""
    st = state.refresh(inputs, targets)
    y = st.train_targets
    resid = (y - st.mean_const).reshape(-1, 1)
    quad = (resid.T @ st.alpha).item()
    return 0.5 * quad + 0.5 * st.chol.logdet() + 0.5 * y.size * LOG_2PI


def fit(
    state: GPState, inputs, targets, opt: OptimizerConfig | None = None
) -> tuple[GPState, list]:
    """Tune hyperparameters by Adam on the marginal likelihood.

    Early-stops once `patience` epochs pass without improving the best loss
    by `min_delta`, then restores the best hyperparameters. The returned
    trace holds the per-epoch losses; its last entry is the loss of the
    restored best state, so trace[-1] <= trace[0] always.
    """
    opt = opt or OptimizerConfig()
    x = _as_points(inputs)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.shape[0] < 2:
        raise DegenerateInput("GP fit needs at least 2 training points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("GP fit saw NaN or Inf")

    st = replace(state, train_inputs=x, train_targets=y)
    hypers = st.hypers_flat()
    adam = Adam(hypers.size, opt)
    best = (np.inf, hypers.copy())
    trace, stale = [], 0

    for _ in range(opt.max_epochs):
        if not np.all(np.isfinite(hypers)):
            raise Divergence("hyperparameters became non-finite during fitting")
        try:
            tape = nc.Tape()
            h = hypers_to_nodes(tape, st.with_hypers_flat(hypers))
            loss_node = nmll_node(tape, h, tape.constant(x), y)
        except NonFiniteInput as e:
            raise Divergence(f"marginal likelihood evaluation overflowed: {e}") from e
        loss = loss_node.value.item()
        if not math.isfinite(loss):
            raise Divergence(f"marginal likelihood became non-finite ({loss})")
        trace.append(loss)
        if loss < best[0] - opt.min_delta:
            best = (loss, hypers.copy())
            stale = 0
        elif loss < best[0]:
            best = (loss, hypers.copy())
            stale += 1
        else:
            stale += 1
        if stale >= opt.patience:
            break
        nc.backward(tape, loss_node)
        hypers = adam.step(hypers, h.grads_flat())

    final = st.with_hypers_flat(best[1]).refresh()
    if not trace or trace[-1] != best[0]:
        trace.append(best[0])
    return final, trace


@dataclass
class GPPosterior:
    mean: np.ndarray
    variance: np.ndarray


def posterior(state: GPState, test) -> GPPosterior:
    """Predictive mean and (noise-free) variance at the test rows.

    mean = m + K_*^T alpha; variance = k(x,x) - diag(K_*^T A^-1 K_*),
    clamped at zero against rounding.
    """
    if state.chol is None or state.alpha is None:
        state = state.refresh()
    test = _as_points(test)
    if test.shape[1] != state.train_inputs.shape[1]:
        raise DimensionMismatch(
            f"test dim {test.shape[1]} != train dim {state.train_inputs.shape[1]}"
        )
    k_star = kernel_matrix(state.kernel, state.train_inputs, test)  # N x M
    mean = state.mean_const + (k_star.T @ state.alpha).ravel()
    v = nc.solve_spd(state.chol, k_star)  # A^-1 K_*
    prior = kernel_value_at_zero(state.kernel)
    variance = np.maximum(prior - np.einsum("ij,ij->j", k_star, v), 0.0)
    return GPPosterior(mean=mean, variance=variance)
