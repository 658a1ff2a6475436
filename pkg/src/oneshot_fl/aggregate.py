"""Server-side merging of client updates into one global model.

The curvature-weighted merge treats each client's payload as a quadratic
penalty around its local weights and minimizes the sum with first-order
iterations whose gradient is sum_i c_i * F_i @ (W - W_i). Client coefficients
c_i = M * n_i / N reduce to 1 for equal sample counts, so the equal case is
the plain unweighted sum of curvature matvecs.

The gradient-descent server auto-sizes its step to 1 / (1.01 * lambda_max)
using power iteration on the summed operator; with that step the quadratic
objective is non-increasing and the iterates converge to the minimum-norm
projection of the mean onto the stationary set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import fisher as fisher_mod
from . import models
from .fisher import DiagFisher, FisherApprox, FullFisher, KFACFisher, fisher_matvec
from .models import MLP, Model, TrainConfig
from .numerics import PowerIterResult, power_iteration_max_eig

METHOD_FEDAVG = "fedavg"
METHOD_FULL = "fedfisher-full"
METHOD_DIAG = "fedfisher-diag"
METHOD_KFAC = "fedfisher-kfac"
METHOD_FISHERMERGE = "fishermerge"
VALID_METHODS = (METHOD_FEDAVG, METHOD_FULL, METHOD_DIAG, METHOD_KFAC, METHOD_FISHERMERGE)

DEFAULT_FISHER_FLOOR = 1e-6


@dataclass
class ClientUpdate:
    weights: np.ndarray  # flat local parameters
    fisher: FisherApprox | None = None
    n_examples: int = 1


@dataclass
class ServerConfig:
    optimizer: str = "gd"  # "gd" | "adam"
    eta_s: float | None = None  # None: auto 1/(1.01*lambda_max) for gd, 0.01 for adam
    t_max: int = 100_000
    stop_tol: float = 1e-10
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 0.01
    val_every: int = 100
    val_fn: Callable[[np.ndarray], float] | None = None  # weights -> score, higher wins


@dataclass
class MergeResult:
    weights: np.ndarray
    iterations: int
    converged: bool
    diverged: bool = False
    step_warning: bool = False
    residual: float = float("nan")
    lambda_max: float = float("nan")
    objective_trace: list[float] | None = None


def _coefficients(updates: list[ClientUpdate]) -> np.ndarray:
    counts = np.array([u.n_examples for u in updates], dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("client n_examples must be positive")
    return counts * len(updates) / counts.sum()


def _check_updates(updates: list[ClientUpdate], need_fisher: bool) -> int:
    if not updates:
        raise ValueError("need at least one client update")
    d = np.asarray(updates[0].weights).shape[0]
    for i, u in enumerate(updates):
        w = np.asarray(u.weights)
        if w.shape != (d,):
            raise ValueError(f"client {i} weights shape {w.shape} != ({d},)")
        if need_fisher:
            if u.fisher is None:
                raise ValueError(f"client {i} is missing a curvature payload")
            if u.fisher.dim != d:
                raise ValueError(f"client {i} curvature dim {u.fisher.dim} != {d}")
    return d


def fedavg(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-size weighted mean of client weights."""
    d = _check_updates(updates, need_fisher=False)
    coeffs = _coefficients(updates)
    out = np.zeros(d)
    for c, u in zip(coeffs, updates):
        out += c * np.asarray(u.weights, dtype=np.float64)
    return out / len(updates)


class _SummedCurvature:
    """Applies sum_i c_i F_i, pre-summing dense and diagonal parts.

    Kronecker-factored payloads cannot be pre-summed (sums of Kronecker
    products are not Kronecker products), so they are applied per client.
    """

    def __init__(self, pairs: list[tuple[float, FisherApprox]], dim: int):
        self.dim = dim
        self.dense: np.ndarray | None = None
        self.diag: np.ndarray | None = None
        self.kfacs: list[tuple[float, KFACFisher]] = []
        for coef, f in pairs:
            if isinstance(f, FullFisher):
                if self.dense is None:
                    self.dense = np.zeros((dim, dim))
                self.dense += coef * f.matrix
            elif isinstance(f, DiagFisher):
                if self.diag is None:
                    self.diag = np.zeros(dim)
                self.diag += coef * f.diag
            elif isinstance(f, KFACFisher):
                self.kfacs.append((coef, f))
            else:
                raise ValueError(f"unknown curvature variant {type(f).__name__}")

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(v)
        if self.dense is not None:
            out += self.dense @ v
        if self.diag is not None:
            out += self.diag * v
        for coef, f in self.kfacs:
            out += coef * fisher_matvec(f, v)
        return out


def estimate_lmax(
    updates: list[ClientUpdate],
    tol: float = 1e-8,
    max_iters: int = 5000,
) -> PowerIterResult:
    """Largest eigenvalue of the coefficient-weighted curvature sum."""
    d = _check_updates(updates, need_fisher=True)
    coeffs = _coefficients(updates)
    op = _SummedCurvature(list(zip(coeffs, [u.fisher for u in updates])), d)
    return power_iteration_max_eig(op.matvec, d, tol=tol, max_iters=max_iters)


def _merge_problem(updates: list[ClientUpdate]):
    d = _check_updates(updates, need_fisher=True)
    coeffs = _coefficients(updates)
    op = _SummedCurvature(list(zip(coeffs, [u.fisher for u in updates])), d)
    b = np.zeros(d)
    const = 0.0
    for c, u in zip(coeffs, updates):
        w = np.asarray(u.weights, dtype=np.float64)
        fw = fisher_matvec(u.fisher, w)
        b += c * fw
        const += c * float(w @ fw)
    return d, op, b, const


def fedfisher_gd(
    updates: list[ClientUpdate],
    cfg: ServerConfig | None = None,
    record_objective: bool = False,
) -> MergeResult:
    """Curvature-weighted merge by gradient descent from the weighted mean.

    Stops when the update norm falls below stop_tol * (1 + |W|) or after
    t_max steps. With cfg.eta_s=None the step is 1 / (1.01 * lambda_max);
    a manual step larger than 1 / lambda_max sets ``step_warning``.
    """
    cfg = cfg or ServerConfig()
    d, op, b, const = _merge_problem(updates)
    lam = power_iteration_max_eig(op.matvec, d, tol=1e-6, max_iters=2000)

    w = fedavg(updates)
    trace: list[float] | None = [] if record_objective else None

    if cfg.eta_s is None:
        if lam.value <= 0.0:
            # No curvature anywhere: every point is stationary, keep the mean.
            return MergeResult(w, 0, True, residual=float(np.linalg.norm(op.matvec(w) - b)),
                               lambda_max=lam.value, objective_trace=trace)
        eta = 1.0 / (1.01 * lam.value)
        warning = False
    else:
        if cfg.eta_s <= 0:
            raise ValueError(f"eta_s must be positive, got {cfg.eta_s}")
        eta = cfg.eta_s
        warning = lam.value > 0 and eta * lam.value > 1.0 + 1e-9

    iterations = 0
    converged = False
    for _ in range(cfg.t_max):
        g = op.matvec(w) - b
        if trace is not None:
            trace.append(float(w @ g) - float(w @ b) + const)
        step = eta * g
        w_next = w - step
        if not np.all(np.isfinite(w_next)):
            return MergeResult(w, iterations, False, diverged=True, step_warning=warning,
                               residual=float(np.linalg.norm(g)), lambda_max=lam.value,
                               objective_trace=trace)
        w = w_next
        iterations += 1
        if np.linalg.norm(step) <= cfg.stop_tol * (1.0 + np.linalg.norm(w)):
            converged = True
            break
    g = op.matvec(w) - b
    if trace is not None:
        trace.append(float(w @ g) - float(w @ b) + const)
    return MergeResult(w, iterations, converged, step_warning=warning,
                       residual=float(np.linalg.norm(g)), lambda_max=lam.value,
                       objective_trace=trace)


def fedfisher_adam(updates: list[ClientUpdate], cfg: ServerConfig | None = None) -> MergeResult:
    """Curvature-weighted merge by Adam, keeping the best-validation iterate.

    ``cfg.val_fn`` maps flat weights to a score (higher is better); it is
    evaluated at the start, every ``cfg.val_every`` steps, and at the end.
    Without a val_fn the final iterate is returned.
    """
    cfg = cfg or ServerConfig(optimizer="adam", t_max=2000)
    d, op, b, _ = _merge_problem(updates)
    eta = 0.01 if cfg.eta_s is None else cfg.eta_s
    if eta <= 0:
        raise ValueError(f"eta_s must be positive, got {eta}")

    w = fedavg(updates)
    best_w = w.copy()
    best_score = cfg.val_fn(w) if cfg.val_fn is not None else None

    m = np.zeros(d)
    v = np.zeros(d)
    iterations = 0
    converged = False
    for t in range(1, cfg.t_max + 1):
        g = op.matvec(w) - b
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        step = eta * m_hat / (np.sqrt(v_hat) + cfg.eps)
        w_next = w - step
        if not np.all(np.isfinite(w_next)):
            return MergeResult(best_w if best_score is not None else w, iterations, False,
                               diverged=True, residual=float(np.linalg.norm(g)))
        w = w_next
        iterations += 1
        if best_score is not None and t % cfg.val_every == 0:
            score = cfg.val_fn(w)
            if score > best_score:
                best_score, best_w = score, w.copy()
        if np.linalg.norm(step) <= cfg.stop_tol * (1.0 + np.linalg.norm(w)):
            converged = True
            break
    if best_score is not None:
        score = cfg.val_fn(w)
        if score > best_score:
            best_score, best_w = score, w.copy()
        final = best_w
    else:
        final = w
    return MergeResult(final, iterations, converged,
                       residual=float(np.linalg.norm(op.matvec(final) - b)))


def fisher_merge_diag(updates: list[ClientUpdate], floor: float = DEFAULT_FISHER_FLOOR) -> np.ndarray:
    """Coordinatewise curvature-weighted average of client weights.

    Each coordinate's weight is max(diagonal curvature, floor), so dead
    coordinates fall back to the plain (coefficient-weighted) mean.
    """
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    d = _check_updates(updates, need_fisher=True)
    coeffs = _coefficients(updates)
    num = np.zeros(d)
    den = np.zeros(d)
    for c, u in zip(coeffs, updates):
        if not isinstance(u.fisher, DiagFisher):
            raise ValueError("fisher_merge_diag requires diagonal curvature payloads")
        weight = c * np.maximum(u.fisher.diag, floor)
        num += weight * np.asarray(u.weights, dtype=np.float64)
        den += weight
    return num / den


@dataclass
class RoundRecord:
    weights: np.ndarray
    train_loss: float
    eval_accuracy: float  # nan when no eval set / not a classifier
    client_seconds: float
    server_seconds: float


@dataclass
class FewShotResult:
    rounds: list[RoundRecord] = field(default_factory=list)
    diverged: bool = False


def _client_fisher(
    method: str, model: Model, x: np.ndarray, loss: str, mode: str, draws: int, seed
) -> FisherApprox | None:
    if method in (METHOD_FEDAVG,):
        return None
    if method == METHOD_FULL:
        return fisher_mod.full_fisher_two_layer(model, x, mode=mode, draws=draws, seed=seed)
    if method in (METHOD_DIAG, METHOD_FISHERMERGE):
        return fisher_mod.diag_fisher(model, x, loss, mode=mode, draws=draws, seed=seed)
    if method == METHOD_KFAC:
        return fisher_mod.kfac_fisher(model, x, loss, mode=mode, draws=draws, seed=seed)
    raise ValueError(f"unknown method {method!r}, expected one of {VALID_METHODS}")


def merge_updates(method: str, updates: list[ClientUpdate], cfg: ServerConfig) -> tuple[np.ndarray, MergeResult | None]:
    """Dispatch one aggregation step for a method identifier."""
    if method == METHOD_FEDAVG:
        return fedavg(updates), None
    if method == METHOD_FISHERMERGE:
        return fisher_merge_diag(updates), None
    if method in (METHOD_FULL, METHOD_DIAG, METHOD_KFAC):
        if cfg.optimizer == "adam":
            result = fedfisher_adam(updates, cfg)
        elif cfg.optimizer == "gd":
            result = fedfisher_gd(updates, cfg)
        else:
            raise ValueError(f"unknown server optimizer {cfg.optimizer!r}")
        return result.weights, result
    raise ValueError(f"unknown method {method!r}, expected one of {VALID_METHODS}")


def few_shot_rounds(
    dataset,
    model: Model,
    rounds: int,
    local_cfg: TrainConfig,
    server_cfg: ServerConfig,
    method: str,
    loss: str = models.LOSS_SQUARED,
    seed: int = 0,
    eval_x: np.ndarray | None = None,
    eval_y: np.ndarray | None = None,
    fisher_mode: str = "expected",
    draws: int = 1,
) -> FewShotResult:
    """Iterate broadcast -> local training -> curvature -> merge.

    Every round re-trains each client from the current global weights with a
    fresh (seed, round, client) substream, recomputes curvature, and merges
    with ``method``. Records the global training loss (union of client data)
    and eval accuracy per round. Divergence of any client or of the server
    stops the loop with ``diverged=True``.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    result = FewShotResult()
    global_w = models.get_flat_params(model)
    for r in range(rounds):
        t0 = time.perf_counter()
        updates = []
        for i in range(dataset.num_clients):
            cx, cy = dataset.client_data(i)
            local = models.with_flat_params(model, global_w)
            trained = models.sgd_train(local, cx, cy, local_cfg, loss=loss, seed=[seed, r, i])
            if trained.diverged:
                result.diverged = True
                return result
            f = _client_fisher(method, trained.model, cx, loss, fisher_mode, draws, [seed, r, i, 99])
            updates.append(ClientUpdate(models.get_flat_params(trained.model), f, cx.shape[0]))
        t1 = time.perf_counter()
        global_w, merge = merge_updates(method, updates, server_cfg)
        t2 = time.perf_counter()
        if merge is not None and merge.diverged:
            result.diverged = True
            return result
        merged_model = models.with_flat_params(model, global_w)
        train_loss = models.loss_eval(merged_model, dataset.x, dataset.y, loss)
        acc = float("nan")
        if eval_x is not None and eval_y is not None and isinstance(model, MLP) and model.out_dim >= 2:
            acc = models.accuracy_eval(merged_model, eval_x, eval_y)
        result.rounds.append(RoundRecord(global_w.copy(), train_loss, acc, t1 - t0, t2 - t1))
    return result
