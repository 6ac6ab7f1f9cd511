"""Training surrogates against the discrete residual ``K u - F``.

The network maps problem parameters to the free-DOF solution vector.  Its
loss is built from the residual of the assembled system alone, so no solved
samples are ever needed.  Predictions are returned with the residual they
leave behind, which makes each one checkable after the fact.
"""

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, NonConvergenceError, ShapeError
from .linalg import as_matrix, as_vector, euclidean_norm, lu_solve, matvec, vecmat
from .neural import AdamState, adam_step, loss_mse, mlp_backward, mlp_forward

DELTA_GUARD = 1e-14

LOSS_VARIANTS = ("mean_squared_norm", "norm")


def residual(K, u, F):
    """``r = K u - F``."""
    K, u, F = as_matrix(K), as_vector(u), as_vector(F)
    if K.shape[0] != F.shape[0]:
        raise ShapeError(f"K has {K.shape[0]} rows, F has {F.shape[0]} entries")
    return matvec(K, u) - F


def residual_loss(r):
    """Per-sample loss ``||r||_2``."""
    return euclidean_norm(r)


def residual_loss_grad(r, K, delta, guard=DELTA_GUARD):
    """Gradient of ``||K u - F||_2`` with respect to ``u``: ``r^T K / delta``.

    Returns ``None`` when ``delta <= guard``: the sample is already solved
    and contributes no gradient.
    """
    if delta <= guard:
        return None
    return vecmat(r, K) / delta


@dataclass
class SampleBatch:
    """Inputs and assembled systems for one training batch.

    There is deliberately no solution field.
    """

    x: np.ndarray
    K: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        if self.K.shape[0] != n or self.F.shape[0] != n:
            raise ShapeError("batch arrays disagree on the number of samples")
        if self.K.shape[1:] != (self.F.shape[1], self.F.shape[1]):
            raise ShapeError(f"K {self.K.shape} and F {self.F.shape} do not conform")

    @classmethod
    def from_systems(cls, x, systems):
        return cls(np.asarray(x, dtype=float), np.stack([s.K for s in systems]), np.stack([s.F for s in systems]))

    def __len__(self):
        return self.x.shape[0]


def batch_residual_loss(model, batch, variant="mean_squared_norm", guard=DELTA_GUARD):
    """Batch loss, its gradient with respect to the outputs, and per-sample norms.

    ``mean_squared_norm``: ``(1/N) sum_i ||r_i||^2`` with gradient
    ``2 r_i^T K_i / N``.  ``norm``: ``(1/N) sum_i ||r_i||`` with gradient
    ``r_i^T K_i / (N ||r_i||)``, zero for samples with ``||r_i|| <= guard``.
    """
    U, trace = mlp_forward(model, batch.x)
    R = np.einsum("bij,bj->bi", batch.K, U) - batch.F
    deltas = np.sqrt(np.einsum("bi,bi->b", R, R))
    rK = np.einsum("bi,bij->bj", R, batch.K)
    n = len(batch)
    if variant == "mean_squared_norm":
        loss = float(np.mean(deltas**2))
        dU = 2.0 * rK / n
    elif variant == "norm":
        loss = float(np.mean(deltas))
        active = deltas > guard
        dU = np.zeros_like(rK)
        dU[active] = rK[active] / (n * deltas[active, None])
    else:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {LOSS_VARIANTS}")
    return loss, dU, deltas, trace


@dataclass
class ForwardTrainConfig:
    """Optimisation settings shared by the hybrid and supervised trainers.

    One epoch is ``steps_per_epoch`` Adam steps; the hybrid trainer draws a
    fresh batch for every step.  The learning rate decays geometrically from
    ``lr`` to ``lr_final`` over ``epochs`` (constant when ``lr_final`` is
    None).  Training stops after ``epochs`` or once the epoch's mean residual
    norm drops below ``loss_threshold``.
    """

    epochs: int = 200
    batch_size: int = 64
    steps_per_epoch: int = 10
    lr: float = 1e-3
    lr_final: float = None
    loss_threshold: float = None
    seed: int = 0
    loss_variant: str = "mean_squared_norm"

    def __post_init__(self):
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 1:
            raise ValueError("epochs, batch_size and steps_per_epoch must be >= 1")
        if self.loss_threshold is not None and not self.loss_threshold > 0:
            raise ValueError("loss_threshold must be positive")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")

    def lr_at(self, epoch):
        if self.lr_final is None or self.epochs <= 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (epoch / (self.epochs - 1))


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def append(self, epoch, loss, ms):
        self.epochs.append(epoch)
        self.mean_loss.append(loss)
        self.wall_ms.append(ms)

    def __len__(self):
        return len(self.epochs)

    def write_csv(self, path, timing=True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "wall_ms"])
            for e, l, ms in zip(self.epochs, self.mean_loss, self.wall_ms):
                w.writerow([e, repr(float(l)), f"{ms:.3f}" if timing else "0"])


def _sampling_rng(seed):
    return np.random.default_rng([seed, 1])


def train_forward(sampler, model, cfg, callback=None):
    """Fit ``model`` so that ``K(x) model(x) = F(x)`` over the sampler's range.

    Parameters
    ----------
    sampler : callable
        ``sampler(rng, n)`` returns a :class:`SampleBatch`.
    model : MlpModel
        Updated in place.
    cfg : ForwardTrainConfig
    callback : callable, optional
        Called as ``callback(epoch, model)`` after every epoch.

    Returns
    -------
    model, TrainHistory
        The history stores the mean per-sample residual norm of each epoch.
    """
    rng = _sampling_rng(cfg.seed)
    state = AdamState.for_model(model, lr=cfg.lr)
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        norms = []
        for _ in range(cfg.steps_per_epoch):
            batch = sampler(rng, cfg.batch_size)
            _, dU, deltas, trace = batch_residual_loss(model, batch, cfg.loss_variant)
            if not np.all(np.isfinite(deltas)):
                raise DivergenceError(epoch, float(np.mean(deltas)))
            adam_step(state, model, mlp_backward(model, trace, dU), lr=lr)
            norms.append(float(np.mean(deltas)))
        mean_delta = float(np.mean(norms))
        history.append(epoch, mean_delta, 1e3 * (time.perf_counter() - t0))
        if not np.isfinite(mean_delta):
            raise DivergenceError(epoch, mean_delta)
        if callback is not None:
            callback(epoch, model)
        if cfg.loss_threshold is not None and mean_delta < cfg.loss_threshold:
            break
    return model, history


def train_supervised_baseline(x, u_true, model, cfg, callback=None):
    """Conventional MSE fit to solved samples, for comparison only.

    Mini-batches are drawn from the fixed dataset with the same batch size,
    step count and learning-rate schedule as :func:`train_forward`.
    """
    x, u_true = np.asarray(x, dtype=float), np.asarray(u_true, dtype=float)
    if x.shape[0] != u_true.shape[0]:
        raise ShapeError("dataset inputs and targets differ in length")
    rng = _sampling_rng(cfg.seed)
    state = AdamState.for_model(model, lr=cfg.lr)
    history = TrainHistory()
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        losses = []
        for _ in range(cfg.steps_per_epoch):
            idx = rng.integers(0, n, size=min(cfg.batch_size, n))
            y, trace = mlp_forward(model, x[idx])
            loss, dy = loss_mse(y, u_true[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            adam_step(state, model, mlp_backward(model, trace, dy), lr=lr)
            losses.append(loss)
        history.append(epoch, float(np.mean(losses)), 1e3 * (time.perf_counter() - t0))
        if callback is not None:
            callback(epoch, model)
        if cfg.loss_threshold is not None and history.mean_loss[-1] < cfg.loss_threshold:
            break
    return model, history


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

@dataclass
class ResidualReport:
    r: np.ndarray
    norm: float
    tolerance: float
    relative_residual: float
    accepted: bool
    refined: bool = False
    absolute: bool = False

    def to_dict(self):
        return {
            "residual_norm": self.norm,
            "relative_residual": self.relative_residual,
            "tolerance": self.tolerance,
            "tolerance_mode": "absolute" if self.absolute else "relative",
            "accepted": self.accepted,
            "refined": self.refined,
        }


def make_report(system, u, tol, absolute=False, refined=False):
    r = residual(system.K, u, system.F)
    delta = residual_loss(r)
    f_norm = euclidean_norm(system.F)
    rel = delta / f_norm if f_norm > 0 else delta
    accepted = delta <= tol if absolute else delta <= tol * f_norm
    return ResidualReport(r, delta, tol, rel, bool(accepted), refined, absolute)


def predict_batch(model, x):
    return mlp_forward(model, np.atleast_2d(np.asarray(x, dtype=float)))[0]


def predict_with_residual(model, x, system, tol=1e-3, absolute=False):
    """Network prediction plus the residual it leaves in ``system``.

    ``accepted`` is ``||r|| <= tol * ||F||`` (or ``||r|| <= tol`` with
    ``absolute=True``).  Never refines.
    """
    x = as_vector(x)
    u, _ = mlp_forward(model, x)
    if u.shape[0] != system.n_free:
        raise ShapeError(f"model predicts {u.shape[0]} values, system has {system.n_free} free DOFs")
    return u, make_report(system, u, tol, absolute)


def is_symmetric(K, rtol=1e-12):
    if np.iscomplexobj(K):
        return False
    return np.max(np.abs(K - K.T)) <= rtol * np.max(np.abs(K))


def conjugate_gradient(K, F, x0=None, tol=1e-8, max_iter=None):
    """Jacobi-preconditioned conjugate gradients for SPD ``K``.

    Stops when the true residual satisfies ``||K x - F|| <= tol ||F||``.
    Returns ``(x, iterations)``.

    Raises
    ------
    NonConvergenceError
        After ``max_iter`` iterations (default ``20 n``); carries the iterate
        with the smallest residual seen.
    """
    K, F = as_matrix(K), as_vector(F)
    n = F.shape[0]
    max_iter = 20 * n if max_iter is None else max_iter
    x = np.zeros(n) if x0 is None else as_vector(x0).astype(float, copy=True)
    target = tol * euclidean_norm(F)
    d_inv = 1.0 / np.diag(K)
    r = F - K @ x
    best, best_norm = x.copy(), euclidean_norm(r)
    if best_norm <= target:
        return x, 0
    z = d_inv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Kp = K @ p
        alpha = rz / (p @ Kp)
        x += alpha * p
        if it % 25 == 0:
            r = F - K @ x
        else:
            r -= alpha * Kp
        r_norm = euclidean_norm(r)
        if r_norm <= target:
            r = F - K @ x
            r_norm = euclidean_norm(r)
            if r_norm <= target:
                return x, it
        if r_norm < best_norm:
            best, best_norm = x.copy(), r_norm
        z = d_inv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NonConvergenceError(
        f"conjugate gradients did not reach {tol:g} relative residual in {max_iter} iterations "
        f"(best {best_norm / max(euclidean_norm(F), 1e-300):.3e})", best, max_iter)


def refine_prediction(u0, system, tol=1e-8, max_iter=None):
    """Polish a prediction with a classical solve.

    Symmetric real systems run conjugate gradients started from ``u0``;
    anything else is solved directly and ``u0`` is ignored.
    """
    u0 = as_vector(u0)
    if u0.shape[0] != system.n_free:
        raise ShapeError(f"initial guess has {u0.shape[0]} entries, system has {system.n_free}")
    if is_symmetric(system.K):
        return conjugate_gradient(system.K, system.F, u0, tol, max_iter)[0]
    return lu_solve(system.K, system.F)


def prediction_to_json(u, report, path=None, **extra):
    d = {"u": [float(v) for v in np.real(u)], **report.to_dict(), **extra}
    if path is not None:
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1)
            fh.write("\n")
    return d
