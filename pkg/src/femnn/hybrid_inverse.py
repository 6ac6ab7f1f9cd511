"""Identifying speed-dependent bearing stiffness from measured responses.

The rotor's frequency-domain system is split into the DOFs away from the
bearings (known block) and the bearing DOFs, whose diagonal block contains
the unknown bearing stiffness.  A network maps rotational speed to bearing
coefficients and is trained on the residual of the split system evaluated
with the measured responses.
"""

import csv
import json
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ParameterError, ShapeError
from .fem import assemble_rotor
from .hybrid_forward import DELTA_GUARD, TrainHistory
from .linalg import as_matrix, as_vector, euclidean_norm, lu_solve
from .neural import AdamState, adam_step, init_mlp, mlp_backward, mlp_forward

K_REF = 1e7


@dataclass
class PartitionedSystem:
    """Blocks of ``Z(omega) q = F`` split into known (k) and bearing (u) DOFs.

    ``K_u_known`` holds everything in the bearing block except the bearing
    stiffness itself (inertia, damping, shaft stiffness), so the full block
    is ``K_u_known + K_b``.
    """

    K_k: np.ndarray
    K_ku: np.ndarray
    K_uk: np.ndarray
    K_u_known: np.ndarray
    F_k: np.ndarray
    F_u: np.ndarray
    U_k: np.ndarray
    U_u: np.ndarray
    omega: float = 0.0

    def __post_init__(self):
        self.K_k, self.K_ku, self.K_uk, self.K_u_known = (
            as_matrix(a) for a in (self.K_k, self.K_ku, self.K_uk, self.K_u_known))
        self.F_k, self.F_u, self.U_k, self.U_u = (as_vector(a) for a in (self.F_k, self.F_u, self.U_k, self.U_u))
        nk, nu = self.U_k.shape[0], self.U_u.shape[0]
        expected = {"K_k": (nk, nk), "K_ku": (nk, nu), "K_uk": (nu, nk), "K_u_known": (nu, nu),
                    "F_k": (nk,), "F_u": (nu,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_known(self):
        return self.U_k.shape[0]

    @property
    def n_unknown(self):
        return self.U_u.shape[0]


def partition_rotor(rotor, omega, U, F=None):
    """Split the rotor system at ``omega`` around its bearing DOFs."""
    U = np.asarray(U, dtype=complex)
    F = rotor.F if F is None else np.asarray(F, dtype=complex)
    Z = rotor.dynamic_stiffness(omega)
    k, u = rotor.known_dofs, rotor.bearing_dofs
    return PartitionedSystem(
        K_k=Z[np.ix_(k, k)], K_ku=Z[np.ix_(k, u)], K_uk=Z[np.ix_(u, k)], K_u_known=Z[np.ix_(u, u)],
        F_k=F[k], F_u=F[u], U_k=U[k], U_u=U[u], omega=float(omega),
    )


def partitioned_residual(sys, K_u):
    """Stacked residual ``[K_k U_k + K_ku U_u - F_k ; K_uk U_k + K_u U_u - F_u]``.

    ``K_u`` is the complete bearing-DOF block.
    """
    K_u = as_matrix(K_u)
    if K_u.shape != (sys.n_unknown, sys.n_unknown):
        raise ShapeError(f"K_u has shape {K_u.shape}, expected {(sys.n_unknown, sys.n_unknown)}")
    r_k = sys.K_k @ sys.U_k + sys.K_ku @ sys.U_u - sys.F_k
    r_u = sys.K_uk @ sys.U_k + K_u @ sys.U_u - sys.F_u
    return np.concatenate([r_k, r_u])


def inverse_loss_grad(sys, K_u, delta, guard=DELTA_GUARD):
    """Gradient of ``||r||_2`` with respect to the real entries of ``K_u``.

    ``G[a, b] = Re(r_u[a] * conj(U_u[b])) / delta``; for real data this is
    ``outer(r_u, U_u) / delta``.  Returns ``None`` when ``delta <= guard``.
    """
    if delta <= guard:
        return None
    K_u = as_matrix(K_u)
    r_u = sys.K_uk @ sys.U_k + K_u @ sys.U_u - sys.F_u
    return np.real(np.outer(r_u, np.conj(sys.U_u))) / delta


@dataclass(frozen=True)
class BearingParametrization:
    """How network outputs fill the bearing stiffness block.

    Bearing DOFs are ordered ``(x, y)`` per bearing.  ``diagonal`` uses the
    coefficients ``(k_xx, k_yy)``, ``full`` uses ``(k_xx, k_xy, k_yx, k_yy)``.
    With ``shared=True`` every bearing gets the same coefficients.
    """

    kind: str = "diagonal"
    n_bearings: int = 2
    shared: bool = True

    def __post_init__(self):
        if self.kind not in ("diagonal", "full"):
            raise ParameterError(f"unknown bearing parametrization {self.kind!r}")

    @property
    def coeff_names(self):
        return ["k_xx", "k_yy"] if self.kind == "diagonal" else ["k_xx", "k_xy", "k_yx", "k_yy"]

    @property
    def n_coeffs(self):
        per = len(self.coeff_names)
        return per if self.shared else per * self.n_bearings

    @property
    def block_size(self):
        return 2 * self.n_bearings

    def _bearing_coeffs(self, coeffs, b):
        per = len(self.coeff_names)
        return coeffs[:per] if self.shared else coeffs[b * per:(b + 1) * per]

    def to_block(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.n_coeffs,):
            raise ShapeError(f"expected {self.n_coeffs} coefficients, got {coeffs.shape}")
        K_b = np.zeros((self.block_size, self.block_size))
        for b in range(self.n_bearings):
            c = self._bearing_coeffs(coeffs, b)
            sl = slice(2 * b, 2 * b + 2)
            if self.kind == "diagonal":
                K_b[sl, sl] = np.diag(c)
            else:
                K_b[sl, sl] = np.reshape(c, (2, 2))
        return K_b

    def block_grad_to_coeffs(self, G):
        """Chain ``d loss / d K_b`` back to the coefficients."""
        per = len(self.coeff_names)
        out = np.zeros(self.n_coeffs)
        for b in range(self.n_bearings):
            sub = G[2 * b:2 * b + 2, 2 * b:2 * b + 2]
            g = np.diag(sub) if self.kind == "diagonal" else sub.ravel()
            if self.shared:
                out += g
            else:
                out[b * per:(b + 1) * per] += g
        return out


@dataclass(frozen=True)
class LinearBearingLaw:
    """Ground-truth bearing stiffness ``k = k0 + slope * omega`` per direction."""

    kxx0: float = 1e7
    kxx_slope: float = 2e3
    kyy0: float = 8e6
    kyy_slope: float = 1.5e3

    def coeffs(self, omega):
        return np.array([self.kxx0 + self.kxx_slope * omega, self.kyy0 + self.kyy_slope * omega])

    def block(self, omega, param):
        return param.to_block(self.coeffs(omega))


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------

@dataclass
class Observation:
    omega: float
    U: np.ndarray
    F: np.ndarray


def generate_synthetic_observations(rotor, law, omegas, param=None, noise=0.0, seed=0):
    """Forward-solve the rotor with the ground-truth bearings at every speed.

    ``noise`` is a relative standard deviation applied independently to the
    real and imaginary parts of every response entry.
    """
    param = param or BearingParametrization(n_bearings=len(rotor.bearing_dofs) // 2)
    rng = np.random.default_rng([seed, 3])
    obs = []
    for omega in omegas:
        system = assemble_rotor(rotor, float(omega), law.block(omega, param))
        U = lu_solve(system.K, system.F)
        if noise > 0:
            U = U * (1.0 + noise * rng.standard_normal(U.shape) + 1j * noise * rng.standard_normal(U.shape))
        obs.append(Observation(float(omega), U, system.F.copy()))
    return obs


def _complex_pairs(z):
    return [[float(v.real), float(v.imag)] for v in z]


def write_observations(obs, path):
    data = [{"omega": o.omega, "U": _complex_pairs(o.U), "F": _complex_pairs(o.F)} for o in obs]
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def read_observations(path):
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("observation file must hold a JSON array")
    obs = []
    for i, item in enumerate(data):
        try:
            U = np.array([complex(re, im) for re, im in item["U"]])
            F = np.array([complex(re, im) for re, im in item["F"]])
            obs.append(Observation(float(item["omega"]), U, F))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"observation {i} is malformed: {exc}") from exc
    return obs


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class InverseTrainConfig:
    """``normalize`` divides each speed's residual by ``k_ref * ||U_u||`` so
    that every speed weighs in on the same (stiffness) scale."""

    epochs: int = 400
    steps_per_epoch: int = 10
    lr: float = 1e-2
    lr_final: float = 1e-4
    seed: int = 0
    k_ref: float = K_REF
    hidden_layers: tuple = (32, 32)
    normalize: bool = True
    loss_variant: str = "mean_squared_norm"

    def lr_at(self, epoch):
        if self.lr_final is None or self.epochs <= 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (epoch / (self.epochs - 1))


def build_inverse_model(omegas, param, cfg):
    omegas = np.asarray(omegas, dtype=float)
    std = float(np.std(omegas)) if omegas.size > 1 and np.std(omegas) > 0 else max(abs(float(omegas[0])), 1.0)
    rng = np.random.default_rng([cfg.seed, 0])
    return init_mlp(
        [1, *cfg.hidden_layers, param.n_coeffs], rng,
        input_mean=[float(np.mean(omegas))], input_std=[std],
        output_shift=cfg.k_ref, output_scale=cfg.k_ref,
    )


def inverse_batch_loss(model, systems, param, cfg):
    """Mean loss over all speeds and its gradient w.r.t. the network outputs."""
    x = np.array([[s.omega] for s in systems])
    coeffs, trace = mlp_forward(model, x)
    n = len(systems)
    d_coeffs = np.zeros_like(coeffs)
    losses = np.empty(n)
    for i, s in enumerate(systems):
        K_u = s.K_u_known + param.to_block(coeffs[i])
        r = partitioned_residual(s, K_u)
        delta = euclidean_norm(r)
        scale = cfg.k_ref * euclidean_norm(s.U_u) if cfg.normalize else 1.0
        G = inverse_loss_grad(s, K_u, delta)
        if cfg.loss_variant == "mean_squared_norm":
            losses[i] = (delta / scale) ** 2
            factor = 2.0 * delta / (n * scale**2)
        else:
            losses[i] = delta / scale
            factor = 1.0 / (n * scale)
        if G is not None:
            d_coeffs[i] = factor * param.block_grad_to_coeffs(G)
    return float(np.mean(losses)), d_coeffs, trace


def train_inverse(observations, rotor, param=None, cfg=None, model=None):
    """Fit a speed-to-coefficient network to the partitioned residual.

    Returns ``(model, history)``; the history holds the mean normalised
    residual norm per epoch.
    """
    cfg = cfg or InverseTrainConfig()
    param = param or BearingParametrization(n_bearings=len(rotor.bearing_dofs) // 2)
    if param.block_size != len(rotor.bearing_dofs):
        raise ShapeError(f"parametrization covers {param.block_size} DOFs, rotor has {len(rotor.bearing_dofs)} bearing DOFs")
    if len(observations) == 0:
        raise ParameterError("need at least one observation")
    if len({o.omega for o in observations}) < 2:
        warnings.warn("fewer than 2 distinct speeds: the speed dependence is not identifiable", stacklevel=2)
    systems = [partition_rotor(rotor, o.omega, o.U, o.F) for o in observations]
    if model is None:
        model = build_inverse_model([s.omega for s in systems], param, cfg)
    state = AdamState.for_model(model, lr=cfg.lr)
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        losses = []
        for _ in range(cfg.steps_per_epoch):
            loss, d_coeffs, trace = inverse_batch_loss(model, systems, param, cfg)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            adam_step(state, model, mlp_backward(model, trace, d_coeffs), lr=lr)
            losses.append(loss)
        mean = float(np.mean(losses))
        if cfg.loss_variant == "mean_squared_norm":
            mean = float(np.sqrt(mean))
        history.append(epoch, mean, 1e3 * (time.perf_counter() - t0))
    return model, history


def predict_coefficients(model, omegas):
    return mlp_forward(model, np.asarray(omegas, dtype=float).reshape(-1, 1))[0]


def predict_stiffness(model, omega, param):
    """Bearing stiffness block at ``omega``, ready for :func:`assemble_rotor`."""
    return param.to_block(predict_coefficients(model, [omega])[0])


def write_stiffness_csv(model, omegas, param, path):
    coeffs = predict_coefficients(model, omegas)
    names = param.coeff_names if param.shared else [
        f"{n}_{b}" for b in range(param.n_bearings) for n in param.coeff_names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["omega", *names])
        for o, c in zip(omegas, coeffs):
            w.writerow([repr(float(o)), *(repr(float(v)) for v in c)])
    return coeffs
