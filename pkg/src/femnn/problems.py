"""Registry of the problem families used throughout the package.

A family ties together the input distributions, the finite element
assembler, the quantity of interest and a default network architecture.
The order of ``inputs`` is the order of the network's input vector.

Besides the per-sample ``assemble`` (which goes through :mod:`femnn.fem`),
every family has a vectorised ``batch_assemble`` used during training;
the test-suite checks the two against each other.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .errors import FemNNError, ParameterError, RegistryError, ShapeError
from .hybrid_forward import SampleBatch
from .hybrid_inverse import BearingParametrization, LinearBearingLaw
from .neural import init_mlp
from .uq import DistributionSpec

FAMILIES = ("convdiff", "truss23", "building_beam", "rotor_bearing")


@dataclass
class ProblemFamily:
    name: str
    inputs: list
    assemble_fn: object
    batch_fn: object
    n_dof: int
    qoi_fn: object
    qoi_name: str
    hidden_layers: tuple = (64, 64, 64)
    output_shift: object = 0.0
    output_scale: object = 1.0
    output_matrix: object = None
    n_outputs: int = None
    train_defaults: dict = field(default_factory=dict)
    shifted_inputs: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_outputs is None:
            self.n_outputs = self.n_dof

    def input_names(self):
        return [name for name, _ in self.inputs]

    def input_specs(self, overrides=None):
        overrides = overrides or {}
        unknown = set(overrides) - set(self.input_names())
        if unknown:
            raise ParameterError(f"{self.name}: unknown inputs {sorted(unknown)}")
        return [overrides.get(name, spec) for name, spec in self.inputs]

    def assemble(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (len(self.inputs),):
            raise ShapeError(f"{self.name} expects {len(self.inputs)} inputs, got shape {x.shape}")
        return self.assemble_fn(x)

    def batch_assemble(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.inputs):
            raise ShapeError(f"{self.name} expects a (B, {len(self.inputs)}) input batch, got {X.shape}")
        return self.batch_fn(X)

    def draw(self, rng, n, specs=None):
        specs = self.input_specs(specs)
        return np.column_stack([s.draw(rng, n) for s in specs])

    def sampler(self, rng, n):
        """Training sampler: fresh inputs and their systems, never a solution."""
        X = self.draw(rng, n)
        K, F = self.batch_assemble(X)
        return SampleBatch(X, K, F)

    def qoi(self, system, u):
        return self.qoi_fn(system, u)

    def input_statistics(self):
        specs = self.input_specs()
        return np.array([s.mean() for s in specs]), np.array([s.std() for s in specs])

    def build_model(self, seed=0, hidden_layers=None):
        mean, std = self.input_statistics()
        layers = [len(self.inputs), *(hidden_layers or self.hidden_layers), self.n_outputs]
        return init_mlp(layers, np.random.default_rng([seed, 0]), input_mean=mean, input_std=std,
                        output_shift=self.output_shift, output_scale=self.output_scale,
                        output_matrix=self.output_matrix)

    def describe(self):
        return {
            "family": self.name,
            "inputs": {name: spec.to_dict() for name, spec in self.inputs},
            "n_dof": self.n_dof,
            "n_outputs": self.n_outputs,
            "hidden_layers": list(self.hidden_layers),
            "qoi": self.qoi_name,
            "train_defaults": dict(self.train_defaults),
            **self.options,
        }


DECODERS = ("mean_stiffness", "none")

# forward-training settings used when neither a config file nor a flag says otherwise
_TRAIN_DEFAULTS = {"batch_size": 128, "steps_per_epoch": 10, "lr": 3e-3, "lr_final": 1e-5}


def _decoder(kind, inputs, batch, scale):
    """Fixed output decoder for a structural family.

    The residual loss weights each displacement mode by the square of its
    stiffness, so on a stiff, ill-conditioned system the soft modes that
    carry the deflection barely train.  ``"mean_stiffness"`` maps the raw
    network output through ``p_ref * inv(K(mean inputs))``, an operator
    fixed before training and independent of any sample's solution, which
    brings the loss Hessian close to the identity.  ``"none"`` keeps the
    diagonal ``scale``.  Returns ``(matrix, scale)`` for the model.
    """
    if kind == "none":
        return None, scale
    if kind != "mean_stiffness":
        raise ParameterError(f"unknown decoder {kind!r}; expected one of {DECODERS}")
    mean = np.array([spec.mean() for _, spec in inputs])
    K, F = batch(mean[None, :])
    p_ref = float(np.max(np.abs(F[0])))
    return np.linalg.inv(K[0]) * p_ref, 1.0


def sample_inputs(family, rng):
    """Draw one input vector and assemble its system (no solve)."""
    x = family.draw(rng, 1)[0]
    try:
        return x, family.assemble(x)
    except FemNNError as exc:
        raise type(exc)(f"{exc} (inputs {dict(zip(family.input_names(), x.tolist()))})") from exc


# --------------------------------------------------------------------------
# convection-diffusion
# --------------------------------------------------------------------------

def _convdiff_family(n_nodes=6, hidden_layers=(64, 64, 64)):
    if n_nodes < 3:
        raise ParameterError(f"n_nodes must be >= 3, got {n_nodes}")
    inputs = [
        ("T1", DistributionSpec.uniform(0.0, 100.0)),
        ("T2", DistributionSpec.uniform(0.0, 200.0)),
        ("k", DistributionSpec.uniform(1.0, 10.0)),
        ("u", DistributionSpec.uniform(0.0, 30.0)),
    ] + [(f"S{i + 1}", DistributionSpec.uniform(0.0, 100.0)) for i in range(n_nodes)]

    # unit operators: K = k * Kd + u * Kc, F = Ms @ S before eliminating the ends
    unit_d = fem.assemble_convdiff(fem.ConvDiffParams(0, 0, 1.0, 0.0, np.zeros(n_nodes)), n_nodes)
    h = 1.0 / (n_nodes - 1)
    Kd = np.zeros((n_nodes, n_nodes))
    Kc = np.zeros((n_nodes, n_nodes))
    Ms = np.zeros((n_nodes, n_nodes))
    for e in range(n_nodes - 1):
        idx = np.ix_([e, e + 1], [e, e + 1])
        Kd[idx] += np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
        Kc[idx] += np.array([[-1.0, 1.0], [-1.0, 1.0]]) / 2.0
        Ms[idx] += h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    free = unit_d.free_dofs
    ends = [0, n_nodes - 1]

    def params(x):
        return fem.ConvDiffParams(T1=x[0], T2=x[1], k=x[2], u=x[3], S=x[4:])

    def assemble(x):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fem.assemble_convdiff(params(x), n_nodes)

    def batch(X):
        k, u = X[:, 2, None, None], X[:, 3, None, None]
        if np.any(k <= 0):
            raise ParameterError("diffusion coefficient must be positive")
        K_full = k * Kd + u * Kc
        F_full = X[:, 4:] @ Ms.T
        K = K_full[:, free][:, :, free]
        F = F_full[:, free] - np.einsum("bij,bj->bi", K_full[:, free][:, :, ends], X[:, :2])
        return K, F

    def qoi(system, u):
        return float(np.max(system.expand(u)))

    T1, T2 = inputs[0][1].mean(), inputs[1][1].mean()
    return ProblemFamily(
        "convdiff", inputs, assemble, batch, n_nodes - 2, qoi, "max_temperature",
        hidden_layers=tuple(hidden_layers), output_shift=0.5 * (T1 + T2), output_scale=50.0,
        train_defaults=_TRAIN_DEFAULTS | {"epochs": 8000},
        options={"n_nodes": n_nodes}, context={"params": params},
    )


# --------------------------------------------------------------------------
# 23-bar truss
# --------------------------------------------------------------------------

def _truss_family(geometry=None, hidden_layers=(64, 64, 64), decoder="mean_stiffness"):
    geo = fem.load_truss_geometry(geometry)
    n_loads = len(geo["load_nodes"])
    inputs = [
        ("A_h", DistributionSpec.normal(1.0e-3, 1.0e-4)),
        ("A_v", DistributionSpec.normal(2.0e-3, 2.0e-4)),
        ("E_h", DistributionSpec.normal(2.1e11, 2.1e10)),
        ("E_v", DistributionSpec.normal(2.1e11, 2.1e10)),
    ] + [(f"P{i + 1}", DistributionSpec.normal(-5.0e5, 5.0e4)) for i in range(n_loads)]

    def model_of(x):
        return fem.truss_model(A_h=x[0], A_v=x[1], E_h=x[2], E_v=x[3], loads=x[4:], geometry=geo)

    def assemble(x):
        return fem.assemble_truss(model_of(x))

    # K is linear in E*A of each group and F is linear in the loads
    unit_h = fem.assemble_truss(fem.truss_model(E_h=1.0, E_v=1e-300, A_h=1.0, A_v=1.0, geometry=geo), check=False)
    unit_v = fem.assemble_truss(fem.truss_model(E_h=1e-300, E_v=1.0, A_h=1.0, A_v=1.0, geometry=geo), check=False)
    Kh, Kv = unit_h.K, unit_v.K
    load_map = np.column_stack([
        fem.assemble_truss(fem.truss_model(loads=np.eye(n_loads)[j], geometry=geo), check=False).F
        for j in range(n_loads)])

    def batch(X):
        if np.any(X[:, :4] <= 0):
            raise ParameterError("truss areas and moduli must be positive")
        K = (X[:, 0] * X[:, 2])[:, None, None] * Kh + (X[:, 1] * X[:, 3])[:, None, None] * Kv
        F = X[:, 4:] @ load_map.T
        return K, F

    def qoi(system, u):
        full = system.expand(u)
        return float(np.min(full[1::2]))

    n_free = unit_h.n_free
    matrix, scale = _decoder(decoder, inputs, batch, 1.0)
    return ProblemFamily(
        "truss23", inputs, assemble, batch, n_free, qoi, "max_downward_deflection",
        hidden_layers=tuple(hidden_layers), output_scale=scale, output_matrix=matrix,
        train_defaults=_TRAIN_DEFAULTS | {"epochs": 8000},
        options={"geometry": geometry, "decoder": decoder}, context={"model_of": model_of, "geometry": geo},
    )


# --------------------------------------------------------------------------
# wind-loaded building
# --------------------------------------------------------------------------

def _beam_family(n_e=20, hidden_layers=(64, 64, 64), H=180.0, W=45.0, D=30.0, f=0.2, rho=160.0,
                 zeta=0.01, EI=None, rho_air=fem.RHO_AIR, C_d=fem.DRAG_COEFFICIENT, decoder="mean_stiffness"):
    beam = fem.BeamModel(H=H, W=W, D=D, f=f, rho=rho, zeta=zeta, n_e=n_e, EI=EI)
    inputs = [
        ("u_ref", DistributionSpec.weibull(40.0, 2.0)),
        ("z0", DistributionSpec.uniform(0.1, 0.7)),
    ]

    def assemble(x):
        load = fem.wind_load_profile(x[0], x[1], beam, rho_air=rho_air, C_d=C_d)
        return fem.assemble_beam(beam, load)

    base = fem.assemble_beam(beam, np.zeros(n_e + 1))
    z = beam.node_heights
    h = beam.H / beam.n_e
    area = np.full(z.shape, beam.W * h)
    area[0] = area[-1] = beam.W * h / 2.0
    w_rows = np.array([i for i, (node, comp) in enumerate(base.dof_map) if comp == "w"])
    w_nodes = np.array([node for node, comp in base.dof_map if comp == "w"])

    def batch(X):
        u_ref, z0 = X[:, 0:1], X[:, 1:2]
        if np.any(z0 <= 0) or np.any(z0 >= beam.H) or np.any(u_ref < 0):
            raise ParameterError("wind inputs out of range")
        zz = z[w_nodes][None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            V = np.where(zz > z0, u_ref * np.log(zz / z0) / np.log(beam.H / z0), 0.0)
        F = np.zeros((X.shape[0], base.n_free))
        F[:, w_rows] = 0.5 * rho_air * V**2 * area[w_nodes] * C_d
        return np.broadcast_to(base.K, (X.shape[0], *base.K.shape)), F

    top = [i for i, (node, comp) in enumerate(base.dof_map) if node == n_e and comp == "w"][0]

    def qoi(system, u):
        return float(abs(u[top]))

    # reference deflection: uniform load of the mean wind on the whole facade
    w_ref = 0.5 * rho_air * 40.0**2 * C_d * beam.W
    d_ref = w_ref * beam.H**4 / (8.0 * beam.EI)
    scale = np.where(np.array([c for _, c in base.dof_map]) == "w", d_ref, d_ref / beam.H)
    matrix, scale = _decoder(decoder, inputs, batch, scale)
    return ProblemFamily(
        "building_beam", inputs, assemble, batch, base.n_free, qoi, "top_lateral_displacement",
        hidden_layers=tuple(hidden_layers), output_scale=scale, output_matrix=matrix,
        train_defaults=_TRAIN_DEFAULTS | {"epochs": 6000},
        # inputs outside the training distribution: mean reference wind scaled by 1.4
        shifted_inputs={"u_ref": DistributionSpec.weibull(1.4 * 40.0, 2.0)},
        options={"n_e": n_e, "H": H, "W": W, "D": D, "f": f, "rho": rho, "zeta": zeta, "EI": beam.EI,
                 "rho_air": rho_air, "C_d": C_d, "decoder": decoder},
        context={"beam": beam, "top_dof": top},
    )


# --------------------------------------------------------------------------
# rotor on fluid bearings
# --------------------------------------------------------------------------

def _rotor_family(rotor=None, hidden_layers=(32, 32), parametrization="diagonal"):
    model = fem.load_rotor_model(rotor)
    law = LinearBearingLaw()
    param = BearingParametrization(kind=parametrization, n_bearings=len(model.bearing_dofs) // 2)
    if parametrization != "diagonal":
        raise ParameterError("the synthetic ground truth only defines diagonal bearing coefficients")
    inputs = [("omega", DistributionSpec.uniform(50.0, 500.0))]

    def assemble(x):
        return fem.assemble_rotor(model, x[0], law.block(x[0], param))

    def batch(X):
        systems = [assemble(x) for x in X]
        return np.stack([s.K for s in systems]), np.stack([s.F for s in systems])

    b0 = model.bearing_dofs[0]

    def qoi(system, u):
        return float(abs(u[b0]))

    return ProblemFamily(
        "rotor_bearing", inputs, assemble, batch, model.n_dof, qoi, "bearing_response_amplitude",
        hidden_layers=tuple(hidden_layers), n_outputs=param.n_coeffs,
        options={"rotor": rotor, "parametrization": parametrization},
        context={"rotor": model, "law": law, "param": param},
    )


_BUILDERS = {
    "convdiff": (_convdiff_family, {"n_nodes", "hidden_layers"}),
    "truss23": (_truss_family, {"geometry", "hidden_layers", "decoder"}),
    "building_beam": (_beam_family, {"n_e", "hidden_layers", "H", "W", "D", "f", "rho", "zeta", "EI",
                                     "rho_air", "C_d", "decoder"}),
    "rotor_bearing": (_rotor_family, {"rotor", "hidden_layers", "parametrization"}),
}


def make_family(name, overrides=None):
    """Build a registered family, applying ``overrides``.

    Besides the builder options, ``overrides["inputs"]`` may replace input
    distributions, given as ``{name: {"kind": ..., ...}}``.
    """
    if name not in _BUILDERS:
        raise RegistryError(f"unknown problem family {name!r}; known families: {', '.join(FAMILIES)}")
    overrides = dict(overrides or {})
    input_overrides = overrides.pop("inputs", {}) or {}
    builder, allowed = _BUILDERS[name]
    unknown = set(overrides) - allowed
    if unknown:
        raise ParameterError(f"{name}: unknown override(s) {sorted(unknown)}; allowed: {sorted(allowed)}")
    family = builder(**overrides)
    if input_overrides:
        specs = {k: v if isinstance(v, DistributionSpec) else DistributionSpec.from_dict(v)
                 for k, v in input_overrides.items()}
        family.inputs = list(zip(family.input_names(), family.input_specs(specs)))
    return family


def load_family_config(path):
    """Read a family config file: ``{"family": name, "overrides": {...}}``."""
    with open(path) as fh:
        cfg = json.load(fh)
    return make_family(cfg["family"], cfg.get("overrides"))
