"""Element formulations and global assembly.

Every assembler returns an :class:`AssembledSystem` holding the reduced
stiffness matrix ``K`` and load vector ``F`` on the free degrees of freedom,
with Dirichlet values already eliminated.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConstraintError, ParameterError, ShapeError, SingularMatrixError
from .linalg import as_matrix, as_vector

RHO_AIR = 1.225
DRAG_COEFFICIENT = 1.2
# first root of 1 + cos(x) cosh(x) = 0, clamped-free cantilever
CANTILEVER_ROOT = 1.8751040687119611


@dataclass
class AssembledSystem:
    """Reduced linear system ``K u = F`` for one parameter sample.

    Attributes
    ----------
    K : ndarray, shape (n_free, n_free)
    F : ndarray, shape (n_free,)
    dof_map : list of (node, component)
        Label of each free DOF, in system order.
    dirichlet_values : list of (dof, value)
        Constrained DOFs of the full numbering and their prescribed values.
    free_dofs : ndarray of int
        Index of each free DOF in the full numbering.
    n_full : int
    """

    K: np.ndarray
    F: np.ndarray
    dof_map: list
    dirichlet_values: list = field(default_factory=list)
    free_dofs: np.ndarray = None
    n_full: int = None

    def __post_init__(self):
        self.K = as_matrix(self.K)
        self.F = as_vector(self.F)
        n = self.K.shape[0]
        if self.K.shape != (n, n) or self.F.shape[0] != n:
            raise ShapeError(f"K {self.K.shape} and F {self.F.shape} do not form a square system")
        if self.free_dofs is None:
            self.free_dofs = np.arange(n)
        if self.n_full is None:
            self.n_full = n + len(self.dirichlet_values)

    @property
    def n_free(self):
        return self.K.shape[0]

    def expand(self, u_free):
        """Scatter a free-DOF vector back into the full numbering."""
        u_free = as_vector(u_free)
        if u_free.shape[0] != self.n_free:
            raise ShapeError(f"expected {self.n_free} free values, got {u_free.shape[0]}")
        full = np.zeros(self.n_full, dtype=np.result_type(u_free, float))
        full[self.free_dofs] = u_free
        for dof, value in self.dirichlet_values:
            full[dof] = value
        return full


def apply_dirichlet(K_full, F_full, constraints, dof_labels=None):
    """Eliminate prescribed DOFs by row/column removal.

    ``constraints`` is an iterable of ``(dof, value)`` pairs (or a mapping).
    The coupling of every prescribed value is moved to the right-hand side:
    ``F_free - K[free, fixed] @ u_fixed``.
    """
    K_full, F_full = as_matrix(K_full), as_vector(F_full)
    n = K_full.shape[0]
    if K_full.shape != (n, n) or F_full.shape[0] != n:
        raise ShapeError(f"K {K_full.shape} and F {F_full.shape} do not conform")
    if isinstance(constraints, dict):
        constraints = list(constraints.items())
    constraints = [(int(d), v) for d, v in constraints]
    fixed = [d for d, _ in constraints]
    if len(set(fixed)) != len(fixed):
        raise ConstraintError(f"duplicate constrained DOF in {sorted(fixed)}")
    for d in fixed:
        if not 0 <= d < n:
            raise ConstraintError(f"constrained DOF {d} out of range [0, {n})")
    free = np.setdiff1d(np.arange(n), fixed)
    if free.size == 0:
        raise ConstraintError("every DOF is constrained; no free unknowns remain")
    values = np.array([v for _, v in constraints], dtype=np.result_type(F_full, float))
    F = F_full[free].copy()
    if fixed:
        F = F - K_full[np.ix_(free, fixed)] @ values
    labels = list(dof_labels) if dof_labels is not None else [(int(i), 0) for i in range(n)]
    return AssembledSystem(
        K=K_full[np.ix_(free, free)].copy(),
        F=F,
        dof_map=[labels[i] for i in free],
        dirichlet_values=[(d, v) for d, v in constraints],
        free_dofs=free,
        n_full=n,
    )


# --------------------------------------------------------------------------
# 1-D steady convection-diffusion
# --------------------------------------------------------------------------

@dataclass
class ConvDiffParams:
    """Boundary temperatures, diffusivity, velocity and nodal heat source."""

    T1: float
    T2: float
    k: float
    u: float
    S: np.ndarray

    def __post_init__(self):
        if not self.k > 0:
            raise ParameterError(f"diffusion coefficient must be positive, got k={self.k}")
        self.S = np.atleast_1d(np.asarray(self.S, dtype=float))


def convdiff_peclet(k, u, n_nodes):
    return abs(u) / (n_nodes - 1) / (2.0 * k)


def assemble_convdiff(params, n_nodes=6):
    """Linear Galerkin elements for ``u T' = k T'' + S`` on a uniform mesh of [0, 1].

    The nodal source is interpolated with the same linear shape functions
    (consistent load).  A scalar ``S`` is broadcast to every node.  No
    stabilisation is applied; a warning is issued when the element Peclet
    number ``|u| h / 2k`` reaches 1.
    """
    if n_nodes < 3:
        raise ConstraintError(f"n_nodes={n_nodes} leaves no free DOF after the two Dirichlet ends")
    if not params.k > 0:
        raise ParameterError(f"diffusion coefficient must be positive, got k={params.k}")
    S = params.S
    if S.size == 1:
        S = np.full(n_nodes, S[0])
    if S.size != n_nodes:
        raise ShapeError(f"source has {S.size} entries for {n_nodes} nodes")
    if convdiff_peclet(params.k, params.u, n_nodes) >= 1.0:
        warnings.warn("element Peclet number >= 1; unstabilised Galerkin solution may oscillate",
                      stacklevel=2)

    h = 1.0 / (n_nodes - 1)
    k_e = params.k / h * np.array([[1.0, -1.0], [-1.0, 1.0]])
    c_e = params.u / 2.0 * np.array([[-1.0, 1.0], [-1.0, 1.0]])
    m_e = h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    K = np.zeros((n_nodes, n_nodes))
    F = np.zeros(n_nodes)
    for e in range(n_nodes - 1):
        idx = [e, e + 1]
        K[np.ix_(idx, idx)] += k_e + c_e
        F[idx] += m_e @ S[idx]
    labels = [(i, "T") for i in range(n_nodes)]
    return apply_dirichlet(K, F, [(0, params.T1), (n_nodes - 1, params.T2)], labels)


# --------------------------------------------------------------------------
# Plane truss
# --------------------------------------------------------------------------

@dataclass
class TrussModel:
    """Pin-jointed plane truss with two member groups.

    ``members`` rows are ``(i, j, group)`` with group ``"horizontal"`` or
    ``"vertical"`` (diagonals and posts share the second group).  ``supports``
    lists ``(node, component)`` pairs with component 0 = x, 1 = y.
    """

    nodes: np.ndarray
    members: list
    supports: list
    load_nodes: list
    E_h: float = 2.1e11
    E_v: float = 2.1e11
    A_h: float = 1.0e-3
    A_v: float = 2.0e-3
    loads: np.ndarray = None

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.loads is None:
            self.loads = np.zeros(len(self.load_nodes))
        self.loads = np.asarray(self.loads, dtype=float)
        for name in ("E_h", "E_v", "A_h", "A_v"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.loads.shape != (len(self.load_nodes),):
            raise ShapeError(f"{len(self.load_nodes)} load nodes but {self.loads.shape} loads")


def load_truss_geometry(path=None):
    """Read a truss geometry JSON file (defaults to the bundled 23-bar layout)."""
    if path is None:
        text = resources.files("femnn").joinpath("data/truss23.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    geo = json.loads(text)
    return {
        "nodes": np.array(geo["nodes"], dtype=float),
        "members": [(int(i), int(j), str(g)) for i, j, g in geo["members"]],
        "supports": [(int(n), int(c)) for n, c in geo["supports"]],
        "load_nodes": [int(n) for n in geo["load_nodes"]],
    }


def truss_model(E_h=2.1e11, E_v=2.1e11, A_h=1.0e-3, A_v=2.0e-3, loads=None, geometry=None):
    geo = geometry if geometry is not None else load_truss_geometry()
    return TrussModel(E_h=E_h, E_v=E_v, A_h=A_h, A_v=A_v, loads=loads, **geo)


def _check_definite(K, what):
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(f"{what}: stiffness is not positive definite (mechanism)") from None
    if np.min(np.diag(L)) ** 2 <= 1e-12 * np.max(np.diag(K)):
        raise SingularMatrixError(f"{what}: stiffness is singular (mechanism)")


def assemble_truss(model, check=True):
    """Direct-stiffness assembly of 2-D bar elements.

    Vertical nodal loads act on ``model.load_nodes`` in order.  With
    ``check=True`` a Cholesky factorisation verifies that the supports remove
    every rigid-body and mechanism mode.
    """
    n_nodes = model.nodes.shape[0]
    n = 2 * n_nodes
    K = np.zeros((n, n))
    for i, j, group in model.members:
        if group == "horizontal":
            E, A = model.E_h, model.A_h
        elif group == "vertical":
            E, A = model.E_v, model.A_v
        else:
            raise ParameterError(f"unknown member group {group!r}")
        d = model.nodes[j] - model.nodes[i]
        L = math.hypot(d[0], d[1])
        c, s = d / L
        t = np.array([-c, -s, c, s])
        idx = [2 * i, 2 * i + 1, 2 * j, 2 * j + 1]
        K[np.ix_(idx, idx)] += E * A / L * np.outer(t, t)
    F = np.zeros(n)
    for node, p in zip(model.load_nodes, model.loads):
        F[2 * node + 1] += p
    labels = [(i, c) for i in range(n_nodes) for c in ("x", "y")]
    system = apply_dirichlet(K, F, [(2 * node + comp, 0.0) for node, comp in model.supports], labels)
    if check:
        _check_definite(system.K, "truss")
    return system


# --------------------------------------------------------------------------
# Cantilever building (Euler-Bernoulli)
# --------------------------------------------------------------------------

@dataclass
class BeamModel:
    """Building idealised as a clamped-free Euler-Bernoulli beam.

    ``EI`` defaults to the value that reproduces the first cantilever
    frequency ``f`` for a uniform mass per height ``rho * W * D``.
    ``zeta`` is carried for completeness; the static analysis does not use it.
    """

    H: float = 180.0
    W: float = 45.0
    D: float = 30.0
    f: float = 0.2
    rho: float = 160.0
    zeta: float = 0.01
    n_e: int = 20
    EI: float = None

    def __post_init__(self):
        for name in ("H", "W", "D", "f", "rho"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.EI is None:
            m_bar = self.rho * self.W * self.D
            omega = 2.0 * math.pi * self.f
            self.EI = (omega / CANTILEVER_ROOT**2) ** 2 * m_bar * self.H**4
        if not self.EI > 0:
            raise ParameterError(f"EI must be positive, got {self.EI}")

    @property
    def node_heights(self):
        return np.linspace(0.0, self.H, self.n_e + 1)


def wind_load_profile(u_ref, z0, model, rho_air=RHO_AIR, C_d=DRAG_COEFFICIENT, z_ref=None):
    """Static drag force at every beam node, ``rho V(z)^2 A C_d / 2``.

    ``V(z) = u_ref ln(z/z0) / ln(z_ref/z0)`` with ``z_ref = H`` by default.
    ``A`` is the facade width ``W`` times the node's tributary height.
    Nodes at or below ``z0`` see no wind.
    """
    z_ref = model.H if z_ref is None else z_ref
    if not z0 > 0:
        raise ParameterError(f"roughness length must be positive, got z0={z0}")
    if not z0 < z_ref:
        raise ParameterError(f"roughness length {z0} must be below the reference height {z_ref}")
    if u_ref < 0:
        raise ParameterError(f"reference velocity must be non-negative, got {u_ref}")
    z = model.node_heights
    V = np.zeros_like(z)
    above = z > z0
    V[above] = u_ref * np.log(z[above] / z0) / math.log(z_ref / z0)
    h = model.H / model.n_e
    trib = np.full(z.shape, h)
    trib[0] = trib[-1] = h / 2.0
    area = model.W * trib
    return 0.5 * rho_air * V**2 * area * C_d


def beam_element_stiffness(EI, L):
    return EI / L**3 * np.array([
        [12.0, 6 * L, -12.0, 6 * L],
        [6 * L, 4 * L * L, -6 * L, 2 * L * L],
        [-12.0, -6 * L, 12.0, -6 * L],
        [6 * L, 2 * L * L, -6 * L, 4 * L * L],
    ])


def assemble_beam(model, load):
    """Hermite cubic beam elements clamped at ``z = 0``.

    ``load`` holds either one lateral force per node (``n_e + 1`` entries)
    or a full DOF load vector (deflection and moment per node).
    """
    if model.n_e < 4:
        raise ParameterError(f"mesh too coarse: n_e={model.n_e} < 4")
    n_nodes = model.n_e + 1
    n = 2 * n_nodes
    load = as_vector(load)
    if load.shape[0] == n_nodes:
        F = np.zeros(n)
        F[0::2] = load
    elif load.shape[0] == n:
        F = load.astype(float, copy=True)
    else:
        raise ShapeError(f"beam load must have {n_nodes} or {n} entries, got {load.shape[0]}")
    L = model.H / model.n_e
    k_e = beam_element_stiffness(model.EI, L)
    K = np.zeros((n, n))
    for e in range(model.n_e):
        idx = slice(2 * e, 2 * e + 4)
        K[idx, idx] += k_e
    labels = [(i, c) for i in range(n_nodes) for c in ("w", "theta")]
    return apply_dirichlet(K, F, [(0, 0.0), (1, 0.0)], labels)


# --------------------------------------------------------------------------
# Rotor in the frequency domain
# --------------------------------------------------------------------------

@dataclass
class RotorModel:
    """Linear rotor model with bearing stiffness left out of ``K_r``."""

    M: np.ndarray
    G: np.ndarray
    C: np.ndarray
    K_r: np.ndarray
    bearing_dofs: list
    F: np.ndarray

    def __post_init__(self):
        self.M, self.G, self.C, self.K_r = (np.asarray(a, dtype=float) for a in (self.M, self.G, self.C, self.K_r))
        self.F = np.asarray(self.F, dtype=complex)
        self.bearing_dofs = [int(d) for d in self.bearing_dofs]
        n = self.M.shape[0]
        for name in ("M", "G", "C", "K_r"):
            if getattr(self, name).shape != (n, n):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(n, n)}")
        if self.F.shape != (n,):
            raise ShapeError(f"excitation has shape {self.F.shape}, expected {(n,)}")
        if len(set(self.bearing_dofs)) != len(self.bearing_dofs):
            raise ShapeError(f"bearing DOFs are not distinct: {self.bearing_dofs}")
        if any(not 0 <= d < n for d in self.bearing_dofs):
            raise ShapeError(f"bearing DOFs {self.bearing_dofs} out of range [0, {n})")

    @property
    def n_dof(self):
        return self.M.shape[0]

    @property
    def known_dofs(self):
        return [d for d in range(self.n_dof) if d not in set(self.bearing_dofs)]

    def expand_bearing(self, K_b):
        K_b = as_matrix(K_b)
        nb = len(self.bearing_dofs)
        if K_b.shape != (nb, nb):
            raise ShapeError(f"bearing block has shape {K_b.shape}, expected {(nb, nb)}")
        full = np.zeros((self.n_dof, self.n_dof), dtype=K_b.dtype)
        full[np.ix_(self.bearing_dofs, self.bearing_dofs)] = K_b
        return full

    def dynamic_stiffness(self, omega, K_b=None):
        Z = -omega**2 * self.M + 1j * omega * (self.G * omega + self.C) + self.K_r
        if K_b is not None:
            Z = Z + self.expand_bearing(K_b)
        return Z


def assemble_rotor(model, omega, K_b):
    """Dynamic stiffness ``-w^2 M + j w (G w + C) + K_r + K_b`` and excitation."""
    if omega < 0:
        raise ParameterError(f"rotational speed must be non-negative, got {omega}")
    Z = model.dynamic_stiffness(omega, K_b)
    labels = [(d // 2, "xy"[d % 2]) for d in range(model.n_dof)]
    return AssembledSystem(K=Z, F=model.F.copy(), dof_map=labels)


def rotor_to_dict(model):
    def mat(a):
        return np.asarray(a).tolist()

    return {
        "M": mat(model.M), "G": mat(model.G), "C": mat(model.C), "K_r": mat(model.K_r),
        "bearing_dofs": list(model.bearing_dofs),
        "F": [[float(z.real), float(z.imag)] for z in model.F],
    }


def rotor_from_dict(d):
    F = np.array([complex(re, im) for re, im in d["F"]])
    return RotorModel(M=d["M"], G=d["G"], C=d["C"], K_r=d["K_r"], bearing_dofs=d["bearing_dofs"], F=F)


def load_rotor_model(path=None):
    """Read a rotor JSON file (defaults to the bundled demonstration rotor)."""
    if path is None:
        text = resources.files("femnn").joinpath("data/rotor_demo.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return rotor_from_dict(json.loads(text))
