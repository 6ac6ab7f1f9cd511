"""Monte-Carlo uncertainty quantification.

Inputs are drawn with one counter-based generator per sample
(``default_rng([seed, MC_STREAM, i])``), so an ensemble does not depend on
evaluation order or on how the work is split between threads.
"""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import FemNNError, InsufficientDataError, NonConvergenceError, ParameterError
from .hybrid_forward import predict_batch, refine_prediction
from .linalg import euclidean_norm, lu_solve

MC_STREAM = 2

EVALUATORS = ("fem", "surrogate", "surrogate-fallback")


@dataclass(frozen=True)
class DistributionSpec:
    """``normal`` (mean, std), ``weibull`` (mean, shape) or ``uniform`` (lo, hi)."""

    kind: str
    a: float
    b: float

    def __post_init__(self):
        if self.kind == "normal":
            if not self.b > 0:
                raise ParameterError(f"normal std must be positive, got {self.b}")
        elif self.kind == "weibull":
            if not self.b > 0:
                raise ParameterError(f"weibull shape must be positive, got {self.b}")
            if not self.a > 0:
                raise ParameterError(f"weibull mean must be positive, got {self.a}")
        elif self.kind == "uniform":
            if not self.a < self.b:
                raise ParameterError(f"uniform bounds must satisfy lo < hi, got [{self.a}, {self.b}]")
        else:
            raise ParameterError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def normal(cls, mean, std):
        return cls("normal", float(mean), float(std))

    @classmethod
    def weibull(cls, mean, shape):
        return cls("weibull", float(mean), float(shape))

    @classmethod
    def uniform(cls, lo, hi):
        return cls("uniform", float(lo), float(hi))

    @property
    def weibull_scale(self):
        return self.a / math.gamma(1.0 + 1.0 / self.b)

    def mean(self):
        if self.kind == "uniform":
            return 0.5 * (self.a + self.b)
        return self.a

    def std(self):
        if self.kind == "normal":
            return self.b
        if self.kind == "uniform":
            return (self.b - self.a) / math.sqrt(12.0)
        k, lam = self.b, self.weibull_scale
        return lam * math.sqrt(math.gamma(1 + 2 / k) - math.gamma(1 + 1 / k) ** 2)

    def draw(self, rng, n):
        if self.kind == "normal":
            return rng.normal(self.a, self.b, n)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, n)
        return self.weibull_scale * rng.weibull(self.b, n)

    def to_dict(self):
        names = {"normal": ("mean", "std"), "weibull": ("mean", "shape"), "uniform": ("lo", "hi")}[self.kind]
        return {"kind": self.kind, names[0]: self.a, names[1]: self.b}

    @classmethod
    def from_dict(cls, d):
        kind = d["kind"]
        if kind == "normal":
            return cls.normal(d["mean"], d["std"])
        if kind == "weibull":
            return cls.weibull(d["mean"], d["shape"])
        if kind == "uniform":
            return cls.uniform(d["lo"], d["hi"])
        raise ParameterError(f"unknown distribution kind {kind!r}")


def sample(spec, rng_seed, n):
    """``n`` i.i.d. draws from ``spec``."""
    if n < 1:
        raise ParameterError(f"need at least one sample, got n={n}")
    return spec.draw(np.random.default_rng(rng_seed), n)


@dataclass
class McSummary:
    n_samples: int
    mean: float
    std: float
    skewness: float
    kurtosis: float
    excess_kurtosis: float
    bin_edges: np.ndarray
    densities: np.ndarray
    cdf_values: np.ndarray
    cdf_levels: np.ndarray
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    def cdf_at(self, x):
        return np.searchsorted(self.cdf_values, x, side="right") / self.n_samples

    def to_dict(self):
        d = {
            "n_samples": self.n_samples,
            "mean": self.mean,
            "std": self.std,
            "skewness": self.skewness,
            "kurtosis": self.kurtosis,
            "excess_kurtosis": self.excess_kurtosis,
            "degenerate": self.degenerate,
            "histogram": {"edges": self.bin_edges.tolist(), "densities": self.densities.tolist()},
        }
        d.update(self.extra)
        return d


def summarize(ensemble, n_bins=50):
    """Moments, histogram density and empirical CDF of a scalar ensemble.

    ``std`` uses the ``n - 1`` divisor; skewness and kurtosis are the
    standardised central moments ``m3 / m2**1.5`` and ``m4 / m2**2``.
    A constant ensemble is flagged ``degenerate`` with skewness and kurtosis
    set to ``None``.
    """
    x = np.asarray(ensemble, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise InsufficientDataError(f"need at least 4 samples for kurtosis, got {n}")
    mean = float(np.mean(x))
    d = x - mean
    m2 = float(np.mean(d**2))
    std = math.sqrt(m2 * n / (n - 1))
    lo, hi = float(x.min()), float(x.max())
    xs = np.sort(x)
    levels = np.arange(1, n + 1) / n
    if m2 == 0.0 or hi == lo:
        edges = np.array([lo - 0.5, lo + 0.5])
        return McSummary(n, mean, 0.0, None, None, None, edges, np.array([1.0]), xs, levels, degenerate=True)
    skew = float(np.mean(d**3)) / m2**1.5
    kurt = float(np.mean(d**4)) / m2**2
    counts, edges = np.histogram(x, bins=n_bins, range=(lo, hi))
    densities = counts / (n * np.diff(edges))
    return McSummary(n, mean, std, skew, kurt, kurt - 3.0, edges, densities, xs, levels)


@dataclass
class McResult:
    inputs: np.ndarray
    outputs: np.ndarray
    input_names: list
    evaluator: str
    n_refined: int = 0
    relative_residuals: np.ndarray = None


def draw_inputs(family, n, seed, specs=None):
    """Per-sample counter-based draws, shape ``(n, n_inputs)``."""
    specs = family.input_specs(specs)
    x = np.empty((n, len(specs)))
    for i in range(n):
        rng = np.random.default_rng([seed, MC_STREAM, i])
        x[i] = [s.draw(rng, 1)[0] for s in specs]
    return x


def run_monte_carlo(family, evaluator, n, seed, model=None, specs=None, tol=1e-3, parallel=1):
    """Evaluate the family's quantity of interest on ``n`` random inputs.

    ``evaluator`` is ``"fem"`` (direct solve), ``"surrogate"`` (network
    only) or ``"surrogate-fallback"`` (network, refined by an iterative
    solve seeded with the prediction whenever its relative residual exceeds
    ``tol``).  ``specs`` maps input names to replacement distributions.
    """
    if evaluator not in EVALUATORS:
        raise ParameterError(f"unknown evaluator {evaluator!r}; expected one of {EVALUATORS}")
    if n < 1:
        raise ParameterError(f"need at least one sample, got n={n}")
    if evaluator != "fem" and model is None:
        raise ParameterError(f"evaluator {evaluator!r} needs a trained model")
    x = draw_inputs(family, n, seed, specs)

    def assemble(i):
        try:
            return family.assemble(x[i])
        except FemNNError as exc:
            raise FemNNError(f"sample {i} (inputs {x[i].tolist()}): {exc}") from exc

    systems = _map(assemble, range(n), parallel)
    outputs = np.empty(n)
    rel = np.full(n, np.nan)
    n_refined = 0
    if evaluator == "fem":
        def solve(i):
            try:
                return family.qoi(systems[i], lu_solve(systems[i].K, systems[i].F))
            except FemNNError as exc:
                raise FemNNError(f"sample {i} (inputs {x[i].tolist()}): {exc}") from exc

        outputs[:] = _map(solve, range(n), parallel)
        rel[:] = 0.0
    else:
        U = predict_batch(model, x)
        for i, system in enumerate(systems):
            u = U[i]
            r = system.K @ u - system.F
            rel[i] = euclidean_norm(r) / euclidean_norm(system.F) if np.any(system.F) else euclidean_norm(r)
            if evaluator == "surrogate-fallback" and rel[i] > tol:
                try:
                    u = refine_prediction(u, system)
                except NonConvergenceError:
                    u = lu_solve(system.K, system.F)
                except FemNNError as exc:
                    raise FemNNError(f"sample {i} (inputs {x[i].tolist()}): {exc}") from exc
                n_refined += 1
            outputs[i] = family.qoi(system, u)
    return McResult(x, outputs, family.input_names(), evaluator, n_refined, rel)


def _map(fn, items, parallel):
    items = list(items)
    if parallel <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# output files
# --------------------------------------------------------------------------

def write_ensemble_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", *result.input_names, "output"])
        for i, (xi, yi) in enumerate(zip(result.inputs, result.outputs)):
            w.writerow([i, *(repr(float(v)) for v in xi), repr(float(yi))])


def write_summary(summary, path):
    with open(path, "w") as fh:
        json.dump(summary.to_dict(), fh, indent=1)
        fh.write("\n")


def write_pdf_csv(summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["edge", "density"])
        for e, d in zip(summary.bin_edges[:-1], summary.densities):
            w.writerow([repr(float(e)), repr(float(d))])
        w.writerow([repr(float(summary.bin_edges[-1])), ""])


def write_cdf_csv(summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "quantile"])
        for v, q in zip(summary.cdf_values, summary.cdf_levels):
            w.writerow([repr(float(v)), repr(float(q))])
