"""Multilayer perceptron with hand-written backpropagation and Adam.

Convention: ``weights[l]`` has shape ``(layer_sizes[l+1], layer_sizes[l])``
and maps the activations of layer ``l`` to the pre-activations of layer
``l+1``.  Hidden layers use ``tanh``, the output layer is linear.

Inputs are standardised with fixed statistics before the first layer and
the raw network output is mapped to physical units with a fixed affine
transform ``y = shift + scale * o_L``, optionally followed by a fixed square
decoder matrix ``D`` so that ``y = shift + D @ (scale * o_L)``.  None of
these transforms is trained, so losses and their gradients are always taken
in physical units.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

FORMAT_VERSION = 1

ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, o: 1.0 - o * o),
    "identity": (lambda z: z, lambda z, o: np.ones_like(z)),
}


@dataclass
class MlpModel:
    layer_sizes: list
    weights: list
    biases: list
    activation: str = "tanh"
    output_activation: str = "identity"
    input_mean: np.ndarray = None
    input_std: np.ndarray = None
    output_shift: np.ndarray = None
    output_scale: np.ndarray = None
    output_matrix: np.ndarray = None

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        n_in, n_out = self.layer_sizes[0], self.layer_sizes[-1]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and bias vector per layer transition")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if w.shape != expected or b.shape != (expected[0],):
                raise ShapeError(f"layer {l}: weight {w.shape}, bias {b.shape}, expected {expected}")
        self.input_mean = _filled(self.input_mean, n_in, 0.0)
        self.input_std = _filled(self.input_std, n_in, 1.0)
        self.output_shift = _filled(self.output_shift, n_out, 0.0)
        self.output_scale = _filled(self.output_scale, n_out, 1.0)
        if self.output_matrix is not None:
            self.output_matrix = np.array(self.output_matrix, dtype=float)
            if self.output_matrix.shape != (n_out, n_out):
                raise ShapeError(f"output matrix has shape {self.output_matrix.shape}, expected {(n_out, n_out)}")
        if np.any(self.input_std <= 0):
            raise ValueError("input standard deviations must be positive")

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    def copy(self):
        return MlpModel(
            self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.activation, self.output_activation, self.input_mean.copy(), self.input_std.copy(),
            self.output_shift.copy(), self.output_scale.copy(),
            None if self.output_matrix is None else self.output_matrix.copy(),
        )

    def parameters(self):
        return self.weights + self.biases

    def predict(self, x):
        return mlp_forward(self, x)[0]


def _filled(value, n, default):
    if value is None:
        return np.full(n, default)
    value = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    return value


def init_mlp(layer_sizes, rng, activation="tanh", **normalisation):
    """Glorot-uniform weights and zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        a = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-a, a, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpModel(list(layer_sizes), weights, biases, activation=activation, **normalisation)


@dataclass
class ForwardTrace:
    """Pre-activations ``z`` and activations ``o`` of every layer.

    ``activations[0]`` is the standardised input, so the list is one longer
    than ``pre_activations``.
    """

    pre_activations: list
    activations: list
    batched: bool

    @property
    def depth(self):
        return len(self.pre_activations)


@dataclass
class ParamGrads:
    weights: list
    biases: list

    def flat(self):
        return np.concatenate([g.ravel() for g in self.weights + self.biases])

    def scaled(self, alpha):
        return ParamGrads([alpha * g for g in self.weights], [alpha * g for g in self.biases])

    def __add__(self, other):
        return ParamGrads([a + b for a, b in zip(self.weights, other.weights)],
                          [a + b for a, b in zip(self.biases, other.biases)])


def mlp_forward(model, x):
    """Evaluate the network on one input vector or a batch ``(B, n_in)``.

    Returns ``(y, trace)``; ``y`` has the same leading shape as ``x``.
    """
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != model.n_inputs:
        raise ShapeError(f"network expects {model.n_inputs} inputs, got array of shape {x.shape}")
    o = (x - model.input_mean) / model.input_std
    zs, os_ = [], [o]
    hidden, _ = ACTIVATIONS[model.activation]
    output, _ = ACTIVATIONS[model.output_activation]
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = o @ w.T + b
        o = output(z) if l == model.n_layers - 1 else hidden(z)
        zs.append(z)
        os_.append(o)
    o = model.output_scale * o
    if model.output_matrix is not None:
        o = o @ model.output_matrix.T
    y = model.output_shift + o
    return y, ForwardTrace(zs, os_, batched)


def mlp_backward(model, trace, dloss_dy):
    """Backpropagate an upstream gradient ``dloss/dy`` to every weight and bias.

    For a batched trace ``dloss_dy`` has shape ``(B, n_out)`` and the
    returned gradients are summed over the batch.
    """
    if trace.depth != model.n_layers:
        raise ShapeError(f"trace has {trace.depth} layers, model has {model.n_layers}")
    g = np.asarray(dloss_dy, dtype=float)
    if g.shape != trace.activations[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output {trace.activations[-1].shape}")
    _, d_hidden = ACTIVATIONS[model.activation]
    _, d_output = ACTIVATIONS[model.output_activation]
    if model.output_matrix is not None:
        g = g @ model.output_matrix
    delta = g * model.output_scale
    grads_w = [None] * model.n_layers
    grads_b = [None] * model.n_layers
    for l in range(model.n_layers - 1, -1, -1):
        z, o, o_prev = trace.pre_activations[l], trace.activations[l + 1], trace.activations[l]
        if o_prev.shape[-1] != model.weights[l].shape[1]:
            raise ShapeError(f"trace layer {l} does not match the model")
        d_act = d_output if l == model.n_layers - 1 else d_hidden
        delta = delta * d_act(z, o)
        if trace.batched:
            grads_w[l] = delta.T @ o_prev
            grads_b[l] = delta.sum(axis=0)
        else:
            grads_w[l] = np.outer(delta, o_prev)
            grads_b[l] = delta.copy()
        if l > 0:
            delta = delta @ model.weights[l]
    return ParamGrads(grads_w, grads_b)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in model.parameters()]
        state.v = [np.zeros_like(p) for p in model.parameters()]
        return state


def adam_step(state, model, grads, lr=None):
    """Bias-corrected Adam update, applied to ``model`` in place.

    ``lr`` overrides ``state.lr`` for this step (learning-rate schedules).
    Returns ``(model, state)``.
    """
    params = model.parameters()
    gs = grads.weights + grads.biases
    if len(gs) != len(params) or any(g.shape != p.shape for g, p in zip(gs, params)):
        raise ShapeError("gradient shapes do not match model parameters")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr = state.lr if lr is None else lr
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


def loss_mse(y, y_true):
    """Mean squared error and its gradient ``2 (y - y_true) / m``."""
    y, y_true = np.asarray(y, dtype=float), np.asarray(y_true, dtype=float)
    if y.shape != y_true.shape:
        raise ShapeError(f"prediction {y.shape} and target {y_true.shape} differ")
    diff = y - y_true
    m = diff.size
    return float(np.sum(diff * diff) / m), 2.0 * diff / m


MAPE_GUARD = 1e-12


def loss_mape(y, y_true, guard=MAPE_GUARD):
    """Mean absolute percentage error with its subgradient (``sign(0) = 0``)."""
    y, y_true = np.asarray(y, dtype=float), np.asarray(y_true, dtype=float)
    if y.shape != y_true.shape:
        raise ShapeError(f"prediction {y.shape} and target {y_true.shape} differ")
    if np.any(np.abs(y_true) <= guard):
        raise ZeroDivisionError("MAPE undefined: a target value is zero (within guard)")
    m = y.size
    rel = (y - y_true) / y_true
    return float(np.sum(np.abs(rel)) / m), np.sign(y - y_true) / np.abs(y_true) / m


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

def model_to_dict(model):
    return {
        "format_version": FORMAT_VERSION,
        "layer_sizes": model.layer_sizes,
        "activation": model.activation,
        "output_activation": model.output_activation,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "normalization": {
            "input_mean": model.input_mean.tolist(),
            "input_std": model.input_std.tolist(),
            "output_shift": model.output_shift.tolist(),
            "output_scale": model.output_scale.tolist(),
            "output_matrix": None if model.output_matrix is None else model.output_matrix.tolist(),
        },
    }


def model_from_dict(d):
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version!r}")
    norm = d.get("normalization", {})
    return MlpModel(
        layer_sizes=d["layer_sizes"],
        weights=[np.array(w, dtype=float) for w in d["weights"]],
        biases=[np.array(b, dtype=float) for b in d["biases"]],
        activation=d.get("activation", "tanh"),
        output_activation=d.get("output_activation", "identity"),
        **{k: None if v is None else np.array(v, dtype=float) for k, v in norm.items()},
    )


def save_model(model, path, **extra):
    d = model_to_dict(model)
    d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d), d
