"""Small feed-forward networks with hand-written exact gradients.

Implements the layer stack, the four training losses (reweighted
classification, reweighted per-class transport discrepancy, pairwise
margin clustering, centroid alignment) with gradients, and SGD with
momentum. Everything is plain float64 numpy; gradients are exact up to
the documented envelope approximation in the discrepancy loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import ot
from .weights import ClassWeights

ACTIVATIONS = ("relu", "leaky-relu", "softplus", "identity")
LEAKY_SLOPE = 0.01
CHECKPOINT_FORMAT_VERSION = 1


class GradientBlowupError(RuntimeError):
    """A non-finite gradient appeared; carries the offending layer index."""

    def __init__(self, layer_index: int):
        self.layer_index = int(layer_index)
        super().__init__(f"gradient blowup in layer {layer_index}")


def _activate(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "leaky-relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if tag == "softplus":
        return np.logaddexp(0.0, z)
    if tag == "identity":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def _activate_grad(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return (z > 0).astype(float)
    if tag == "leaky-relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if tag == "softplus":
        return 1.0 / (1.0 + np.exp(-z))
    if tag == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {tag!r}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=float)
        bias = np.asarray(self.bias, dtype=float).reshape(-1)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)
        if weight.ndim != 2 or bias.size != weight.shape[0]:
            raise ValueError("layer weight/bias shapes disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ValueError("non-finite layer parameters")


@dataclass(frozen=True)
class NetworkParams:
    """An ordered stack of affine layers with activation tags."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return int(self.layers[0].weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.layers[-1].weight.shape[0])

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "layers": [
                {
                    "shape": list(layer.weight.shape),
                    "weight": layer.weight.ravel().tolist(),
                    "bias": layer.bias.tolist(),
                    "activation": layer.activation,
                }
                for layer in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @staticmethod
    def from_dict(obj: dict) -> "NetworkParams":
        version = obj.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version!r}")
        layers = []
        for spec in obj["layers"]:
            out_dim, in_dim = spec["shape"]
            weight = np.asarray(spec["weight"], dtype=float).reshape(out_dim, in_dim)
            layers.append(Layer(weight, np.asarray(spec["bias"]), spec["activation"]))
        return NetworkParams(tuple(layers))

    @staticmethod
    def from_json(text: str) -> "NetworkParams":
        return NetworkParams.from_dict(json.loads(text))


def init_network(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> NetworkParams:
    """He-uniform init for relu-family layers, Xavier-uniform otherwise.

    ``sizes`` has one more entry than ``activations``; biases start at
    zero.
    """
    if len(sizes) != len(activations) + 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, tag in zip(sizes, sizes[1:], activations):
        if tag in ("relu", "leaky-relu"):
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(weight, np.zeros(fan_out), tag))
    return NetworkParams(tuple(layers))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    params: NetworkParams
    inputs: list
    preacts: list


class BackwardResult(NamedTuple):
    param_grads: list  # one (d_weight, d_bias) pair per layer
    input_grad: np.ndarray


def forward(params: NetworkParams, x) -> tuple:
    """Run the stack on a batch, caching activations for the backward pass."""
    h = np.atleast_2d(np.asarray(x, dtype=float))
    if h.shape[1] != params.in_dim:
        raise ValueError(f"input dim {h.shape[1]} does not match network ({params.in_dim})")
    inputs, preacts = [], []
    for layer in params.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = _activate(z, layer.activation)
    return h, ForwardCache(params, inputs, preacts)


def backward(params: NetworkParams, cache: ForwardCache, upstream) -> BackwardResult:
    """Chain an upstream output gradient back to every weight and bias.

    ``cache`` must come from a matching ``forward`` call on the same
    parameter object; anything else is a stale cache.
    """
    if cache.params is not params:
        raise ValueError("stale cache: backward called with mismatched forward cache")
    grad = np.atleast_2d(np.asarray(upstream, dtype=float))
    if grad.shape != cache.preacts[-1].shape:
        raise ValueError("upstream gradient shape does not match network output")
    param_grads = [None] * len(params.layers)
    for idx in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[idx]
        dz = grad * _activate_grad(cache.preacts[idx], layer.activation)
        param_grads[idx] = (dz.T @ cache.inputs[idx], dz.sum(axis=0))
        grad = dz @ layer.weight
    return BackwardResult(param_grads, grad)


def zero_velocity(params: NetworkParams) -> list:
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]


def sgd_momentum_step(
    params: NetworkParams,
    grads: Sequence,
    velocity: Sequence,
    lr: float,
    momentum: float,
) -> tuple:
    """One SGD-with-momentum update: v <- mu v + g, theta <- theta - lr v.

    Returns a new parameter object and the new velocity state. Raises
    :class:`GradientBlowupError` on any non-finite gradient.
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    new_layers, new_velocity = [], []
    for idx, (layer, (g_w, g_b), (v_w, v_b)) in enumerate(zip(params.layers, grads, velocity)):
        if not (np.all(np.isfinite(g_w)) and np.all(np.isfinite(g_b))):
            raise GradientBlowupError(idx)
        v_w = momentum * v_w + g_w
        v_b = momentum * v_b + g_b
        weight = layer.weight - lr * v_w
        bias = layer.bias - lr * v_b
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            # Finite gradient, overflowing update: same failure mode.
            raise GradientBlowupError(idx)
        new_layers.append(Layer(weight, bias, layer.activation))
        new_velocity.append((v_w, v_b))
    return NetworkParams(tuple(new_layers)), new_velocity


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


class DiscrepancyResult(NamedTuple):
    value: float
    grad_source: np.ndarray
    grad_target: np.ndarray
    skipped: tuple
    couplings: dict  # class id -> coupling matrix (rows: source, cols: target)


class InterResult(NamedTuple):
    value: float
    grads_source: list
    grads_target: list
    skipped: tuple


@dataclass(frozen=True)
class LossBundle:
    """The four loss terms and their weighted total."""

    l_y: float
    l_d: float
    l_intra: float
    l_inter: float
    total: float

    @staticmethod
    def from_parts(
        l_y: float,
        l_d: float,
        l_intra: float,
        l_inter: float,
        lambda_y: float,
        lambda_d: float,
        lambda_c: float,
        lambda_a: float,
    ) -> "LossBundle":
        total = lambda_y * l_y + lambda_d * l_d + lambda_c * l_intra + lambda_a * l_inter
        return LossBundle(float(l_y), float(l_d), float(l_intra), float(l_inter), float(total))

    def to_dict(self) -> dict:
        return {
            "l_y": self.l_y,
            "l_d": self.l_d,
            "l_intra": self.l_intra,
            "l_inter": self.l_inter,
            "total": self.total,
        }


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> LossValue:
    """Mean cross-entropy over a batch, with the gradient w.r.t. logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n = logits.shape[0]
    if labels.size != n:
        raise ValueError("labels do not match the batch")
    log_probs = _log_softmax(logits)
    value = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return LossValue(value, grad / n)


def loss_classification_weighted(
    logits,
    labels,
    w_t: ClassWeights,
    w_s: ClassWeights,
    weight_floor: float = 1e-3,
    ratio_cap: float | None = None,
) -> LossValue:
    """Importance-reweighted source cross-entropy.

    Each sample's cross-entropy is scaled by the target/source weight
    ratio of its class, so classes that matter more in the target receive
    more attention. ``ratio_cap`` optionally bounds the ratio to keep the
    variance of the reweighted loss in check when a source class is rare.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n = logits.shape[0]
    if labels.size != n:
        raise ValueError("labels do not match the batch")
    if w_t.k != w_s.k or logits.shape[1] != w_s.k:
        raise ValueError("class weight length does not match the logits")
    if np.any(w_s.w < weight_floor):
        raise ValueError("degenerate source weight")
    ratios = w_t.w / w_s.w
    if ratio_cap is not None:
        ratios = np.minimum(ratios, ratio_cap)
    sample_ratio = ratios[labels]
    log_probs = _log_softmax(logits)
    value = float((-log_probs[np.arange(n), labels] * sample_ratio).mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad *= sample_ratio[:, None] / n
    return LossValue(value, grad)


def loss_discrepancy_weighted(
    feat_s,
    labels_s,
    feat_t,
    pseudo_t,
    w_t: ClassWeights,
    reg: float = 0.05,
    max_iter: int = 1000,
    tol: float = 1e-5,
    reg_mode: str = "absolute",
) -> DiscrepancyResult:
    """Target-reweighted per-class transport discrepancy with gradients.

    For each class present on both sides, solves entropic transport
    between the class's source features and pseudo-class target features
    (uniform marginals, Euclidean cost) and adds ``w_t[k]`` times the
    transport cost. Gradients hold the converged coupling fixed, i.e. each
    feature receives the coupling-weighted sum of unit vectors towards its
    transport partners. Classes missing on either side are skipped with a
    count, which is routine for minibatches under label shift.
    """
    feat_s = np.atleast_2d(np.asarray(feat_s, dtype=float))
    feat_t = np.atleast_2d(np.asarray(feat_t, dtype=float))
    labels_s = np.asarray(labels_s, dtype=int).reshape(-1)
    pseudo_t = np.asarray(pseudo_t, dtype=int).reshape(-1)
    if feat_s.shape[1] != feat_t.shape[1]:
        raise ValueError("feature spaces differ in dimension")
    value = 0.0
    grad_s = np.zeros_like(feat_s)
    grad_t = np.zeros_like(feat_t)
    skipped = []
    couplings = {}
    for k in range(w_t.k):
        idx_s = np.flatnonzero(labels_s == k)
        idx_t = np.flatnonzero(pseudo_t == k)
        if idx_s.size == 0 or idx_t.size == 0:
            skipped.append(k)
            continue
        xs, xt = feat_s[idx_s], feat_t[idx_t]
        cost = ot.euclidean_cost_matrix(xs, xt)
        plan = ot.sinkhorn(
            cost,
            np.full(idx_s.size, 1.0 / idx_s.size),
            np.full(idx_t.size, 1.0 / idx_t.size),
            reg=ot.effective_reg(cost, reg, reg_mode),
            max_iter=max_iter,
            tol=tol,
        )
        weight = w_t[k]
        value += weight * plan.cost
        couplings[k] = plan.coupling
        # Envelope gradient: d cost / d x_i with the coupling held fixed.
        direction = np.where(cost > 1e-12, plan.coupling / np.maximum(cost, 1e-12), 0.0)
        grad_s[idx_s] += weight * (direction.sum(axis=1)[:, None] * xs - direction @ xt)
        grad_t[idx_t] += weight * (direction.sum(axis=0)[:, None] * xt - direction.T @ xs)
    return DiscrepancyResult(float(value), grad_s, grad_t, tuple(skipped), couplings)


def loss_intra(features, labels, margin: float) -> LossValue:
    """Pairwise margin clustering loss over all ordered pairs in a batch.

    Same-label pairs contribute their squared distance, different-label
    pairs a hinge pushing the squared distance past ``margin``. The
    diagonal is included and contributes zero.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    x = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n = x.shape[0]
    if labels.size != n:
        raise ValueError("labels do not match the batch")
    gram = x @ x.T
    sq_norms = np.diag(gram)
    sq_dist = np.maximum(sq_norms[:, None] + sq_norms[None, :] - 2.0 * gram, 0.0)
    same = labels[:, None] == labels[None, :]
    hinge_active = (~same) & (sq_dist < margin)
    value = (sq_dist[same].sum() + (margin - sq_dist[hinge_active]).sum()) / n**2
    # Signed pair coefficients; the matrix is symmetric, so the gradient
    # collapses to degree * x - A @ x.
    coeff = same.astype(float) - hinge_active.astype(float)
    grad = (4.0 / n**2) * (coeff.sum(axis=1)[:, None] * x - coeff @ x)
    return LossValue(float(value), grad)


def loss_inter(parts_s: Sequence[np.ndarray], parts_t: Sequence[np.ndarray]) -> InterResult:
    """Mean squared distance between paired per-class feature centroids.

    Classes empty on either side are skipped and counted; the mean runs
    over the classes present on both sides. Gradients are returned per
    class, shaped like the inputs.
    """
    if len(parts_s) != len(parts_t):
        raise ValueError("source and target class lists differ in length")
    k = len(parts_s)
    if k < 1:
        raise ValueError("need at least one class")
    parts_s = [np.atleast_2d(np.asarray(p, dtype=float)) for p in parts_s]
    parts_t = [np.atleast_2d(np.asarray(p, dtype=float)) for p in parts_t]
    active, skipped = [], []
    for i, (ps, pt) in enumerate(zip(parts_s, parts_t)):
        (active if ps.size and pt.size else skipped).append(i)
    grads_s = [np.zeros_like(p) for p in parts_s]
    grads_t = [np.zeros_like(p) for p in parts_t]
    if not active:
        return InterResult(0.0, grads_s, grads_t, tuple(skipped))
    value = 0.0
    for i in active:
        diff = parts_s[i].mean(axis=0) - parts_t[i].mean(axis=0)
        value += float(diff @ diff)
        grads_s[i] += 2.0 * diff[None, :] / (len(active) * parts_s[i].shape[0])
        grads_t[i] -= 2.0 * diff[None, :] / (len(active) * parts_t[i].shape[0])
    return InterResult(value / len(active), grads_s, grads_t, tuple(skipped))
