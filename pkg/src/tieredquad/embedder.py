"""Feedforward embedding network with exact analytic gradients.

The network maps a lesion feature vector to a metric-space embedding
(linear output, relu hidden layers). Everything is plain numpy in
float64 so that training trajectories are bit-reproducible for a fixed
seed and gradients can be checked against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EmbedderConfig",
    "EmbedderParams",
    "Gradients",
    "AdamState",
    "ConfigError",
    "InputError",
    "NumericError",
    "init_params",
    "embed",
    "embed_batch",
    "forward_batch",
    "backward",
    "adam_step",
    "grad_check",
    "max_relative_error",
    "save_checkpoint",
    "load_checkpoint",
    "params_to_tree",
    "params_from_tree",
    "adam_state_to_tree",
    "adam_state_from_tree",
]


class ConfigError(ValueError):
    """Invalid network configuration."""


class InputError(ValueError):
    """Malformed input (shape or value) to a network operation."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


@dataclass(frozen=True)
class EmbedderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    embedding_dim: int = 128
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if not self.hidden_dims:
            raise ConfigError("hidden_dims must be non-empty")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden dims must be positive, got {self.hidden_dims}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, input to output."""
        dims = [self.input_dim, *self.hidden_dims, self.embedding_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class EmbedderParams:
    """Per-layer weights (fan_out, fan_in) and biases (fan_out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "EmbedderParams":
        return EmbedderParams([w.copy() for w in self.weights],
                              [b.copy() for b in self.biases])

    def allclose_bitwise(self, other: "EmbedderParams") -> bool:
        return (len(self.weights) == len(other.weights)
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


# Gradients share the parameter shape tree; an alias keeps signatures readable.
Gradients = EmbedderParams


@dataclass
class AdamState:
    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    t: int = 0
    lr: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: EmbedderParams, lr: float = 0.0001,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(
            m_weights=[np.zeros_like(w) for w in params.weights],
            m_biases=[np.zeros_like(b) for b in params.biases],
            v_weights=[np.zeros_like(w) for w in params.weights],
            v_biases=[np.zeros_like(b) for b in params.biases],
            t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def init_params(config: EmbedderConfig) -> EmbedderParams:
    """Glorot-uniform weights in +/- sqrt(6/(fan_in+fan_out)), zero biases.

    Deterministic for a fixed config.seed.
    """
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EmbedderParams(weights, biases)


def _check_features(params: EmbedderParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    fan_in = params.weights[0].shape[1]
    if x.shape[-1] != fan_in:
        raise InputError(f"feature length {x.shape[-1]} != input_dim {fan_in}")
    if not np.all(np.isfinite(x)):
        raise InputError("features must be finite")
    return x


def forward_batch(params: EmbedderParams, x: np.ndarray):
    """Forward pass keeping pre-activations for the backward pass.

    Returns (embeddings, pre_activations, activations) where
    activations[0] is the input batch. Rows go through the same
    matrix-vector kernel one by one, so a row's embedding is bit-equal
    no matter what batch it arrives in.
    """
    x = _check_features(params, np.atleast_2d(x))
    acts = [x]
    pre = []
    n_layers = params.n_layers
    a = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = np.empty((a.shape[0], w.shape[0]))
        for r in range(a.shape[0]):
            z[r] = w @ a[r] + b
        pre.append(z)
        a = z if i == n_layers - 1 else np.maximum(z, 0.0)
        acts.append(a)
    return a, pre, acts


def embed(params: EmbedderParams, features) -> np.ndarray:
    """Embed a single feature vector. Pure: never mutates params."""
    out, _, _ = forward_batch(params, np.asarray(features, dtype=np.float64))
    return out[0]


def embed_batch(params: EmbedderParams, features_list) -> np.ndarray:
    """Row-wise embed; row i equals embed(features_list[i])."""
    feats = np.asarray(features_list, dtype=np.float64)
    if feats.size == 0:
        fan_out = params.weights[-1].shape[0]
        return np.zeros((0, fan_out))
    out, _, _ = forward_batch(params, feats)
    return out


def backward(params: EmbedderParams, batch_inputs, upstream_grads) -> Gradients:
    """Exact gradient of sum_i <upstream_i, embed(x_i)> w.r.t. every parameter.

    Summation over the batch happens inside fixed-order matrix products,
    so results are deterministic.
    """
    x = np.atleast_2d(np.asarray(batch_inputs, dtype=np.float64))
    g = np.atleast_2d(np.asarray(upstream_grads, dtype=np.float64))
    emb_dim = params.weights[-1].shape[0]
    if g.shape != (x.shape[0], emb_dim):
        raise InputError(
            f"upstream grads shaped {g.shape}, expected ({x.shape[0]}, {emb_dim})")
    if not np.all(np.isfinite(g)):
        raise InputError("upstream grads must be finite")

    _, pre, acts = forward_batch(params, x)
    n_layers = params.n_layers
    d_w = [None] * n_layers
    d_b = [None] * n_layers
    delta = g
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            delta = delta * (pre[i] > 0.0)
        d_w[i] = delta.T @ acts[i]
        d_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i]
    return Gradients(d_w, d_b)


def adam_step(params: EmbedderParams, grads: Gradients,
              state: AdamState) -> tuple[EmbedderParams, AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {i}")
        if gw.shape != params.weights[i].shape or gb.shape != params.biases[i].shape:
            raise InputError(f"gradient shape mismatch in layer {i}")

    t = state.t + 1
    b1, b2, lr, eps = state.beta1, state.beta2, state.lr, state.eps
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t

    def upd(theta, g, m, v):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        theta_new = theta - lr * (m_new / corr1) / (np.sqrt(v_new / corr2) + eps)
        return theta_new, m_new, v_new

    new_w, new_b = [], []
    new_state = AdamState([], [], [], [], t=t, lr=lr, beta1=b1, beta2=b2, eps=eps)
    for i in range(params.n_layers):
        w, mw, vw = upd(params.weights[i], grads.weights[i],
                        state.m_weights[i], state.v_weights[i])
        b, mb, vb = upd(params.biases[i], grads.biases[i],
                        state.m_biases[i], state.v_biases[i])
        new_w.append(w)
        new_b.append(b)
        new_state.m_weights.append(mw)
        new_state.v_weights.append(vw)
        new_state.m_biases.append(mb)
        new_state.v_biases.append(vb)
    return EmbedderParams(new_w, new_b), new_state


def max_relative_error(a: np.ndarray, b: np.ndarray, atol: float = 0.0) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|), with 0/0 treated as 0.

    Entries where both magnitudes are <= atol count as jointly zero;
    this extends the 0/0 convention to floating-point cancellation noise
    (an exact zero on one side and ~1e-17 on the other is not a
    gradient mismatch).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    rel = np.where(denom > atol, diff / np.where(denom > 0.0, denom, 1.0), 0.0)
    return float(rel.max()) if rel.size else 0.0


def _flatten(grads: Gradients) -> np.ndarray:
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def grad_check(config: EmbedderConfig, seed: int,
               batch_size: int = 6, n_quadruplets: int = 8,
               corrupt: bool = False):
    """Analytic vs central finite-difference gradients of the full
    dynamic-margin quadruplet loss through the network.

    Builds a random mini-batch and a fixed set of quadruplet index tuples
    with per-instance margins, then differentiates
    loss(params) = dmt_quad_loss(embeddings(params)) both ways.
    Fixtures whose hinge terms or relu pre-activations sit too close to
    their kinks are re-drawn (deterministically) so the checked function
    is smooth in the probed neighbourhood.

    Returns (max_rel_error, worst_layer, worst_index). `corrupt` is a
    negative-control hook that perturbs one analytic entry.
    """
    from . import losses

    h_base = 1e-4
    for attempt in range(64):
        rng = np.random.default_rng((seed, attempt))
        params = init_params(
            EmbedderConfig(config.input_dim, config.hidden_dims,
                           config.embedding_dim, config.activation,
                           seed=int(rng.integers(2**31))))
        x = rng.normal(size=(batch_size, config.input_dim))
        quads = [tuple(rng.choice(batch_size, size=4, replace=False))
                 for _ in range(n_quadruplets)]
        alphas = rng.uniform(0.3, 2.0, size=n_quadruplets)
        beta = float(rng.uniform(0.5, 2.5))

        emb, pre, _ = forward_batch(params, x)
        # guard bands: relu kinks and hinge boundaries must not be crossed
        # by the +/- h probes
        pre_ok = all(np.abs(z).min() > 1e-3 for z in pre[:-1])
        margins_ok = True
        for (ia, ip, ineg, isn), a_x in zip(quads, alphas):
            d_ap = np.linalg.norm(emb[ia] - emb[ip])
            d_an = np.linalg.norm(emb[ia] - emb[ineg])
            d_asn = np.linalg.norm(emb[ia] - emb[isn])
            if abs(d_ap - d_an + a_x) < 1e-2 or abs(d_ap - d_asn + beta) < 1e-2:
                margins_ok = False
                break
        if pre_ok and margins_ok:
            break
    else:
        raise NumericError("could not build a kink-free gradient-check fixture")

    def loss_of(p: EmbedderParams) -> float:
        e = embed_batch(p, x)
        quad_emb = [(e[a], e[pp], e[n], e[sn]) for a, pp, n, sn in quads]
        return losses.dmt_quad_loss(quad_emb, alphas, beta).total

    # analytic: per-embedding loss gradients, accumulated per batch position,
    # then backprop through the network
    e = embed_batch(params, x)
    quad_emb = [(e[a], e[p], e[n], e[sn]) for a, p, n, sn in quads]
    per_quad = losses.loss_grad_wrt_embeddings(quad_emb, alphas, beta)
    upstream = np.zeros_like(e)
    for (ia, ip, ineg, isn), (ga, gp, gn, gsn) in zip(quads, per_quad):
        upstream[ia] += ga
        upstream[ip] += gp
        upstream[ineg] += gn
        upstream[isn] += gsn
    analytic = backward(params, x, upstream)
    if corrupt:
        analytic.weights[0][0, 0] += 1.0

    worst = 0.0
    worst_layer, worst_index = 0, (0,)
    for li in range(params.n_layers):
        for kind, arr in (("weights", params.weights[li]),
                          ("biases", params.biases[li])):
            ana = analytic.weights[li] if kind == "weights" else analytic.biases[li]
            it = np.ndindex(arr.shape)
            for idx in it:
                h = h_base * max(1.0, abs(arr[idx]))
                probe = params.copy()
                tgt = probe.weights[li] if kind == "weights" else probe.biases[li]
                tgt[idx] += h
                f_plus = loss_of(probe)
                tgt[idx] -= 2.0 * h
                f_minus = loss_of(probe)
                fd = (f_plus - f_minus) / (2.0 * h)
                rel = max_relative_error(np.array([ana[idx]]), np.array([fd]),
                                         atol=1e-8)
                if rel > worst:
                    worst = rel
                    worst_layer, worst_index = li, (kind, *idx)
    return worst, worst_layer, worst_index


# -- checkpoint serialization (JSON of decimals; round-trips bit-exactly) --

def params_to_tree(params: EmbedderParams) -> dict:
    return {
        "layers": [
            {"shape": list(w.shape), "weights": w.ravel().tolist(),
             "bias": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }


def params_from_tree(tree: dict) -> EmbedderParams:
    weights, biases = [], []
    for layer in tree["layers"]:
        shape = tuple(layer["shape"])
        weights.append(np.array(layer["weights"], dtype=np.float64).reshape(shape))
        biases.append(np.array(layer["bias"], dtype=np.float64))
    return EmbedderParams(weights, biases)


def adam_state_to_tree(state: AdamState) -> dict:
    return {
        "t": state.t, "lr": state.lr, "beta1": state.beta1,
        "beta2": state.beta2, "eps": state.eps,
        "m_weights": [m.ravel().tolist() for m in state.m_weights],
        "m_biases": [m.tolist() for m in state.m_biases],
        "v_weights": [v.ravel().tolist() for v in state.v_weights],
        "v_biases": [v.tolist() for v in state.v_biases],
        "weight_shapes": [list(m.shape) for m in state.m_weights],
    }


def adam_state_from_tree(tree: dict) -> AdamState:
    shapes = [tuple(s) for s in tree["weight_shapes"]]
    return AdamState(
        m_weights=[np.array(m, dtype=np.float64).reshape(s)
                   for m, s in zip(tree["m_weights"], shapes)],
        m_biases=[np.array(m, dtype=np.float64) for m in tree["m_biases"]],
        v_weights=[np.array(v, dtype=np.float64).reshape(s)
                   for v, s in zip(tree["v_weights"], shapes)],
        v_biases=[np.array(v, dtype=np.float64) for v in tree["v_biases"]],
        t=tree["t"], lr=tree["lr"], beta1=tree["beta1"],
        beta2=tree["beta2"], eps=tree["eps"],
    )


def save_checkpoint(path, params: EmbedderParams,
                    state: AdamState | None = None, extra: dict | None = None):
    doc = {"format": "tieredquad-checkpoint-v1", "params": params_to_tree(params)}
    if state is not None:
        doc["adam"] = adam_state_to_tree(state)
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    params = params_from_tree(doc["params"])
    state = adam_state_from_tree(doc["adam"]) if "adam" in doc else None
    return params, state, doc.get("extra", {})
