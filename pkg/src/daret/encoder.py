"""The shared dual encoder: a small feed-forward net with manual backprop.

One Encoder instance embeds both queries and documents (tied weights); the
similarity in use everywhere is the raw dot product, so no output
normalization is applied. Hidden layers use tanh or relu, the output layer is
linear. Gradients are exact and match central finite differences; the
backward pass computes d(upstream . embedding)/dtheta for a caller-supplied
upstream vector, which is all any loss here needs.
"""

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu")


@dataclass
class Encoder:
    weights: list  # per layer, shape (fan_out, fan_in)
    biases: list  # per layer, shape (fan_out,)
    activation: str

    @property
    def dims(self):
        return tuple([self.weights[0].shape[1]] + [w.shape[0] for w in self.weights])

    def param_checksum(self) -> float:
        return float(sum(np.abs(w).sum() for w in self.weights) + sum(np.abs(b).sum() for b in self.biases))


@dataclass
class EncoderGrad:
    d_weights: list
    d_biases: list
    count: int = 0

    def zero_(self):
        for dw in self.d_weights:
            dw[...] = 0.0
        for db in self.d_biases:
            db[...] = 0.0
        self.count = 0


def init(dims, activation: str, rng: np.random.Generator) -> Encoder:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"invalid dims {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Encoder(weights=weights, biases=biases, activation=activation)


def grad_like(enc: Encoder) -> EncoderGrad:
    return EncoderGrad(
        d_weights=[np.zeros_like(w) for w in enc.weights],
        d_biases=[np.zeros_like(b) for b in enc.biases],
    )


def encode_batch(enc: Encoder, X: np.ndarray, need_tape: bool = True):
    """Forward pass over rows of X (shape (B, D_in)).

    Returns (embeddings (B, D_emb), tape). The tape holds each layer's input
    and post-activation output, enough for an exact backward pass; pass
    need_tape=False for evaluation-only encoding.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != enc.weights[0].shape[1]:
        raise ValueError(f"encode: expected shape (B, {enc.weights[0].shape[1]}), got {X.shape}")
    last = len(enc.weights) - 1
    h = X
    inputs = []
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        if need_tape:
            inputs.append(h)
        z = h @ w.T + b
        if i == last:
            h = z  # linear output layer
        elif enc.activation == "tanh":
            h = np.tanh(z)
        else:
            h = np.maximum(z, 0.0)
        if need_tape and i < last:
            inputs.append(h)  # post-activation, reused as next input and for act'
    if not need_tape:
        return h, None
    # tape layout: [in_0, out_0, in_1, out_1, ..., in_last]; out_last is h
    return h, inputs


def encode(enc: Encoder, x: np.ndarray):
    """Single-vector forward; returns (embedding, tape)."""
    emb, tape = encode_batch(enc, np.asarray(x, dtype=np.float64)[None, :])
    return emb[0], tape


def backprop_batch(enc: Encoder, tape, upstream: np.ndarray, grad: EncoderGrad) -> np.ndarray:
    """Accumulate d(sum_b upstream_b . emb_b)/dtheta into grad.

    upstream has shape (B, D_emb); returns the gradient w.r.t. the input
    batch, shape (B, D_in). Callers scale upstream so the accumulated value
    is the gradient of their actual scalar objective.
    """
    if tape is None:
        raise ValueError("backprop needs the tape from encode_batch(need_tape=True)")
    last = len(enc.weights) - 1
    delta = np.asarray(upstream, dtype=np.float64)
    if delta.ndim != 2 or delta.shape[1] != enc.weights[last].shape[0]:
        raise ValueError("upstream shape does not match encoder output dim")
    for i in range(last, -1, -1):
        layer_in = tape[2 * i]
        grad.d_weights[i] += delta.T @ layer_in
        grad.d_biases[i] += delta.sum(axis=0)
        delta = delta @ enc.weights[i]
        if i > 0:
            h = tape[2 * i - 1]  # post-activation of previous layer
            if enc.activation == "tanh":
                delta = delta * (1.0 - h * h)
            else:
                delta = delta * (h > 0.0)
    grad.count += delta.shape[0]
    return delta


def backprop(enc: Encoder, tape, upstream: np.ndarray, grad: EncoderGrad) -> np.ndarray:
    """Single-vector form of backprop_batch."""
    return backprop_batch(enc, tape, np.asarray(upstream, dtype=np.float64)[None, :], grad)[0]


def sgd_step(enc: Encoder, grad: EncoderGrad, lr: float, momentum: float = 0.0, velocity=None):
    """In-place SGD update; with momentum > 0, velocity arrays are required."""
    if momentum > 0.0:
        for w, b, dw, db, vw, vb in zip(enc.weights, enc.biases, grad.d_weights, grad.d_biases, velocity[0], velocity[1]):
            vw *= momentum
            vw += dw
            vb *= momentum
            vb += db
            w -= lr * vw
            b -= lr * vb
    else:
        for w, b, dw, db in zip(enc.weights, enc.biases, grad.d_weights, grad.d_biases):
            w -= lr * dw
            b -= lr * db


def flatten_params(enc: Encoder) -> np.ndarray:
    return np.concatenate([a.ravel() for a in enc.weights + enc.biases])


def set_params_from_flat(enc: Encoder, flat: np.ndarray):
    off = 0
    for a in enc.weights + enc.biases:
        a[...] = flat[off : off + a.size].reshape(a.shape)
        off += a.size
    if off != flat.size:
        raise ValueError("flat parameter vector has wrong length")


def flatten_grad(grad: EncoderGrad) -> np.ndarray:
    return np.concatenate([a.ravel() for a in grad.d_weights + grad.d_biases])


def to_state(enc: Encoder) -> dict:
    """Checkpoint fragment: arrays plus metadata, round-trips bit-exactly."""
    state = {"activation": enc.activation, "n_layers": len(enc.weights)}
    arrays = {}
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        arrays[f"enc_w{i}"] = w
        arrays[f"enc_b{i}"] = b
    return {"meta": state, "arrays": arrays}


def from_state(meta: dict, arrays: dict) -> Encoder:
    n = int(meta["n_layers"])
    weights = [np.array(arrays[f"enc_w{i}"], dtype=np.float64) for i in range(n)]
    biases = [np.array(arrays[f"enc_b{i}"], dtype=np.float64) for i in range(n)]
    return Encoder(weights=weights, biases=biases, activation=str(meta["activation"]))
