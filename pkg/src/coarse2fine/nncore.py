"""Dense MLP classifier with hand-written reverse-mode gradients.

Arrays are plain float64 numpy arrays. Weights are stored as (fan_in, fan_out)
so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError

CHECKPOINT_MAGIC = b"C2F-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {k} expects {w.shape[0]} inputs, "
                                     f"previous layer gives {self.weights[k - 1].shape[1]}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> Iterator[np.ndarray]:
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def same_shape(self, other: "MlpParams") -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, gain: float = 6.0) -> MlpParams:
    """Uniform fan-in initialisation: weights U(-b, b) with b = sqrt(gain / fan_in).

    The default gain keeps activation variance roughly constant through ReLU
    layers; biases use b = 1/sqrt(fan_in).
    """
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise DimensionError(f"invalid layer sizes {list(sizes)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(gain / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-1.0, 1.0, size=fan_out) / np.sqrt(fan_in))
    return MlpParams(weights, biases)


def default_sizes(input_dim: int, num_fine: int, depth: int = 4, hidden: int = 64) -> list[int]:
    """Layer widths for a ``depth``-layer ReLU MLP ending in ``num_fine`` logits."""
    if depth < 1:
        raise DimensionError("depth must be >= 1")
    return [input_dim] + [hidden] * (depth - 1) + [num_fine]


@dataclass
class ClassifierState:
    theta: MlpParams
    theta_ema: MlpParams
    velocity: MlpParams
    step: int = 0
    seed: int | None = None

    def __post_init__(self):
        if not (self.theta.same_shape(self.theta_ema) and self.theta.same_shape(self.velocity)):
            raise DimensionError("theta, theta_ema and velocity must share shapes")

    @classmethod
    def create(cls, sizes: Sequence[int], seed: int) -> "ClassifierState":
        theta = init_mlp(sizes, np.random.default_rng(seed))
        return cls(theta=theta, theta_ema=theta.copy(), velocity=theta.zeros_like(), step=0, seed=seed)

    @classmethod
    def from_params(cls, theta: MlpParams, seed: int | None = None) -> "ClassifierState":
        return cls(theta=theta, theta_ema=theta.copy(), velocity=theta.zeros_like(), seed=seed)

    @property
    def input_dim(self) -> int:
        return self.theta.sizes[0]

    @property
    def num_outputs(self) -> int:
        return self.theta.sizes[-1]

    def params(self, which: str = "current") -> MlpParams:
        if which == "current":
            return self.theta
        if which == "ema":
            return self.theta_ema
        raise ValueError(f"which must be 'current' or 'ema', got {which!r}")


@dataclass
class OptimizerConfig:
    """Momentum SGD with step decay: lr is multiplied by ``decay`` at each milestone epoch."""

    learning_rate: float = 0.03
    momentum: float = 0.9
    milestones: tuple[int, ...] = (60, 80)
    decay: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.learning_rate * self.decay ** passed


def _check_batch(params: MlpParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.sizes[0]:
        raise DimensionError(f"batch of shape {batch.shape} does not match input dimension {params.sizes[0]}")
    return batch


def mlp_forward(params: MlpParams, batch: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return logits and the list of layer inputs (post-activation) needed for backprop."""
    h = _check_batch(params, batch)
    inputs = []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h, inputs


def forward_logits(state: ClassifierState, batch: np.ndarray, which: str = "current") -> np.ndarray:
    return mlp_forward(state.params(which), batch)[0]


def softmax_rows(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits (temperature 1)."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def backward(state: ClassifierState, batch: np.ndarray, grad_logits: np.ndarray,
             which: str = "current") -> MlpParams:
    """Gradients of <grad_logits, logits(batch)> w.r.t. every weight and bias."""
    params = state.params(which)
    logits, inputs = mlp_forward(params, batch)
    grad = np.asarray(grad_logits, dtype=np.float64)
    if grad.shape != logits.shape:
        raise DimensionError(f"gradient shape {grad.shape} != logits shape {logits.shape}")
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        gw[k] = inputs[k].T @ grad
        gb[k] = grad.sum(axis=0)
        if k:
            grad = (grad @ params.weights[k].T) * (inputs[k] > 0)
    return MlpParams(gw, gb)


def sgd_step(state: ClassifierState, grads: MlpParams, config: OptimizerConfig,
             epoch: int = 0) -> ClassifierState:
    """v <- momentum * v + g; theta <- theta - lr * v. Updates ``state`` in place."""
    if not state.theta.same_shape(grads):
        raise DimensionError("gradient shapes do not match parameters")
    lr = config.lr_at(epoch)
    for p, v, g in zip(state.theta.arrays(), state.velocity.arrays(), grads.arrays()):
        v *= config.momentum
        v += g
        p -= lr * v
    state.step += 1
    return state


def ema_update(state: ClassifierState, gamma: float) -> ClassifierState:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"EMA gamma must lie in [0, 1), got {gamma}")
    for e, p in zip(state.theta_ema.arrays(), state.theta.arrays()):
        e *= gamma
        e += (1.0 - gamma) * p
    return state


# -- checkpoints -------------------------------------------------------------
# Layout: magic + version line, one JSON header line, then raw little-endian
# float64 blocks in header order. Deterministic bytes for identical states.

def _named_arrays(state: ClassifierState) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, params in (("theta", state.theta), ("theta_ema", state.theta_ema),
                         ("velocity", state.velocity)):
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            out.append((f"{name}.{k}.weight", w))
            out.append((f"{name}.{k}.bias", b))
    return out


def save_checkpoint(path: str | Path, state: ClassifierState, extra: dict | None = None) -> None:
    arrays = _named_arrays(state)
    header = {
        "version": CHECKPOINT_VERSION,
        "sizes": state.theta.sizes,
        "step": int(state.step),
        "seed": state.seed,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ClassifierState, dict]:
    """Return the state and the free-form ``extra`` dict stored with it."""
    with open(path, "rb") as fh:
        first = fh.readline()
        if not first.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        version = int(first.split()[1])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.readline())
        blobs = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated at {name}")
            blobs[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    depth = len(header["sizes"]) - 1

    def group(prefix: str) -> MlpParams:
        return MlpParams([blobs[f"{prefix}.{k}.weight"] for k in range(depth)],
                         [blobs[f"{prefix}.{k}.bias"] for k in range(depth)])

    state = ClassifierState(theta=group("theta"), theta_ema=group("theta_ema"),
                            velocity=group("velocity"), step=header["step"], seed=header["seed"])
    return state, header.get("extra", {})
