"""Behaviour-cloned MLP policy: forward pass, analytic gradients, training.

The policy maps [keypoint u/v pairs, proprio] to an action vector and is
trained with mean squared error over expert demonstrations.  Everything
is plain numpy: parameters live in float64, minibatch order is drawn
from a seeded generator, so training is bit-reproducible.

DVKPOL01 (little-endian)::

    8s  magic   b"DVKPOL01"
    u32 layer_count
    per layer: u32 rows, u32 cols, f32[rows*cols] W row-major, f32[rows] b
    u8  activation tag (0 = relu, 1 = tanh)

Weights are stored in float32; loading a saved policy therefore rounds
parameters to f32 precision.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import atomic_write_bytes
from .errors import (
    BadConfig,
    BadDims,
    DimMismatch,
    Diverged,
    EmptyBatch,
    NonFiniteValue,
)
from .formats import _Cursor, DemoDataset, ReferenceSet
from .keypoints import extract_keypoints, policy_input

MAGIC_POLICY = b"DVKPOL01"

ACTIVATION_TAGS = {"relu": 0, "tanh": 1}
_TAG_NAMES = {v: k for k, v in ACTIVATION_TAGS.items()}


@dataclass
class Policy:
    """An MLP: affine layers with an activation on all but the last."""

    weights: list  # each (out_dim, in_dim) float64
    biases: list  # each (out_dim,) float64
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_dims(self) -> list:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def validate(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise BadDims("policy needs matching weight/bias lists")
        if self.activation not in ACTIVATION_TAGS:
            raise BadConfig(f"unknown activation {self.activation!r}")
        prev = self.weights[0].shape[1]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise BadDims(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if w.shape[1] != prev:
                raise BadDims(f"layer {i}: expects {prev} inputs, weight has {w.shape[1]}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NonFiniteValue(f"layer {i} has a non-finite parameter")
            prev = w.shape[0]

    def clone(self) -> "Policy":
        return Policy(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )


def init_policy(layer_dims, activation: str = "relu", seed: int = 0) -> Policy:
    """He-style Gaussian init, zero biases, seeded."""
    dims = list(layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise BadConfig(f"layer_dims {dims} must list >= 2 positive sizes")
    if activation not in ACTIVATION_TAGS:
        raise BadConfig(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return Policy(weights=weights, biases=biases, activation=activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def forward(policy: Policy, x: np.ndarray) -> np.ndarray:
    """Evaluate the policy on one input (in_dim,) or a batch (n, in_dim)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != policy.input_dim:
        raise DimMismatch(f"input dim {h.shape[1]}, policy expects {policy.input_dim}")
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        h = h @ w.T + b
        if i != last:
            h = _act(h, policy.activation)
    return h[0] if single else h


def bc_loss(policy: Policy, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of the squared error norm ||pi(x) - y||^2."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim != 2 or targets.ndim != 2 or inputs.shape[0] != targets.shape[0]:
        raise DimMismatch(f"batch shapes {inputs.shape} vs {targets.shape}")
    if inputs.shape[0] == 0:
        raise EmptyBatch("loss over an empty batch is undefined")
    pred = forward(policy, inputs)
    if pred.shape[1] != targets.shape[1]:
        raise DimMismatch(f"output dim {pred.shape[1]}, targets have {targets.shape[1]}")
    diff = pred - targets
    return float(np.mean(np.sum(diff * diff, axis=1)))


def bc_grad(policy: Policy, inputs: np.ndarray, targets: np.ndarray):
    """Analytic gradient of bc_loss: returns (loss, dW list, db list)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise EmptyBatch("gradient over an empty batch is undefined")
    n = inputs.shape[0]
    last = len(policy.weights) - 1
    acts = [inputs]  # post-activation per layer, acts[0] is the input
    zs = []  # pre-activation per layer
    h = inputs
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        z = h @ w.T + b
        zs.append(z)
        h = _act(z, policy.activation) if i != last else z
        acts.append(h)
    diff = acts[-1] - targets
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    delta = 2.0 * diff / n
    dw = [np.zeros_like(w) for w in policy.weights]
    db = [np.zeros_like(b) for b in policy.biases]
    for i in range(last, -1, -1):
        dw[i] = delta.T @ acts[i]
        db[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ policy.weights[i]) * _act_grad(zs[i - 1], policy.activation)
    return loss, dw, db


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    eval_every: int = 20
    optimizer: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = (128, 128)
    activation: str = "relu"

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise BadConfig("epochs, batch_size, eval_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise BadConfig(f"unknown optimizer {self.optimizer!r}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise BadConfig(f"learning_rate={self.learning_rate}")
        if self.activation not in ACTIVATION_TAGS:
            raise BadConfig(f"unknown activation {self.activation!r}")


@dataclass
class TrainReport:
    policy: Policy  # checkpoint: best epoch, not necessarily the last
    loss_curve: list = field(default_factory=list)  # mean minibatch loss per epoch
    best_epoch: int = 0
    eval_curve: list = field(default_factory=list)  # (epoch, score) from eval_hook


def train_on_arrays(
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig = TrainConfig(),
    eval_hook=None,
) -> TrainReport:
    """Minibatch training with a deterministic shuffle per epoch.

    The checkpoint is the parameter snapshot from the epoch with the
    lowest mean training loss.  When eval_hook is given it is called as
    eval_hook(epoch, policy) -> score every eval_every epochs (and after
    the last), and the checkpoint becomes the highest-scoring snapshot.
    """
    config.validate()
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim != 2 or targets.ndim != 2 or len(inputs) != len(targets):
        raise DimMismatch(f"training arrays {inputs.shape} vs {targets.shape}")
    n = len(inputs)
    if n == 0:
        raise EmptyBatch("no training samples")
    policy = init_policy(
        [inputs.shape[1], *config.hidden, targets.shape[1]],
        activation=config.activation,
        seed=config.seed,
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5FF1E]))
    use_adam = config.optimizer == "adam"
    if use_adam:
        m_w = [np.zeros_like(w) for w in policy.weights]
        v_w = [np.zeros_like(w) for w in policy.weights]
        m_b = [np.zeros_like(b) for b in policy.biases]
        v_b = [np.zeros_like(b) for b in policy.biases]
        t = 0
    report = TrainReport(policy=policy.clone())
    best_loss = np.inf
    best_score = -np.inf
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, dw, db = bc_grad(policy, inputs[idx], targets[idx])
            total += loss * len(idx)
            if use_adam:
                t += 1
                bc1 = 1.0 - config.beta1**t
                bc2 = 1.0 - config.beta2**t
                for i in range(len(policy.weights)):
                    m_w[i] = config.beta1 * m_w[i] + (1 - config.beta1) * dw[i]
                    v_w[i] = config.beta2 * v_w[i] + (1 - config.beta2) * dw[i] ** 2
                    m_b[i] = config.beta1 * m_b[i] + (1 - config.beta1) * db[i]
                    v_b[i] = config.beta2 * v_b[i] + (1 - config.beta2) * db[i] ** 2
                    policy.weights[i] -= config.learning_rate * (
                        (m_w[i] / bc1) / (np.sqrt(v_w[i] / bc2) + config.eps)
                    )
                    policy.biases[i] -= config.learning_rate * (
                        (m_b[i] / bc1) / (np.sqrt(v_b[i] / bc2) + config.eps)
                    )
            else:
                for i in range(len(policy.weights)):
                    policy.weights[i] -= config.learning_rate * dw[i]
                    policy.biases[i] -= config.learning_rate * db[i]
        epoch_loss = total / n
        report.loss_curve.append(epoch_loss)
        if not np.isfinite(epoch_loss):
            raise Diverged(f"training loss became non-finite at epoch {epoch}")
        if eval_hook is not None:
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                score = float(eval_hook(epoch, policy))
                report.eval_curve.append((epoch, score))
                if score > best_score:
                    best_score = score
                    report.best_epoch = epoch
                    report.policy = policy.clone()
        elif epoch_loss < best_loss:
            best_loss = epoch_loss
            report.best_epoch = epoch
            report.policy = policy.clone()
    return report


def build_training_arrays(dataset: DemoDataset, refs: ReferenceSet):
    """Turn a demo dataset into (inputs, targets) via keypoint extraction.

    Keypoints are computed once per frame; every step contributes one
    (policy_input, action) pair.
    """
    xs = []
    ys = []
    for _, step in dataset.iter_steps():
        kv = extract_keypoints(step.load_frame(), refs)
        xs.append(policy_input(kv, step.proprio))
        ys.append(np.asarray(step.action, dtype=np.float64))
    if not xs:
        raise EmptyBatch("dataset has no steps")
    return np.stack(xs), np.stack(ys)


def train(
    dataset: DemoDataset,
    refs: ReferenceSet,
    config: TrainConfig = TrainConfig(),
    eval_hook=None,
) -> TrainReport:
    """Behaviour cloning on keypoint inputs extracted with refs."""
    inputs, targets = build_training_arrays(dataset, refs)
    return train_on_arrays(inputs, targets, config, eval_hook=eval_hook)


def act(policy: Policy, grid, refs: ReferenceSet, proprio) -> np.ndarray:
    """One control step: extract keypoints, build the input, run the policy."""
    kv = extract_keypoints(grid, refs)
    return forward(policy, policy_input(kv, proprio))


def encode_policy(policy: Policy) -> bytes:
    policy.validate()
    parts = [MAGIC_POLICY, np.array([len(policy.weights)], dtype="<u4").tobytes()]
    for w, b in zip(policy.weights, policy.biases):
        parts.append(np.array(w.shape, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    parts.append(bytes([ACTIVATION_TAGS[policy.activation]]))
    return b"".join(parts)


def decode_policy(buf: bytes, what: str = "policy") -> Policy:
    cur = _Cursor(buf, what)
    cur.expect_magic(MAGIC_POLICY)
    count = cur.u32()
    if not 1 <= count <= 64:
        raise BadDims(f"{what}: layer count {count} out of range [1, 64]")
    weights = []
    biases = []
    for _ in range(count):
        rows, cols = cur.u32(), cur.u32()
        if not (1 <= rows <= 1 << 20 and 1 <= cols <= 1 << 20):
            raise BadDims(f"{what}: layer shape {rows}x{cols} out of range")
        weights.append(cur.f32_array(rows * cols).reshape(rows, cols).astype(np.float64))
        biases.append(cur.f32_array(rows).astype(np.float64))
    tag = cur.u8()
    if tag not in _TAG_NAMES:
        raise BadConfig(f"{what}: unknown activation tag {tag}")
    cur.finish()
    policy = Policy(weights=weights, biases=biases, activation=_TAG_NAMES[tag])
    policy.validate()
    return policy


def save_policy(path, policy: Policy) -> None:
    atomic_write_bytes(path, encode_policy(policy))


def load_policy(path) -> Policy:
    return decode_policy(Path(path).read_bytes(), what=str(path))
