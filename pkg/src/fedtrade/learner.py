"""From-scratch MLP classifier with per-example SGD and gradient masking.

The model is a fully connected ReLU network with a softmax cross-entropy
head, trained by mini-batch SGD with an inverse-time learning-rate decay
(``lr_t = lr / (1 + decay * t)`` over the lifetime step count ``t``).
Parameters expose a flat vector view so whole-round deltas can be traded
coordinate-by-coordinate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datasets import Dataset

DEFAULT_ARCH = (1024, 128, 10)


class EmptyShardError(ValueError):
    """Local training requires at least one example."""


@dataclass(frozen=True)
class GradientVector:
    """Whole-round flat parameter delta of one party."""

    values: np.ndarray
    round_id: int
    owner: int

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class MlpClassifier:
    """Plain NumPy MLP; weights in float64 for exact gradient checks."""

    def __init__(
        self,
        layer_sizes: Sequence[int] = DEFAULT_ARCH,
        rng: Optional[np.random.Generator] = None,
    ):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output layers")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        rng = rng or np.random.default_rng()
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.step_count = 0

    # -- parameter vector view ----------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def get_params(self) -> np.ndarray:
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b.ravel())
        return np.concatenate(chunks)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        offset = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[offset : offset + w.size].reshape(w.shape).copy()
            offset += w.size
            self.biases[i] = flat[offset : offset + b.size].copy()
            offset += b.size

    def clone(self) -> "MlpClassifier":
        twin = MlpClassifier.__new__(MlpClassifier)
        twin.layer_sizes = self.layer_sizes
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        twin.step_count = self.step_count
        return twin

    # -- forward / backward ---------------------------------------------------

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(x)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return h @ self.weights[-1] + self.biases[-1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"samples have {x.shape[1]} features, model expects "
                f"{self.layer_sizes[0]}"
            )
        return np.argmax(self.logits(x), axis=1)

    def loss_and_gradients(
        self, x: np.ndarray, y: np.ndarray
    ) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
        """Mean cross-entropy over the batch and gradients per layer."""
        x = np.atleast_2d(x)
        y = np.atleast_1d(y)
        activations = [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            activations.append(h)
        logits = h @ self.weights[-1] + self.biases[-1]

        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        batch = x.shape[0]
        loss = float(-np.mean(np.log(probs[np.arange(batch), y] + 1e-300)))

        delta = probs
        delta[np.arange(batch), y] -= 1.0
        delta /= batch
        w_grads: List[np.ndarray] = [None] * len(self.weights)
        b_grads: List[np.ndarray] = [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            w_grads[layer] = activations[layer].T @ delta
            b_grads[layer] = delta.sum(axis=0)
            if layer:
                delta = delta @ self.weights[layer].T
                delta[activations[layer] <= 0.0] = 0.0
        return loss, w_grads, b_grads

    def flat_gradient(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        loss, w_grads, b_grads = self.loss_and_gradients(x, y)
        chunks = []
        for wg, bg in zip(w_grads, b_grads):
            chunks.append(wg.ravel())
            chunks.append(bg.ravel())
        return loss, np.concatenate(chunks)

    def mean_loss(self, x: np.ndarray, y: np.ndarray) -> float:
        logits = self.logits(x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-np.mean(log_probs[np.arange(len(y)), y]))

    # -- checkpoints --------------------------------------------------------

    def save(self, path) -> None:
        """Header (layer count + sizes), then flat little-endian float64."""
        arch = struct.pack(
            f"<I{len(self.layer_sizes)}I", len(self.layer_sizes), *self.layer_sizes
        )
        Path(path).write_bytes(
            b"FTMODEL1"
            + arch
            + struct.pack("<Q", self.n_params)
            + self.get_params().astype("<f8").tobytes()
        )

    @classmethod
    def load(cls, path) -> "MlpClassifier":
        raw = Path(path).read_bytes()
        if raw[:8] != b"FTMODEL1":
            raise ValueError("not a model checkpoint")
        (depth,) = struct.unpack("<I", raw[8:12])
        sizes = struct.unpack(f"<{depth}I", raw[12 : 12 + 4 * depth])
        offset = 12 + 4 * depth
        (count,) = struct.unpack("<Q", raw[offset : offset + 8])
        flat = np.frombuffer(raw[offset + 8 :], dtype="<f8")
        if flat.shape[0] != count:
            raise ValueError("checkpoint parameter count mismatch")
        model = cls(sizes, rng=np.random.default_rng(0))
        model.set_params(flat.astype(np.float64))
        return model


# ---------------------------------------------------------------------------
# Training, masking, updates
# ---------------------------------------------------------------------------


def sgd_epochs(
    model: MlpClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    decay: float,
    rng: np.random.Generator,
) -> None:
    """In-place mini-batch SGD; the step counter persists across calls."""
    n = images.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, w_grads, b_grads = model.loss_and_gradients(images[idx], labels[idx])
            step_lr = lr / (1.0 + decay * model.step_count)
            for layer in range(len(model.weights)):
                model.weights[layer] -= step_lr * w_grads[layer]
                model.biases[layer] -= step_lr * b_grads[layer]
            model.step_count += 1


def train_local(
    model: MlpClassifier,
    shard: Dataset,
    epochs: int,
    batch_size: int,
    lr: float,
    decay: float,
    rng: np.random.Generator,
    round_id: int = 0,
    owner: int = 0,
) -> GradientVector:
    """Run local epochs and return the whole-round parameter delta.

    The model is left at the post-training parameters; the collaborative
    update later adds the peer sum on top.
    """
    if len(shard) == 0:
        raise EmptyShardError(f"party {owner} has no local data")
    before = model.get_params()
    sgd_epochs(model, shard.images, shard.labels, epochs, batch_size, lr, decay, rng)
    return GradientVector(model.get_params() - before, round_id, owner)


def select_largest(values: np.ndarray, keep: int) -> np.ndarray:
    """Keep the ``keep`` largest-magnitude entries, zero the rest.

    Ties break toward the lower index (stable sort on descending
    magnitude), so masking is deterministic and idempotent.
    """
    values = np.asarray(values, dtype=np.float64)
    if keep < 0 or keep > values.shape[0]:
        raise ValueError(f"keep={keep} out of range for {values.shape[0]} entries")
    masked = np.zeros_like(values)
    if keep:
        chosen = np.argsort(-np.abs(values), kind="stable")[:keep]
        masked[chosen] = values[chosen]
    return masked


def apply_update(
    model: MlpClassifier, own_delta: np.ndarray, peer_sum: np.ndarray
) -> None:
    """Add the decoded peer aggregate onto the locally-stepped parameters.

    ``train_local`` already left the model at (round start + own delta),
    so the final state is round start + own delta + peer sum.
    """
    own_delta = np.asarray(own_delta)
    peer_sum = np.asarray(peer_sum)
    if own_delta.shape != (model.n_params,):
        raise ValueError("own delta length does not match the model")
    if peer_sum.shape != (model.n_params,):
        raise ValueError("peer sum length does not match the model")
    model.set_params(model.get_params() + peer_sum)


def evaluate(model: MlpClassifier, dataset: Dataset) -> float:
    """Argmax accuracy; float32 matmuls, which cannot shift an argmax here."""
    images = dataset.images_f32
    h = images
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.maximum(h @ w.astype(np.float32) + b.astype(np.float32), 0.0)
    logits = h @ model.weights[-1].astype(np.float32) + model.biases[-1].astype(
        np.float32
    )
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def predict_labels(model: MlpClassifier, samples: np.ndarray) -> np.ndarray:
    """Deterministic argmax labels for a published sample batch."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        return np.zeros(0, dtype=np.int64)
    return model.predict(samples).astype(np.int64)
