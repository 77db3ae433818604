"""
SGD training loop: momentum, coupled weight decay, staircase learning rate,
shuffled mini-batches with horizontal flips, and a held-out monitor split.
"""

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from tqdm import tqdm

from errors import ContractViolation, NumericalError, UsageError
from network import evaluate_accuracy
from tensor_core import Graph, Tensor, add, center_loss, cross_entropy

STRATIFY_MIN_SAMPLES = 20


@dataclass
class OptimizerConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractViolation(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractViolation(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class LrSchedule:
    warm_epochs: int = 2
    decay_factor: float = 10.0
    total_epochs: int = 5
    base_lr: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractViolation(f"base learning rate must be positive, got {self.base_lr}")
        if self.decay_factor < 1:
            raise ContractViolation(f"decay_factor must be >= 1, got {self.decay_factor}")


def lr_at_epoch(schedule, epoch):
    """base_lr for the warm epochs, then divided by decay_factor after each further epoch."""
    if not 1 <= epoch <= schedule.total_epochs:
        raise ContractViolation(f"epoch {epoch} outside [1, {schedule.total_epochs}]")
    return schedule.base_lr / schedule.decay_factor ** max(0, epoch - schedule.warm_epochs)


def is_decay_exempt(tensor):
    # PReLU slopes are not decayed
    return tensor.name is not None and tensor.name.endswith(".slopes")


def sgd_step(params, grads, config, lr):
    """
    In-place momentum SGD. ``grads`` maps parameter name to gradient; ``None``
    reads each tensor's own ``.grad``.
    """
    for index, tensor in enumerate(params):
        key = tensor.name or f"param{index}"
        grad = tensor.grad if grads is None else grads.get(key)
        if grad is None:
            raise ContractViolation(f"no gradient for parameter '{key}'")
        if grad.shape != tensor.shape:
            raise ContractViolation(f"gradient for '{key}' has shape {grad.shape}, parameter has {tensor.shape}")
        effective = grad if is_decay_exempt(tensor) else grad + config.weight_decay * tensor.data
        velocity = config.velocity.get(key)
        if velocity is None:
            velocity = np.zeros_like(tensor.data)
        velocity = (config.momentum * velocity + effective).astype(tensor.dtype, copy=False)
        config.velocity[key] = velocity
        tensor.data -= tensor.dtype.type(lr) * velocity
    return params


class BatchSampler:
    """Shuffled index batches; every index appears exactly once per epoch."""

    def __init__(self, num_samples, batch_size=120, seed=0, augment=True, flip_probability=0.5):
        if batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")
        self.num_samples = num_samples
        self.batch_size = batch_size
        self.seed = seed
        self.augment = augment
        self.flip_probability = flip_probability

    def rng(self, epoch):
        return np.random.default_rng([self.seed, epoch])

    def batches(self, epoch):
        order = self.rng(epoch).permutation(self.num_samples)
        batches = [order[i:i + self.batch_size] for i in range(0, self.num_samples, self.batch_size)]
        # a lone trailing sample cannot be feature-normalized in train mode
        if len(batches) > 1 and len(batches[-1]) == 1:
            last = batches.pop()
            batches[-1] = np.concatenate([batches[-1], last])
        return batches

    def flip_rng(self, epoch):
        return np.random.default_rng([self.seed, epoch, 1])


def _round_half_up(value):
    return int(np.floor(value + 0.5))


def split_train_monitor(labels, fraction=0.95, seed=0):
    """
    Disjoint (train, monitor) index arrays. Identities with at least
    STRATIFY_MIN_SAMPLES samples are split individually; the rest are pooled.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractViolation("cannot split an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"train fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    train, monitor, pooled = [], [], []
    for identity in np.unique(labels):
        members = np.flatnonzero(labels == identity)
        if len(members) >= STRATIFY_MIN_SAMPLES:
            members = rng.permutation(members)
            cut = _round_half_up(len(members) * fraction)
            train.append(members[:cut])
            monitor.append(members[cut:])
        else:
            pooled.append(members)
    if pooled:
        members = rng.permutation(np.concatenate(pooled))
        cut = _round_half_up(len(members) * fraction)
        train.append(members[:cut])
        monitor.append(members[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(monitor))


def augment_flip(batch, probability=0.5, rng=None):
    """Mirror each image [N, C, H, W] left-right with the given probability."""
    batch = np.asarray(batch)
    rng = np.random.default_rng() if rng is None else rng
    flips = rng.random(len(batch)) < probability
    out = batch.copy()
    out[flips] = batch[flips][..., ::-1]
    return out


@dataclass
class TrainingData:
    images: np.ndarray    # [N, C, H, W], pixel-normalized
    labels: np.ndarray    # [N] int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractViolation(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        return TrainingData(self.images[indices], self.labels[indices])


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    monitor_acc: float

    def line(self):
        return f"{self.epoch}\t{self.lr:g}\t{self.train_loss:.6f}\t{self.monitor_acc:.6f}"


@dataclass
class TrainResult:
    history: List[EpochMetrics]

    @property
    def final(self):
        return self.history[-1] if self.history else None

    def metrics_log(self):
        return "".join(m.line() + "\n" for m in self.history)


def train_step(network, images, labels, optimizer, lr, graph=None):
    """One forward/backward/update on a batch. Returns the batch loss."""
    graph = graph or Graph()
    network.zero_grad()
    result = network.forward(Tensor(images.astype(network.dtype, copy=False)), graph)
    loss = cross_entropy(result.logits, labels, graph)
    if network.centers is not None:
        loss = add(loss, center_loss(result.features, labels, network.centers, graph), graph)
    value = loss.item()
    if not np.isfinite(value):
        return value
    graph.backward(loss)
    sgd_step(network.parameters(), None, optimizer, lr)
    return value


def train(network, data, optimizer, schedule, sampler, monitor=None, quiet=False, on_epoch=None):
    if schedule.total_epochs < 1:
        raise UsageError("nothing to train: total_epochs is 0")
    if not network.spec.has_head:
        raise ContractViolation(f"{network.spec.name} has no classifier head to train against")
    if tuple(data.images.shape[1:]) != tuple(network.spec.input_shape):
        raise ContractViolation(
            f"training images have shape {data.images.shape[1:]}, network expects {network.spec.input_shape}"
        )

    history = []
    for epoch in range(1, schedule.total_epochs + 1):
        lr = lr_at_epoch(schedule, epoch)
        flip_rng = sampler.flip_rng(epoch)
        network.train()
        losses, weights = [], []
        batches = tqdm(sampler.batches(epoch), desc=f"epoch {epoch}/{schedule.total_epochs}",
                       disable=quiet, leave=False)
        for batch_index, indices in enumerate(batches):
            images = data.images[indices]
            if sampler.augment:
                images = augment_flip(images, sampler.flip_probability, flip_rng)
            value = train_step(network, images, data.labels[indices], optimizer, lr)
            if not np.isfinite(value):
                raise NumericalError(f"loss diverged (value {value}) at epoch {epoch}, batch {batch_index}")
            losses.append(value)
            weights.append(len(indices))
            batches.set_postfix(loss=f"{value:.4f}")

        monitor_acc = evaluate_accuracy(network, monitor.images, monitor.labels) if monitor is not None else float("nan")
        metrics = EpochMetrics(epoch, lr, float(np.average(losses, weights=weights)), monitor_acc)
        history.append(metrics)
        if not quiet:
            print(f"✓ epoch {epoch}: lr {lr:g}  train loss {metrics.train_loss:.4f}  monitor acc {monitor_acc:.4f}")
        if on_epoch is not None:
            on_epoch(metrics)
    network.eval()
    return TrainResult(history)
