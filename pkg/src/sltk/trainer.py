"""Toy end-to-end pipeline: a tiny numpy CNN on a synthetic two-class task.

Exists to demonstrate the sparsification machinery (IMP with rewinding,
refilled/regrouped ticket retraining, group-aware IMP) at desk scale, not to
reproduce paper-scale accuracies.  Everything is seeded and single-threaded;
fixed (seed, config) reproduces runs exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ImpState,
    LayerShape,
    SparseMask,
    WeightTensor,
    global_magnitude_prune,
)
from .errors import ParameterError, TrainingError
from .executors import im2col_batch
from .regroup import BlockLayout, RegroupParams, regroup_mask

CONV_LAYERS: tuple[tuple[str, LayerShape], ...] = (
    ("conv1", LayerShape(8, 1, 3, 3, stride=1, padding=1)),
    ("conv2", LayerShape(16, 8, 3, 3, stride=2, padding=1)),
    ("conv3", LayerShape(32, 16, 3, 3, stride=2, padding=1)),
)
HEAD_NAME = "head"
HEAD_SHAPE = LayerShape(2, 32, 1, 1)  # linear head as a 1x1 kernel matrix
IMAGE_SIZE = 16
PRUNE_FRACTION = 0.2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 32
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    rewind_epoch: int | None = None  # default: 5% of epochs, at least 1
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.rewind_epoch is not None and self.rewind_epoch >= self.epochs:
            raise ParameterError(
                f"rewind_epoch {self.rewind_epoch} must be < epochs {self.epochs}"
            )

    @property
    def rewind(self) -> int:
        if self.rewind_epoch is not None:
            return self.rewind_epoch
        return max(1, round(0.05 * self.epochs))

    def lr_at(self, epoch: int) -> float:
        # step decay x0.1 at 50% and 75% of the schedule
        lr = self.lr
        if epoch >= math.floor(0.5 * self.epochs):
            lr *= 0.1
        if epoch >= math.floor(0.75 * self.epochs):
            lr *= 0.1
        return lr


@dataclass(frozen=True)
class SyntheticTask:
    """Seeded two-class dataset: oriented bars vs round blobs, plus noise."""

    train_x: np.ndarray = field(repr=False)
    train_y: np.ndarray = field(repr=False)
    val_x: np.ndarray = field(repr=False)
    val_y: np.ndarray = field(repr=False)
    test_x: np.ndarray = field(repr=False)
    test_y: np.ndarray = field(repr=False)
    seed: int = 0

    @classmethod
    def generate(
        cls,
        seed: int,
        n_train: int = 512,
        n_val: int = 128,
        n_test: int = 256,
        noise: float = 0.3,
    ) -> "SyntheticTask":
        rng = np.random.default_rng(seed)
        splits = []
        for count in (n_train, n_val, n_test):
            xs = np.empty((count, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
            ys = np.empty(count, dtype=np.int64)
            for i in range(count):
                label = i % 2  # alternating keeps classes balanced within one
                xs[i, 0] = _draw_pattern(rng, label, noise)
                ys[i] = label
            splits.append((xs, ys))
        return cls(
            splits[0][0], splits[0][1],
            splits[1][0], splits[1][1],
            splits[2][0], splits[2][1],
            seed=seed,
        )


def _draw_pattern(rng: np.random.Generator, label: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float32)
    cy = rng.uniform(5.0, IMAGE_SIZE - 5.0)
    cx = rng.uniform(5.0, IMAGE_SIZE - 5.0)
    if label == 0:
        theta = rng.uniform(0.0, math.pi)
        nx, ny = -math.sin(theta), math.cos(theta)  # unit normal of the bar
        dist = np.abs((xx - cx) * nx + (yy - cy) * ny)
        along = np.abs((xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta))
        img = np.where((dist < 1.1) & (along < 6.0), 1.0, 0.0).astype(np.float32)
    else:
        sigma = rng.uniform(1.8, 3.0)
        img = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
        img = img.astype(np.float32)
    img = img + rng.normal(0.0, noise, img.shape).astype(np.float32)
    return img


def init_weights(seed: int) -> dict[str, np.ndarray]:
    """He-style random initialization for every layer."""
    rng = np.random.default_rng([seed, 0xC0DE])
    weights = {}
    for name, shape in CONV_LAYERS:
        scale = math.sqrt(2.0 / shape.n)
        weights[name] = (
            rng.standard_normal((shape.c_out, shape.n)) * scale
        ).astype(np.float32)
    scale = math.sqrt(1.0 / HEAD_SHAPE.n)
    weights[HEAD_NAME] = (
        rng.standard_normal((HEAD_SHAPE.c_out, HEAD_SHAPE.n)) * scale
    ).astype(np.float32)
    return weights


@dataclass(frozen=True)
class TinyModel:
    """Weight store for the 3-conv + GAP + linear-head network."""

    weights: dict

    @classmethod
    def init(cls, seed: int) -> "TinyModel":
        return cls(init_weights(seed))

    def param_count(self) -> int:
        return sum(w.size for w in self.weights.values())


def dense_masks() -> dict[str, np.ndarray]:
    return {name: np.ones((s.c_out, s.n), dtype=bool) for name, s in CONV_LAYERS}


def _forward(
    weights: dict, x: np.ndarray, want_cache: bool
) -> tuple[np.ndarray, list]:
    a = x
    cache = []
    for name, shape in CONV_LAYERS:
        cols = im2col_batch(a, shape)
        h_out, w_out = shape.out_hw(a.shape[2], a.shape[3])
        z = np.matmul(weights[name], cols)
        relu_mask = z > 0
        if want_cache:
            cache.append((name, shape, cols, relu_mask, a.shape))
        a = (z * relu_mask).reshape(a.shape[0], shape.c_out, h_out, w_out)
    pooled = a.mean(axis=(2, 3))
    logits = pooled @ weights[HEAD_NAME].T
    if want_cache:
        cache.append((HEAD_NAME, pooled, a.shape))
    return logits, cache


def _col2im_batch(dcols: np.ndarray, shape: LayerShape, in_shape: tuple) -> np.ndarray:
    b, c, h, w = in_shape
    p = shape.padding
    h_out, w_out = shape.out_hw(h, w)
    dpad = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=np.float32)
    d = dcols.reshape(b, c, shape.k_h, shape.k_w, h_out, w_out)
    s = shape.stride
    for i in range(shape.k_h):
        for j in range(shape.k_w):
            dpad[:, :, i : i + s * h_out : s, j : j + s * w_out : s] += d[:, :, i, j]
    if p:
        return dpad[:, :, p : p + h, p : p + w]
    return dpad


def _loss_and_grads(
    weights: dict, x: np.ndarray, y: np.ndarray
) -> tuple[float, dict]:
    logits, cache = _forward(weights, x, want_cache=True)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    b = x.shape[0]
    loss = float(-np.log(probs[np.arange(b), y] + 1e-12).mean())

    dlogits = probs.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b

    grads = {}
    head_name, pooled, a_shape = cache[-1]
    grads[head_name] = dlogits.T @ pooled
    dpooled = dlogits @ weights[head_name]
    _, c_last, h_last, w_last = a_shape
    da = np.broadcast_to(
        dpooled[:, :, None, None] / (h_last * w_last),
        (b, c_last, h_last, w_last),
    ).astype(np.float32)

    for name, shape, cols, relu_mask, in_shape in reversed(cache[:-1]):
        h_out, w_out = shape.out_hw(in_shape[2], in_shape[3])
        dz = da.reshape(b, shape.c_out, h_out * w_out) * relu_mask
        grads[name] = np.tensordot(dz, cols, axes=([0, 2], [0, 2]))
        dcols = np.matmul(weights[name].T, dz)
        da = _col2im_batch(dcols, shape, in_shape)
    return loss, grads


def evaluate(weights: dict, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = _forward(weights, x, want_cache=False)
    return float((logits.argmax(axis=1) == y).mean())


@dataclass(frozen=True)
class TrainResult:
    model: TinyModel
    best_val_accuracy: float
    test_accuracy: float


def train(
    model: TinyModel,
    task: SyntheticTask,
    config: TrainConfig,
    masks: dict | None = None,
    first_epoch: int = 0,
    last_epoch: int | None = None,
) -> TrainResult:
    """Minibatch SGD with momentum, weight decay, and gradient masking.

    Pruned positions stay exactly zero after every step.  The epoch window
    [first_epoch, last_epoch) follows the global learning-rate schedule, so a
    rewound retrain resumes the schedule at its rewind point.
    """
    if masks is None:
        masks = dense_masks()
    last = config.epochs if last_epoch is None else last_epoch
    weights = {k: v.copy() for k, v in model.weights.items()}
    for name in masks:
        weights[name] = np.where(masks[name], weights[name], 0.0).astype(np.float32)
    velocity = {k: np.zeros_like(v) for k, v in weights.items()}

    best_val = evaluate(weights, task.val_x, task.val_y)
    n = task.train_x.shape[0]
    for epoch in range(first_epoch, last):
        rng = np.random.default_rng([config.seed, 0x51, epoch])
        order = rng.permutation(n)
        lr = config.lr_at(epoch)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = _loss_and_grads(weights, task.train_x[idx], task.train_y[idx])
            if not math.isfinite(loss):
                raise TrainingError("loss became non-finite", epoch)
            for name, g in grads.items():
                g = g + config.weight_decay * weights[name]
                if name in masks:
                    g = np.where(masks[name], g, 0.0)
                velocity[name] = config.momentum * velocity[name] + g
                weights[name] = (weights[name] - lr * velocity[name]).astype(np.float32)
                if name in masks:
                    weights[name] = np.where(masks[name], weights[name], 0.0)
        best_val = max(best_val, evaluate(weights, task.val_x, task.val_y))
    test_acc = evaluate(weights, task.test_x, task.test_y)
    return TrainResult(TinyModel(weights), best_val, test_acc)


def _wrap_masks(masks: dict) -> list[SparseMask]:
    return [SparseMask(name, shape, masks[name]) for name, shape in CONV_LAYERS]


def _wrap_weights(weights: dict) -> list[WeightTensor]:
    return [WeightTensor(name, shape, weights[name]) for name, shape in CONV_LAYERS]


def conv_sparsity(masks: dict) -> float:
    """Fraction of pruned weights over the prunable (conv) layers."""
    total = sum(s.c_out * s.n for _, s in CONV_LAYERS)
    kept = sum(int(masks[name].sum()) for name, _ in CONV_LAYERS)
    return 1.0 - kept / total


def prune_step(weights: dict, masks: dict, fraction: float) -> dict:
    """Global magnitude prune of the conv layers; the head is never touched."""
    pruned = global_magnitude_prune(_wrap_weights(weights), _wrap_masks(masks), fraction)
    return {m.layer_name: np.asarray(m.bits) for m in pruned}


@dataclass(frozen=True)
class ImpRound:
    round: int
    masks: dict
    sparsity: float
    accuracy: float
    trained: TinyModel


@dataclass(frozen=True)
class ImpRun:
    theta_0: TinyModel
    theta_i: TinyModel
    rounds: tuple

    def state_at(self, r: int) -> ImpState:
        """Snapshot of the loop after round r as a core ImpState value."""
        entry = self.rounds[r]
        return ImpState(
            theta_0={w.layer_name: w for w in _wrap_weights(self.theta_0.weights)},
            theta_i={w.layer_name: w for w in _wrap_weights(self.theta_i.weights)},
            masks={m.layer_name: m for m in _wrap_masks(entry.masks)},
            round=entry.round,
        )


def rewind_snapshot(model: TinyModel, task: SyntheticTask, config: TrainConfig) -> TinyModel:
    """theta_i: the dense model trained to the rewinding epoch."""
    return train(model, task, config, last_epoch=config.rewind).model


def imp(
    model: TinyModel, task: SyntheticTask, config: TrainConfig, rounds: int
) -> ImpRun:
    """Iterative magnitude pruning with rewinding.

    Entry r holds the mask after r pruning steps and the test accuracy of
    retraining from the rewound weights under that mask; entry 0 is the dense
    baseline.  Masks are nested across rounds.
    """
    if rounds < 1:
        raise ParameterError(f"rounds must be >= 1, got {rounds}")
    theta_i = rewind_snapshot(model, task, config)
    masks = dense_masks()
    result = train(theta_i, task, config, masks, first_epoch=config.rewind)
    entries = [ImpRound(0, masks, 0.0, result.test_accuracy, result.model)]
    for r in range(1, rounds + 1):
        masks = prune_step(entries[-1].trained.weights, masks, PRUNE_FRACTION)
        result = train(theta_i, task, config, masks, first_epoch=config.rewind)
        entries.append(
            ImpRound(r, masks, conv_sparsity(masks), result.test_accuracy, result.model)
        )
    return ImpRun(model, theta_i, tuple(entries))


def structure_bits(structure) -> dict:
    """Mask bits of a ticket structure: a masks dict or per-layer BlockLayouts."""
    bits = {}
    for name, shape in CONV_LAYERS:
        entry = structure[name]
        if isinstance(entry, BlockLayout):
            bits[name] = entry.coverage_bits()
        elif isinstance(entry, SparseMask):
            bits[name] = np.asarray(entry.bits)
        else:
            bits[name] = np.asarray(entry, dtype=bool)
    return bits


def run_ticket(
    structure,
    task: SyntheticTask,
    config: TrainConfig,
    init: str,
    snapshots: ImpRun,
) -> float:
    """Retrain a fixed structure from rewound or freshly random weights.

    Both initializations train over the same epoch window [rewind, epochs),
    so the comparison isolates the starting point.
    """
    masks = structure_bits(structure)
    if init == "rewound":
        start = snapshots.theta_i
    elif init == "random_reinit":
        start = TinyModel(init_weights(config.seed + 0x7E57))
    else:
        raise ParameterError(f"init must be 'rewound' or 'random_reinit', got {init!r}")
    result = train(start, task, config, masks, first_epoch=config.rewind)
    return result.test_accuracy


@dataclass(frozen=True)
class GroupAwareRound:
    round: int
    layouts: dict
    masks: dict
    sparsity: float
    accuracy: float
    trained: TinyModel


def group_aware_imp(
    model: TinyModel,
    task: SyntheticTask,
    config: TrainConfig,
    params: dict,
    target_sparsity: float,
    max_rounds: int = 8,
    prune_fraction: float = PRUNE_FRACTION,
) -> tuple[TinyModel, tuple]:
    """IMP that regroups the mask after every pruning step (Refill's group twin).

    ``params`` maps layer name -> RegroupParams.  Every emitted mask is
    exactly the coverage of its layouts.  Stops once the conv sparsity
    reaches the target or after max_rounds.
    """
    theta_i = rewind_snapshot(model, task, config)
    masks = dense_masks()
    result = train(theta_i, task, config, masks, first_epoch=config.rewind)
    entries = []
    trained = result.model
    for r in range(1, max_rounds + 1):
        masks = prune_step(trained.weights, masks, prune_fraction)
        layouts = {}
        new_masks = {}
        for name, shape in CONV_LAYERS:
            mask = SparseMask(name, shape, masks[name])
            weights = WeightTensor(name, shape, theta_i.weights[name])
            regrouped, layout = regroup_mask(mask, weights, params[name])
            layouts[name] = layout
            new_masks[name] = np.asarray(regrouped.bits)
        masks = new_masks
        result = train(theta_i, task, config, masks, first_epoch=config.rewind)
        trained = result.model
        sparsity = conv_sparsity(masks)
        entries.append(
            GroupAwareRound(r, layouts, masks, sparsity, result.test_accuracy, trained)
        )
        if sparsity >= target_sparsity:
            break
    return theta_i, tuple(entries)


def toy_regroup_params(seed: int = 42) -> dict:
    """Per-layer regroup knobs sized for the tiny model's layers."""
    return {
        "conv1": RegroupParams(t1=1, t2=1, b1=1, b2=1, seed=seed),
        "conv2": RegroupParams(t1=2, t2=5, b1=4, b2=12, seed=seed),
        "conv3": RegroupParams(t1=4, t2=5, b1=4, b2=16, seed=seed),
    }


def manifest_text(method: str, config: TrainConfig, rounds: list) -> str:
    """Run manifest as key=value lines; ``rounds`` holds (round, sparsity, accuracy)."""
    lines = [
        f"method={method}",
        f"seed={config.seed}",
        f"epochs={config.epochs}",
        f"batch_size={config.batch_size}",
        f"lr={config.lr:.6f}",
        f"momentum={config.momentum:.6f}",
        f"weight_decay={config.weight_decay:.6f}",
        f"rewind_epoch={config.rewind}",
    ]
    for r, sparsity, accuracy in rounds:
        lines.append(f"round.{r}.sparsity={sparsity:.6f}")
        lines.append(f"round.{r}.accuracy={accuracy:.6f}")
    return "\n".join(lines) + "\n"
