"""Adam and the subvolume training loop."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import network
from .inference import Model, PaddingPolicy, evaluate
from .losses import check_loss, cross_entropy, dice_loss
from .ops import BatchStats
from .preprocess import (AugmentationConfig, augment_subvolume, learn_reference, sample_subvolume,
                         standardize_intensity)
from .tensor import NumericError, make_rng
from .volume_io import DataError

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "val_mean_dcs", "wall_time_s")


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradient in {', '.join(bad[:5])} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = (p - step).astype(p.dtype)
    return out


@dataclass
class TrainConfig:
    subvolume: int = 24
    iterations: int = 2000
    workers: int = 1
    val_every: int = 50
    patience: int = 10
    min_delta: float = 1e-3
    seed: int = 0
    loss: str = "dice"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    randomize_threshold: bool = True
    eval_pad: int = 0
    conv_method: str = "direct"
    norm: str = "volume"
    # stop as soon as the validation mean DCS reaches this value
    stop_at: float | None = None

    def __post_init__(self):
        if self.workers not in (1, 2):
            raise ValueError("worker count must be 1 or 2")
        if self.loss not in ("dice", "xent"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def loss_fn(name: str):
    return dice_loss if name == "dice" else cross_entropy


@dataclass
class Batch:
    image: np.ndarray
    labels: np.ndarray
    rng_seed: tuple


def draw_batch(dataset, reference, config: TrainConfig, step: int, worker: int) -> Batch:
    rng = make_rng((config.seed, step, worker))
    img, lab = dataset[int(rng.integers(len(dataset)))]
    mode = "train" if config.randomize_threshold else "test"
    img = standardize_intensity(img, mode, rng, reference)
    img, lab, _ = sample_subvolume(img, lab, config.subvolume, rng)
    if config.augment:
        img, lab = augment_subvolume(img, lab, AugmentationConfig(), rng)
    return Batch(np.ascontiguousarray(img), np.ascontiguousarray(lab), (config.seed, step, worker, 1))


def worker_gradients(spec, store, batch: Batch, loss_name: str, method: str = "direct"):
    """(loss value, gradients, batch-norm statistics) for one subvolume."""
    leaves = network.leaf_tensors(store)
    stats: dict[str, BatchStats] = {}
    rng = make_rng(batch.rng_seed)
    scores = network.forward(spec, store, batch.image, "train", rng=rng, leaves=leaves,
                             bn_stats=stats, method=method)
    loss = loss_fn(loss_name)(scores, batch.labels)
    value = check_loss(loss)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return value, grads, stats


def mean_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    if len(arrays) == 1:
        return arrays[0]
    return sum(arrays) / len(arrays)


def train_step(spec, store: network.ParameterStore, state: AdamState, batches: list[Batch],
               loss_name: str = "dice", method: str = "direct", pool: ThreadPoolExecutor | None = None) -> float:
    """Gradients on each batch (one per worker) are averaged before a single Adam update."""
    if pool is not None and len(batches) > 1:
        results = list(pool.map(lambda b: worker_gradients(spec, store, b, loss_name, method), batches))
    else:
        results = [worker_gradients(spec, store, b, loss_name, method) for b in batches]
    grads = {k: mean_arrays([r[1][k] for r in results]) for k in results[0][1]}
    new = adam_step(store.params, grads, state)
    store.params.update(new)
    stats = {}
    for name in results[0][2]:
        ss = [r[2][name] for r in results]
        stats[name] = BatchStats(mean_arrays([s.mean for s in ss]), mean_arrays([s.var for s in ss]))
    network.apply_bn_stats(store, stats)
    return float(np.mean([r[0] for r in results]))


@dataclass
class TrainResult:
    model: Model
    log: list[tuple]
    best_step: int
    best_val: float
    last_model: Model | None = None


def check_dataset(spec, dataset) -> None:
    if not dataset:
        raise DataError("need at least one training volume")
    for img, lab in dataset:
        if img.shape[0] != spec.in_channels:
            raise DataError(f"volume has {img.shape[0]} channels, architecture expects {spec.in_channels}")
        if lab.max() >= spec.num_classes:
            raise DataError(f"label {lab.max()} exceeds architecture class count {spec.num_classes}")


def train(spec: network.ArchitectureSpec, store: network.ParameterStore, train_set, config: TrainConfig,
          val_set=None, log_path=None, checkpoint_path=None) -> TrainResult:
    """Train in place on ``store``; the returned model holds the best-validation weights."""
    check_dataset(spec, train_set)
    if config.subvolume < 2 * max(l.dilation for l in spec.convs) + 1:
        raise ValueError("subvolume too small for the largest dilation")
    reference = learn_reference(img for img, _ in train_set)
    state = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    def snapshot(s):
        return Model(spec, s, reference, config.conv_method, norm=config.norm)

    model = snapshot(store)
    rows: list[tuple] = []
    best_val, best_step, best_store = -1.0, 0, store.copy()
    since_best = 0
    start = time.perf_counter()
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for step in range(1, config.iterations + 1):
            batches = [draw_batch(train_set, reference, config, step, w) for w in range(config.workers)]
            loss = train_step(spec, store, state, batches, config.loss, config.conv_method, pool)
            val = ""
            if val_set and (step % config.val_every == 0 or step == config.iterations):
                score = float(np.mean(evaluate(model, val_set, PaddingPolicy(config.eval_pad))))
                val = f"{score:.6f}"
                if best_step == 0 or score > best_val + config.min_delta:
                    best_val, best_step, best_store = score, step, store.copy()
                    since_best = 0
                    if checkpoint_path is not None:
                        snapshot(best_store).save(checkpoint_path, step=step, val_mean_dcs=score)
                else:
                    since_best += 1
                log.info("step %d loss %.5f val %.4f", step, loss, score)
            row = (step, f"{loss:.8f}", val, f"{time.perf_counter() - start:.3f}")
            rows.append(row)
            if writer:
                writer.writerow(row)
                fh.flush()
            if val_set and since_best >= config.patience:
                log.info("validation plateau at step %d", step)
                break
            if val and config.stop_at is not None and float(val) >= config.stop_at:
                log.info("validation target %.4f reached at step %d", config.stop_at, step)
                break
    finally:
        if fh:
            fh.close()
        if pool:
            pool.shutdown()
    last = snapshot(store.copy())
    if not val_set:
        best_store, best_step = store.copy(), rows[-1][0]
        if checkpoint_path is not None:
            snapshot(best_store).save(checkpoint_path, step=best_step)
    return TrainResult(snapshot(best_store), rows, best_step, best_val, last)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
