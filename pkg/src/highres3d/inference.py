"""Padded whole-volume prediction and Monte Carlo dropout uncertainty."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import network
from .losses import mean_dcs
from .network import ArchitectureSpec, ParameterStore
from .preprocess import standardize_intensity
from .tensor import ShapeError, make_rng


@dataclass
class Model:
    """Architecture, weights and the intensity reference used at training time.

    ``norm`` selects the batch-norm statistics used for prediction: ``volume``
    normalises each volume with its own statistics, as in training, while
    ``running`` uses the stored averages and makes every voxel independent
    of the rest of the volume (needed for tiling).
    """
    spec: ArchitectureSpec
    store: ParameterStore
    reference: np.ndarray | None = None
    method: str = "direct"
    meta: dict = field(default_factory=dict)
    norm: str = "volume"

    def __post_init__(self):
        if self.norm not in network.NORMS:
            raise ValueError(f"unknown batch-norm statistics {self.norm!r}")

    def save(self, path, **meta) -> None:
        doc = dict(self.meta, **meta)
        doc["norm"] = self.norm
        if self.reference is not None:
            doc["reference_landmarks"] = [float(v) for v in self.reference]
        network.save_checkpoint(path, self.spec, self.store, doc)

    @classmethod
    def load(cls, path, method: str = "direct") -> Model:
        spec, store, meta = network.load_checkpoint(path)
        ref = meta.get("reference_landmarks")
        return cls(spec, store, None if ref is None else np.asarray(ref), method, meta,
                   meta.get("norm", "volume"))

    def prepare(self, volume: np.ndarray) -> np.ndarray:
        vol = volume if volume.ndim == 4 else volume[None]
        return standardize_intensity(vol, "test", reference=self.reference)


@dataclass
class PaddingPolicy:
    pad: int = 16
    fill: float = 0.0

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError(f"pad width must be >= 0, got {self.pad}")
        if self.fill != 0.0:
            raise ValueError("only zero padding is supported")


def pad_volume(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0),) + ((pad, pad),) * 3)


def crop_volume(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[(slice(None),) + (slice(pad, -pad),) * 3]


def _tile_origins(extent: int, tile: int, margin: int) -> list[int]:
    if extent <= tile:
        return [0]
    stride = tile - 2 * margin
    if stride < 1:
        raise ValueError(f"tile size {tile} leaves no interior with margin {margin}")
    origins = list(range(0, extent - tile, stride))
    origins.append(extent - tile)
    return origins


def predict_scores(model: Model, image: np.ndarray, pad: int = 16, tile_size: int | None = None,
                   margin: int | None = None) -> np.ndarray:
    """Softmax scores for an already standardised (C, D, H, W) image.

    Volumes whose padded extent exceeds ``tile_size`` are processed in tiles
    overlapping by ``2 * margin`` voxels (``margin`` defaults to ``pad``);
    only each tile's interior is kept. Tiling needs ``running`` statistics.
    """
    x = pad_volume(image.astype(np.float32), pad)
    if tile_size is None or max(x.shape[1:]) <= tile_size:
        out = network.forward(model.spec, model.store, x, "inference", method=model.method,
                              norm=model.norm).data
        return crop_volume(out, pad)
    if model.norm != "running":
        raise ValueError("tiled prediction needs running batch-norm statistics")
    run = lambda v: network.forward(model.spec, model.store, v, "inference", method=model.method).data
    m = pad if margin is None else margin
    out = np.empty((model.spec.num_classes,) + x.shape[1:], dtype=np.float32)
    axes_origins = [_tile_origins(e, tile_size, m) for e in x.shape[1:]]
    for origin in product(*axes_origins):
        sl = tuple(slice(o, o + min(tile_size, e)) for o, e in zip(origin, x.shape[1:]))
        scores = run(np.ascontiguousarray(x[(slice(None),) + sl]))
        keep_dst, keep_src = [], []
        for o, s, e in zip(origin, scores.shape[1:], x.shape[1:]):
            lo = 0 if o == 0 else m
            hi = s if o + s == e else s - m
            keep_dst.append(slice(o + lo, o + hi))
            keep_src.append(slice(lo, hi))
        out[(slice(None),) + tuple(keep_dst)] = scores[(slice(None),) + tuple(keep_src)]
    return crop_volume(out, pad)


def predict(model: Model, volume: np.ndarray, policy: PaddingPolicy | None = None,
            tile_size: int | None = None, standardize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(labels, scores) for one raw volume; output spatial shape equals the input's."""
    policy = policy or PaddingPolicy()
    image = model.prepare(volume) if standardize else (volume if volume.ndim == 4 else volume[None])
    scores = predict_scores(model, image, policy.pad, tile_size)
    return np.argmax(scores, axis=0), scores


def evaluate(model: Model, dataset, policy: PaddingPolicy | None = None) -> list[float]:
    """Mean DCS of each (volume, labels) pair."""
    return [mean_dcs(predict(model, img, policy)[0], lab) for img, lab in dataset]


# ----------------------------------------------------------------------
# Monte Carlo dropout


@dataclass
class UncertaintyMap:
    labels: np.ndarray
    disagreement: np.ndarray
    samples: int


def majority_vote(sample_labels: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Most frequent label per voxel (ties to the lower id) and the disagreeing fraction."""
    m = sample_labels.shape[0]
    if m < 1:
        raise ValueError("need at least one sample")
    counts = np.stack([(sample_labels == c).sum(axis=0) for c in range(num_classes)])
    labels = np.argmax(counts, axis=0)
    agree = np.take_along_axis(counts, labels[None], axis=0)[0]
    return labels, (m - agree) / m


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return make_rng((seed, index))


def mc_sample_labels(model: Model, volume: np.ndarray, samples: int, seed: int = 0,
                     policy: PaddingPolicy | None = None, reuse_features: bool = True,
                     standardize: bool = True) -> np.ndarray:
    """(M, D, H, W) label maps from M dropout-perturbed forward passes.

    With ``reuse_features`` the layers below the dropout layer run once and
    only the dropout and the layers above it are resampled.
    """
    if samples < 1:
        raise ValueError(f"need at least one sample, got {samples}")
    spec = model.spec
    if not spec.has_dropout:
        raise ValueError("Monte Carlo sampling needs a checkpoint of the dropout variant")
    policy = policy or PaddingPolicy()
    image = model.prepare(volume) if standardize else volume
    x = pad_volume(image.astype(np.float32), policy.pad)
    cut = spec.index_of("dropout")
    out = np.empty((samples,) + x.shape[1:], dtype=np.int64)
    kw = dict(method=model.method, norm=model.norm)
    if reuse_features:
        feats = network.forward(spec, model.store, x, "inference", stop=cut, **kw)
    for i in range(samples):
        rng = _sample_rng(seed, i)
        if reuse_features:
            scores = network.forward(spec, model.store, feats, "mc-sample", rng=rng, start=cut, **kw)
        else:
            scores = network.forward(spec, model.store, x, "mc-sample", rng=rng, **kw)
        out[i] = np.argmax(scores.data, axis=0)
    return out[(slice(None),) + (slice(policy.pad, x.shape[1] - policy.pad),
                                 slice(policy.pad, x.shape[2] - policy.pad),
                                 slice(policy.pad, x.shape[3] - policy.pad))]


def mc_sample_predict(model: Model, volume: np.ndarray, samples: int = 10, seed: int = 0,
                      policy: PaddingPolicy | None = None, reuse_features: bool = True) -> UncertaintyMap:
    stack = mc_sample_labels(model, volume, samples, seed, policy, reuse_features)
    labels, dis = majority_vote(stack, model.spec.num_classes)
    return UncertaintyMap(labels, dis, samples)


def accuracy_vs_uncertainty(umap: UncertaintyMap, truth: np.ndarray, thresholds) -> list[tuple[float, float, float]]:
    """(threshold, accuracy over voxels with uncertainty < threshold, retained fraction).

    Accuracy is NaN when no voxel is retained.
    """
    if umap.labels.shape != truth.shape:
        raise ShapeError(f"uncertainty map {umap.labels.shape} and truth {truth.shape} differ")
    correct = umap.labels == truth
    rows = []
    for t in thresholds:
        keep = umap.disagreement < t
        n = int(keep.sum())
        acc = float(correct[keep].mean()) if n else float("nan")
        rows.append((float(t), acc, n / truth.size))
    return rows


def samples_vs_dcs(model: Model, dataset, sample_counts, seed: int = 0,
                   policy: PaddingPolicy | None = None) -> list[tuple[int, float, float]]:
    """(M, mean DCS of the M-sample majority vote, standard error) across volumes.

    Every M reuses the first M of one cached set of samples per volume.
    """
    counts = sorted(int(m) for m in sample_counts)
    if not counts or counts[0] < 1:
        raise ValueError("sample counts must be >= 1")
    per_m = {m: [] for m in counts}
    for img, lab in dataset:
        stack = mc_sample_labels(model, img, counts[-1], seed, policy)
        for m in counts:
            labels, _ = majority_vote(stack[:m], model.spec.num_classes)
            per_m[m].append(mean_dcs(labels, lab))
    return [(m, float(np.mean(v)), standard_error(v)) for m, v in per_m.items()]


def standard_error(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(v.std(ddof=1) / np.sqrt(v.size))
