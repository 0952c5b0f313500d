"""Receptive fields over residual paths and the border-effect harness."""
from __future__ import annotations

from collections import Counter

import numpy as np

from . import network
from .inference import Model, PaddingPolicy, predict, standard_error
from .losses import mean_dcs
from .network import ArchitectureSpec, ParameterStore
from .tensor import Tensor

MAX_ENUMERATED_BLOCKS = 24


def _conv_growth(layer) -> int:
    return (layer.kernel - 1) * layer.dilation


def receptive_field_of_path(spec: ArchitectureSpec, subset: int) -> int:
    """Side length of the receptive field of one unravelled path.

    Bit ``i`` of ``subset`` selects the residual branch of block ``i``
    (cleared bits take the identity skip). Convolutions outside residual
    blocks are always on the path; pointwise layers add nothing.
    """
    blocks = spec.blocks()
    if subset < 0 or subset >> len(blocks):
        raise ValueError(f"path mask {subset:#x} is wider than {len(blocks)} blocks")
    extent = 1 + sum(_conv_growth(l) for l in spec.standalone_convs())
    for i, convs in enumerate(blocks):
        if subset >> i & 1:
            extent += sum(_conv_growth(l) for l in convs)
    return extent


def rf_histogram(spec: ArchitectureSpec) -> dict[int, int]:
    """Exact path count per receptive-field extent over all 2^n paths."""
    n = len(spec.blocks())
    if n > MAX_ENUMERATED_BLOCKS:
        raise ValueError(f"{n} residual blocks exceed the enumeration guard of {MAX_ENUMERATED_BLOCKS}")
    counts = Counter(receptive_field_of_path(spec, s) for s in range(1 << n))
    return dict(sorted(counts.items()))


def positive_parameters(spec: ArchitectureSpec, seed: int = 0) -> ParameterStore:
    """Strictly positive conv weights so no path cancels in the probe."""
    rng = np.random.default_rng(seed)
    store = network.init_parameters(spec, rng, dtype=np.float64)
    for name, arr in store.params.items():
        if name.endswith(".weight"):
            store.params[name] = rng.uniform(0.1, 1.0, size=arr.shape)
    return store


def numeric_rf_probe(spec: ArchitectureSpec, store: ParameterStore | None = None, size: int | None = None) -> int:
    """Measured receptive field: extent of the non-zero input gradient of the centre output voxel.

    Runs in inference mode so batch norm is pointwise. The input is all ones,
    which with positive weights keeps every ReLU open.
    """
    if store is None:
        store = positive_parameters(spec)
    store = store.astype(np.float64)
    if size is None:
        size = receptive_field_of_path(spec, (1 << len(spec.blocks())) - 1) + 6
    size |= 1
    x = Tensor(np.ones((spec.in_channels, size, size, size)), requires_grad=True)
    stop = spec.index_of("softmax")
    out = network.forward(spec, store, x, "inference", stop=stop)
    seed = np.zeros(out.shape)
    c = size // 2
    seed[0, c, c, c] = 1.0
    out.backward(seed)
    nz = np.argwhere(np.abs(x.grad).sum(axis=0) > 0)
    if nz.size == 0:
        return 0
    extents = nz.max(axis=0) - nz.min(axis=0) + 1
    return int(extents.max())


# ----------------------------------------------------------------------
# border effects


def central_region(arr: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return arr
    sl = tuple(slice(border, s - border) for s in arr.shape[-3:])
    return arr[(Ellipsis,) + sl]


def border_effect_curve(model: Model, dataset, border_sizes, pad: int = 0) -> list[tuple[int, float, float, int]]:
    """(border b, mean DCS on the centred (d-2b)^3 region, standard error, voxels per volume)."""
    borders = [int(b) for b in border_sizes]
    if any(b < 0 for b in borders):
        raise ValueError("border sizes must be >= 0")
    preds = [(predict(model, img, PaddingPolicy(pad))[0], lab) for img, lab in dataset]
    rows = []
    for b in borders:
        values, voxels = [], None
        for pred, lab in preds:
            if min(lab.shape) <= 2 * b:
                raise ValueError(f"border {b} leaves no interior in a {lab.shape} volume")
            p, t = central_region(pred, b), central_region(lab, b)
            voxels = t.size
            values.append(mean_dcs(p, t))
        rows.append((b, float(np.mean(values)), standard_error(values), voxels))
    return rows


def detect_plateau(curve, tol: float = 0.01) -> int:
    """Smallest border from which every larger border stays within ``tol`` of its DCS."""
    for i, (b, dcs, *_rest) in enumerate(curve):
        if all(abs(later[1] - dcs) <= tol for later in curve[i:]):
            return b
    return curve[-1][0]
