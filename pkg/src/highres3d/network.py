"""Declarative architecture, the HighRes3DNet builder, and checkpoints.

The default network is a standalone 3x3x3 convolution followed by nine
pre-activation residual blocks (three per dilation stage r = 1, 2, 4 at widths
16, 32, 64) and a 1x1x1 classifier, twenty convolutions in all. The
``dropout`` variant inserts an 80-kernel 1x1x1 layer with dropout before the
classifier; ``nores`` is the default stack without skip additions.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

LAYER_KINDS = ("conv", "batchnorm", "relu", "dropout", "softmax", "residual-begin", "residual-end")
VARIANTS = ("default", "dropout", "nores")

# (dilation, width, residual blocks)
HIGHRES_STAGES = ((1, 16, 3), (2, 32, 3), (4, 64, 3))
HIGHRES_FIRST_WIDTH = 16
DROPOUT_WIDTH = 80
DROPOUT_KEEP = 0.5


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    kernel: int = 3
    dilation: int = 1
    c_in: int = 0
    c_out: int = 0
    bias: bool = False
    keep_prob: float = 1.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")


@dataclass
class ArchitectureSpec:
    layers: list[LayerSpec]
    num_classes: int
    in_channels: int = 1
    variant: str = "default"
    residual: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        open_block = False
        for layer in self.layers:
            if layer.kind == "residual-begin":
                if open_block:
                    raise ArchitectureError("nested residual blocks")
                open_block = True
            elif layer.kind == "residual-end":
                if not open_block:
                    raise ArchitectureError("residual-end without residual-begin")
                open_block = False
        if open_block:
            raise ArchitectureError("unterminated residual block")
        names = [l.name for l in self.layers if l.name]
        if len(names) != len(set(names)):
            raise ArchitectureError("layer names must be unique")

    @property
    def convs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def blocks(self) -> list[list[LayerSpec]]:
        """Conv layers of each residual block, in network order."""
        out, current = [], None
        for layer in self.layers:
            if layer.kind == "residual-begin":
                current = []
            elif layer.kind == "residual-end":
                out.append(current)
                current = None
            elif layer.kind == "conv" and current is not None:
                current.append(layer)
        return out

    def standalone_convs(self) -> list[LayerSpec]:
        inside, out = False, []
        for layer in self.layers:
            if layer.kind == "residual-begin":
                inside = True
            elif layer.kind == "residual-end":
                inside = False
            elif layer.kind == "conv" and not inside:
                out.append(layer)
        return out

    def index_of(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    @property
    def has_dropout(self) -> bool:
        return any(l.kind == "dropout" for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "variant": self.variant,
            "residual": self.residual,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureSpec:
        return cls([LayerSpec(**l) for l in d["layers"]], d["num_classes"], d["in_channels"],
                   d["variant"], d["residual"])


def build_architecture(stages, num_classes: int, in_channels: int = 1, first_width: int = 16,
                       head_width: int | None = None, keep_prob: float = DROPOUT_KEEP,
                       residual: bool = True, variant: str = "custom") -> ArchitectureSpec:
    """Generic pre-activation residual stack.

    ``stages`` is a sequence of ``(dilation, width, n_blocks)``. With
    ``head_width`` set, a 1x1x1 conv of that width plus dropout precedes the
    classifier.
    """
    if num_classes < 2:
        raise ArchitectureError(f"need at least 2 classes, got {num_classes}")
    L = []
    L.append(LayerSpec("conv", "conv_0", 3, 1, in_channels, first_width))
    L.append(LayerSpec("batchnorm", "bn_0", c_in=first_width, c_out=first_width))
    L.append(LayerSpec("relu", "relu_0"))
    width = first_width
    b = 0
    for dilation, stage_width, n_blocks in stages:
        for _ in range(n_blocks):
            pre = f"block_{b}"
            L.append(LayerSpec("residual-begin", f"{pre}.begin"))
            for j, (cin, cout) in enumerate(((width, stage_width), (stage_width, stage_width))):
                L.append(LayerSpec("batchnorm", f"{pre}.bn_{j}", c_in=cin, c_out=cin))
                L.append(LayerSpec("relu", f"{pre}.relu_{j}"))
                L.append(LayerSpec("conv", f"{pre}.conv_{j}", 3, dilation, cin, cout))
            L.append(LayerSpec("residual-end", f"{pre}.end"))
            width = stage_width
            b += 1
    L.append(LayerSpec("batchnorm", "bn_final", c_in=width, c_out=width))
    L.append(LayerSpec("relu", "relu_final"))
    if head_width:
        L.append(LayerSpec("conv", "conv_head", 1, 1, width, head_width))
        L.append(LayerSpec("batchnorm", "bn_head", c_in=head_width, c_out=head_width))
        L.append(LayerSpec("relu", "relu_head"))
        L.append(LayerSpec("dropout", "dropout", keep_prob=keep_prob))
        width = head_width
    L.append(LayerSpec("conv", "classifier", 1, 1, width, num_classes, bias=True))
    L.append(LayerSpec("softmax", "softmax"))
    return ArchitectureSpec(L, num_classes, in_channels, variant, residual)


def highres3dnet_spec(variant: str = "default", num_classes: int = 160, in_channels: int = 1) -> ArchitectureSpec:
    if variant not in VARIANTS:
        raise ArchitectureError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return build_architecture(
        HIGHRES_STAGES, num_classes, in_channels, HIGHRES_FIRST_WIDTH,
        head_width=DROPOUT_WIDTH if variant == "dropout" else None,
        residual=variant != "nores", variant=variant,
    )


# ----------------------------------------------------------------------
# parameters


@dataclass
class ParameterStore:
    """Trainable tensors (``params``) and batch-norm running statistics (``buffers``)."""
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name] if name in self.params else self.buffers[name]

    def copy(self) -> ParameterStore:
        return ParameterStore({k: v.copy() for k, v in self.params.items()},
                              {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> ParameterStore:
        return ParameterStore({k: v.astype(dtype) for k, v in self.params.items()},
                              {k: v.astype(dtype) for k, v in self.buffers.items()})


def parameter_shapes(spec: ArchitectureSpec) -> tuple[dict[str, tuple], dict[str, tuple]]:
    params, buffers = {}, {}
    for layer in spec.layers:
        if layer.kind == "conv":
            k = layer.kernel
            params[f"{layer.name}.weight"] = (layer.c_out, layer.c_in, k, k, k)
            if layer.bias:
                params[f"{layer.name}.bias"] = (layer.c_out,)
        elif layer.kind == "batchnorm":
            params[f"{layer.name}.gamma"] = (layer.c_in,)
            params[f"{layer.name}.beta"] = (layer.c_in,)
            buffers[f"{layer.name}.running_mean"] = (layer.c_in,)
            buffers[f"{layer.name}.running_var"] = (layer.c_in,)
    return params, buffers


def init_parameters(spec: ArchitectureSpec, rng: np.random.Generator, dtype=np.float32) -> ParameterStore:
    """He-normal conv weights, zero biases, batch-norm scale 1 and shift 0."""
    shapes, buf_shapes = parameter_shapes(spec)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    buffers = {name: (np.zeros(s, dtype) if name.endswith("mean") else np.ones(s, dtype))
               for name, s in buf_shapes.items()}
    return ParameterStore(params, buffers)


def build_highres3dnet(variant: str = "default", num_classes: int = 160, seed: int = 0,
                       in_channels: int = 1) -> tuple[ArchitectureSpec, ParameterStore]:
    spec = highres3dnet_spec(variant, num_classes, in_channels)
    return spec, init_parameters(spec, np.random.default_rng(seed))


def count_parameters(store: ParameterStore) -> int:
    return int(sum(v.size for v in store.params.values()))


def check_compatible(spec: ArchitectureSpec, store: ParameterStore) -> None:
    shapes, buffers = parameter_shapes(spec)
    got = {k: v.shape for k, v in store.params.items()}
    if got != shapes:
        missing = sorted(set(shapes) - set(got))
        extra = sorted(set(got) - set(shapes))
        bad = sorted(k for k in set(shapes) & set(got) if shapes[k] != got[k])
        raise ArchitectureError(f"checkpoint does not match architecture "
                                f"(missing={missing[:3]}, unexpected={extra[:3]}, reshaped={bad[:3]})")
    if set(store.buffers) != set(buffers):
        raise ArchitectureError("checkpoint batch-norm buffers do not match architecture")


# ----------------------------------------------------------------------
# forward


MODES = ("train", "inference", "mc-sample")
NORMS = ("running", "volume")


def leaf_tensors(store: ParameterStore, requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in store.params.items()}


def forward(spec: ArchitectureSpec, store: ParameterStore, x, mode: str = "inference",
            rng: np.random.Generator | None = None, leaves: dict[str, Tensor] | None = None,
            bn_stats: dict | None = None, start: int = 0, stop: int | None = None,
            method: str = "direct", norm: str = "running") -> Tensor:
    """Run ``spec.layers[start:stop]`` on one (C, D, H, W) volume.

    ``train`` uses per-example batch-norm statistics (recorded into
    ``bn_stats`` when given) and samples dropout; ``inference`` applies no
    dropout; ``mc-sample`` samples dropout. Outside train mode ``norm``
    picks the batch-norm statistics: ``running`` averages, or ``volume``
    statistics of the input itself as in training. Dropout draws come from
    ``rng`` only.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if norm not in NORMS:
        raise ValueError(f"unknown batch-norm statistics {norm!r}")
    if leaves is None:
        leaves = leaf_tensors(store, requires_grad=False)
    h = x if isinstance(x, Tensor) else Tensor(x)
    layers = spec.layers[start:stop]
    if start == 0 and h.shape[0] != spec.in_channels:
        raise ShapeError(f"input has {h.shape[0]} channels, network expects {spec.in_channels}")
    if h.ndim != 4:
        raise ShapeError(f"expected a (C, D, H, W) volume, got shape {h.shape}")
    bn_mode = "train" if mode == "train" or norm == "volume" else "inference"
    skip = None
    for layer in layers:
        kind = layer.kind
        if kind == "conv":
            h = ops.conv3d(h, leaves[f"{layer.name}.weight"], layer.dilation, "same",
                           leaves.get(f"{layer.name}.bias"), method)
        elif kind == "batchnorm":
            sink: list = []
            h = ops.batchnorm(h, leaves[f"{layer.name}.gamma"], leaves[f"{layer.name}.beta"],
                              store.buffers[f"{layer.name}.running_mean"],
                              store.buffers[f"{layer.name}.running_var"], bn_mode, stats_out=sink)
            if bn_stats is not None and mode == "train":
                bn_stats[layer.name] = sink[0]
        elif kind == "relu":
            h = h.relu()
        elif kind == "dropout":
            if mode != "inference":
                if rng is None:
                    raise ValueError(f"mode {mode!r} needs an rng for dropout")
                h = ops.dropout(h, layer.keep_prob, rng)
        elif kind == "softmax":
            h = ops.softmax_channels(h)
        elif kind == "residual-begin":
            skip = h
        elif kind == "residual-end":
            if spec.residual:
                h = ops.residual_add(skip, h)
            skip = None
    return h


def apply_bn_stats(store: ParameterStore, stats: dict, momentum: float = ops.BN_MOMENTUM) -> None:
    """Fold observed batch statistics into the running averages (in place)."""
    for name, s in stats.items():
        m, v = ops.update_running(store.buffers[f"{name}.running_mean"],
                                  store.buffers[f"{name}.running_var"], s, momentum)
        store.buffers[f"{name}.running_mean"] = m
        store.buffers[f"{name}.running_var"] = v


# ----------------------------------------------------------------------
# checkpoint archive: magic, u64 manifest length, JSON manifest, raw LE buffers

CHECKPOINT_MAGIC = b"HR3DCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, spec: ArchitectureSpec, store: ParameterStore, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for kind, group in (("param", store.params), ("buffer", store.buffers)):
        for name, arr in group.items():
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            raw = le.tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                            "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    manifest = {"format_version": CHECKPOINT_VERSION, "architecture": spec.to_dict(),
                "tensors": entries, "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ArchitectureSpec, ParameterStore, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint archive")
    head = len(CHECKPOINT_MAGIC)
    if len(data) < head + 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", data[head:head + 8])
    try:
        manifest = json.loads(data[head + 8:head + 8 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    payload = data[head + 8 + n:]
    store = ParameterStore()
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: payload truncated at {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        (store.params if e["kind"] == "param" else store.buffers)[e["name"]] = arr
    spec = ArchitectureSpec.from_dict(manifest["architecture"])
    check_compatible(spec, store)
    return spec, store, manifest["meta"]
