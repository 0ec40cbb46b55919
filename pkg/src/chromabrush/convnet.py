"""VGG-style convolutional trunk: forward evaluation with feature capture and
backpropagation of feature-space gradients to the input pixels.

The network is never trained here. Convolution weights are ingested from a
VGGW container file (see :func:`load_weights`) and treated as constants; the
only gradient ever computed is the one with respect to the input image.

Conventions, fixed across the package:

* activations are ``(channels, height, width)``, float64;
* conv kernels are ``(out_channels, in_channels, 3, 3)`` with stride 1 and
  zero padding 1 (spatial size is preserved);
* pooling is 2x2 stride 2; odd extents keep a partial final window (max over
  the available cells, average divided by the actual cell count);
* ``conv2d`` computes cross-correlation (no kernel flip), matching how the
  kernels are stored.

Capturing a conv layer by name yields its post-activation output (the value
after the relu that follows it); relu and pool layers capture their own
output. One convention everywhere keeps the loss modules unambiguous.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CaptureError,
    CorruptWeightsError,
    NonFiniteError,
    ShapeError,
    TopologyError,
    TruncatedFileError,
    WeightFormatError,
)
from .tensorcore import Tensor

__all__ = [
    "LayerSpec",
    "NetworkTopology",
    "WeightStore",
    "Tape",
    "vgg19_topology",
    "load_weights",
    "save_weights",
    "conv2d",
    "relu",
    "pool2",
    "forward_collect",
    "backprop_to_input",
]

KERNEL = 3
PAD = 1

VGGW_MAGIC = b"VGGW"
VGGW_VERSION = 1

FeatureSet = dict[str, Tensor]


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the trunk: a 3x3 conv, a relu, or a 2x2 pool."""

    name: str
    kind: str  # "conv" | "relu" | "pool"
    in_channels: int = 0
    out_channels: int = 0
    pool_mode: str = "avg"  # only meaningful for kind == "pool"

    def __post_init__(self):
        if self.kind not in ("conv", "relu", "pool"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError(f"conv layer {self.name!r} needs channel counts")
        if self.kind == "pool" and self.pool_mode not in ("max", "avg"):
            raise ValueError(f"pool layer {self.name!r}: bad mode {self.pool_mode!r}")


class NetworkTopology:
    """Ordered layer stack with validated channel chaining from a 3-channel input."""

    def __init__(self, layers: Sequence[LayerSpec], input_channels: int = 3):
        layers = tuple(layers)
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise TopologyError("layer names must be unique")
        channels = input_channels
        for spec in layers:
            if spec.kind == "conv":
                if spec.in_channels != channels:
                    raise TopologyError(
                        f"{spec.name}: expects {spec.in_channels} input channels, "
                        f"but {channels} arrive"
                    )
                channels = spec.out_channels
        self.layers = layers
        self.input_channels = input_channels
        self._index = {l.name: i for i, l in enumerate(layers)}

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(l.name for l in self.layers)

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    def index(self, name: str) -> int:
        if name not in self._index:
            raise CaptureError(name)
        return self._index[name]

    def conv_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == "conv")


def vgg19_topology(pooling: str = "avg") -> NetworkTopology:
    """The 16-conv trunk: blocks of (2, 2, 4, 4, 4) convs at (64, 128, 256,
    512, 512) channels, each conv followed by a relu, each block by a pool.
    Fully connected layers are omitted."""
    if pooling not in ("max", "avg"):
        raise ValueError(f"pooling must be 'max' or 'avg', got {pooling!r}")
    widths = (64, 128, 256, 512, 512)
    depths = (2, 2, 4, 4, 4)
    layers: list[LayerSpec] = []
    channels = 3
    for block, (width, depth) in enumerate(zip(widths, depths), start=1):
        for i in range(1, depth + 1):
            layers.append(
                LayerSpec(f"conv{block}_{i}", "conv", channels, width)
            )
            layers.append(LayerSpec(f"relu{block}_{i}", "relu"))
            channels = width
        layers.append(LayerSpec(f"pool{block}", "pool", pool_mode=pooling))
    return NetworkTopology(layers)


class WeightStore:
    """Conv weights and biases keyed by layer name. Immutable once built."""

    def __init__(self, entries: Mapping[str, tuple[Tensor, Tensor]]):
        self._entries = dict(entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def get(self, name: str) -> tuple[Tensor, Tensor]:
        return self._entries[name]

    def items(self):
        return self._entries.items()

    def validate_for(self, topology: NetworkTopology) -> None:
        """Check this store covers the topology's conv layers exactly."""
        conv = {l.name: l for l in topology.conv_layers()}
        missing = sorted(set(conv) - set(self._entries))
        if missing:
            raise TopologyError(f"missing conv layers: {', '.join(missing)}")
        extra = sorted(set(self._entries) - set(conv))
        if extra:
            raise TopologyError(f"unexpected layers: {', '.join(extra)}")
        for name, spec in conv.items():
            w, b = self._entries[name]
            want = (spec.out_channels, spec.in_channels, KERNEL, KERNEL)
            if w.shape != want:
                raise TopologyError(
                    f"{name}: weight shape {w.shape}, topology wants {want}"
                )
            if b.shape != (spec.out_channels,):
                raise TopologyError(
                    f"{name}: bias shape {b.shape}, topology wants ({spec.out_channels},)"
                )


# ---------------------------------------------------------------------------
# VGGW container format (little-endian throughout):
#   magic "VGGW" | u32 version == 1 | u32 layer_count
#   per layer: u16 name_len | name utf-8 | u8 tensor_count == 2
#   per tensor: u32 ndim | ndim * u32 extents | prod(extents) * f32
# Weight extents are (out, in, 3, 3); bias extents are (out,).
# ---------------------------------------------------------------------------


def save_weights(path, topology: NetworkTopology, store: WeightStore) -> None:
    """Write a VGGW v1 file with the topology's conv layers in order."""
    store.validate_for(topology)
    with open(path, "wb") as fh:
        conv = topology.conv_layers()
        fh.write(VGGW_MAGIC)
        fh.write(struct.pack("<II", VGGW_VERSION, len(conv)))
        for spec in conv:
            name = spec.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", 2))
            for tensor in store.get(spec.name):
                shape = tensor.shape
                fh.write(struct.pack("<I", len(shape)))
                fh.write(struct.pack(f"<{len(shape)}I", *shape))
                fh.write(tensor.array.astype("<f4").tobytes(order="C"))


class _Reader:
    """Byte cursor that reports the offset of any truncation."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(f"file ends inside {what}", self.pos)
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path, topology: NetworkTopology) -> WeightStore:
    """Read a VGGW file and validate it against the topology.

    Raises :class:`WeightFormatError` for container damage,
    :class:`TruncatedFileError` (with the byte offset) for short files,
    :class:`TopologyError` for layer/shape mismatches and
    :class:`CorruptWeightsError` for non-finite values.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != VGGW_MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {VGGW_MAGIC!r}")
    version = r.u32("version")
    if version != VGGW_VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    layer_count = r.u32("layer count")

    entries: dict[str, tuple[Tensor, Tensor]] = {}
    for _ in range(layer_count):
        name_len = r.u16("layer name length")
        raw = r.take(name_len, "layer name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"undecodable layer name at offset {r.pos}") from exc
        if "\x00" in name:
            raise WeightFormatError(f"layer name contains NUL: {name!r}")
        if name in entries:
            raise WeightFormatError(f"duplicate layer {name!r}")
        tensor_count = r.u8(f"{name}: tensor count")
        if tensor_count != 2:
            raise WeightFormatError(f"{name}: expected 2 tensors, got {tensor_count}")
        tensors = []
        for which in ("weights", "bias"):
            ndim = r.u32(f"{name} {which}: ndim")
            if ndim == 0 or ndim > 8:
                raise WeightFormatError(f"{name} {which}: implausible ndim {ndim}")
            extents = struct.unpack(
                f"<{ndim}I", r.take(4 * ndim, f"{name} {which}: extents")
            )
            if any(e == 0 for e in extents):
                raise WeightFormatError(f"{name} {which}: zero extent {extents}")
            count = 1
            for e in extents:
                count *= e
            raw_vals = r.take(4 * count, f"{name} {which}: values")
            values = np.frombuffer(raw_vals, dtype="<f4").astype(np.float64)
            if not np.all(np.isfinite(values)):
                raise CorruptWeightsError(f"{name} {which}: non-finite values")
            try:
                tensors.append(Tensor(values.reshape(extents)))
            except NonFiniteError as exc:  # pragma: no cover - guarded above
                raise CorruptWeightsError(str(exc)) from exc
        entries[name] = (tensors[0], tensors[1])
    if r.pos != len(blob):
        raise WeightFormatError(
            f"{len(blob) - r.pos} trailing bytes after last layer"
        )

    store = WeightStore(entries)
    store.validate_for(topology)
    return store


def layer_checksums(store: WeightStore) -> dict[str, str]:
    """CRC32 of each layer's raw little-endian f32 bytes (weights then bias)."""
    out = {}
    for name, (w, b) in sorted(store.items()):
        crc = zlib.crc32(w.array.astype("<f4").tobytes())
        crc = zlib.crc32(b.array.astype("<f4").tobytes(), crc)
        out[name] = f"{crc:08x}"
    return out


# ---------------------------------------------------------------------------
# Layer kernels. Public wrappers take/return Tensors and validate shapes; the
# underscore versions work on plain ndarrays and are shared with the tape.
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patch matrix for a 3x3/stride-1/pad-1 window."""
    c, h, w = x.shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=np.float64)
    padded[:, PAD : PAD + h, PAD : PAD + w] = x
    cols = np.empty((c, KERNEL * KERNEL, h, w), dtype=np.float64)
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            cols[:, dy * KERNEL + dx] = padded[:, dy : dy + h, dx : dx + w]
    return cols.reshape(c * KERNEL * KERNEL, h * w)


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    c_out = w.shape[0]
    h, wid = x.shape[1], x.shape[2]
    cols = _im2col(x)
    out = w.reshape(c_out, -1) @ cols
    out += b[:, None]
    return out.reshape(c_out, h, wid)


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Adjoint of cross-correlation: correlate the output gradient with the
    # spatially flipped kernels, swapping the channel axes.
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv2d(g, w_flip, np.zeros(w_flip.shape[0], dtype=np.float64))


def _pool_geometry(h: int, w: int) -> tuple[int, int]:
    return (h + 1) // 2, (w + 1) // 2


def _pool2_forward(x: np.ndarray, mode: str):
    """Returns (out, ctx) where ctx carries what backward needs."""
    c, h, w = x.shape
    ho, wo = _pool_geometry(h, w)
    fill = -np.inf if mode == "max" else 0.0
    padded = np.full((c, 2 * ho, 2 * wo), fill, dtype=np.float64)
    padded[:, :h, :w] = x
    blocks = padded.reshape(c, ho, 2, wo, 2)
    if mode == "max":
        out = blocks.max(axis=(2, 4))
        return out, {"mode": mode, "padded": padded, "out": out, "shape": (c, h, w)}
    ones = np.zeros((2 * ho, 2 * wo), dtype=np.float64)
    ones[:h, :w] = 1.0
    counts = ones.reshape(ho, 2, wo, 2).sum(axis=(1, 3))
    out = blocks.sum(axis=(2, 4)) / counts
    return out, {"mode": mode, "counts": counts, "shape": (c, h, w)}


def _pool2_backward(g: np.ndarray, ctx: dict) -> np.ndarray:
    c, h, w = ctx["shape"]
    ho, wo = _pool_geometry(h, w)
    grad = np.zeros((c, 2 * ho, 2 * wo), dtype=np.float64)
    if ctx["mode"] == "max":
        padded, out = ctx["padded"], ctx["out"]
        remaining = np.ones_like(out, dtype=bool)
        # Row-major scan of the window; ties go to the first maximal cell.
        for dy in (0, 1):
            for dx in (0, 1):
                cell = padded[:, dy::2, dx::2]
                take = remaining & (cell == out)
                grad[:, dy::2, dx::2][take] = g[take]
                remaining &= ~take
    else:
        share = g / ctx["counts"]
        for dy in (0, 1):
            for dx in (0, 1):
                grad[:, dy::2, dx::2] = share
    return grad[:, :h, :w]


def conv2d(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """3x3 stride-1 cross-correlation with zero padding 1; same spatial size out."""
    if input.ndim != 3:
        raise ShapeError(f"conv2d input must be (C,H,W), got {input.shape}")
    if weights.ndim != 4 or weights.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"conv2d weights must be (out,in,3,3), got {weights.shape}")
    if bias.ndim != 1 or bias.shape[0] != weights.shape[0]:
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape}")
    if weights.shape[1] != input.shape[0]:
        raise ShapeError(
            f"input has {input.shape[0]} channels, weights expect {weights.shape[1]}"
        )
    return Tensor._wrap(_conv2d(input.array, weights.array, bias.array))


def relu(input: Tensor) -> Tensor:
    """Element-wise max(0, v)."""
    return Tensor._wrap(np.maximum(input.array, 0.0))


def pool2(input: Tensor, mode: str = "max") -> Tensor:
    """2x2 stride-2 pooling per channel; odd extents keep a partial window."""
    if mode not in ("max", "avg"):
        raise ValueError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    if input.ndim != 3:
        raise ShapeError(f"pool2 input must be (C,H,W), got {input.shape}")
    out, _ = _pool2_forward(input.array, mode)
    return Tensor._wrap(out)


# ---------------------------------------------------------------------------
# Forward with capture, and the backward walk.
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Forward intermediates for one pass; consumed by :func:`backprop_to_input`."""

    input_shape: tuple[int, ...]
    records: list = field(default_factory=list)
    capture_points: dict[str, int] = field(default_factory=dict)
    capture_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)


def _resolve_captures(
    topology: NetworkTopology, capture: Iterable[str]
) -> dict[str, int]:
    """Map each requested name to the layer index whose output is captured.

    Conv names resolve to the relu that follows them (post-activation
    capture); relu and pool names resolve to themselves.
    """
    points: dict[str, int] = {}
    for name in capture:
        idx = topology.index(name)
        spec = topology.layers[idx]
        if spec.kind == "conv":
            nxt = idx + 1
            if nxt < len(topology.layers) and topology.layers[nxt].kind == "relu":
                idx = nxt
        points[name] = idx
    return points


def forward_collect(
    x: Tensor,
    topology: NetworkTopology,
    weights: WeightStore,
    capture: Iterable[str],
) -> tuple[FeatureSet, Tape]:
    """Run the trunk over ``x`` and capture the named layers' outputs.

    Evaluation stops after the deepest captured layer; the returned tape keeps
    every intermediate needed to backpropagate feature gradients to ``x``.
    """
    if x.ndim != 3 or x.shape[0] != topology.input_channels:
        raise ShapeError(
            f"input must be ({topology.input_channels},H,W), got {x.shape}"
        )
    points = _resolve_captures(topology, capture)
    deepest = max(points.values()) if points else -1

    tape = Tape(input_shape=x.shape)
    features: FeatureSet = {}
    by_index: dict[int, list[str]] = {}
    for name, idx in points.items():
        by_index.setdefault(idx, []).append(name)

    cur = x.array
    for i in range(deepest + 1):
        spec = topology.layers[i]
        if spec.kind == "conv":
            w, b = weights.get(spec.name)
            cur = _conv2d(cur, w.array, b.array)
            tape.records.append(("conv", w.array))
        elif spec.kind == "relu":
            cur = np.maximum(cur, 0.0)
            tape.records.append(("relu", cur > 0.0))
        else:
            cur, ctx = _pool2_forward(cur, spec.pool_mode)
            tape.records.append(("pool", ctx))
        for name in by_index.get(i, ()):
            t = Tensor._wrap(cur.copy())
            features[name] = t
            tape.capture_points[name] = i
            tape.capture_shapes[name] = t.shape
    return features, tape


def backprop_to_input(tape: Tape, feature_grads: Mapping[str, Tensor]) -> Tensor:
    """Backpropagate captured-feature gradients to the input pixels.

    Returns the gradient of ``sum_l <feature_grads[l], F_l>`` (as composed by
    the caller's loss) with respect to the input tensor the tape was built
    from. Relu backward zeroes the gradient where the forward activation was
    <= 0; max-pool routes to the first maximal cell, avg-pool spreads evenly.
    """
    inject: dict[int, np.ndarray] = {}
    for name, g in feature_grads.items():
        if name not in tape.capture_points:
            raise CaptureError(name)
        if g.shape != tape.capture_shapes[name]:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, "
                f"feature was {tape.capture_shapes[name]}"
            )
        idx = tape.capture_points[name]
        if idx in inject:
            inject[idx] = inject[idx] + g.array
        else:
            inject[idx] = np.asarray(g.array, dtype=np.float64)

    grad: np.ndarray | None = None
    for i in range(len(tape.records) - 1, -1, -1):
        if i in inject:
            grad = inject[i].copy() if grad is None else grad + inject[i]
        if grad is None:
            continue
        kind, payload = tape.records[i]
        if kind == "conv":
            grad = _conv2d_input_grad(grad, payload)
        elif kind == "relu":
            grad = grad * payload
        else:
            grad = _pool2_backward(grad, payload)
    if grad is None:
        grad = np.zeros(tape.input_shape, dtype=np.float64)
    return Tensor._wrap(grad)
