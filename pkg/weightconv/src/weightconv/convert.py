"""One-shot converter: PyTorch VGG-19 checkpoint -> VGGW v1 container.

Reads the 16 convolutional trunk layers from a checkpoint in the torchvision
layout (``features.N.weight`` / ``features.N.bias``; ``state_dict`` wrappers
and ``module.`` prefixes are unwrapped), validates the canonical shapes, and
re-serializes the float32 values without recomputation. Fully connected
parameters are dropped.

Convention bridges live here and nowhere else:

* kernel orientation: both this engine's convolution and torch's Conv2d are
  cross-correlations, so kernels are not flipped (``KERNEL_FLIP = False``);
  the activation-parity test pins this.
* input channel order: torchvision's conv1_1 expects RGB input while the
  engine feeds BGR, so by default conv1_1's input channels are permuted to
  BGR. The manifest records which order the emitted file expects.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MappingError",
    "ShapeError",
    "ConversionManifest",
    "LayerRecord",
    "load_checkpoint",
    "convert",
    "VGG19_TRUNK",
]


class MappingError(Exception):
    """The checkpoint is missing (or mislabels) a trunk parameter."""


class ShapeError(Exception):
    """A parameter exists but its shape is not canonical VGG-19."""


KERNEL_FLIP = False  # engine and torch both cross-correlate

VGGW_MAGIC = b"VGGW"
VGGW_VERSION = 1

# (layer name, torchvision features index, in_channels, out_channels)
VGG19_TRUNK: tuple[tuple[str, int, int, int], ...] = (
    ("conv1_1", 0, 3, 64),
    ("conv1_2", 2, 64, 64),
    ("conv2_1", 5, 64, 128),
    ("conv2_2", 7, 128, 128),
    ("conv3_1", 10, 128, 256),
    ("conv3_2", 12, 256, 256),
    ("conv3_3", 14, 256, 256),
    ("conv3_4", 16, 256, 256),
    ("conv4_1", 19, 256, 512),
    ("conv4_2", 21, 512, 512),
    ("conv4_3", 23, 512, 512),
    ("conv4_4", 25, 512, 512),
    ("conv5_1", 28, 512, 512),
    ("conv5_2", 30, 512, 512),
    ("conv5_3", 32, 512, 512),
    ("conv5_4", 34, 512, 512),
)


@dataclass
class LayerRecord:
    name: str
    weight_shape: list[int]
    bias_size: int
    crc32: str


@dataclass
class ConversionManifest:
    source: str
    source_sha256: str
    output: str
    input_channel_order: str  # "bgr" | "rgb"
    kernel_flip: bool
    layers: list[LayerRecord] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _unwrap(raw: dict) -> dict:
    if "state_dict" in raw and isinstance(raw["state_dict"], dict):
        raw = raw["state_dict"]
    return {k.removeprefix("module."): v for k, v in raw.items()}


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Load a checkpoint into float32 numpy arrays keyed by parameter name."""
    import torch

    raw = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(raw, dict):
        raise MappingError(f"checkpoint {path} is not a state dict")
    out: dict[str, np.ndarray] = {}
    for key, value in _unwrap(raw).items():
        if not torch.is_tensor(value):
            continue
        if value.dtype != torch.float32:
            raise MappingError(
                f"{key}: expected float32 parameters, got {value.dtype}"
            )
        out[key] = value.detach().cpu().numpy()
    return out


def _trunk_arrays(params: dict[str, np.ndarray], input_order: str):
    """Pull and validate the 16 conv layers; apply the convention bridges."""
    for name, index, c_in, c_out in VGG19_TRUNK:
        wkey, bkey = f"features.{index}.weight", f"features.{index}.bias"
        if wkey not in params or bkey not in params:
            raise MappingError(f"{name}: checkpoint lacks {wkey} / {bkey}")
        w, b = params[wkey], params[bkey]
        if w.shape != (c_out, c_in, 3, 3):
            raise ShapeError(
                f"{name}: weight shape {tuple(w.shape)}, "
                f"canonical is {(c_out, c_in, 3, 3)}"
            )
        if b.shape != (c_out,):
            raise ShapeError(f"{name}: bias shape {tuple(b.shape)}")
        if KERNEL_FLIP:  # pragma: no cover - torch sources never need it
            w = w[:, :, ::-1, ::-1]
        if name == "conv1_1" and input_order == "bgr":
            w = w[:, ::-1]  # RGB -> BGR along the input-channel axis
        yield name, np.ascontiguousarray(w, dtype="<f4"), \
            np.ascontiguousarray(b, dtype="<f4")


def _write_vggw(fh, layers) -> list[LayerRecord]:
    records = []
    fh.write(VGGW_MAGIC)
    fh.write(struct.pack("<II", VGGW_VERSION, len(layers)))
    for name, w, b in layers:
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", 2))
        crc = 0
        for tensor in (w, b):
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            payload = tensor.tobytes(order="C")
            crc = zlib.crc32(payload, crc)
            fh.write(payload)
        records.append(
            LayerRecord(name, list(w.shape), int(b.shape[0]), f"{crc:08x}")
        )
    return records


def convert(checkpoint, out, manifest_path=None,
            input_order: str = "bgr") -> ConversionManifest:
    """Emit a VGGW v1 file for the checkpoint's conv trunk.

    ``input_order="bgr"`` (default) permutes conv1_1's input channels so the
    emitted network consumes BGR input, matching the engine's preprocessing;
    ``"keep"`` leaves the source (RGB) order untouched. Either way every
    serialized value is a source value, bit for bit.

    The JSON manifest lands next to the output file unless ``manifest_path``
    says otherwise.
    """
    if input_order not in ("bgr", "keep"):
        raise ValueError(f"input_order must be 'bgr' or 'keep', got {input_order!r}")
    checkpoint = Path(checkpoint)
    params = load_checkpoint(checkpoint)
    layers = list(_trunk_arrays(params, input_order))

    out = Path(out)
    with open(out, "wb") as fh:
        records = _write_vggw(fh, layers)

    manifest = ConversionManifest(
        source=str(checkpoint),
        source_sha256=hashlib.sha256(checkpoint.read_bytes()).hexdigest(),
        output=str(out),
        input_channel_order="bgr" if input_order == "bgr" else "rgb",
        kernel_flip=KERNEL_FLIP,
        layers=records,
    )
    if manifest_path is None:
        manifest_path = out.with_suffix(".manifest.json")
    Path(manifest_path).write_text(manifest.to_json(), encoding="ascii")
    return manifest
