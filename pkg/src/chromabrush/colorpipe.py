"""End-to-end colorization pipeline.

A run takes a grayscale content image and a color style image, extracts
frozen targets (content features at one layer, Gram matrices at the style
layers), then optimizes the pixels of a canvas so that its features match
both, while the style weight decays multiplicatively every iteration.

Pixel tensors everywhere in this module are in *preprocessed units*:
``(3, H, W)`` float64, channel order B, G, R, with the fixed channel means
subtracted. That is the convention the ingested conv weights expect.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import convnet, optim, styleloss
from .convnet import NetworkTopology, WeightStore, vgg19_topology
from .errors import ChromabrushError, ConfigError, DecodeError, NonFiniteError, SizeError
from .styleloss import LossTargets, LossWeights
from .tensorcore import Tensor

__all__ = [
    "CHANNEL_MEANS_BGR",
    "RunConfig",
    "LossLayerConfig",
    "StyleWeightSchedule",
    "ImageBuffer",
    "TraceRow",
    "RunResult",
    "CompareResult",
    "preprocess",
    "deprocess",
    "write_png",
    "initialize_canvas",
    "resize_buffer",
    "prepare_targets",
    "run_colorization",
    "compare_optimizers",
    "write_trace_csv",
    "trace_csv_text",
]

# Means to subtract from (B, G, R) channels of 0..255 pixel values; the
# ingestion contract of the pretrained weights, not a tunable.
CHANNEL_MEANS_BGR = (103.939, 116.779, 123.68)

NOISE_STD = 30.0
MIN_SIDE = 16

DEFAULT_CONTENT_LAYER = "conv4_2"
DEFAULT_STYLE_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")

COMPARE_PANELS = ("a", "b", "c", "d")  # sgd/fixed, sgd/decay, lbfgs/fixed, lbfgs/decay
DEFAULT_SGD_LR_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


def _default_layer_weights() -> dict[str, float]:
    return {name: 1.0 / len(DEFAULT_STYLE_LAYERS) for name in DEFAULT_STYLE_LAYERS}


@dataclass(frozen=True)
class LossLayerConfig:
    """Which layers feed the content and style terms, and the per-layer w_l."""

    content_layer: str = DEFAULT_CONTENT_LAYER
    style_layers: tuple[str, ...] = DEFAULT_STYLE_LAYERS
    layer_weights: Mapping[str, float] = field(default_factory=_default_layer_weights)

    def __post_init__(self):
        if set(self.layer_weights) != set(self.style_layers):
            raise ConfigError("layer_weights keys must equal style_layers")

    @classmethod
    def uniform(cls, content_layer: str, style_layers: Sequence[str]) -> "LossLayerConfig":
        layers = tuple(style_layers)
        return cls(content_layer, layers, {n: 1.0 / len(layers) for n in layers})


@dataclass
class RunConfig:
    """Everything one colorization run needs; CLI flags map onto this 1:1."""

    content_path: str | Path
    style_path: str | Path
    output_path: str | Path
    weights_path: str | Path | None = None
    iterations: int = 1000
    alpha: float = 1.0
    beta0: float | None = None  # resolved to 1e3 * alpha when unset
    decay_per_iter: float = 0.0025
    optimizer: str = "lbfgs"
    pooling: str = "avg"
    init: str = "noise"
    seed: int = 0
    max_side: int = 512
    sgd_lr: float = 1.0

    def __post_init__(self):
        if self.beta0 is None:
            self.beta0 = 1e3 * self.alpha
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not (0.0 <= self.decay_per_iter < 1.0):
            raise ConfigError("decay_per_iter must lie in [0, 1)")
        if self.max_side < 32:
            raise ConfigError("max_side must be >= 32")
        if self.optimizer not in ("lbfgs", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.pooling not in ("avg", "max"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.init not in ("noise", "content"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.alpha < 0 or self.beta0 < 0:
            raise ConfigError("alpha and beta0 must be nonnegative")
        if self.alpha + self.beta0 <= 0:
            raise ConfigError("alpha + beta0 must be positive")
        if self.sgd_lr <= 0:
            raise ConfigError("sgd_lr must be positive")


class StyleWeightSchedule:
    """Multiplicative style-weight decay: beta(k) = beta0 * (1 - decay)^k.

    State is exact rational arithmetic, so consecutive betas have the exact
    ratio (1 - decay); the float accessor rounds each value once.
    """

    def __init__(self, beta0: float, decay_per_iter: float = 0.0025):
        if beta0 < 0:
            raise ConfigError("beta0 must be nonnegative")
        if not (0.0 <= decay_per_iter < 1.0):
            raise ConfigError("decay_per_iter must lie in [0, 1)")
        self.beta0 = float(beta0)
        self.decay_per_iter = float(decay_per_iter)
        self._beta0 = Fraction(self.beta0)
        self._ratio = Fraction(1) - Fraction(self.decay_per_iter)

    @property
    def ratio(self) -> float:
        return float(self._ratio)

    def ratio_exact(self) -> Fraction:
        return self._ratio

    def beta_exact(self, k: int) -> Fraction:
        if k < 0:
            raise ValueError("iteration index must be >= 0")
        return self._beta0 * self._ratio**k

    def beta(self, k: int) -> float:
        return float(self.beta_exact(k))


@dataclass
class ImageBuffer:
    """Preprocessed pixels plus where they came from."""

    pixels: Tensor  # (3, H, W), BGR, mean-subtracted
    source_size: tuple[int, int]  # (width, height) before any resize
    provenance: str  # "content" | "style" | "canvas"

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def _decode(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return img


def preprocess(path, max_side: int = 512, force_grayscale: bool = False,
               provenance: str = "content") -> ImageBuffer:
    """Decode, optionally gray out, cap the longer side, and normalize.

    Images are never upscaled; a source whose longer side exceeds
    ``max_side`` is shrunk (bicubic, aspect preserved). Single-channel
    sources are replicated into three channels. Channels are reordered to
    B, G, R and the fixed channel means subtracted.
    """
    img = _decode(path)
    single = img.mode in ("1", "L", "LA", "I", "I;16", "F")
    if force_grayscale or single:
        img = img.convert("L")
    else:
        img = img.convert("RGB")
    source_size = img.size

    w, h = img.size
    longer = max(w, h)
    if longer > max_side:
        scale = max_side / longer
        new_w = max(1, round(w * scale))
        new_h = max(1, round(h * scale))
        if w >= h:
            new_w = max_side
        else:
            new_h = max_side
        img = img.resize((new_w, new_h), Image.BICUBIC)
    w, h = img.size
    if w < MIN_SIDE or h < MIN_SIDE:
        raise SizeError(f"image {path} is {w}x{h} after resize; need >= 16x16")

    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        rgb = np.stack([arr, arr, arr], axis=-1)
    else:
        rgb = arr
    bgr = rgb[:, :, ::-1].transpose(2, 0, 1).copy()
    for c, mean in enumerate(CHANNEL_MEANS_BGR):
        bgr[c] -= mean
    return ImageBuffer(Tensor._wrap(bgr), source_size, provenance)


def deprocess(img: ImageBuffer) -> np.ndarray:
    """Back to an (H, W, 3) uint8 RGB array: add means, reorder, clamp, round."""
    bgr = np.array(img.pixels.array, dtype=np.float64)
    for c, mean in enumerate(CHANNEL_MEANS_BGR):
        bgr[c] += mean
    rgb = bgr[::-1].transpose(1, 2, 0)
    rgb = np.clip(rgb, 0.0, 255.0)
    return np.rint(rgb).astype(np.uint8)  # rint rounds half to even


def write_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def initialize_canvas(config: RunConfig, content: ImageBuffer) -> ImageBuffer:
    """Fresh canvas: seeded Gaussian noise, or a copy of the content buffer."""
    if config.init == "content":
        return ImageBuffer(content.pixels, content.source_size, "canvas")
    rng = np.random.default_rng(config.seed)
    noise = rng.normal(0.0, NOISE_STD, size=content.pixels.shape)
    return ImageBuffer(Tensor._wrap(noise), content.source_size, "canvas")


def resize_buffer(img: ImageBuffer, height: int, width: int) -> ImageBuffer:
    """Bicubic resize of a preprocessed buffer to exact target dimensions."""
    if (img.height, img.width) == (height, width):
        return img
    channels = []
    for c in range(3):
        plane = Image.fromarray(img.pixels.array[c].astype(np.float32), mode="F")
        plane = plane.resize((width, height), Image.BICUBIC)
        channels.append(np.asarray(plane, dtype=np.float64))
    return ImageBuffer(Tensor._wrap(np.stack(channels)), img.source_size, img.provenance)


def prepare_targets(
    content: ImageBuffer,
    style: ImageBuffer,
    topology: NetworkTopology,
    weights: WeightStore,
    layers: LossLayerConfig | None = None,
) -> LossTargets:
    """Run both images through the trunk once and freeze the loss targets.

    The style buffer is resized to the content's dimensions first so the
    position counts match per layer.
    """
    layers = layers or LossLayerConfig()
    style = resize_buffer(style, content.height, content.width)
    content_feats, _ = convnet.forward_collect(
        content.pixels, topology, weights, {layers.content_layer}
    )
    style_feats, _ = convnet.forward_collect(
        style.pixels, topology, weights, set(layers.style_layers)
    )
    content_target = styleloss.feature_matrix(content_feats[layers.content_layer])
    style_targets = {
        name: styleloss.gram(styleloss.feature_matrix(style_feats[name]))
        for name in layers.style_layers
    }
    return LossTargets(layers.content_layer, content_target, style_targets)


@dataclass(frozen=True)
class TraceRow:
    """One optimizer iteration as serialized into the trace CSV."""

    iteration: int
    beta: float
    total: float
    content: float
    style: float
    grad_norm: float
    step: float


@dataclass
class RunResult:
    output_path: Path | None
    trace: list[TraceRow]
    failed: bool = False
    message: str | None = None

    @property
    def final_total(self) -> float:
        return self.trace[-1].total if self.trace else float("inf")


class _PixelObjective:
    """Loss-and-gradient callback over flattened canvas pixels.

    ``set_iteration`` pins the schedule index; every evaluation inside that
    iteration sees the same beta. Evaluations that overflow to non-finite
    values report an infinite loss and a zero gradient, so the line search
    backs away instead of crashing.
    """

    def __init__(self, shape, topology, weights, layers, targets, alpha, schedule):
        self.shape = shape
        self.topology = topology
        self.weights = weights
        self.layers = layers
        self.targets = targets
        self.alpha = alpha
        self.schedule = schedule
        self.capture = {layers.content_layer} | set(layers.style_layers)
        self.beta = schedule.beta(0)
        self.last: dict[str, float] = {}

    def set_iteration(self, k: int) -> None:
        self.beta = self.schedule.beta(k)

    def _overflow(self, size: int) -> tuple[float, np.ndarray]:
        self.last = {
            "beta": self.beta,
            "content": float("inf"),
            "style": float("inf"),
        }
        return float("inf"), np.zeros(size, dtype=np.float64)

    def __call__(self, x_flat: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                x = Tensor(np.asarray(x_flat, dtype=np.float64).reshape(self.shape))
                feats, tape = convnet.forward_collect(
                    x, self.topology, self.weights, self.capture
                )
                weights = LossWeights(
                    self.alpha, self.beta, self.layers.layer_weights
                )
                total = styleloss.total_loss_grad(self.targets, feats, weights)
                grad = convnet.backprop_to_input(tape, total.feature_grads)
        except NonFiniteError:
            return self._overflow(x_flat.size)
        if not np.isfinite(total.loss):
            return self._overflow(x_flat.size)
        self.last = {
            "beta": self.beta,
            "content": total.content_part,
            "style": total.style_part,
        }
        return total.loss, np.array(grad.data, dtype=np.float64)


@dataclass
class _RunContext:
    topology: NetworkTopology
    weights: WeightStore
    layers: LossLayerConfig
    content: ImageBuffer
    style: ImageBuffer
    targets: LossTargets


def _prepare(config: RunConfig, topology=None, weights=None, layers=None,
             targets=None) -> _RunContext:
    if topology is None:
        topology = vgg19_topology(config.pooling)
    if weights is None:
        if config.weights_path is None:
            raise ConfigError("no weight file configured")
        weights = convnet.load_weights(config.weights_path, topology)
    layers = layers or LossLayerConfig()
    content = preprocess(
        config.content_path, config.max_side, force_grayscale=True,
        provenance="content",
    )
    style = preprocess(
        config.style_path, config.max_side, force_grayscale=False,
        provenance="style",
    )
    if targets is None:
        targets = prepare_targets(content, style, topology, weights, layers)
    return _RunContext(topology, weights, layers, content, style, targets)


def _optimize(ctx: _RunContext, config: RunConfig, output_path,
              progress: Callable[[TraceRow], None] | None = None) -> RunResult:
    canvas = initialize_canvas(config, ctx.content)
    schedule = StyleWeightSchedule(config.beta0, config.decay_per_iter)
    objective = _PixelObjective(
        canvas.pixels.shape, ctx.topology, ctx.weights, ctx.layers,
        ctx.targets, config.alpha, schedule,
    )

    rows: list[TraceRow] = []

    def on_record(rec: optim.TraceRecord) -> None:
        row = TraceRow(
            iteration=rec.iteration,
            beta=rec.extras.get("beta", float("nan")),
            total=rec.loss,
            content=rec.extras.get("content", float("nan")),
            style=rec.extras.get("style", float("nan")),
            grad_norm=rec.grad_norm,
            step=rec.step,
        )
        rows.append(row)
        if progress is not None:
            progress(row)

    result = optim.minimize(
        objective,
        np.array(canvas.pixels.data),
        method=config.optimizer,
        iterations=config.iterations,
        sgd_learning_rate=config.sgd_lr,
        hook=objective.set_iteration,
        extras_fn=lambda: objective.last,
        callback=on_record,
    )

    x = result.x
    failed, message = result.failed, result.message
    if not np.all(np.isfinite(x)):
        # Divergence (e.g. an oversized SGD step); export clamps anyway.
        x = np.nan_to_num(x, nan=0.0, posinf=1e6, neginf=-1e6)
        failed, message = True, "pixels diverged to non-finite values"
    final = ImageBuffer(
        Tensor(x.reshape(canvas.pixels.shape)),
        ctx.content.source_size,
        "canvas",
    )
    output_path = Path(output_path)
    write_png(output_path, deprocess(final))
    return RunResult(output_path, rows, failed=failed, message=message)


def run_colorization(
    config: RunConfig,
    *,
    topology: NetworkTopology | None = None,
    weights: WeightStore | None = None,
    layers: LossLayerConfig | None = None,
    targets: LossTargets | None = None,
    progress: Callable[[TraceRow], None] | None = None,
) -> RunResult:
    """Execute one full colorization run and write the output image.

    ``topology``/``weights``/``layers``/``targets`` default to the standard
    trunk loaded from ``config.weights_path``; tests inject small stand-ins.
    On a line-search hard failure the best image reached so far is still
    written and the result is flagged.
    """
    ctx = _prepare(config, topology, weights, layers, targets)
    return _optimize(ctx, config, config.output_path, progress)


@dataclass
class CompareResult:
    runs: dict[str, RunResult]
    image_paths: dict[str, Path]
    trace_path: Path
    sweeps: dict[str, list[tuple[float, float]]]  # panel -> [(lr, final loss)]


def compare_optimizers(
    config: RunConfig,
    *,
    topology: NetworkTopology | None = None,
    weights: WeightStore | None = None,
    layers: LossLayerConfig | None = None,
    sgd_lr_grid: Sequence[float] = DEFAULT_SGD_LR_GRID,
    progress: Callable[[str, TraceRow], None] | None = None,
) -> CompareResult:
    """Run the 2x2 optimizer matrix over shared targets and seed.

    Panels: (a) sgd fixed weight, (b) sgd decaying, (c) lbfgs fixed,
    (d) lbfgs decaying. The SGD panels sweep the learning-rate grid and keep
    the run with the lowest final loss. Panel failures are recorded and the
    remaining panels still run.
    """
    if not sgd_lr_grid:
        raise ConfigError("sgd_lr_grid must not be empty")
    ctx = _prepare(config, topology, weights, layers)
    decay = config.decay_per_iter
    matrix = {
        "a": ("sgd", 0.0),
        "b": ("sgd", decay),
        "c": ("lbfgs", 0.0),
        "d": ("lbfgs", decay),
    }
    out = Path(config.output_path)
    stem = out.parent / out.stem

    runs: dict[str, RunResult] = {}
    image_paths: dict[str, Path] = {}
    sweeps: dict[str, list[tuple[float, float]]] = {}
    for panel in COMPARE_PANELS:
        method, panel_decay = matrix[panel]
        panel_path = Path(f"{stem}-{panel}.png")
        panel_cfg = replace(
            config, optimizer=method, decay_per_iter=panel_decay,
            output_path=panel_path,
        )
        hook = (lambda row, p=panel: progress(p, row)) if progress else None
        try:
            if method == "sgd":
                best: RunResult | None = None
                sweep: list[tuple[float, float]] = []
                for lr in sgd_lr_grid:
                    attempt = _optimize(
                        ctx, replace(panel_cfg, sgd_lr=lr), panel_path, hook
                    )
                    sweep.append((lr, attempt.final_total))
                    if best is None or attempt.final_total < best.final_total:
                        best = attempt
                        best_lr = lr
                # Re-run the winner so the saved image matches the kept trace.
                if best is not None and sweep[-1][0] != best_lr:
                    best = _optimize(
                        ctx, replace(panel_cfg, sgd_lr=best_lr), panel_path, hook
                    )
                sweeps[panel] = sweep
                runs[panel] = best
            else:
                runs[panel] = _optimize(ctx, panel_cfg, panel_path, hook)
        except (ChromabrushError, OSError) as exc:  # isolate panel failures
            runs[panel] = RunResult(None, [], failed=True, message=str(exc))
        image_paths[panel] = panel_path

    trace_path = Path(f"{stem}-trace.csv")
    panel_rows = [
        (panel, row) for panel in COMPARE_PANELS for row in runs[panel].trace
    ]
    write_trace_csv(trace_path, panel_rows, with_panel=True)
    return CompareResult(runs, image_paths, trace_path, sweeps)


# ---------------------------------------------------------------------------
# Trace serialization: floats carry 9 significant digits.
# ---------------------------------------------------------------------------

TRACE_HEADER = ["iter", "beta", "total", "content", "style", "grad_norm", "step"]


def _fmt(v: float) -> str:
    return "%.9g" % v


def _csv_rows(rows, with_panel: bool):
    header = (["panel"] + TRACE_HEADER) if with_panel else TRACE_HEADER
    yield header
    for item in rows:
        panel, row = item if with_panel else (None, item)
        fields = [
            str(row.iteration),
            _fmt(row.beta),
            _fmt(row.total),
            _fmt(row.content),
            _fmt(row.style),
            _fmt(row.grad_norm),
            _fmt(row.step),
        ]
        yield ([panel] + fields) if with_panel else fields


def trace_csv_text(rows, with_panel: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for record in _csv_rows(rows, with_panel):
        writer.writerow(record)
    return buf.getvalue()


def write_trace_csv(path, rows, with_panel: bool = False) -> None:
    Path(path).write_text(trace_csv_text(rows, with_panel), encoding="ascii")
