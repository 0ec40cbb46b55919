"""PyTorch VGG-19 checkpoint -> VGGW container converter."""

from .convert import (  # noqa: F401
    ConversionManifest,
    LayerRecord,
    MappingError,
    ShapeError,
    convert,
    load_checkpoint,
)

__version__ = "0.1.0"
