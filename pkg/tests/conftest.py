"""Shared fixtures: stand-in networks, random weight stores, tiny images."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from chromabrush import convnet
from chromabrush.colorpipe import LossLayerConfig
from chromabrush.convnet import LayerSpec, NetworkTopology, WeightStore
from chromabrush.tensorcore import Tensor


def conv_block(name: str, c_in: int, c_out: int) -> list[LayerSpec]:
    return [
        LayerSpec(f"conv{name}", "conv", c_in, c_out),
        LayerSpec(f"relu{name}", "relu"),
    ]


def random_store(topology: NetworkTopology, seed: int = 0) -> WeightStore:
    """He-scaled Gaussian weights so stacked activations stay O(input)."""
    rng = np.random.default_rng(seed)
    entries = {}
    for spec in topology.conv_layers():
        fan_in = spec.in_channels * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (spec.out_channels, spec.in_channels, 3, 3))
        b = np.zeros(spec.out_channels)
        entries[spec.name] = (Tensor(w), Tensor(b))
    return WeightStore(entries)


def two_conv_topology(pooling: str = "avg") -> NetworkTopology:
    """Tiny two-conv trunk with one pool, for gradient-check scale tests."""
    layers = (
        conv_block("1_1", 3, 4)
        + [LayerSpec("pool1", "pool", pool_mode=pooling)]
        + conv_block("2_1", 4, 6)
    )
    return NetworkTopology(layers)


def standin_topology(pooling: str = "avg") -> NetworkTopology:
    """Four-conv stand-in trunk used by the optimizer comparison harness."""
    layers = (
        conv_block("1_1", 3, 8)
        + [LayerSpec("pool1", "pool", pool_mode=pooling)]
        + conv_block("2_1", 8, 8)
        + [LayerSpec("pool2", "pool", pool_mode=pooling)]
        + conv_block("3_1", 8, 12)
        + conv_block("3_2", 12, 12)
    )
    return NetworkTopology(layers)


def standin_layers() -> LossLayerConfig:
    return LossLayerConfig.uniform(
        "conv3_1", ("conv1_1", "conv2_1", "conv3_1", "conv3_2")
    )


@pytest.fixture(scope="session")
def standin_net():
    topo = standin_topology()
    return topo, random_store(topo, seed=11), standin_layers()


@pytest.fixture(scope="session")
def vgg19_store():
    return random_store(convnet.vgg19_topology(), seed=5)


@pytest.fixture(scope="session")
def vgg19_file(tmp_path_factory, vgg19_store):
    path = tmp_path_factory.mktemp("weights") / "vgg19-random.vggw"
    convnet.save_weights(path, convnet.vgg19_topology(), vgg19_store)
    return path


def write_image(path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path)


def gray_image(size: int = 64, seed: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = rng.integers(40, 216, (size, size), dtype=np.uint8)
    return base


def color_image(size: int = 64, seed: int = 4) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (size, size, 3), dtype=np.uint8)


@pytest.fixture()
def image_pair(tmp_path):
    content = tmp_path / "content.png"
    style = tmp_path / "style.png"
    write_image(content, gray_image())
    write_image(style, color_image())
    return content, style
