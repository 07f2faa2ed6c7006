"""Network shapes used by the CLI, the demos and the acceptance runs."""
from __future__ import annotations

from .capsnet import ConvLayerConfig
from .network import CapsLayerSpec, NetworkConfig

TOY_SIGMA = 0.05
# four capsule layers shrink norms roughly quadratically per layer under squash;
# a wider init keeps the class capsules well above the degenerate threshold
MNIST_SIGMA = 1.0


def gradcheck_network() -> NetworkConfig:
    """Fixed miniature net: 2 conv, 4 capsule layers, 2 middle groups x 3, 2 classes x 2."""
    return NetworkConfig(
        input_shape=(1, 9, 9),
        n_classes=2,
        conv=[ConvLayerConfig(1, 4, 3, 1), ConvLayerConfig(4, 8, 3, 2)],
        primary_dim=4,
        primary_groups_per_position=1,
        layers=[CapsLayerSpec(2, 3, 4), CapsLayerSpec(2, 3, 4), CapsLayerSpec(2, 2, 4)],
    )


def toy_network(groups: int = 8, prototypes: int = 2, conv_channels=(8, 16)) -> NetworkConfig:
    """Three capsule layers for the 64x64 face/noise set; co-groups only in the middle."""
    c1, c2 = conv_channels
    return NetworkConfig(
        input_shape=(1, 64, 64),
        n_classes=2,
        conv=[ConvLayerConfig(1, c1, 9, 1), ConvLayerConfig(c1, c2, 9, 2)],
        primary_dim=8,
        layers=[CapsLayerSpec(groups, prototypes, 8), CapsLayerSpec(2, 1, 16)],
    )


def mnist_network(prototypes_final: int = 3, capsule_layers: int = 4,
                  prototypes_middle: int = 2, conv_channels=(32, 64)) -> NetworkConfig:
    """Desk-scale 28x28 net: primary capsules, ``capsule_layers - 2`` middle layers, class layer."""
    if capsule_layers < 2:
        raise ValueError("need at least two capsule layers")
    c1, c2 = conv_channels
    middle = [CapsLayerSpec(16 // 2**i or 1, prototypes_middle, 8 + 4 * i)
              for i in range(capsule_layers - 2)]
    return NetworkConfig(
        input_shape=(1, 28, 28),
        n_classes=10,
        conv=[ConvLayerConfig(1, c1, 9, 1), ConvLayerConfig(c1, c2, 9, 2)],
        primary_dim=8,
        layers=middle + [CapsLayerSpec(10, prototypes_final, 16)],
    )
