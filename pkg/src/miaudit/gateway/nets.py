"""Small target architectures with addressable fully-connected outputs."""
from __future__ import annotations

import math

import torch
from torch import nn


class ProbeNet(nn.Module):
    """Base class for target networks.

    Subclasses implement ``layers`` which returns the flattened outputs of every
    fully-connected or flattened layer in forward order. The last entry is the
    logits tensor (the input to softmax).
    """

    def layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)[-1]


class LinearSoftmax(ProbeNet):
    def __init__(self, input_shape, n_classes):
        super().__init__()
        self.fc = nn.Linear(math.prod(input_shape), n_classes)

    def layers(self, x):
        flat = x.flatten(1)
        return [flat, self.fc(flat)]


class MLP(ProbeNet):
    def __init__(self, input_shape, n_classes, hidden=(128, 64)):
        super().__init__()
        h1, h2 = hidden
        self.fc1 = nn.Linear(math.prod(input_shape), h1)
        self.fc2 = nn.Linear(h1, h2)
        self.fc3 = nn.Linear(h2, n_classes)

    def layers(self, x):
        flat = x.flatten(1)
        a1 = torch.relu(self.fc1(flat))
        a2 = torch.relu(self.fc2(a1))
        return [flat, a1, a2, self.fc3(a2)]


class LeNet(ProbeNet):
    """LeNet-5 style CNN for single- or multi-channel square images."""

    def __init__(self, input_shape, n_classes):
        super().__init__()
        if len(input_shape) != 3:
            raise ValueError(f"lenet expects (C, H, W) input, got {tuple(input_shape)}")
        c, h, w = input_shape
        self.conv1 = nn.Conv2d(c, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        flat = 16 * ((h // 2 - 4) // 2) * ((w // 2 - 4) // 2)
        self.fc1 = nn.Linear(flat, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, n_classes)

    def layers(self, x):
        x = torch.max_pool2d(torch.relu(self.conv1(x)), 2)
        x = torch.max_pool2d(torch.relu(self.conv2(x)), 2)
        flat = x.flatten(1)
        a1 = torch.relu(self.fc1(flat))
        a2 = torch.relu(self.fc2(a1))
        return [flat, a1, a2, self.fc3(a2)]


ARCHITECTURES = {
    "linear": LinearSoftmax,
    "mlp": MLP,
    "lenet": LeNet,
}


class UnknownArchitecture(ValueError):
    pass


def build_network(arch_id: str, input_shape, n_classes: int, **kwargs) -> ProbeNet:
    try:
        cls = ARCHITECTURES[arch_id]
    except KeyError:
        raise UnknownArchitecture(
            f"unknown architecture {arch_id!r}; registered: {sorted(ARCHITECTURES)}"
        ) from None
    return cls(tuple(input_shape), n_classes, **kwargs)
