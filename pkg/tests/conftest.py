import numpy as np
import pytest
import torch

from miaudit.gateway import (LabeledDataset, TargetModel, TrainConfig, build_network, gaussian_blobs,
                             split_pool, train_target)
from miaudit.gateway.nets import ProbeNet


def linear_model(weight, bias) -> TargetModel:
    """Linear-softmax target with the given (k, d) weights and (k,) bias."""
    weight = np.asarray(weight, dtype=np.float64)
    k, d = weight.shape
    net = build_network("linear", (d,), k)
    with torch.no_grad():
        net.fc.weight.copy_(torch.from_numpy(weight))
        net.fc.bias.copy_(torch.as_tensor(np.asarray(bias, dtype=np.float64)))
    net.eval()
    return TargetModel(net, "linear", k, (d,))


def binary_linear(w, b) -> TargetModel:
    """Two-class model whose class-1 logit minus class-0 logit is w.x + b."""
    w = np.asarray(w, dtype=np.float64)
    return linear_model(np.stack([np.zeros_like(w), w]), [0.0, b])


class ConstantNet(ProbeNet):
    """Ignores its input; logits are a fixed vector."""

    def __init__(self, logits, input_shape):
        super().__init__()
        self.logits_ = torch.nn.Parameter(torch.as_tensor(logits, dtype=torch.float32))
        self.input_shape = input_shape

    def layers(self, x):
        flat = x.flatten(1)
        return [flat, self.logits_.to(x.dtype).expand(len(x), -1) + 0 * flat.sum(1, keepdim=True)]


def constant_model(logits, input_shape=(4,)) -> TargetModel:
    net = ConstantNet(logits, input_shape)
    return TargetModel(net, "constant", len(logits), input_shape)


class MemorizerNet(ProbeNet):
    """Outputs a near one-hot on the label of the nearest stored sample."""

    def __init__(self, inputs, labels, n_classes, scale=50.0):
        super().__init__()
        self.register_buffer("keys", torch.as_tensor(inputs.reshape(len(inputs), -1), dtype=torch.float64))
        self.register_buffer("onehot", torch.nn.functional.one_hot(
            torch.as_tensor(labels), n_classes).to(torch.float64))
        self.scale = scale

    def layers(self, x):
        flat = x.flatten(1).to(torch.float64)
        nearest = torch.cdist(flat, self.keys.to(flat.dtype)).argmin(dim=1)
        return [flat, self.scale * self.onehot[nearest].to(x.dtype)]


def memorizer_model(ds: LabeledDataset, n_classes: int) -> TargetModel:
    net = MemorizerNet(ds.inputs, ds.labels, n_classes)
    return TargetModel(net, "memorizer", n_classes, ds.input_shape)


@pytest.fixture(scope="session")
def overfit_blobs():
    """MLP trained 500 epochs on 200 blob samples: memorises its members."""
    pool = gaussian_blobs(400, 3, 10, 2.0, seed=1)
    members, nonmembers = split_pool(pool, 200, 200, seed=0)
    cfg = TrainConfig(epochs=500, batch_size=50, learning_rate=1e-2, seed=0)
    model, _ = train_target("mlp", members, cfg, nonmembers)
    return model, members, nonmembers


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
