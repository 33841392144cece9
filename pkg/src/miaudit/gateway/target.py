"""White-box query access to a trained target classifier."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call, grad, vmap

from .nets import ProbeNet

QUERY_DTYPE = torch.float64
_CHUNK = 512


class QueryError(ValueError):
    pass


@dataclass
class QueryResult:
    confidences: np.ndarray
    predicted_class: int
    loss: float | None = None
    grad_input: np.ndarray | None = None
    grad_params: np.ndarray | None = None
    activation: np.ndarray | None = None


class TargetModel:
    """A trained classifier plus the metadata needed to persist and probe it.

    All queries run on a float64 copy of the network so that gradients can be
    checked against finite differences. Queries never mutate the weights; call
    ``invalidate`` after changing ``net`` in place.
    """

    def __init__(self, net: ProbeNet, architecture_id: str, n_classes: int, input_shape,
                 arch_kwargs: dict | None = None, epoch: int = 0, history: list | None = None):
        self.net = net
        self.architecture_id = architecture_id
        self.n_classes = int(n_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.arch_kwargs = dict(arch_kwargs or {})
        self.epoch = int(epoch)
        self.history = list(history or [])
        self._qnet = None

    def __repr__(self):
        return (f"TargetModel({self.architecture_id!r}, n_classes={self.n_classes}, "
                f"input_shape={self.input_shape}, epoch={self.epoch})")

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def invalidate(self):
        self._qnet = None

    @property
    def qnet(self) -> ProbeNet:
        if self._qnet is None:
            qnet = copy.deepcopy(self.net).to(QUERY_DTYPE).eval()
            for p in qnet.parameters():
                p.requires_grad_(False)
            self._qnet = qnet
        return self._qnet

    def flat_parameters(self) -> np.ndarray:
        return torch.cat([p.detach().flatten().to(QUERY_DTYPE) for p in self.net.parameters()]).numpy()

    def set_flat_parameters(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.parameter_count:
            raise ValueError(f"expected {self.parameter_count} parameters, got {flat.size}")
        offset = 0
        with torch.no_grad():
            for p in self.net.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(flat[offset:offset + n]).reshape(p.shape).to(p.dtype))
                offset += n
        self.invalidate()

    # -- input handling -------------------------------------------------

    def _batch(self, x) -> torch.Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise QueryError(f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        return torch.from_numpy(np.ascontiguousarray(x))

    def _labels(self, y, n) -> torch.Tensor:
        y = torch.as_tensor(np.atleast_1d(np.asarray(y, dtype=np.int64)))
        if y.shape[0] != n:
            raise QueryError(f"{y.shape[0]} labels for {n} inputs")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise QueryError(f"labels outside [0, {self.n_classes})")
        return y

    def _chunks(self, n):
        for start in range(0, n, _CHUNK):
            yield slice(start, min(start + _CHUNK, n))

    # -- batch queries --------------------------------------------------

    def logits(self, x) -> np.ndarray:
        xb = self._batch(x)
        with torch.no_grad():
            parts = [self.qnet(xb[s]).numpy() for s in self._chunks(len(xb))]
        return np.concatenate(parts) if parts else np.zeros((0, self.n_classes))

    def predict_confidences(self, x) -> np.ndarray:
        xb = self._batch(x)
        with torch.no_grad():
            parts = [torch.softmax(self.qnet(xb[s]), dim=1).numpy() for s in self._chunks(len(xb))]
        return np.concatenate(parts) if parts else np.zeros((0, self.n_classes))

    def predict(self, x) -> np.ndarray:
        return self.predict_confidences(x).argmax(axis=1)

    def n_addressable_layers(self) -> int:
        with torch.no_grad():
            probe = torch.zeros((1,) + self.input_shape, dtype=QUERY_DTYPE)
            return len(self.qnet.layers(probe))

    def activations(self, x, layers_back: int) -> np.ndarray:
        """Flattened output of the fully-connected/flattened layer ``layers_back``
        steps back from softmax (-1 is the pre-softmax logits)."""
        depth = self.n_addressable_layers()
        if not isinstance(layers_back, (int, np.integer)) or not -depth <= layers_back <= -1:
            raise QueryError(f"layers_back must be in [-{depth}, -1], got {layers_back!r}")
        xb = self._batch(x)
        with torch.no_grad():
            parts = [self.qnet.layers(xb[s])[layers_back].flatten(1).numpy() for s in self._chunks(len(xb))]
        return np.concatenate(parts)

    def losses(self, x, y) -> np.ndarray:
        xb = self._batch(x)
        yb = self._labels(y, len(xb))
        with torch.no_grad():
            parts = [F.cross_entropy(self.qnet(xb[s]), yb[s], reduction="none").numpy()
                     for s in self._chunks(len(xb))]
        return np.concatenate(parts)

    def input_gradients(self, x, y) -> np.ndarray:
        """Per-sample dL/dx with the same shape as the inputs."""
        xb = self._batch(x)
        yb = self._labels(y, len(xb))
        parts = []
        for s in self._chunks(len(xb)):
            xs = xb[s].clone().requires_grad_(True)
            loss = F.cross_entropy(self.qnet(xs), yb[s], reduction="sum")
            (g,) = torch.autograd.grad(loss, xs)
            parts.append(g.numpy())
        return np.concatenate(parts)

    def param_gradients(self, x, y) -> np.ndarray:
        """Per-sample dL/dw flattened in ``net.parameters()`` order, shape (n, P)."""
        xb = self._batch(x)
        yb = self._labels(y, len(xb))
        net = self.qnet
        names = [name for name, _ in net.named_parameters()]
        params = {name: p.detach() for name, p in net.named_parameters()}
        buffers = {name: b for name, b in net.named_buffers()}

        def sample_loss(p, xi, yi):
            out = functional_call(net, (p, buffers), (xi[None],))
            return F.cross_entropy(out, yi[None])

        per_sample = vmap(grad(sample_loss), in_dims=(None, 0, 0))
        parts = []
        for s in self._chunks(len(xb)):
            g = per_sample(params, xb[s], yb[s])
            parts.append(torch.cat([g[name].flatten(1) for name in names], dim=1).numpy())
        return np.concatenate(parts) if parts else np.zeros((0, self.parameter_count))

    # -- single-sample query -------------------------------------------

    def query(self, x, y=None, *, loss=False, grad_input=False, grad_params=False,
              layers_back: int | None = None) -> QueryResult:
        """Every requested quantity for one sample in a single call."""
        if (loss or grad_input or grad_params) and y is None:
            raise QueryError("loss and gradient queries need the class label y")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise QueryError(f"input shape {x.shape} does not match model input {self.input_shape}")
        conf = self.predict_confidences(x)[0]
        result = QueryResult(confidences=conf, predicted_class=int(conf.argmax()))
        if loss:
            result.loss = float(self.losses(x, [y])[0])
        if grad_input:
            result.grad_input = self.input_gradients(x, [y])[0]
        if grad_params:
            result.grad_params = self.param_gradients(x, [y])[0]
        if layers_back is not None:
            result.activation = self.activations(x, layers_back)[0]
        return result
