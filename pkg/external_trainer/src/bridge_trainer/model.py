"""Torch MLP honoring the node's flat parameter layout.

The flat vector is layer-major: each layer contributes its weight matrix
in row-major (input, output) order, then its bias. torch Linear stores
weights as (output, input), so loading and exporting transpose.

Training runs in float32 (torch's default) and upcasts the result to
float64; the node side tolerates the cast on its identity checks.
"""

import csv

import numpy as np
import torch
from torch import nn

from .protocol import ModelSpec, TrainSpec


def param_count(layer_sizes) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes, layer_sizes[1:]))


class Mlp(nn.Module):
    def __init__(self, layer_sizes, activation: str):
        super().__init__()
        self.layer_sizes = tuple(layer_sizes)
        self.activation = activation
        self.linears = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(layer_sizes, layer_sizes[1:])
        )

    def forward(self, x):
        last = len(self.linears) - 1
        for i, linear in enumerate(self.linears):
            x = linear(x)
            if i < last:
                x = torch.relu(x) if self.activation == "relu" else torch.sigmoid(x)
        return x


def load_flat(net: Mlp, flat: np.ndarray):
    if flat.shape != (param_count(net.layer_sizes),):
        raise ValueError(
            f"got {flat.shape[0] if flat.ndim == 1 else flat.shape} parameters, "
            f"model needs {param_count(net.layer_sizes)}"
        )
    offset = 0
    with torch.no_grad():
        for linear in net.linears:
            n_in, n_out = linear.in_features, linear.out_features
            w = flat[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = flat[offset : offset + n_out]
            offset += n_out
            linear.weight.copy_(torch.from_numpy(w.T.copy()).float())
            linear.bias.copy_(torch.from_numpy(b.copy()).float())


def export_flat(net: Mlp) -> np.ndarray:
    parts = []
    for linear in net.linears:
        w = linear.weight.detach().cpu().numpy().astype(np.float64)
        parts.append(w.T.reshape(-1))
        parts.append(linear.bias.detach().cpu().numpy().astype(np.float64))
    return np.concatenate(parts)


def train(
    model: ModelSpec, start: np.ndarray, inputs: np.ndarray, labels: np.ndarray, spec: TrainSpec
) -> np.ndarray:
    """Minibatch SGD with a seeded shuffle; returns flat float64 params."""
    if inputs.ndim != 2 or inputs.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"dataset has {inputs.shape[1] if inputs.ndim == 2 else '?'} features, "
            f"model expects {model.layer_sizes[0]}"
        )
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= model.layer_sizes[-1]:
        raise ValueError("labels out of range for the model's output layer")

    net = Mlp(model.layer_sizes, model.activation)
    load_flat(net, start)
    x = torch.from_numpy(np.ascontiguousarray(inputs, dtype=np.float32))
    y = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64))
    optimizer = torch.optim.SGD(net.parameters(), lr=spec.learning_rate)
    shuffle = torch.Generator().manual_seed(spec.seed & 0x7FFFFFFFFFFFFFFF)

    net.train()
    for _ in range(spec.epochs):
        order = torch.randperm(n, generator=shuffle)
        for lo in range(0, n, spec.batch_size):
            batch = order[lo : lo + spec.batch_size]
            optimizer.zero_grad()
            logits = net(x[batch])
            loss = torch.nn.functional.cross_entropy(logits, y[batch])
            loss.backward()
            optimizer.step()
    return export_flat(net)


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Header row, float feature columns, final integer label column."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) is None:
            raise ValueError(f"{path}: empty CSV")
        for row in reader:
            if row:
                rows.append([float(v) for v in row])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature and a label column")
    labels = arr[:, -1]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: label column must be integral")
    return arr[:, :-1], labels.astype(np.int64)
