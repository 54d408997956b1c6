"""Local client training with cache-based label counting."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CLIENT_LR_SWEEP = (0.001, 0.01, 0.1)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ClientConfig:
    local_epochs: int = 30
    learning_rate: float = 0.01
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


def client_update(model: nn.Module, x: torch.Tensor, y: torch.Tensor, cfg: ClientConfig,
                  num_classes: int, client_id: int = 0) -> tuple[nn.Module, np.ndarray]:
    """Train ``model`` in place for ``cfg.local_epochs`` passes of plain minibatch SGD.

    Returns the model and the client's label counts: every distinct example is
    counted once, the first time it lands in a batch.
    """
    n = len(y)
    if n == 0:
        raise ValueError(f"client {client_id} has no data")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=0.0)
    seen = np.zeros(n, dtype=bool)
    counts = np.zeros(num_classes, dtype=np.int64)
    labels = y.numpy()
    model.train()
    for epoch in range(cfg.local_epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) == 1:
                # batch statistics of one example are undefined; lean on the running ones
                _set_bn_train(model, False)
            loss = F.cross_entropy(model(x[idx]), y[idx])
            _set_bn_train(model, True)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"client {client_id}: non-finite loss in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            fresh = idx.numpy()[~seen[idx.numpy()]]
            seen[fresh] = True
            np.add.at(counts, labels[fresh], 1)
    return model, counts


def _set_bn_train(model: nn.Module, mode: bool) -> None:
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.train(mode)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


@torch.no_grad()
def predict(model: nn.Module, x: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    model.train(was_training)
    return out


def evaluate(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch_size: int = 1000) -> float:
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return (predict(model, x, batch_size) == y).double().mean().item()
