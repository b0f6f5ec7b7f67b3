"""
Optimisation - Adam with L2 weight decay and a multi-step learning-rate schedule.
"""

import logging
from typing import Dict, Sequence

import numpy as np

from kitpose.errors import ConfigError, NumericalError
from kitpose.numerics import Tensor

logger = logging.getLogger(__name__)


class Adam:
    """
    Adam over a name -> Tensor mapping.

    Weight decay is added to the gradient (L2), not decoupled, and skips the
    parameters named in `no_decay`. Moment state is keyed by parameter name so
    it can be checkpointed.

    Example:
        opt = Adam(model.params, lr=5e-4)
        backward(loss)
        opt.step()
    """

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
        no_decay: Sequence[str] = (),
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = frozenset(no_decay)
        unknown = self.no_decay - set(self.params)
        if unknown:
            raise ConfigError(f"no_decay names unknown parameters: {sorted(unknown)}")
        self.t = 0
        self.m = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        """One update from the gradients currently stored on the parameters."""
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            grad = p.grad.astype(np.float64)
            if self.weight_decay and name not in self.no_decay:
                grad = grad + self.weight_decay * p.data
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite gradient for '{name}' at step {self.t}")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.assign(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def state_arrays(self) -> dict:
        state = {"optim/t": np.array(self.t, dtype=np.int64)}
        for name in self.params:
            state[f"optim/m/{name}"] = self.m[name]
            state[f"optim/v/{name}"] = self.v[name]
        return state

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays.get("optim/t", 0))
        for name in self.params:
            if f"optim/m/{name}" in arrays:
                self.m[name] = np.asarray(arrays[f"optim/m/{name}"], dtype=np.float64)
                self.v[name] = np.asarray(arrays[f"optim/v/{name}"], dtype=np.float64)


class MultiStepLR:
    """lr(epoch) = base_lr * factor ** (number of milestones <= epoch); epochs count from 0."""

    def __init__(self, optimizer: Adam, milestones: Sequence[int], factor: float = 0.1):
        milestones = [int(m) for m in milestones]
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {milestones}")
        self.optimizer = optimizer
        self.milestones = milestones
        self.factor = factor
        self.base_lr = optimizer.lr

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.base_lr * self.factor ** passed

    def set_epoch(self, epoch: int) -> float:
        lr = self.lr_at(epoch)
        if lr != self.optimizer.lr:
            logger.info(f"🔄 Learning rate {self.optimizer.lr:.2e} -> {lr:.2e} at epoch {epoch}")
        self.optimizer.lr = lr
        return lr
