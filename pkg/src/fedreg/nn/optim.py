"""SGD with classic momentum and L2 weight decay folded into the gradient.

Update rule per parameter:
    g' = g + weight_decay * w
    buf = momentum * buf + g'
    w  -= lr * buf

Buffers belong to the optimizer, not the model; a fresh optimizer starts
from zero buffers.
"""

import numpy as np

from fedreg.errors import ConfigError
from fedreg.nn.model import ModelState


class SgdMomentum:
    def __init__(self, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 1e-5):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] | None = None

    def step(self, state: ModelState, grads: dict[str, np.ndarray]) -> ModelState:
        if grads.keys() != state.params.keys():
            raise ConfigError("gradient keys do not match model parameters")
        if self.buffers is None:
            self.buffers = {k: np.zeros_like(v) for k, v in state.params.items()}
        for name, w in state.params.items():
            g = grads[name]
            if g.shape != w.shape:
                raise ConfigError(f"gradient shape mismatch for {name}")
            if self.weight_decay:
                g = g + self.weight_decay * w
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            w -= self.lr * buf
        return state
