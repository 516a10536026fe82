"""Adam optimizer and parameter initialisation."""
import logging
import math

import numpy as np

from .tensor import LayerParams, Tensor

logger = logging.getLogger(__name__)


def init_conv(rng, out_channels, in_channels, kh, kw):
    """He-uniform filter bank with zero bias."""
    fan_in = in_channels * kh * kw
    limit = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-limit, limit, size=(out_channels, in_channels, kh, kw))
    return LayerParams("conv", Tensor(w), Tensor(np.zeros(out_channels)))


def init_dense(rng, in_dim, out_dim):
    limit = math.sqrt(6.0 / in_dim)
    w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return LayerParams("dense", Tensor(w), Tensor(np.zeros(out_dim)))


class Adam:
    """Adaptive-moment optimizer over a list of :class:`LayerParams`.

    Frozen layers are skipped and never get moment buffers.  ``step`` zeroes
    gradients after applying them.
    """

    def __init__(self, layers, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.layers = list(layers)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.moments = {}

    def zero_grad(self):
        for layer in self.layers:
            for p in layer.tensors():
                p.grad = None

    def step(self):
        live = [p for layer in self.layers if not layer.frozen for p in layer.tensors()]
        if not any(p.grad is not None for p in live):
            logger.warning("optimizer step with no gradients; did backward() run?")
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in live:
            g = p.grad
            if g is None:
                continue
            m, v = self.moments.get(id(p), (None, None))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self.moments[id(p)] = (m, v)
            if self.lr:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()
