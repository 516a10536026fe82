"""Convolutional auto-encoder and classifier head."""
from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .optim import init_conv, init_dense

CONV1_FILTERS, CONV1_KERNEL = 16, (3, 3)
CONV2_FILTERS, CONV2_KERNEL = 32, (2, 2)
POOL1 = (2, 2)
POOL2 = (2, 1)  # sensors outnumber time steps, so only the sensor axis shrinks
EVAL_BATCH = 512


def _ceil_div(a, b):
    return -(-a // b)


def code_shape(input_shape):
    """Spatial extent of the second conv block's pooled output."""
    n_f, n_w = input_shape
    h = _ceil_div(_ceil_div(n_f, POOL1[0]), POOL2[0])
    w = _ceil_div(_ceil_div(n_w, POOL1[1]), POOL2[1])
    return CONV2_FILTERS, h, w


class AutoEncoderModel:
    """conv-pool-conv-pool-dense encoder with a mirrored decoder.

    Windows are single-channel images with sensors on the height axis and
    time on the width axis.  The decoder upsamples past odd extents and
    crops back, so its output always has the input's shape.
    """

    ENCODER = ("conv1", "conv2", "enc_dense")
    DECODER = ("dec_dense", "dec_conv2", "dec_conv1")

    def __init__(self, input_shape, bottleneck, rng):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.bottleneck = int(bottleneck)
        c, h, w = code_shape(self.input_shape)
        flat = c * h * w
        self.conv1 = init_conv(rng, CONV1_FILTERS, 1, *CONV1_KERNEL)
        self.conv2 = init_conv(rng, CONV2_FILTERS, CONV1_FILTERS, *CONV2_KERNEL)
        self.enc_dense = init_dense(rng, flat, self.bottleneck)
        self.dec_dense = init_dense(rng, self.bottleneck, flat)
        self.dec_conv2 = init_conv(rng, CONV2_FILTERS, CONV2_FILTERS, *CONV2_KERNEL)
        self.dec_conv1 = init_conv(rng, 1, CONV2_FILTERS, *CONV1_KERNEL)
        self.epochs_trained = 0

    @property
    def layers(self):
        return [getattr(self, n) for n in self.ENCODER + self.DECODER]

    @property
    def encoder_layers(self):
        return [getattr(self, n) for n in self.ENCODER]

    @property
    def decoder_layers(self):
        return [getattr(self, n) for n in self.DECODER]

    def set_layers(self, layers):
        for name, layer in zip(self.ENCODER + self.DECODER, layers):
            current = getattr(self, name)
            if current.weights.shape != layer.weights.shape:
                raise T.ShapeError(f"{name}: expected {current.weights.shape}, got {layer.weights.shape}")
            setattr(self, name, layer)

    def freeze_encoder(self, frozen=True):
        for layer in self.encoder_layers:
            layer.freeze(frozen)

    @property
    def encoder_frozen(self):
        return all(layer.frozen for layer in self.encoder_layers)

    def _as_input(self, x):
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.shape[1:] != (1,) + self.input_shape:
            raise T.ShapeError(f"expected windows of shape {self.input_shape}, got {x.shape[-2:]}")
        return x

    def encode(self, x, with_activations=False):
        """(N, n_f, n_w) windows -> (N, b) codes, plus post-relu conv outputs if asked."""
        x = self._as_input(x)
        a1 = T.relu(T.conv2d(x, self.conv1))
        z1 = T.maxpool(a1, *POOL1)
        a2 = T.relu(T.conv2d(z1, self.conv2))
        z2 = T.maxpool(a2, *POOL2)
        h = T.dense(T.flatten(z2), self.enc_dense)
        if with_activations:
            return h, {"conv1": a1, "conv2": a2}
        return h

    def decode(self, h, with_activations=False):
        c, hh, ww = code_shape(self.input_shape)
        d = T.relu(T.dense(h, self.dec_dense))
        d = T.reshape(d, (d.shape[0], c, hh, ww))
        a = T.relu(T.conv2d(d, self.dec_conv2))
        u = T.upsample(T.upsample(a, *POOL2), *POOL1)
        u = T.crop(u, *self.input_shape)
        out = T.conv2d(u, self.dec_conv1)
        out = T.reshape(out, (out.shape[0],) + self.input_shape)
        if with_activations:
            return out, {"dec_conv2": a}
        return out

    def forward(self, x):
        """Reconstruction and the conv activations of both halves."""
        h, acts = self.encode(x, with_activations=True)
        out, dacts = self.decode(h, with_activations=True)
        acts.update(dacts)
        return out, acts

    def reconstruct(self, x):
        return self.decode(self.encode(x))

    def codes(self, windows):
        """Bottleneck codes as a plain array, computed without a graph."""
        windows = np.asarray(windows, dtype=np.float64)
        out = []
        for start in range(0, len(windows), EVAL_BATCH):
            out.append(self.encode(_const(windows[start:start + EVAL_BATCH])).data)
        if not out:
            return np.zeros((0, self.bottleneck))
        return np.concatenate(out)

    def fingerprint(self):
        return layers_digest(self.layers)


class ClassifierHead:
    """``c_l`` dense layers mapping a bottleneck code to class logits."""

    def __init__(self, bottleneck, n_classes, rng, c_l=2, hidden=64):
        if c_l < 1:
            raise ValueError("c_l must be >= 1")
        widths = [bottleneck] + [hidden] * (c_l - 1) + [n_classes]
        self.layers = [init_dense(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
        self.bottleneck = bottleneck
        self.n_classes = n_classes
        self.epochs_trained = 0

    def __call__(self, h):
        for i, layer in enumerate(self.layers):
            h = T.dense(h, layer)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return h

    def freeze(self, frozen=True):
        for layer in self.layers:
            layer.freeze(frozen)

    def copy(self):
        other = object.__new__(ClassifierHead)
        other.layers = [layer.copy() for layer in self.layers]
        other.bottleneck = self.bottleneck
        other.n_classes = self.n_classes
        other.epochs_trained = self.epochs_trained
        return other


def _const(x):
    return T.Tensor(x)


def layers_digest(layers):
    """SHA-256 over every layer's raw weight and bias bytes."""
    h = hashlib.sha256()
    for layer in layers:
        h.update(layer.weights.data.tobytes())
        h.update(layer.bias.data.tobytes())
    return h.hexdigest()
