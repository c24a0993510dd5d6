"""Stateful layer wrappers around the kernels in :mod:`sonarmatch.tensor`.

A layer caches what its backward pass needs during ``forward``; calling
``backward`` stores parameter gradients on the layer and returns the input
gradient.  Caches belong to the last forward call, so a layer object must not
be shared between interleaved forward passes.  Siamese branches avoid that by
running both inputs through the branch as one stacked batch.

Spatial layers work on channel-major ``C x N x H x W`` activations;
:class:`Flatten` turns them into ``N x features`` rows in the usual
``C, H, W`` order.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Layer:
    params: tuple = ()

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g, need_input_grad=True):
        raise NotImplementedError

    def grads(self):
        return ()

    def regime(self):
        """Discrete state that decides which linear piece the layer is on."""
        return None


class Conv2D(Layer):
    def __init__(self, in_channels, filters, kernel, rng):
        fan_in = in_channels * kernel * kernel
        fan_out = filters * kernel * kernel
        bound = T.glorot_bound(fan_in, fan_out)
        w = rng.uniform(-bound, bound, size=(filters, in_channels, kernel, kernel))
        self.p = T.LayerParams(w, np.zeros(filters))
        self.params = (self.p,)
        self._x = None
        self.dw = self.db = None

    def forward(self, x, train=False, rng=None):
        self._x = x
        return T.conv_forward_cm(x, self.p.weights, self.p.bias)

    def backward(self, g, need_input_grad=True):
        dx, self.dw, self.db = T.conv_backward_cm(self._x, self.p.weights, g, need_input_grad)
        return dx

    def grads(self):
        return ((self.dw, self.db),)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        bound = T.glorot_bound(n_in, n_out)
        self.p = T.LayerParams(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out))
        self.params = (self.p,)
        self._x = None
        self.dw = self.db = None

    def forward(self, x, train=False, rng=None):
        self._x = x
        return T.dense(x, self.p)

    def backward(self, g, need_input_grad=True):
        dx, self.dw, self.db = T.dense_grad(self._x, self.p, g)
        return dx

    def grads(self):
        return ((self.dw, self.db),)


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._x = x
        return T.relu(x)

    def backward(self, g, need_input_grad=True):
        return T.relu_grad(self._x, g)

    def regime(self):
        return np.packbits(self._x > 0).tobytes()


class MaxPool2x2(Layer):
    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        out, self._argmax = T.maxpool2x2(x)
        return out

    def backward(self, g, need_input_grad=True):
        return T.maxpool2x2_grad(g, self._argmax, self._shape)

    def regime(self):
        return self._argmax.tobytes()


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        c, n = x.shape[:2]
        return x.transpose(1, 0, 2, 3).reshape(n, -1)

    def backward(self, g, need_input_grad=True):
        c, n, h, w = self._shape
        return np.ascontiguousarray(g.reshape(n, c, h, w).transpose(1, 0, 2, 3))


class Dropout(Layer):
    def __init__(self, rate):
        self.rate = rate
        self._mask = None

    def forward(self, x, train=False, rng=None):
        out, self._mask = T.dropout(x, self.rate, train, rng)
        return out

    def backward(self, g, need_input_grad=True):
        return g if self._mask is None else g * self._mask


class Sigmoid(Layer):
    def forward(self, x, train=False, rng=None):
        self._y = T.sigmoid(x)
        return self._y

    def backward(self, g, need_input_grad=True):
        return g * self._y * (1.0 - self._y)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, g, need_input_grad=True):
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            wants = need_input_grad or i > 0
            g = self.layers[i].backward(g, wants)
        return g

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def regime(self):
        return tuple(layer.regime() for layer in self.layers)
