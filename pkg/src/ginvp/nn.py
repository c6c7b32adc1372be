"""Small sequential neural-network engine with hand-written reverse mode.

Every network used by the pipeline is a plain stack of layers, so there is no
general computation graph: ``Network.forward`` caches what each layer needs and
``Network.backward`` walks the stack in reverse.

Parameters and activations are float32. Matrix products run in the network's
dtype through BLAS (bit-stable for a fixed BLAS thread count); batch reductions
such as bias gradients and batch-norm statistics accumulate in float64.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

F32 = np.float32
F64 = np.float64


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def _mm(a, b, dtype):
    return np.matmul(a.astype(dtype, copy=False), b.astype(dtype, copy=False))


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=F32):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = OrderedDict()
        self.buffers = OrderedDict()
        self.grads = OrderedDict()
        self._cache = None

    def spec(self):
        return {"kind": self.kind}

    def check_input(self, x, index):
        pass

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for k, v in store.items():
                store[k] = v.astype(dtype)
        return self


class Dense(Layer):
    kind = "dense"

    def __init__(self, fan_in, fan_out, rng=None, zero_init=False, dtype=F32):
        super().__init__()
        self.fan_in, self.fan_out = int(fan_in), int(fan_out)
        if zero_init or rng is None:
            w = np.zeros((self.fan_in, self.fan_out), dtype=dtype)
        else:
            w = glorot_uniform(rng, (self.fan_in, self.fan_out), self.fan_in, self.fan_out, dtype)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(self.fan_out, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "fan_in": self.fan_in, "fan_out": self.fan_out}

    def check_input(self, x, index):
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ShapeError(
                f"layer {index} (dense {self.fan_in}->{self.fan_out}) expects input "
                f"(batch, {self.fan_in}), got {x.shape}"
            )

    def forward(self, x, train):
        w, b = self.params["weight"], self.params["bias"]
        if train:
            self._cache = x
        return _mm(x, w, w.dtype) + b

    def backward(self, dout):
        x = self._cache
        w = self.params["weight"]
        self.grads["weight"] = _mm(x.T, dout, w.dtype)
        self.grads["bias"] = dout.sum(axis=0, dtype=F64).astype(w.dtype)
        return _mm(dout, w.T, w.dtype)


def conv_output_size(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


class Conv2d(Layer):
    """2-D convolution over NCHW batches, implemented with im2col."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, dtype=F32):
        super().__init__()
        if kernel < 1 or stride < 1 or padding < 0:
            raise ValueError("conv2d needs kernel >= 1, stride >= 1, padding >= 0")
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        shape = (out_channels, in_channels, kernel, kernel)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = glorot_uniform(rng, shape, fan_in, fan_out, dtype)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }

    def check_input(self, x, index):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"layer {index} (conv2d) expects input (batch, {self.in_channels}, H, W), got {x.shape}"
            )
        h, w = x.shape[2:]
        if conv_output_size(h, self.kernel, self.stride, self.padding) < 1 or conv_output_size(
            w, self.kernel, self.stride, self.padding
        ) < 1:
            raise ShapeError(f"layer {index} (conv2d): spatial size {h}x{w} too small for kernel {self.kernel}")

    def _cols(self, x):
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, ho, wo

    def forward(self, x, train):
        w, b = self.params["weight"], self.params["bias"]
        n = x.shape[0]
        cols, ho, wo = self._cols(x)
        out = _mm(cols, w.reshape(self.out_channels, -1).T, w.dtype) + b
        if train:
            self._cache = (x.shape, cols, ho, wo)
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout):
        shape, cols, ho, wo = self._cache
        n, c, h, wd = shape
        k, s, p = self.kernel, self.stride, self.padding
        w = self.params["weight"]
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.grads["weight"] = _mm(dflat.T, cols, w.dtype).reshape(w.shape)
        self.grads["bias"] = dflat.sum(axis=0, dtype=F64).astype(w.dtype)
        dcols = _mm(dflat, w.reshape(self.out_channels, -1), w.dtype)
        dcols = dcols.reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=w.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class _Elementwise(Layer):
    def forward(self, x, train):
        y = self._f(x)
        if train:
            self._cache = (x, y)
        return y

    def backward(self, dout):
        x, y = self._cache
        return (dout * self._df(x, y)).astype(dout.dtype)


class ReLU(_Elementwise):
    kind = "relu"

    def _f(self, x):
        return np.maximum(x, 0).astype(x.dtype)

    def _df(self, x, y):
        return (x >= 0).astype(x.dtype)


class LeakyReLU(_Elementwise):
    """Leaky ReLU; the subgradient at exactly 0 is taken from the positive branch."""

    kind = "leaky_relu"

    def __init__(self, slope=0.2):
        super().__init__()
        if not 0 < slope < 1:
            raise ValueError("leaky_relu slope must lie in (0, 1)")
        self.slope = float(slope)

    def spec(self):
        return {"kind": self.kind, "slope": self.slope}

    def _f(self, x):
        return np.where(x >= 0, x, x * x.dtype.type(self.slope))

    def _df(self, x, y):
        return np.where(x >= 0, 1.0, self.slope).astype(x.dtype)


class Sigmoid(_Elementwise):
    kind = "sigmoid"

    def _f(self, x):
        # exp(-|x|) never overflows
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def _df(self, x, y):
        return y * (1 - y)


class Tanh(_Elementwise):
    kind = "tanh"

    def _f(self, x):
        return np.tanh(x)

    def _df(self, x, y):
        return 1 - y * y


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


class BatchNorm(Layer):
    """Batch normalization over the feature axis (dense) or channel axis (conv).

    Train mode normalizes with batch statistics and folds them into the running
    averages as ``running = momentum * running + (1 - momentum) * batch``; eval
    mode reads the running statistics and never writes them.
    """

    kind = "batch_norm"

    def __init__(self, num_features, eps=1e-5, momentum=0.9, dtype=F32):
        super().__init__()
        if eps <= 0:
            raise ValueError("batch_norm epsilon must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("batch_norm momentum must lie in [0, 1)")
        self.num_features, self.eps, self.momentum = int(num_features), float(eps), float(momentum)
        self.params["gamma"] = np.ones(num_features, dtype=dtype)
        self.params["beta"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(num_features, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "num_features": self.num_features, "eps": self.eps, "momentum": self.momentum}

    def check_input(self, x, index):
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise ShapeError(
                f"layer {index} (batch_norm) expects {self.num_features} features on axis 1, got {x.shape}"
            )

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, train):
        dtype = self.params["gamma"].dtype
        axes = self._axes(x)
        x64 = x.astype(F64)
        if train:
            mean = x64.mean(axis=axes)
            var = x64.var(axis=axes)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (m * rm + (1 - m) * mean).astype(dtype)
            rv[...] = (m * rv + (1 - m) * var).astype(dtype)
        else:
            mean = self.buffers["running_mean"].astype(F64)
            var = self.buffers["running_var"].astype(F64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x64 - self._bcast(mean, x)) * self._bcast(inv_std, x)
        if train:
            self._cache = (xhat, inv_std, axes)
        g = self._bcast(self.params["gamma"].astype(F64), x)
        b = self._bcast(self.params["beta"].astype(F64), x)
        return (xhat * g + b).astype(dtype)

    def backward(self, dout):
        xhat, inv_std, axes = self._cache
        dtype = self.params["gamma"].dtype
        d64 = dout.astype(F64)
        m = d64.size // d64.shape[1]
        self.grads["gamma"] = (d64 * xhat).sum(axis=axes).astype(dtype)
        self.grads["beta"] = d64.sum(axis=axes).astype(dtype)
        dxhat = d64 * self._bcast(self.params["gamma"].astype(F64), xhat)
        s1 = self._bcast(dxhat.sum(axis=axes), xhat)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), xhat)
        dx = self._bcast(inv_std, xhat) / m * (m * dxhat - s1 - xhat * s2)
        return dx.astype(dtype)


LAYER_KINDS = {
    "dense": Dense,
    "conv2d": Conv2d,
    "relu": ReLU,
    "leaky_relu": LeakyReLU,
    "sigmoid": Sigmoid,
    "tanh": Tanh,
    "batch_norm": BatchNorm,
    "flatten": Flatten,
}


def layer_from_spec(spec):
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**spec)


class Network:
    """An ordered stack of layers with named parameters ``"<index>.<role>"``."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._forward_input = None

    @classmethod
    def from_specs(cls, specs):
        return cls([layer_from_spec(s) for s in specs])

    def specs(self):
        return [layer.spec() for layer in self.layers]

    @property
    def params(self):
        """All tensors (trainable and running statistics), in a fixed order."""
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for role, v in layer.params.items():
                out[f"{i}.{role}"] = v
            for role, v in layer.buffers.items():
                out[f"{i}.{role}"] = v
        return out

    @property
    def trainable(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for role, v in layer.params.items():
                out[f"{i}.{role}"] = v
        return out

    def n_params(self):
        return sum(v.size for v in self.trainable.values())

    def load_params(self, tensors):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for role, v in store.items():
                    name = f"{i}.{role}"
                    if name not in tensors:
                        raise KeyError(f"missing tensor {name}")
                    t = np.asarray(tensors[name])
                    if t.shape != v.shape:
                        raise ShapeError(f"tensor {name}: expected shape {v.shape}, got {t.shape}")
                    v[...] = t

    def astype(self, dtype):
        """Return a copy of the network with every tensor cast to ``dtype``."""
        net = Network.from_specs(self.specs())
        for src, dst in zip(self.layers, net.layers):
            for role, v in src.params.items():
                dst.params[role] = v.astype(dtype)
            for role, v in src.buffers.items():
                dst.buffers[role] = v.astype(dtype)
        return net

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        for v in self.params.values():
            return v.dtype
        return np.dtype(F32)

    def forward(self, x, train=False):
        x = np.asarray(x)
        if x.ndim < 2 or x.shape[0] < 1:
            raise ShapeError(f"input needs a leading batch dimension >= 1, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        self._forward_input = x if train else None
        for i, layer in enumerate(self.layers):
            layer.check_input(x, i)
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, output_grad, x=None):
        """Gradients of a scalar loss given ``dloss/doutput``.

        Returns ``(grads, input_grad)`` where ``grads`` maps each trainable
        parameter name to its gradient. Must follow a ``forward(..., train=True)``
        call; ``x``, if given, has to be the input of that call.
        """
        if self._forward_input is None:
            raise BackwardError("backward() called without a preceding train-mode forward()")
        if x is not None and x is not self._forward_input:
            if np.shape(x) != self._forward_input.shape or not np.array_equal(
                np.asarray(x, dtype=self.dtype), self._forward_input
            ):
                raise BackwardError("backward() input differs from the cached forward() input")
        g = np.asarray(output_grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        grads = OrderedDict()
        for i, layer in enumerate(self.layers):
            for role in layer.params:
                grads[f"{i}.{role}"] = layer.grads[role]
        return grads, g


class SGD:
    algorithm = "sgd"

    def __init__(self, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr

    def step(self, params, grads):
        _check_finite(grads)
        for name, g in grads.items():
            p = params[name]
            p -= p.dtype.type(self.lr) * g


class RMSProp:
    """``a <- rho*a + (1-rho)*g^2``; ``theta <- theta - lr*g/sqrt(a + eps)``."""

    algorithm = "rmsprop"

    def __init__(self, lr, rho=0.9, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        self.lr, self.rho, self.eps = lr, rho, eps
        self.accumulators = OrderedDict()

    def step(self, params, grads):
        _check_finite(grads)
        for name, g in grads.items():
            p = params[name]
            t = p.dtype.type
            a = self.accumulators.get(name)
            if a is None:
                a = np.zeros(p.shape, dtype=p.dtype)
                self.accumulators[name] = a
            a *= t(self.rho)
            a += t(1 - self.rho) * g * g
            p -= t(self.lr) * g / np.sqrt(a + t(self.eps))


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")


def clip_params(net, c):
    """Clamp every trainable weight and bias of ``net`` into ``[-c, c]`` in place."""
    if c <= 0:
        raise ValueError("clip value must be positive")
    for p in net.trainable.values():
        np.clip(p, -c, c, out=p)
    return net


def _kink_signature(net):
    parts = []
    for layer in net.layers:
        if isinstance(layer, (ReLU, LeakyReLU)) and layer._cache is not None:
            parts.append(np.packbits(layer._cache[0] >= 0).tobytes())
    return b"".join(parts)


def grad_check(net, x, eps=1e-3, seed=0, check_input=True):
    """Worst relative error between backward() and central finite differences.

    The scalar loss is ``sum(out * r)`` for a fixed random ``r``. The check runs
    on a float64 copy of ``net`` so the finite differences are not swamped by
    float32 rounding; the copy shares the same layer code. Batch-norm running
    statistics are restored before every evaluation. A central difference is
    accepted only if the stencil keeps every (leaky) ReLU on the same branch
    and it agrees with the half-step difference to 1e-4; otherwise the step
    is shrunk tenfold for that coordinate (down to 1e-7).
    """
    net = net.astype(F64)
    x = np.asarray(x, dtype=F64)
    out = net.forward(x, train=True)
    base_sig = _kink_signature(net)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    snapshot = {k: v.copy() for k, v in net.params.items()}
    grads, dx = net.backward(r)
    trainable = net.trainable

    def loss(inp):
        for k, v in net.params.items():
            if k not in trainable:
                v[...] = snapshot[k]
        val = float(np.sum(net.forward(inp, train=True) * r))
        return val, _kink_signature(net)

    def diff(flat, i, inp, h):
        old = flat[i]
        flat[i] = old + h
        up, sig_up = loss(inp)
        flat[i] = old - h
        down, sig_down = loss(inp)
        flat[i] = old
        return (up - down) / (2 * h), sig_up == base_sig and sig_down == base_sig

    def central(flat, i, inp):
        h = eps
        while True:
            d, smooth = diff(flat, i, inp, h)
            if h <= 1e-7:
                return d
            if smooth:
                d_half, smooth_half = diff(flat, i, inp, h / 2)
                if smooth_half and abs(d - d_half) <= 1e-4 * max(abs(d), abs(d_half), 1e-6):
                    return d
            h /= 10

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-6)

    worst = 0.0
    for name, p in trainable.items():
        g = grads[name].reshape(-1)
        flat = p.reshape(-1)
        for i in range(flat.size):
            worst = max(worst, rel(g[i], central(flat, i, x)))
    if check_input:
        xc = x.copy()
        xf = xc.reshape(-1)
        for i in range(xf.size):
            worst = max(worst, rel(dx.reshape(-1)[i], central(xf, i, xc)))
    return worst
