"""Small convolutional classifiers with hand-written backward passes.

Every layer keeps the minimal cache it needs for its backward pass.  Batches
enter and leave :class:`Classifier` in ``N x C x H x W`` layout; internally
activations are kept channel-last so that the 3x3 convolutions reduce to a
single matrix product over an ``im2col`` buffer.
"""
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DegenerateBatchError, InvalidInputError, ProtocolError

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

__all__ = [
    "ARCHITECTURES",
    "BatchNorm",
    "Classifier",
    "ClassifierArch",
    "Conv3x3",
    "GlobalAvgPool",
    "Linear",
    "MaxPool2",
    "ReLU",
    "SGD",
    "build_arch",
    "sgd_step",
    "softmax",
]


def _colsum(x2):
    """Column sums of a 2-D array through BLAS (much faster than a strided reduce)."""
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def softmax(logits):
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax received non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1.  Weights are (out, in, 3, 3)."""

    kind = "conv3x3"
    param_names = ("weights", "bias")

    def __init__(self, in_channels, out_channels, rng=None, dtype=DTYPE):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weights = np.zeros((out_channels, in_channels, 3, 3), dtype=dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        if rng is not None:
            std = np.sqrt(2.0 / (9 * in_channels))
            self.weights[...] = rng.normal(0.0, std, self.weights.shape)

    def _weight_matrix(self):
        # rows ordered (c, ky, kx) to match the im2col buffer
        return self.weights.reshape(self.out_channels, 9 * self.in_channels).T

    def forward(self, x, bn_mode, update_stats):
        n, h, w, c = x.shape
        if c != self.in_channels:
            raise InvalidInputError(f"conv expects {self.in_channels} channels, got {c}")
        xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
        xp[:, 1:-1, 1:-1, :] = x
        # (n, h, w, c, 3, 3) view copied into one contiguous buffer
        cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * w, 9 * c)
        out = cols @ self._weight_matrix()
        out += self.bias
        return out.reshape(n, h, w, self.out_channels), (cols, x.shape)

    def backward(self, dout, cache, need_input_grad=True):
        cols, (n, h, w, c) = cache
        d2 = dout.reshape(-1, self.out_channels)
        grads = {
            "weights": (d2.T @ cols).reshape(self.weights.shape),
            "bias": _colsum(d2),
        }
        if not need_input_grad:
            return None, grads
        dcols = (d2 @ self._weight_matrix().T).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, h + 2, w + 2, c), dtype=dout.dtype)
        for dy in range(3):
            for dx in range(3):
                dxp[:, dy:dy + h, dx:dx + w, :] += dcols[..., dy, dx]
        return dxp[:, 1:-1, 1:-1, :], grads


class BatchNorm:
    """Per-channel batch normalization over (N, H, W)."""

    kind = "batchnorm"
    param_names = ("weights", "bias")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, dtype=DTYPE, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weights = np.ones(channels, dtype=dtype)
        self.bias = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.stat_writes = 0

    def forward(self, x, bn_mode, update_stats):
        x2 = x.reshape(-1, self.channels)
        m = x2.shape[0]
        if bn_mode == "train":
            if x.shape[0] < 2:
                raise DegenerateBatchError("batch statistics need at least 2 samples")
            mean = _colsum(x2) / m
            xc = x2 - mean
            var = _colsum(xc * xc) / m
            if update_stats:
                mom = self.momentum
                unbiased = var * (m / (m - 1))
                self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(self.running_mean.dtype)
                self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(self.running_var.dtype)
                self.stat_writes += 1
        elif bn_mode == "eval":
            xc = x2 - self.running_mean
            var = self.running_var
        else:
            raise InvalidInputError(f"unknown bn_mode {bn_mode!r}")
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc
        xhat *= inv_std
        out = xhat * self.weights
        out += self.bias
        return out.reshape(x.shape), (xhat, inv_std, bn_mode)

    def backward(self, dout, cache, need_input_grad=True):
        xhat, inv_std, bn_mode = cache
        d2 = dout.reshape(-1, self.channels)
        grads = {"weights": _colsum(d2 * xhat), "bias": _colsum(d2)}
        if not need_input_grad:
            return None, grads
        dxhat = d2 * self.weights
        if bn_mode == "eval":
            dxhat *= inv_std
            return dxhat.reshape(dout.shape), grads
        m = d2.shape[0]
        # dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), expressed with gamma
        dx = dxhat * m
        dx -= grads["bias"] * self.weights
        dx -= xhat * (grads["weights"] * self.weights)
        dx *= inv_std / m
        return dx.reshape(dout.shape), grads


class ReLU:
    kind = "relu"
    param_names = ()

    def forward(self, x, bn_mode, update_stats):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache, need_input_grad=True):
        return dout * cache, {}


class MaxPool2:
    """2x2 max pooling with stride 2.  Gradient goes to the first maximum."""

    kind = "maxpool2"
    param_names = ()

    def forward(self, x, bn_mode, update_stats):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise InvalidInputError(f"maxpool2 needs even spatial size, got {h}x{w}")
        q = [x[:, i::2, j::2] for i in (0, 1) for j in (0, 1)]
        out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for part in q[:3]:
            hit = (part == out) & ~taken
            taken |= hit
            masks.append(hit)
        masks.append(~taken)
        return out, (masks, x.shape)

    def backward(self, dout, cache, need_input_grad=True):
        masks, shape = cache
        dx = np.empty(shape, dtype=dout.dtype)
        for (i, j), mask in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            dx[:, i::2, j::2] = dout * mask
        return dx, {}


class GlobalAvgPool:
    kind = "gap"
    param_names = ()

    def forward(self, x, bn_mode, update_stats):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dout, cache, need_input_grad=True):
        n, h, w, c = cache
        dx = np.broadcast_to(dout[:, None, None, :] / (h * w), cache)
        return np.ascontiguousarray(dx, dtype=dout.dtype), {}


class Linear:
    """Fully connected layer, weights are (out, in)."""

    kind = "fullyconnected"
    param_names = ("weights", "bias")

    def __init__(self, in_features, out_features, rng=None, dtype=DTYPE):
        self.in_features = in_features
        self.out_features = out_features
        self.weights = np.zeros((out_features, in_features), dtype=dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        if rng is not None:
            bound = 1.0 / np.sqrt(in_features)
            self.weights[...] = rng.uniform(-bound, bound, self.weights.shape)

    def forward(self, x, bn_mode, update_stats):
        if x.shape[-1] != self.in_features:
            raise InvalidInputError(f"linear expects {self.in_features} features, got {x.shape[-1]}")
        return x @ self.weights.T + self.bias, x

    def backward(self, dout, cache, need_input_grad=True):
        grads = {"weights": dout.T @ cache, "bias": _colsum(dout)}
        if not need_input_grad:
            return None, grads
        return dout @ self.weights, grads


# --------------------------------------------------------------------------
# Architectures
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierArch:
    """Architecture descriptor.

    ``layer_sequence`` is a tuple of ``(kind, width)`` pairs; ``width`` is the
    number of output channels for conv layers and ``None`` otherwise.  The
    final fully connected layer always emits ``num_classes`` logits.
    """

    name: str
    layer_sequence: tuple
    input_size: int = 32
    num_classes: int = 10
    in_channels: int = 3


def _conv_blocks(widths, pool_after):
    seq = []
    for i, width in enumerate(widths):
        seq += [("conv3x3", width), ("batchnorm", None), ("relu", None)]
        if i in pool_after:
            seq.append(("maxpool2", None))
    return seq + [("gap", None), ("fullyconnected", None)]


ARCHITECTURES = {
    "smallnet": _conv_blocks((16, 32, 64), pool_after={0, 1}),
    "bignet": _conv_blocks((32, 64, 128, 128), pool_after={0, 1, 2}),
}


def build_arch(name, num_classes, input_size=32, in_channels=3):
    if name not in ARCHITECTURES:
        raise InvalidInputError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    return ClassifierArch(name, tuple(ARCHITECTURES[name]), input_size, num_classes, in_channels)


def _make_layers(arch, rng, dtype):
    layers = []
    channels = arch.in_channels
    for kind, width in arch.layer_sequence:
        if kind == "conv3x3":
            layers.append(Conv3x3(channels, width, rng, dtype))
            channels = width
        elif kind == "batchnorm":
            layers.append(BatchNorm(channels, dtype))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool2":
            layers.append(MaxPool2())
        elif kind == "gap":
            layers.append(GlobalAvgPool())
        elif kind == "fullyconnected":
            layers.append(Linear(channels, arch.num_classes, rng, dtype))
        else:
            raise InvalidInputError(f"unsupported layer kind {kind!r}")
    return layers


# --------------------------------------------------------------------------
# Classifier
# --------------------------------------------------------------------------


@dataclass
class Classifier:
    """A feed-forward classifier over the fixed layer vocabulary.

    ``is_training`` marks the single model whose running BN statistics may be
    written.  A train-mode forward on any other model (a frozen teacher, or a
    student probed for input gradients) reads batch statistics but leaves the
    stored ones untouched.
    """

    arch: ClassifierArch
    layers: list
    bn_mode: str = "eval"
    is_training: bool = False
    forward_modes: Counter = field(default_factory=Counter, repr=False)
    _caches: list = field(default=None, repr=False)

    @classmethod
    def create(cls, arch, num_classes=None, rng=None, dtype=DTYPE):
        if isinstance(arch, str):
            arch = build_arch(arch, num_classes if num_classes is not None else 10)
        if rng is None:
            rng = np.random.default_rng()
        return cls(arch, _make_layers(arch, rng, dtype))

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    @property
    def stat_writes(self):
        return sum(getattr(layer, "stat_writes", 0) for layer in self.layers)

    def parameters(self):
        """List of ``(layer_index, name, array)`` for every trainable tensor."""
        return [
            (i, name, getattr(layer, name))
            for i, layer in enumerate(self.layers)
            for name in layer.param_names
        ]

    def buffers(self):
        return [
            (i, name, getattr(layer, name))
            for i, layer in enumerate(self.layers)
            for name in getattr(layer, "buffer_names", ())
        ]

    def state_tensors(self):
        """Every persisted tensor in architecture order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in layer.param_names + getattr(layer, "buffer_names", ()):
                out.append((i, name, getattr(layer, name)))
        return out

    def forward(self, batch, bn_mode=None, update_stats=None):
        """Logits for an ``N x C x H x W`` batch; caches activations for :meth:`backward`."""
        bn_mode = bn_mode or self.bn_mode
        if update_stats is None:
            update_stats = self.is_training
        update_stats = bool(update_stats) and bn_mode == "train"
        x = np.asarray(batch)
        a = self.arch
        if x.ndim != 4 or x.shape[1] != a.in_channels or x.shape[2:] != (a.input_size, a.input_size):
            raise InvalidInputError(
                f"expected batch N x {a.in_channels} x {a.input_size} x {a.input_size}, got {x.shape}"
            )
        if bn_mode == "train" and x.shape[0] < 2:
            raise DegenerateBatchError("train-mode forward needs a batch of at least 2")
        self.forward_modes[bn_mode] += 1
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h, bn_mode, update_stats)
            caches.append(cache)
        self._caches = caches
        return h

    def backward(self, loss_grad_wrt_logits, need_input_grad=True):
        """Return ``(param_grads, input_grad)``.

        ``param_grads`` is aligned with :meth:`parameters`.  ``input_grad`` is
        in ``N x C x H x W`` layout, or ``None`` when not requested.
        """
        if self._caches is None:
            raise ProtocolError("backward called without a preceding forward")
        g = np.asarray(loss_grad_wrt_logits, dtype=self.dtype)
        per_layer = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            want_dx = need_input_grad or i > 0
            g, per_layer[i] = self.layers[i].backward(g, self._caches[i], want_dx)
        grads = [per_layer[i][name] for i, name, _ in self.parameters()]
        dx = None if g is None else np.ascontiguousarray(g.transpose(0, 3, 1, 2))
        return grads, dx

    def clear_cache(self):
        self._caches = None

    def predict_logits(self, batch, batch_size=256):
        """Eval-mode logits, computed in chunks; never touches BN statistics."""
        x = np.asarray(batch)
        out = [
            self.forward(x[i:i + batch_size], bn_mode="eval", update_stats=False)
            for i in range(0, len(x), batch_size)
        ]
        self._caches = None
        return np.concatenate(out) if out else np.zeros((0, self.arch.num_classes), self.dtype)

    def copy(self, dtype=None):
        """Deep copy, optionally cast to another float dtype."""
        dtype = dtype or self.dtype
        clone = Classifier.create(self.arch, rng=np.random.default_rng(0), dtype=dtype)
        for (_, name, src), (j, _, _) in zip(self.state_tensors(), clone.state_tensors()):
            setattr(clone.layers[j], name, np.array(src, dtype=dtype, copy=True))
        clone.bn_mode = self.bn_mode
        return clone


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


def sgd_step(model, param_grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """One classical-momentum SGD update, in place.

    ``v <- momentum * v + (grad + weight_decay * w)`` then ``w <- w - lr * v``.
    BN running statistics are not touched.  Returns the velocity list to pass
    back on the next call.
    """
    params = model.parameters()
    if len(param_grads) != len(params):
        raise InvalidInputError(f"expected {len(params)} gradients, got {len(param_grads)}")
    if velocity is None:
        velocity = [None] * len(params)
    new_velocity = []
    for (i, name, w), g, v in zip(params, param_grads, velocity):
        if g.shape != w.shape:
            raise InvalidInputError(f"gradient for layer {i}.{name} has shape {g.shape}, expected {w.shape}")
        step = g + weight_decay * w if weight_decay else g
        if momentum:
            step = step if v is None else momentum * v + step
        step = step.astype(w.dtype, copy=False)
        w -= lr * step
        new_velocity.append(step if momentum else None)
    return new_velocity


class SGD:
    """Stateful wrapper around :func:`sgd_step` that owns the velocity buffers."""

    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = None

    def step(self, model, param_grads, lr):
        self.velocity = sgd_step(model, param_grads, lr, self.momentum, self.weight_decay, self.velocity)
