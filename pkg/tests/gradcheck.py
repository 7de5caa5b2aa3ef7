"""Central finite-difference oracles shared by the unit and acceptance tests.

Analytic gradients are computed in float32, exactly as training uses them.  The
numeric reference is evaluated on a float64 copy of the same model so that
the difference quotient with step 1e-3 is not swamped by float32 rounding.

A central difference is only a valid oracle where the function is smooth on
``[x - h, x + h]``; with tens of thousands of ReLU units a step of 1e-3
almost always crosses some switch point.  The numeric side therefore
evaluates the network with its ReLU masks and max-pool selections frozen at
the base point.  That function coincides with the network on a neighbourhood
of the base point, so its derivative there is the true derivative, and it is
smooth, so the difference quotient converges to it.

Errors are ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` with
``floor = 1e-3 * max|gradient|`` over the whole model: conv biases feeding a
train-mode batchnorm have a true gradient of exactly zero, for which a pure
relative error is undefined.
"""
import numpy as np

from label_refinery.losses import loss_from_logits, loss_grad_wrt_logits

STEP = 1e-3


def central_difference(f, arr, direction, h=STEP):
    orig = arr.copy()
    arr += h * direction
    fp = f()
    arr[...] = orig - h * direction
    fm = f()
    arr[...] = orig
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=0.0):
    return abs(a - b) / max(abs(a), abs(b), floor, 1e-300)


def frozen_forward(model, x, frozen, bn_mode):
    """Forward pass that reuses the switch decisions recorded in ``frozen``."""
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    for layer, cache in zip(model.layers, frozen):
        if layer.kind == "relu":
            h = h * cache
        elif layer.kind == "maxpool2":
            masks, _ = cache
            parts = [h[:, i::2, j::2] for i in (0, 1) for j in (0, 1)]
            h = sum(p * m for p, m in zip(parts, masks))
        else:
            h, _ = layer.forward(h, bn_mode, False)
    return h


class FrozenProbe:
    """Loss of a float64 model with its activation pattern frozen at the base point."""

    def __init__(self, model, x, target, choice, bn_mode):
        self.model, self.x, self.target, self.choice, self.bn_mode = model, x, target, choice, bn_mode
        model.forward(x, bn_mode=bn_mode, update_stats=False)
        self.frozen = model._caches
        model.clear_cache()

    def __call__(self):
        logits = frozen_forward(self.model, self.x, self.frozen, self.bn_mode)
        return loss_from_logits(self.choice, self.target, logits)


def check_tensor(f, arr64, grad32, rng, floor, coords=3):
    """Worst error over one random direction and ``coords`` random coordinates."""
    grad = np.asarray(grad32, np.float64)
    d = rng.standard_normal(arr64.shape)
    d /= np.linalg.norm(d)
    worst = rel_err(float(np.sum(grad * d)), central_difference(f, arr64, d), floor)
    for k in rng.choice(arr64.size, size=min(coords, arr64.size), replace=False):
        e = np.zeros(arr64.size)
        e[k] = 1.0
        worst = max(worst, rel_err(float(grad.reshape(-1)[k]), central_difference(f, arr64, e.reshape(arr64.shape)), floor))
    return worst


def model_gradient_errors(model, x, target, choice, rng, bn_mode="train", coords=3):
    """Map ``"<layer>:<kind>.<param>"`` and ``"input"`` to the worst relative error."""
    x32 = np.asarray(x, np.float32)
    logits = model.forward(x32, bn_mode=bn_mode, update_stats=False)
    grads, dx = model.backward(loss_grad_wrt_logits(choice, target, logits))
    model.clear_cache()
    ref = model.copy(np.float64)
    x64 = x32.astype(np.float64)
    f = FrozenProbe(ref, x64, target, choice, bn_mode)
    floor = 1e-3 * max(float(np.abs(g).max()) for g in grads + [dx])
    errors = {}
    for (i, name, arr), g in zip(ref.parameters(), grads):
        errors[f"{i}:{ref.layers[i].kind}.{name}"] = check_tensor(f, arr, g, rng, floor, coords)
    errors["input"] = check_tensor(f, x64, dx, rng, floor, coords)
    return errors


def layer_gradient_errors(make_layer, x_shape, rng, bn_mode="train", x=None):
    """Exhaustive check of one layer: float32 analytic vs float64 numeric on ``sum(y * u)``.

    ``x`` overrides the standard-normal input, e.g. to keep it away from kinks.
    """
    layer32, layer64 = make_layer(np.float32), make_layer(np.float64)
    for name in layer64.param_names:
        getattr(layer32, name)[...] = getattr(layer64, name)
    x64 = rng.standard_normal(x_shape) if x is None else np.asarray(x, np.float64).reshape(x_shape)
    y, cache = layer32.forward(x64.astype(np.float32), bn_mode, False)
    u = rng.standard_normal(y.shape)
    dx, grads = layer32.backward(u.astype(np.float32), cache, True)

    def f():
        return float(np.sum(layer64.forward(x64, bn_mode, False)[0] * u))

    errors = {}
    targets = [(name, getattr(layer64, name), grads[name]) for name in layer64.param_names]
    targets.append(("input", x64, dx))
    for name, arr, g in targets:
        g = np.asarray(g, np.float64)
        num = np.empty(arr.size)
        for k in range(arr.size):
            e = np.zeros(arr.size)
            e[k] = 1.0
            num[k] = central_difference(f, arr, e.reshape(arr.shape))
        errors[name] = float(np.linalg.norm(g.reshape(-1) - num) / max(np.linalg.norm(num), 1e-12))
    return errors


def random_simplex(rng, n, k, concentration=1.0):
    return rng.dirichlet(np.full(k, concentration), size=n)
