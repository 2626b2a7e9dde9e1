"""A small deterministic neural-network engine in float64 numpy.

Layers are immutable descriptors; parameters live on the :class:`Network`.
``forward`` is pure and returns an activation cache, ``backward`` turns an
upstream logit gradient into exact parameter and input gradients.
"""
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, TrainingError, UsageError

DTYPE = np.float64


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int

    def param_shapes(self):
        return [(self.n_out, self.n_in), (self.n_out,)]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ConfigError(f"expects input ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def init(self, rng):
        W = _glorot(rng, (self.n_out, self.n_in), self.n_in, self.n_out)
        return [W, np.zeros(self.n_out, dtype=DTYPE)]

    def forward(self, params, x):
        W, b = params
        return x @ W.T + b, x

    def backward(self, params, x, dy):
        W, _ = params
        return [dy.T @ x, dy.sum(axis=0)], dy @ W

    def text(self):
        return f"dense({self.n_in},{self.n_out})"


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def param_shapes(self):
        k = self.kernel
        return [(self.out_ch, self.in_ch, k, k), (self.out_ch,)]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ConfigError(f"expects input ({self.in_ch}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"kernel {self.kernel} does not fit input {tuple(in_shape)}")
        return (self.out_ch, ho, wo)

    def init(self, rng):
        k2 = self.kernel * self.kernel
        W = _glorot(rng, self.param_shapes()[0], self.in_ch * k2, self.out_ch * k2)
        return [W, np.zeros(self.out_ch, dtype=DTYPE)]

    def _windows(self, ho, wo):
        k, s = self.kernel, self.stride
        for i in range(k):
            for j in range(k):
                yield i, j, slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s)

    def forward(self, params, x):
        W, b = params
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        _, ho, wo = self.output_shape(x.shape[1:])
        k = self.kernel
        cols = np.empty((x.shape[0], self.in_ch, k, k, ho, wo), dtype=DTYPE)
        for i, j, rs, cs in self._windows(ho, wo):
            cols[:, :, i, j] = xp[:, :, rs, cs]
        out = np.tensordot(cols, W, axes=([1, 2, 3], [1, 2, 3]))  # (B, ho, wo, O)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]
        return out, (cols, xp.shape)

    def backward(self, params, cache, dy):
        W, _ = params
        cols, xp_shape = cache
        _, _, ho, wo = dy.shape
        dW = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 4, 5]))
        db = dy.sum(axis=(0, 2, 3))
        dcols = np.tensordot(dy, W, axes=([1], [0]))  # (B, ho, wo, C, k, k)
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        for i, j, rs, cs in self._windows(ho, wo):
            dxp[:, :, rs, cs] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.pad
        dx = dxp[:, :, p:-p, p:-p] if p else dxp
        return [dW, db], dx

    def text(self):
        return f"conv({self.in_ch},{self.out_ch},{self.kernel},{self.stride},{self.pad})"


@dataclass(frozen=True)
class ReLU:
    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, rng):
        return []

    def forward(self, params, x):
        active = x > 0  # derivative at exactly 0 is taken as 0
        return np.where(active, x, 0.0), active

    def backward(self, params, active, dy):
        return [], np.where(active, dy, 0.0)

    def text(self):
        return "relu"


@dataclass(frozen=True)
class AvgPool:
    k: int

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.k or w < self.k:
            raise ConfigError(f"pool size {self.k} larger than input {tuple(in_shape)}")
        return (c, h // self.k, w // self.k)

    def init(self, rng):
        return []

    def forward(self, params, x):
        b, c, h, w = x.shape
        k = self.k
        ho, wo = h // k, w // k
        y = x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, params, x_shape, dy):
        k = self.k
        _, _, ho, wo = dy.shape
        dx = np.zeros(x_shape, dtype=DTYPE)
        dx[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
        return [], dx

    def text(self):
        return f"avgpool({self.k})"


@dataclass(frozen=True)
class Flatten:
    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init(self, rng):
        return []

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, x_shape, dy):
        return [], dy.reshape(x_shape)

    def text(self):
        return "flatten"


_LAYER_RE = re.compile(r"^([a-z]+)(?:\(([\d,\s]*)\))?$")
_LAYER_TYPES = {"dense": Dense, "conv": Conv2D, "relu": ReLU, "avgpool": AvgPool, "flatten": Flatten}


def parse_layer(token):
    m = _LAYER_RE.match(token.strip())
    if not m or m.group(1) not in _LAYER_TYPES:
        raise ConfigError(f"unknown layer descriptor {token!r}")
    args = [int(a) for a in m.group(2).split(",")] if m.group(2) else []
    try:
        return _LAYER_TYPES[m.group(1)](*args)
    except TypeError as exc:
        raise ConfigError(f"bad arguments in layer descriptor {token!r}") from exc


def parse_layers(text):
    """Parse ``"conv(1,8,3,1,1);relu;..."`` into layer descriptors."""
    return [parse_layer(t) for t in text.split(";") if t.strip()]


def layers_text(layers):
    return ";".join(layer.text() for layer in layers)


class Network:
    """Ordered layer stack with its parameters.

    ``params[i]`` is the list of arrays owned by ``layers[i]`` (``[W, b]``
    for Dense/Conv2D, empty otherwise).
    """

    def __init__(self, input_shape, layers, params=None, seed=0, role="model"):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.seed = int(seed)
        self.role = role
        self.version = 0

        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({layer.text()}): {exc}") from None
        if len(shapes[-1]) != 1:
            raise ConfigError(f"final layer must emit a logit vector, got shape {shapes[-1]}")
        self.shapes = shapes

        if params is None:
            rng = np.random.default_rng(self.seed)
            params = [layer.init(rng) for layer in self.layers]
        else:
            params = [[np.array(p, dtype=DTYPE) for p in ps] for ps in params]
            for i, (layer, ps) in enumerate(zip(self.layers, params)):
                expected = layer.param_shapes()
                if [p.shape for p in ps] != [tuple(s) for s in expected]:
                    raise ConfigError(f"layer {i} ({layer.text()}): parameter shapes "
                                      f"{[p.shape for p in ps]} != {expected}")
            if len(params) != len(self.layers):
                raise ConfigError("parameter list does not match layer list")
        self.params = params

    @classmethod
    def from_text(cls, input_shape, text, seed=0, role="model"):
        return cls(input_shape, parse_layers(text), seed=seed, role=role)

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    @property
    def num_params(self):
        return sum(int(np.prod(s)) for layer in self.layers for s in layer.param_shapes())

    def describe(self):
        shape = "x".join(str(d) for d in self.input_shape)
        return f"role={self.role}|input={shape}|{layers_text(self.layers)}"

    def flat_params(self):
        arrays = [p.ravel() for ps in self.params for p in ps]
        return np.concatenate(arrays) if arrays else np.zeros(0, dtype=DTYPE)

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.num_params:
            raise UsageError(f"expected {self.num_params} parameters, got {flat.size}")
        pos = 0
        for ps in self.params:
            for p in ps:
                p[...] = flat[pos:pos + p.size].reshape(p.shape)
                pos += p.size
        self.version += 1

    def copy(self, role=None):
        net = Network(self.input_shape, self.layers, params=self.params, seed=self.seed,
                      role=role or self.role)
        return net

    def sub_network(self, start, stop, role=None):
        """Network made of ``layers[start:stop]`` sharing no memory with self."""
        return Network(self.shapes[start], self.layers[start:stop],
                       params=self.params[start:stop], seed=self.seed, role=role or self.role)

    def logits(self, x, batch_size=1024):
        """Inference-only forward pass, chunked to bound memory."""
        x = np.asarray(x, dtype=DTYPE)
        if len(x) <= batch_size:
            return forward(self, x)[0]
        return np.concatenate([forward(self, x[i:i + batch_size])[0]
                               for i in range(0, len(x), batch_size)])

    def __repr__(self):
        return f"Network({self.describe()!r}, params={self.num_params})"


@dataclass
class ForwardCache:
    net_id: int
    version: int
    input_shape: tuple
    layer_caches: list = field(repr=False)


def forward(net, batch):
    """Return ``(logits, cache)`` for ``batch``. Does not mutate ``net``."""
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != len(net.input_shape) + 1 or x.shape[1:] != net.input_shape or x.shape[0] < 1:
        raise ConfigError(f"layer 0 ({net.layers[0].text() if net.layers else 'input'}): "
                          f"batch shape {x.shape} does not match input shape "
                          f"(B, {', '.join(map(str, net.input_shape))})")
    caches = []
    for layer, ps in zip(net.layers, net.params):
        x, cache = layer.forward(ps, x)
        caches.append(cache)
    return x, ForwardCache(id(net), net.version, np.shape(batch), caches)


def backward(net, cache, loss_grad):
    """Exact gradients of ``sum(loss_grad * logits)``.

    Returns ``(param_grads, input_grads)``; ``param_grads`` mirrors
    ``net.params``.
    """
    if not isinstance(cache, ForwardCache) or cache.net_id != id(net) or cache.version != net.version:
        raise UsageError("cache was not produced by a forward pass of this network state")
    dy = np.asarray(loss_grad, dtype=DTYPE)
    if dy.shape != (cache.input_shape[0], net.num_classes):
        raise UsageError(f"loss_grad shape {dy.shape} does not match logits "
                         f"({cache.input_shape[0]}, {net.num_classes})")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grads[i], dy = net.layers[i].backward(net.params[i], cache.layer_caches[i], dy)
    return grads, dy


def softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    if np.isnan(z).any():
        raise NumericError("softmax received NaN logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _target_distribution(target, n_rows, n_classes):
    target = np.asarray(target)
    if target.ndim == 2:
        if target.shape != (n_rows, n_classes):
            raise UsageError(f"target distribution shape {target.shape} != ({n_rows}, {n_classes})")
        return target.astype(DTYPE)
    labels = np.broadcast_to(target.astype(np.int64), (n_rows,))
    if labels.min() < 0 or labels.max() >= n_classes:
        raise UsageError(f"class index out of range [0, {n_classes})")
    onehot = np.zeros((n_rows, n_classes), dtype=DTYPE)
    onehot[np.arange(n_rows), labels] = 1.0
    return onehot


def cross_entropy(logits, target):
    """Batch-mean cross-entropy and its gradient w.r.t. the logits.

    ``target`` is an integer label (or label array) or a probability row per
    sample. The gradient is ``(softmax(logits) - target) / batch``.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    t = _target_distribution(target, z.shape[0], z.shape[1])
    logp = log_softmax(z)
    loss = float(-(t * logp).sum() / z.shape[0])
    grad = (np.exp(logp) - t) / z.shape[0]
    return max(loss, 0.0), grad


def kl_divergence(p, q, floor=1e-12):
    """Mean over rows of ``sum p * ln(p / q)`` with ``q`` floored."""
    p = np.atleast_2d(np.asarray(p, dtype=DTYPE))
    q = np.atleast_2d(np.asarray(q, dtype=DTYPE))
    if (p < 0).any() or (q < 0).any():
        raise UsageError("distributions must be nonnegative")
    if not (np.allclose(p.sum(-1), 1.0, atol=1e-9) and np.allclose(q.sum(-1), 1.0, atol=1e-9)):
        raise UsageError("distribution rows must sum to 1")
    q = np.maximum(q, floor)
    ratio = np.where(p > 0, np.log(np.where(p > 0, p, 1.0) / q), 0.0)
    return max(float((p * ratio).sum() / p.shape[0]), 0.0)


def kl_loss(logits, target):
    """KL(target || softmax(logits)) batch mean, with the logit gradient.

    Differs from soft cross-entropy only by the constant target entropy, so
    the gradient is identical.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    t = _target_distribution(target, z.shape[0], z.shape[1])
    logp = log_softmax(z)
    with np.errstate(divide="ignore"):
        logt = np.where(t > 0, np.log(np.where(t > 0, t, 1.0)), 0.0)
    loss = float((t * (logt - logp)).sum() / z.shape[0])
    return max(loss, 0.0), (np.exp(logp) - t) / z.shape[0]


LOSSES = {"cross_entropy": cross_entropy, "cross_entropy_soft": cross_entropy, "kl": kl_loss}


def get_loss(name):
    try:
        return LOSSES[name]
    except KeyError:
        raise ConfigError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None


@dataclass
class SgdState:
    velocity: list
    momentum: float = 0.9
    base_lr: float = 0.1
    total_epochs: int = 1
    current_epoch: int = 0

    @classmethod
    def for_network(cls, net, base_lr, momentum=0.9, total_epochs=1):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        if base_lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {base_lr}")
        velocity = [[np.zeros_like(p) for p in ps] for ps in net.params]
        return cls(velocity, momentum, base_lr, max(int(total_epochs), 1), 0)

    @property
    def lr(self):
        """Cosine-annealed rate for the current epoch (no restarts, no floor)."""
        t = min(self.current_epoch, self.total_epochs) / self.total_epochs
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * t))


def sgd_step(net, grads, state):
    """``v <- momentum * v + g``; ``p <- p - lr * v``. Updates in place."""
    if len(grads) != len(net.params):
        raise UsageError("gradient layout does not match network parameters")
    lr = state.lr
    for ps, gs, vs in zip(net.params, grads, state.velocity):
        if len(gs) != len(ps):
            raise UsageError("gradient layout does not match network parameters")
        for p, g, v in zip(ps, gs, vs):
            v *= state.momentum
            v += g
            p -= lr * v
    net.version += 1
    return net, state


def fit(net, inputs, targets, epochs, lr, rng, momentum=0.9, batch_size=64, loss="cross_entropy",
        stage="train"):
    """Minibatch SGD with momentum and per-epoch cosine annealing.

    Returns the mean training loss of each epoch. Raises
    :class:`TrainingError` on a non-finite loss.
    """
    loss_fn = get_loss(loss) if isinstance(loss, str) else loss
    inputs = np.asarray(inputs, dtype=DTYPE)
    targets = np.asarray(targets)
    state = SgdState.for_network(net, lr, momentum, epochs)
    history = []
    n = len(inputs)
    for epoch in range(epochs):
        state.current_epoch = epoch
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, cache = forward(net, inputs[idx])
            value, dlogits = loss_fn(logits, targets[idx])
            if not math.isfinite(value):
                raise TrainingError(f"{stage}: non-finite loss at epoch {epoch}", stage, epoch)
            grads, _ = backward(net, cache, dlogits)
            sgd_step(net, grads, state)
            total += value * len(idx)
        history.append(total / n)
    return history


@dataclass
class GradCheckReport:
    """Max relative error per layer for parameter and input gradients."""

    tol: float
    param_errors: dict
    input_error: float

    @property
    def passed(self):
        return self.input_error < self.tol and all(e < self.tol for e in self.param_errors.values())

    @property
    def failing_layers(self):
        return [name for name, e in self.param_errors.items() if e >= self.tol]

    @property
    def max_error(self):
        return max([self.input_error, *self.param_errors.values()])


def relative_error(analytic, numeric):
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def grad_check(net, batch, tol=1e-6, h=1e-5, loss=None, rng=None, grad_fn=None):
    """Compare analytic gradients with central finite differences.

    The scalar objective is ``loss(logits)`` if given (a function returning
    ``(value, dlogits)``), otherwise a fixed random projection of the logits.
    ``grad_fn(net, batch, dlogits)`` can replace :func:`backward` to test a
    deliberately faulty implementation.
    """
    batch = np.asarray(batch, dtype=DTYPE)
    if loss is None:
        rng = rng or np.random.default_rng(0)
        proj = rng.standard_normal((batch.shape[0], net.num_classes))

        def loss(z):
            return float((proj * z).sum()), proj

    def objective(x):
        return loss(forward(net, x)[0])[0]

    logits, cache = forward(net, batch)
    _, dlogits = loss(logits)
    if grad_fn is None:
        param_grads, input_grads = backward(net, cache, dlogits)
    else:
        param_grads, input_grads = grad_fn(net, batch, dlogits)

    param_errors = {}
    for i, (layer, ps, gs) in enumerate(zip(net.layers, net.params, param_grads)):
        worst = 0.0
        for p, g in zip(ps, gs):
            numeric = np.zeros_like(p)
            flat, nflat = p.reshape(-1), numeric.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = objective(batch)
                flat[k] = orig - h
                down = objective(batch)
                flat[k] = orig
                nflat[k] = (up - down) / (2 * h)
            worst = max(worst, relative_error(g, numeric))
        if ps:
            param_errors[f"{i}:{layer.text()}"] = worst

    numeric = np.zeros_like(batch)
    xflat, nflat = batch.reshape(-1), numeric.reshape(-1)
    for k in range(xflat.size):
        orig = xflat[k]
        xflat[k] = orig + h
        up = objective(batch)
        xflat[k] = orig - h
        down = objective(batch)
        xflat[k] = orig
        nflat[k] = (up - down) / (2 * h)
    return GradCheckReport(tol, param_errors, relative_error(input_grads, numeric))


def relu_margin(net, batch):
    """Smallest |pre-activation| feeding any ReLU, used to stay off kinks."""
    x = np.asarray(batch, dtype=DTYPE)
    margin = np.inf
    for layer, ps in zip(net.layers, net.params):
        if isinstance(layer, ReLU) and x.size:
            margin = min(margin, float(np.abs(x).min()))
        x, _ = layer.forward(ps, x)
    return margin
