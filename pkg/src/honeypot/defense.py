"""Honeypot head, masked patch trigger and the bi-level fine-tuning loop.

The protected deployment keeps the victim backbone and swaps its
classification layer for a honeypot layer ``H(x) = W f(x) + b``. The loop
alternates three steps:

1. extraction simulation: a persistent shadow network is trained on the
   honeypot's soft outputs for a random draw of shadow samples;
2. trigger generation: the patch trigger is moved by signed-gradient steps
   that push the shadow network toward the target class;
3. fine-tuning: ``W, b`` are trained to match the original head on clean
   inputs and to emit the target class on triggered inputs.
"""
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CodecError, ConfigError, NumericError, TrainingError, UsageError
from .nn import (Dense, Network, SgdState, backward, cross_entropy, fit, forward, get_loss,
                 parse_layers, sgd_step, softmax)
from .seeding import make_rng
from .victim import arch_text, checkpoint_from_bytes, checkpoint_bytes


@dataclass
class Trigger:
    """Patch trigger. ``mask`` is 1 where the original pixel is kept."""

    delta: np.ndarray
    mask: np.ndarray
    target_class: int
    epsilon: float = 0.1
    alpha: float = 0.9
    patch: tuple = (6, 4, 4)  # (size, row, col)
    mode: str = "masked"

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.delta.shape != self.mask.shape:
            raise UsageError("delta and mask must share a shape")
        if not np.isin(self.mask, (0, 1)).all():
            raise UsageError("mask must be binary")
        if self.epsilon <= 0 or not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("trigger needs epsilon > 0 and alpha in [0, 1]")
        if self.mode not in ("masked", "additive"):
            raise ConfigError(f"unknown trigger mode {self.mode!r}")

    @property
    def shape(self):
        return self.delta.shape

    @property
    def is_empty(self):
        return bool(self.mask.all())

    def copy(self):
        return Trigger(self.delta.copy(), self.mask.copy(), self.target_class, self.epsilon,
                       self.alpha, tuple(self.patch), self.mode)


def patch_mask(shape, size, row, col):
    c, h, w = shape
    if size < 0 or row < 0 or col < 0 or row + size > h or col + size > w:
        raise ConfigError(f"patch {size}x{size} at ({row}, {col}) does not fit a {h}x{w} image")
    mask = np.ones(shape, dtype=np.uint8)
    mask[:, row:row + size, col:col + size] = 0
    return mask


def init_trigger(shape, target_class, size=6, row=4, col=4, epsilon=0.1, alpha=0.9, rng=None,
                 low=0.25, high=0.75, mode="masked"):
    """Patch trigger with ``delta`` drawn uniformly from ``[low, high]`` inside the patch."""
    mask = patch_mask(shape, size, row, col)
    rng = rng if rng is not None else np.random.default_rng(0)
    delta = rng.uniform(low, high, size=shape) * (1 - mask)
    return Trigger(delta, mask, int(target_class), float(epsilon), float(alpha), (size, row, col), mode)


def apply_trigger(x, trig):
    """``clip(M*x + (1-M)*delta, 0, 1)``; unmasked pixels are returned bit-identical."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != trig.shape:
        raise UsageError(f"input shape {x.shape} does not match trigger shape {trig.shape}")
    if trig.mode == "additive":
        return np.clip(x + trig.delta, 0.0, 1.0)
    return np.clip(np.where(trig.mask.astype(bool), x, trig.delta), 0.0, 1.0)


def sign_step(trig, sign_field):
    """One momentum-decayed signed step: ``delta <- a*delta - (1-a)*eps*sign``.

    ``delta`` is then re-confined to the patch. It is not clipped: the
    recurrence stays exact and :func:`apply_trigger` clips triggered pixels.
    """
    a = trig.alpha
    new = a * trig.delta - (1.0 - a) * trig.epsilon * np.asarray(sign_field, dtype=np.float64)
    new = np.where(trig.mask.astype(bool), 0.0, new)
    out = trig.copy()
    out.delta = new
    return out


def trigger_gradient(shadow, trig, inputs):
    """Mean over ``inputs`` of the input gradient of CE(shadow(T(x)), target).

    Clipping in :func:`apply_trigger` is passed straight through.
    """
    xt = apply_trigger(inputs, trig)
    logits, cache = forward(shadow, xt)
    _, dlogits = cross_entropy(logits, np.full(len(xt), trig.target_class))
    _, dx = backward(shadow, cache, dlogits)
    g = dx.sum(axis=0)  # dlogits already carries the 1/batch factor
    if trig.mode == "masked":
        g = g * (1 - trig.mask)
    if not np.isfinite(g).all():
        raise NumericError("trigger gradient is not finite")
    return g


def trigger_update_step(shadow, trig, d_v, epochs, grad_fn=None):
    """``epochs`` signed-gradient updates of the trigger against a frozen shadow."""
    if len(d_v) == 0:
        raise UsageError("verification set is empty")
    grad_fn = grad_fn or (lambda t: trigger_gradient(shadow, t, d_v.inputs))
    for _ in range(epochs):
        trig = sign_step(trig, np.sign(grad_fn(trig)))
    return trig


def success_rate(logits_fn, inputs, labels, trig, exclude_target=True):
    """Fraction of triggered inputs classified as the target class."""
    if exclude_target and labels is not None:
        inputs = inputs[labels != trig.target_class]
    if len(inputs) == 0:
        return float("nan")
    pred = logits_fn(apply_trigger(inputs, trig)).argmax(axis=1)
    return float((pred == trig.target_class).mean())


@dataclass
class BloConfig:
    blo_iterations: int = 30
    samples_per_iter: int = 500
    epochs_per_step: int = 5
    shadow_arch: str = "victim"
    finetune_lr: float = 0.02
    shadow_lr: float = 0.1
    label_loss: str = "cross_entropy_soft"
    seed: int = 0
    batch_size: int = 64
    momentum: float = 0.9
    backdoor_weight: float = 1.0

    def __post_init__(self):
        if self.blo_iterations < 0 or self.samples_per_iter < 1 or self.epochs_per_step < 0:
            raise ConfigError("BLO counts must be nonnegative (samples_per_iter >= 1)")
        if self.finetune_lr <= 0 or self.shadow_lr <= 0:
            raise ConfigError("BLO learning rates must be positive")
        get_loss(self.label_loss)


@dataclass
class ProtectedModel:
    """Victim backbone + honeypot head. ``predict`` is the only oracle surface."""

    backbone: Network
    honeypot: Network
    trigger: Trigger = field(repr=False)
    history: list = field(default_factory=list, repr=False)

    @property
    def num_classes(self):
        return self.honeypot.num_classes

    def features(self, x):
        return self.backbone.logits(x)

    def logits(self, x):
        return self.honeypot.logits(self.features(x))

    def predict(self, x, output_mode="soft"):
        x = np.asarray(x, dtype=np.float64)
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise UsageError("query pixels must lie in [0, 1]")
        probs = softmax(self.logits(x))
        if output_mode == "soft":
            return probs
        if output_mode == "hard":
            return probs.argmax(axis=1)
        raise UsageError(f"output_mode must be 'soft' or 'hard', got {output_mode!r}")


def init_honeypot(victim):
    """Honeypot layer initialized as an exact copy of the victim's head."""
    layer = victim.net.layers[-1]
    if not isinstance(layer, Dense):
        raise ConfigError("victim head must be a dense layer")
    if layer.n_in != victim.feature_dim:
        raise ConfigError(f"head width {layer.n_in} != feature width {victim.feature_dim}")
    return Network((layer.n_in,), [Dense(layer.n_in, layer.n_out)],
                   params=[[p.copy() for p in victim.net.params[-1]]], role="honeypot")


def simulate_extraction_step(honeypot, features, batch, shadow, epochs, lr, loss_mode, rng,
                             batch_size=64, momentum=0.9):
    """Train the persistent shadow on ``(x, softmax(H(f(x))))`` for ``epochs`` epochs.

    ``features`` are the backbone features of ``batch``. Returns the per-epoch
    mean losses; ``shadow`` is updated in place.
    """
    if epochs == 0:
        return []
    soft = softmax(honeypot.logits(features))
    return fit(shadow, batch, soft, epochs, lr, rng, momentum=momentum, batch_size=batch_size,
               loss=loss_mode, stage="extraction-simulation")


def finetune_step(honeypot, feats_clean, feats_triggered, victim_soft, target_class, epochs, lr, rng,
                  batch_size=64, momentum=0.9, backdoor_weight=1.0, loss_mode="cross_entropy_soft"):
    """Fine-tune ``W, b`` on ``L(H(x), F(x)) + w * L(H(T(x)), y_target)``.

    Both terms are batch means over the same samples. ``feats_triggered``
    may be None (no trigger), which drops the second term.
    """
    loss_fn = get_loss(loss_mode)
    n = len(feats_clean)
    state = SgdState.for_network(honeypot, lr, momentum, epochs)
    target = np.full(n, target_class)
    history = []
    for epoch in range(epochs):
        state.current_epoch = epoch
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, cache = forward(honeypot, feats_clean[idx])
            value, dz = loss_fn(logits, victim_soft[idx])
            grads, _ = backward(honeypot, cache, dz)
            if feats_triggered is not None and backdoor_weight != 0.0:
                logits_t, cache_t = forward(honeypot, feats_triggered[idx])
                value_t, dz_t = cross_entropy(logits_t, target[idx])
                grads_t, _ = backward(honeypot, cache_t, dz_t)
                value += backdoor_weight * value_t
                grads = [[g + backdoor_weight * gt for g, gt in zip(gs, gts)]
                         for gs, gts in zip(grads, grads_t)]
            if not math.isfinite(value):
                raise TrainingError(f"finetune: non-finite loss at epoch {epoch}", "finetune", epoch)
            sgd_step(honeypot, grads, state)
            total += value * len(idx)
        history.append(total / n)
    return history


def run_blo(victim, d_s, d_v, cfg, trigger=None):
    """Bi-level fine-tuning of a honeypot head for ``victim``.

    ``trigger`` is the initial trigger (see :func:`init_trigger`); by default
    a 6x6 patch at (4, 4) targeting the last class.
    """
    if d_v.labels is None:
        raise UsageError("verification set must be labeled")
    backbone = victim.backbone
    honeypot = init_honeypot(victim)
    n_classes = victim.num_classes
    if trigger is None:
        trigger = init_trigger(d_s.shape, n_classes - 1, rng=make_rng(cfg.seed, "blo/trigger"))
    shadow = Network(d_s.shape, parse_layers(arch_text(cfg.shadow_arch, n_classes, d_s.shape[0])),
                     seed=int(make_rng(cfg.seed, "blo/shadow-init").integers(2**63)), role="shadow")
    W0, b0 = victim.net.params[-1]
    rng = make_rng(cfg.seed, "blo/loop")
    n = min(cfg.samples_per_iter, len(d_s))
    history = []
    dv_feats_mask = d_v.labels != trigger.target_class

    for it in range(cfg.blo_iterations):
        step = "extraction-simulation"
        try:
            idx = np.sort(rng.choice(len(d_s), size=n, replace=False))
            batch = d_s.inputs[idx]
            feats = backbone.logits(batch)
            losses = simulate_extraction_step(honeypot, feats, batch, shadow, cfg.epochs_per_step,
                                              cfg.shadow_lr, cfg.label_loss, rng, cfg.batch_size,
                                              cfg.momentum)
            step = "trigger-generation"
            trigger = trigger_update_step(shadow, trigger, d_v, cfg.epochs_per_step)
            step = "finetune"
            victim_soft = softmax(feats @ W0.T + b0)
            feats_t = None if trigger.is_empty else backbone.logits(apply_trigger(batch, trigger))
            finetune_step(honeypot, feats, feats_t, victim_soft, trigger.target_class,
                          cfg.epochs_per_step, cfg.finetune_lr, rng, cfg.batch_size, cfg.momentum,
                          cfg.backdoor_weight, cfg.label_loss)
        except NumericError as exc:
            raise TrainingError(f"BLO iteration {it}, step {step}: {exc}", step, it) from exc

        xv = d_v.inputs[dv_feats_mask]
        history.append({
            "iteration": it,
            "shadow_train_loss": losses[-1] if losses else float("nan"),
            "trigger_success_on_shadow": success_rate(shadow.logits, xv, None, trigger),
            "honeypot_clean_acc": float((honeypot.logits(backbone.logits(d_v.inputs)).argmax(1)
                                         == d_v.labels).mean()),
        })
    return ProtectedModel(backbone, honeypot, trigger, history)


# -- trigger codec ---------------------------------------------------------

TRIG_MAGIC = b"HPTR"
TRIG_VERSION = 1
_TRIG_HEAD = struct.Struct("<4sIIdd3I3I")


def trigger_bytes(trig):
    c, h, w = trig.shape
    size, row, col = trig.patch
    head = _TRIG_HEAD.pack(TRIG_MAGIC, TRIG_VERSION, trig.target_class, trig.epsilon, trig.alpha,
                           size, row, col, c, h, w)
    return head + trig.mask.astype("<u1").tobytes() + trig.delta.astype("<f8").tobytes()


def save_trigger(trig, path):
    with open(path, "wb") as f:
        f.write(trigger_bytes(trig))


def trigger_from_bytes(buf):
    if len(buf) < _TRIG_HEAD.size:
        raise CodecError("truncated trigger header", len(buf))
    magic, version, target, eps, alpha, size, row, col, c, h, w = _TRIG_HEAD.unpack_from(buf, 0)
    if magic != TRIG_MAGIC:
        raise CodecError(f"bad magic {magic!r}, expected {TRIG_MAGIC!r}", 0)
    if version != TRIG_VERSION:
        raise CodecError(f"unsupported trigger version {version}", 4)
    npix = c * h * w
    expected = _TRIG_HEAD.size + 9 * npix
    if len(buf) != expected:
        raise CodecError(f"trigger size mismatch: expected {expected} bytes, found {len(buf)}",
                         min(len(buf), expected))
    mask = np.frombuffer(buf, dtype="<u1", count=npix, offset=_TRIG_HEAD.size).reshape(c, h, w)
    delta = np.frombuffer(buf, dtype="<f8", offset=_TRIG_HEAD.size + npix).reshape(c, h, w)
    try:
        return Trigger(delta.copy(), mask.copy(), target, eps, alpha, (size, row, col))
    except (UsageError, ConfigError) as exc:
        raise CodecError(f"invalid trigger contents: {exc}", _TRIG_HEAD.size) from None


def load_trigger(path):
    with open(path, "rb") as f:
        return trigger_from_bytes(f.read())


def save_protected(model, backbone_path, honeypot_path, trigger_path):
    with open(backbone_path, "wb") as f:
        f.write(checkpoint_bytes(model.backbone))
    with open(honeypot_path, "wb") as f:
        f.write(checkpoint_bytes(model.honeypot))
    save_trigger(model.trigger, trigger_path)


def load_protected(backbone_path, honeypot_path, trigger_path):
    with open(backbone_path, "rb") as f:
        backbone = checkpoint_from_bytes(f.read())
    with open(honeypot_path, "rb") as f:
        honeypot = checkpoint_from_bytes(f.read())
    if backbone.role != "backbone" or honeypot.role != "honeypot":
        raise CodecError(f"unexpected checkpoint roles {backbone.role!r}/{honeypot.role!r}", 12)
    if backbone.shapes[-1] != honeypot.input_shape:
        raise CodecError("backbone feature width does not match honeypot input", 12)
    return ProtectedModel(backbone, honeypot, load_trigger(trigger_path))
