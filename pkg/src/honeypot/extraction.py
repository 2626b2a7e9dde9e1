"""Attacker-side model extraction against a black-box ``predict`` oracle.

This module only ever sees ``oracle(x, output_mode)``; it has no access to
the defender's trigger, mask or target class.
"""
from dataclasses import dataclass

import numpy as np

from .data import LABELS_HARD, LABELS_SOFT, _decode, _encode
from .errors import CodecError, ConfigError, UsageError
from .nn import Network, fit, parse_layers, softmax
from .seeding import make_rng
from .victim import arch_text

STRATEGIES = ("random", "entropy_active")
LABEL_MODES = ("soft", "hard")


@dataclass
class AttackConfig:
    budget: int = 2000
    strategy: str = "random"
    label_mode: str = "soft"
    rounds: int = 4
    substitute_arch: str = "victim"
    train_epochs: int = 60
    lr: float = 0.02
    seed: int = 0
    batch_size: int = 64
    interim_epochs: int = 15
    loss: str = "cross_entropy_soft"

    def __post_init__(self):
        if self.strategy == "entropy":
            self.strategy = "entropy_active"
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.budget < 1 or self.rounds < 1 or self.train_epochs < 1:
            raise ConfigError("budget, rounds and train_epochs must be >= 1")
        if self.strategy == "entropy_active" and self.budget % self.rounds:
            raise ConfigError(f"rounds ({self.rounds}) must divide the budget ({self.budget})")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class TransferSet:
    inputs: np.ndarray
    targets: np.ndarray  # soft rows [n, N] or hard labels [n]
    query_log: np.ndarray
    num_classes: int

    @property
    def label_mode(self):
        return "soft" if np.ndim(self.targets) == 2 else "hard"

    def __len__(self):
        return len(self.inputs)


def entropy(probs):
    """Row-wise prediction entropy ``-sum p ln p`` (0 ln 0 = 0)."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def _query(oracle, pool, indices, label_mode):
    """One oracle call per queried sample."""
    rows = [oracle(pool.inputs[i:i + 1], label_mode)[0] for i in indices]
    if label_mode == "soft":
        return np.stack(rows).astype(np.float64)
    return np.asarray(rows, dtype=np.int64)


def _new_substitute(input_shape, cfg, num_classes, label):
    seed = int(make_rng(cfg.seed, label).integers(2**63))
    text = arch_text(cfg.substitute_arch, num_classes, input_shape[0])
    return Network(input_shape, parse_layers(text), seed=seed, role="substitute")


def build_transfer_set(oracle, pool, cfg, num_classes=None, initial_indices=None):
    """Query ``cfg.budget`` pool samples and record the oracle's answers.

    ``random`` draws indices uniformly without replacement. ``entropy_active``
    queries a random first tranche of ``budget / rounds`` samples, then per
    round trains an interim substitute on everything queried so far and
    queries the remaining samples it is least certain about.
    ``initial_indices`` fixes the first tranche (used to compare runs on a
    permuted pool).
    """
    if cfg.budget > len(pool):
        raise UsageError(f"budget {cfg.budget} exceeds pool size {len(pool)}")
    rng = make_rng(cfg.seed, "attack/selection")
    if cfg.strategy == "random":
        log = rng.choice(len(pool), size=cfg.budget, replace=False)
        targets = _query(oracle, pool, log, cfg.label_mode)
        n = targets.shape[1] if targets.ndim == 2 else num_classes
        if n is None:
            raise UsageError("num_classes is required for hard-label extraction")
        return TransferSet(pool.inputs[log], targets, log.astype(np.int64), n)

    tranche = cfg.budget // cfg.rounds
    if initial_indices is None:
        first = rng.choice(len(pool), size=tranche, replace=False)
    else:
        first = np.asarray(initial_indices, dtype=np.int64)
        if len(first) != tranche:
            raise UsageError(f"initial tranche must hold {tranche} indices")
    log = list(first)
    targets = [_query(oracle, pool, first, cfg.label_mode)]
    if num_classes is None:
        num_classes = targets[0].shape[1] if cfg.label_mode == "soft" else None
    if num_classes is None:
        raise UsageError("num_classes is required for hard-label active selection")
    queried = np.zeros(len(pool), dtype=bool)
    queried[first] = True
    for r in range(1, cfg.rounds):
        ts = TransferSet(pool.inputs[np.array(log)], np.concatenate(targets), np.array(log), num_classes)
        interim = _new_substitute(pool.shape, cfg, num_classes, f"attack/interim/{r}")
        _train(interim, ts, cfg, cfg.interim_epochs, make_rng(cfg.seed, f"attack/interim-batches/{r}"))
        remaining = np.flatnonzero(~queried)
        scores = entropy(softmax(interim.logits(pool.inputs[remaining])))
        pick = remaining[np.argsort(-scores, kind="stable")[:tranche]]
        log.extend(pick)
        queried[pick] = True
        targets.append(_query(oracle, pool, pick, cfg.label_mode))
    log = np.array(log, dtype=np.int64)
    return TransferSet(pool.inputs[log], np.concatenate(targets), log, num_classes)


def _train(net, ts, cfg, epochs, rng):
    if len(ts) == 0:
        raise UsageError("transfer set is empty")
    loss = cfg.loss if ts.label_mode == "soft" else "cross_entropy"
    return fit(net, ts.inputs, ts.targets, epochs, cfg.lr, rng, batch_size=cfg.batch_size, loss=loss,
               stage="train-substitute")


def train_substitute(ts, cfg):
    """Fresh seeded substitute trained on the transfer set.

    Soft transfer sets use ``cfg.loss`` against the probability rows; hard
    transfer sets use cross-entropy against the returned labels.
    """
    net = _new_substitute(ts.inputs.shape[1:], cfg, ts.num_classes, "attack/substitute-init")
    _train(net, ts, cfg, cfg.train_epochs, make_rng(cfg.seed, "attack/substitute-batches"))
    return net


class CountingOracle:
    """Wraps an oracle and counts queried samples and calls."""

    def __init__(self, oracle):
        self.oracle = oracle
        self.calls = 0
        self.samples = 0

    def __call__(self, x, output_mode="soft"):
        self.calls += 1
        self.samples += len(x)
        return self.oracle(x, output_mode)


# -- transfer-set persistence (HPDS + soft-target block, adjacent query log) --

def write_transfer_set(ts, path):
    kind = LABELS_SOFT if ts.label_mode == "soft" else LABELS_HARD
    with open(path, "wb") as f:
        f.write(_encode(ts.inputs, kind, ts.targets, ts.num_classes))
    with open(str(path) + ".qlog", "wb") as f:
        f.write(np.asarray(ts.query_log, dtype="<u4").tobytes())


def read_transfer_set(path):
    with open(path, "rb") as f:
        inputs, targets, n, kind = _decode(f.read())
    if targets is None:
        raise CodecError("transfer set file carries no targets", 28)
    with open(str(path) + ".qlog", "rb") as f:
        raw = f.read()
    if len(raw) != 4 * len(inputs):
        raise CodecError(f"query log holds {len(raw)} bytes, expected {4 * len(inputs)}", len(raw))
    log = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    return TransferSet(inputs, targets, log, n)
