"""Victim classifier training, backbone/head split and the HPNT checkpoint codec."""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, ConfigError, UsageError
from .nn import Dense, Network, ReLU, fit, parse_layers, softmax
from .seeding import make_rng

VICTIM_ARCH = "conv(1,8,3,1,1);relu;avgpool(2);conv(8,16,3,1,1);relu;avgpool(2);flatten;" \
              "dense(256,64);relu;dense(64,{n})"

# Substitute stand-ins for the architecture study.
ARCHITECTURES = {
    "victim": VICTIM_ARCH,
    "small-mlp": "flatten;dense(256,128);relu;dense(128,64);relu;dense(64,{n})",
    "wide-conv": "conv(1,16,3,1,1);relu;avgpool(2);conv(16,32,3,1,1);relu;avgpool(2);flatten;"
                 "dense(512,64);relu;dense(64,{n})",
    "deep-conv": "conv(1,8,3,1,1);relu;conv(8,8,3,1,1);relu;avgpool(2);conv(8,16,3,1,1);relu;"
                 "avgpool(2);conv(16,16,3,1,1);relu;flatten;dense(256,64);relu;dense(64,{n})",
}


def arch_text(name_or_text, num_classes, channels=1):
    """Resolve a named architecture (or raw descriptor text) for ``num_classes``."""
    text = ARCHITECTURES.get(name_or_text, name_or_text)
    text = text.format(n=num_classes)
    if channels != 1:
        text = text.replace("conv(1,", f"conv({channels},", 1)
    return text


@dataclass
class VictimModel:
    net: Network
    test_accuracy: float = float("nan")

    @property
    def backbone(self):
        return self.net.sub_network(0, len(self.net.layers) - 1, role="backbone")

    @property
    def head(self):
        return self.net.layers[-1], self.net.params[-1]

    @property
    def feature_dim(self):
        return self.net.shapes[-2][0]

    @property
    def num_classes(self):
        return self.net.num_classes

    def logits(self, x):
        return self.net.logits(x)

    def predict(self, x, output_mode="soft"):
        """Oracle surface of an undefended deployment."""
        x = np.asarray(x, dtype=np.float64)
        if x.min() < 0.0 or x.max() > 1.0:
            raise UsageError("query pixels must lie in [0, 1]")
        probs = softmax(self.logits(x))
        return probs if output_mode == "soft" else probs.argmax(axis=1)


def _check_victim_arch(net):
    last = net.layers[-1]
    if not isinstance(last, Dense) or len(net.layers) < 2 or not isinstance(net.layers[-2], ReLU):
        raise ConfigError("victim architecture must end with relu followed by a dense head")


def build_network(input_shape, arch, num_classes, seed, role="model"):
    text = arch_text(arch, num_classes, input_shape[0])
    return Network(input_shape, parse_layers(text), seed=seed, role=role)


def train_victim(train, test, arch="victim", epochs=30, seed=0, lr=0.05, batch_size=64):
    """Train the victim classifier and record its clean test accuracy."""
    if train.labels is None or test.labels is None:
        raise UsageError("victim training needs labeled train and test sets")
    if train.num_classes < 2:
        raise ConfigError("victim needs at least 2 classes")
    net = build_network(train.shape, arch, train.num_classes, make_rng(seed, "victim/init").integers(2**63),
                        role="victim")
    _check_victim_arch(net)
    fit(net, train.inputs, train.labels, epochs, lr, make_rng(seed, "victim/batches"),
        batch_size=batch_size, stage="train-victim")
    acc = float((net.logits(test.inputs).argmax(axis=1) == test.labels).mean())
    return VictimModel(net, acc)


def split_head(model):
    """Return ``(feature_fn, head)``; ``head = (W, b)`` of the original classifier."""
    backbone = model.backbone
    W, b = (p.copy() for p in model.net.params[-1])

    def feature_fn(x):
        return backbone.logits(x)

    feature_fn.dim = model.feature_dim
    return feature_fn, (W, b)


# -- checkpoint codec ------------------------------------------------------

CKPT_MAGIC = b"HPNT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def checkpoint_bytes(net):
    desc = net.describe().encode("utf-8")
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(desc)) + desc + \
        net.flat_params().astype("<f8").tobytes()


def save_checkpoint(net, path):
    if isinstance(net, VictimModel):
        net = net.net
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(net))


def parse_descriptor(text):
    """``"role=..|input=CxHxW|layers"`` -> (role, input_shape, layers)."""
    parts = text.split("|", 2)
    if len(parts) != 3 or not parts[0].startswith("role=") or not parts[1].startswith("input="):
        raise ConfigError(f"malformed architecture descriptor {text!r}")
    shape = tuple(int(d) for d in parts[1][len("input="):].split("x"))
    return parts[0][len("role="):], shape, parse_layers(parts[2])


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    return checkpoint_from_bytes(buf)


def checkpoint_from_bytes(buf):
    if len(buf) < _CKPT_HEAD.size:
        raise CodecError("truncated checkpoint header", len(buf))
    magic, version, dlen = _CKPT_HEAD.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise CodecError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
    if version != CKPT_VERSION:
        raise CodecError(f"unsupported checkpoint version {version}", 4)
    start = _CKPT_HEAD.size
    if len(buf) < start + dlen:
        raise CodecError("truncated architecture descriptor", len(buf))
    try:
        role, shape, layers = parse_descriptor(buf[start:start + dlen].decode("utf-8"))
        net = Network(shape, layers, role=role)
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CodecError(f"invalid architecture descriptor: {exc}", start) from None
    offset = start + dlen
    expected = offset + 8 * net.num_params
    if len(buf) != expected:
        raise CodecError(f"parameter block size mismatch: expected {expected} bytes total, "
                         f"found {len(buf)}", min(len(buf), expected))
    net.set_flat_params(np.frombuffer(buf, dtype="<f8", offset=offset))
    net.version = 0
    return net
