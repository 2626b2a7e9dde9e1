import numpy as np
import pytest

from honeypot.data import Dataset
from honeypot.errors import CodecError, ConfigError, UsageError
from honeypot.nn import Network, parse_layers
from honeypot.victim import (ARCHITECTURES, VictimModel, arch_text, checkpoint_bytes,
                             checkpoint_from_bytes, load_checkpoint, save_checkpoint, split_head,
                             train_victim)


def test_full_model_equals_head_of_backbone(tiny_victim, tiny_data):
    x = tiny_data["test"].inputs[:50]
    feature_fn, (W, b) = split_head(tiny_victim)
    assert np.array_equal(tiny_victim.logits(x), feature_fn(x) @ W.T + b)
    assert feature_fn.dim == tiny_victim.feature_dim == 64 == W.shape[1]


def test_victim_records_accuracy(tiny_victim):
    assert 0.0 <= tiny_victim.test_accuracy <= 1.0
    assert tiny_victim.num_classes == 10


def test_victim_training_is_seeded(tiny_data):
    a = train_victim(tiny_data["train"], tiny_data["test"], epochs=1, seed=3)
    b = train_victim(tiny_data["train"], tiny_data["test"], epochs=1, seed=3)
    assert np.array_equal(a.net.flat_params(), b.net.flat_params())


@pytest.mark.parametrize("name", sorted(ARCHITECTURES))
def test_named_architectures_build(name):
    net = Network((1, 16, 16), parse_layers(arch_text(name, 10)))
    assert net.num_classes == 10


def test_victim_arch_must_end_in_relu_dense(tiny_data):
    with pytest.raises(ConfigError):
        train_victim(tiny_data["train"], tiny_data["test"], arch="flatten;dense(256,10)", epochs=1)


def test_unlabeled_training_data_rejected(tiny_data):
    with pytest.raises(UsageError):
        train_victim(Dataset(tiny_data["train"].inputs[:10]), tiny_data["test"], epochs=1)


def test_predict_contract(tiny_victim, tiny_data):
    x = tiny_data["test"].inputs[:20]
    p = tiny_victim.predict(x, "soft")
    assert np.abs(p.sum(1) - 1).max() < 1e-12
    assert np.array_equal(tiny_victim.predict(x, "hard"), p.argmax(1))
    with pytest.raises(UsageError):
        tiny_victim.predict(x + 2.0)


def test_checkpoint_round_trip(tmp_path, tiny_victim):
    path = tmp_path / "v.hpnt"
    save_checkpoint(tiny_victim, path)
    net = load_checkpoint(path)
    assert net.role == "victim" and net.layers == tiny_victim.net.layers
    assert np.array_equal(net.flat_params(), tiny_victim.net.flat_params())
    assert checkpoint_bytes(net) == path.read_bytes()
    desc = tiny_victim.net.describe()
    assert path.stat().st_size == 12 + len(desc) + 8 * tiny_victim.net.num_params


def test_checkpoint_errors(tiny_victim):
    raw = checkpoint_bytes(tiny_victim.net)
    with pytest.raises(CodecError, match="magic"):
        checkpoint_from_bytes(b"HPDS" + raw[4:])
    with pytest.raises(CodecError, match="version"):
        checkpoint_from_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CodecError, match="size mismatch"):
        checkpoint_from_bytes(raw[:-8])
    with pytest.raises(CodecError):
        checkpoint_from_bytes(raw[:6])
    broken = raw.replace(b"dense(64,10)", b"dense(64,1x)")
    with pytest.raises(CodecError, match="descriptor"):
        checkpoint_from_bytes(broken)


def test_backbone_is_a_copy(tiny_victim):
    bb = tiny_victim.backbone
    bb.params[0][0][...] = 0.0
    assert tiny_victim.net.params[0][0].any()
    assert isinstance(VictimModel(tiny_victim.net).head[0], type(tiny_victim.net.layers[-1]))
