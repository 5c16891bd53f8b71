import numpy as np
import pytest

from gatedprune.checkpoint import Checkpoint, CheckpointError
from gatedprune.gates import init_gates
from gatedprune.graph import get_spec, insert_shortcuts, instantiate


def _net():
    spec = insert_shortcuts(get_spec("mini_resnet"), "layer")
    gates = init_gates(spec, ["filter", "layer"], seed=1)
    net = instantiate(spec, gates, seed=2)
    x = np.random.default_rng(0).normal(size=(4, 1, 8, 8))
    net.forward(x, "train")  # move running stats off their initial values
    return net, gates, x


def test_round_trip_is_bit_exact(tmp_path):
    net, gates, x = _net()
    gates[0].original = gates[0].phi.copy() * 0.5
    ck = Checkpoint(net.spec, net.state_dict(), gates, {"m/w": np.arange(3.0)}, epoch=4, history=[{"loss": 0.25}])
    ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    assert back.spec.to_json() == net.spec.to_json()
    assert back.epoch == 4 and back.history == [{"loss": 0.25}]
    np.testing.assert_array_equal(back.optimizer["m/w"], np.arange(3.0))
    np.testing.assert_array_equal(back.gates[0].original, gates[0].original)
    assert [g.id for g in back.gates] == [g.id for g in gates]
    np.testing.assert_array_equal(back.network().forward(x).data, net.forward(x).data)
    assert back.to_bytes() == ck.to_bytes()


def test_bad_magic_and_truncation(tmp_path):
    net, gates, _ = _net()
    raw = Checkpoint(net.spec, net.state_dict(), gates).to_bytes()
    with pytest.raises(CheckpointError, match="bad magic"):
        Checkpoint.from_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(raw[:8] + (9).to_bytes(4, "little") + raw[12:])
