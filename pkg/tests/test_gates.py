import logging

import numpy as np
import pytest

from gatedprune.gates import (
    Gate,
    SparsityConfig,
    apply_filter_gate,
    apply_structure_gate,
    attachment_points,
    binarize_gates,
    gate_value,
    init_gates,
    project_gates,
    sparsity_loss,
)
from gatedprune.graph import get_spec, insert_shortcuts
from gatedprune.tensor import Tape, Tensor, backward


def test_gate_value_clamps_and_noise_is_off_by_default():
    g = Gate("filter", "c", [-0.2, 0.3, 1.4])
    np.testing.assert_array_equal(gate_value(g, "train").data, [0.0, 0.3, 1.0])
    noisy = Gate("filter", "c", [0.5, 0.5], noise=0.1)
    v = gate_value(noisy, "train", np.random.default_rng(0)).data
    assert np.all(np.abs(v - 0.5) <= 0.1) and not np.allclose(v, 0.5)
    np.testing.assert_array_equal(gate_value(noisy, "eval").data, [0.5, 0.5])
    with pytest.raises(ValueError, match="random generator"):
        gate_value(noisy, "train")


def test_structure_gates_are_scalar():
    with pytest.raises(ValueError, match="scalar"):
        Gate("layer", "a", [0.1, 0.2])
    with pytest.raises(ValueError, match="granularity"):
        Gate("bogus", "a", [0.1])


def test_apply_filter_gate_scales_channels():
    x = Tensor(np.ones((2, 3, 2, 2)))
    out = apply_filter_gate(x, Gate("filter", "c", [0.0, 0.5, 1.0])).data
    np.testing.assert_array_equal(out[:, :, 0, 0], [[0.0, 0.5, 1.0]] * 2)
    with pytest.raises(ValueError, match="entries"):
        apply_filter_gate(x, Gate("filter", "c", [1.0, 1.0]))


def test_apply_structure_gate_zero_is_identity_and_requires_matching_shapes():
    rng = np.random.default_rng(0)
    s, h = Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(apply_structure_gate(s, Gate("layer", "a", [0.0]), h).data, h.data)
    np.testing.assert_allclose(apply_structure_gate(s, Gate("layer", "a", [0.25]), h).data, 0.25 * s.data + h.data)
    with pytest.raises(ValueError, match="adapter"):
        apply_structure_gate(s, Gate("layer", "a", [1.0]), Tensor(np.zeros((2, 4, 4, 4))))


def test_sparsity_loss_matches_hand_sum():
    gates = [
        Gate("filter", "a", [0.1, 0.4]),
        Gate("filter", "b", [0.2, 0.2, 0.5]),
        Gate("layer", "x", [0.3]),
        Gate("layer", "y", [0.9]),
        Gate("block", "z", [0.6]),
    ]
    cfg = SparsityConfig(lambda_f=2.0, lambda_l=0.5, lambda_r=7.0, lambda_b=3.0)
    want = 2.0 * (0.5 / 2 + 0.9 / 3) + 0.5 * (0.3 + 0.9) / 2 + 3.0 * 0.6
    assert sparsity_loss(gates, cfg).item() == pytest.approx(want, abs=1e-14)
    assert sparsity_loss(gates, SparsityConfig()).item() == 0.0


def test_sparsity_gradient_is_lambda_times_weight():
    g = Gate("filter", "a", [0.2, 0.7, 0.0001, 0.5])
    cfg = SparsityConfig(lambda_f=3.0)
    with Tape() as tape:
        loss = sparsity_loss([g], cfg)
    np.testing.assert_allclose(backward(tape, loss)[g.param.id], 3.0 / 4)


def test_explicit_weights():
    gates = [Gate("layer", "x", [0.5])]
    cfg = SparsityConfig(lambda_l=1.0, weight_rule="explicit", weights={"layer:x": 4.0})
    assert sparsity_loss(gates, cfg).item() == pytest.approx(2.0)


def test_init_gates_counts_and_ranges():
    spec = insert_shortcuts(get_spec("mini_vgg8"), "layer")
    gates = init_gates(spec, ["filter", "layer"], seed=4)
    filt = [g for g in gates if g.granularity == "filter"]
    assert len(filt) == 6 and [g.phi.size for g in filt] == [8, 8, 16, 16, 32, 32]
    assert len([g for g in gates if g.granularity == "layer"]) == 3
    assert all(np.all((g.phi >= 0) & (g.phi <= 1)) for g in gates)
    again = init_gates(spec, ["filter", "layer"], seed=4)
    assert all(np.array_equal(a.phi, b.phi) for a, b in zip(gates, again))


def test_init_gates_warns_without_attachment_points(caplog):
    with caplog.at_level(logging.WARNING):
        assert init_gates(get_spec("mini_vgg8"), ["block"]) == []
    assert "no attachment points" in caplog.text
    with pytest.raises(ValueError):
        init_gates(get_spec("mini_vgg8"), ["bogus"])


def test_attachment_points_exclude_projection_convs():
    pts = dict(attachment_points(get_spec("mini_resnet"), "filter"))
    assert "b2_proj" not in pts and "stem" in pts


def test_binarize_is_idempotent_and_keeps_original():
    g = Gate("filter", "a", [0.05, 0.5, 0.95])
    b1 = binarize_gates([g], {"filter": 0.1})
    b2 = binarize_gates(b1, {"filter": 0.1})
    np.testing.assert_array_equal(b1[0].phi, [0.0, 1.0, 1.0])
    np.testing.assert_array_equal(b2[0].phi, b1[0].phi)
    np.testing.assert_array_equal(b2[0].original, [0.05, 0.5, 0.95])
    np.testing.assert_array_equal(g.phi, [0.05, 0.5, 0.95])
    with pytest.raises(ValueError):
        binarize_gates([g], {"filter": 1.5})


def test_project_and_param_share_memory():
    g = Gate("filter", "a", [0.5, 0.5])
    g.param.data -= 1.0
    project_gates([g])
    np.testing.assert_array_equal(g.phi, [0.0, 0.0])
    g.freeze()
    assert not g.param.requires_grad
