import json
import logging

import numpy as np
import pytest

import oracles
from gatedprune.gates import binarize_gates, init_gates
from gatedprune.graph import ModelSpec, NodeSpec, builtin_specs, get_spec, insert_shortcuts, instantiate, validate
from gatedprune.metrics import CompressionReport, build_report, count_flops, count_params, reduction
from gatedprune.surgery import PruningPlan, apply_plan, plan_from_gates


def one_node(kind, params, input_shape):
    """Cost of a single node: wrap it in a valid network and subtract the hand-costed head."""
    spec = ModelSpec(
        [NodeSpec("n", kind, params), NodeSpec("flat", "flatten"), NodeSpec("head", "dense", {"out_features": 2})],
        [("input", "n"), ("n", "flat"), ("flat", "head")],
        input_shape,
        2,
    )
    d = int(np.prod(validate(spec)["n"]))
    return count_params(spec) - (2 * d + 2), count_flops(spec) - (4 * d + 2)


def test_empty_spec_costs_nothing():
    empty = ModelSpec([], [], (1, 4, 4), 2)
    assert count_params(empty) == 0 and count_flops(empty) == 0


def test_hand_formula_examples():
    assert one_node("conv", {"out_channels": 16, "kernel": 3, "padding": 1}, (3, 8, 8))[0] == 16 * 3 * 3 * 3 + 16 == 448
    assert one_node("conv", {"out_channels": 1, "kernel": 1, "bias": False}, (1, 4, 4))[1] == 2 * 1 * 1 * 1 * 1 * 4 * 4 == 32
    assert one_node("relu", {}, (10, 1, 1)) == (0, 10)


def test_batchnorm_and_dense_costs():
    assert one_node("batchnorm", {}, (4, 3, 3)) == (8, 2 * 36)
    assert one_node("dense", {"out_features": 5}, (7,)) == (7 * 5 + 5, 2 * 35 + 5)
    assert one_node("dropout", {"rate": 0.5}, (6,)) == (0, 0)


@pytest.mark.parametrize("name", sorted(builtin_specs()))
def test_catalog_costs_match_oracles(name):
    spec = get_spec(name)
    assert count_flops(spec) == oracles.flops_by_walk(spec)
    if name.startswith("mini"):
        assert count_params(spec) == oracles.params_by_allocation(instantiate(spec))


def test_catalog_params_match_allocation_with_shortcuts():
    spec = get_spec("mini_resnet")
    for g in ("layer", "branch", "block"):
        spec = insert_shortcuts(spec, g)
    assert count_params(spec) == oracles.params_by_allocation(instantiate(spec))
    assert count_flops(spec) == oracles.flops_by_walk(spec)


def test_vgg16_params_match_allocation():
    spec = get_spec("vgg16_custom")
    assert count_params(spec) == oracles.params_by_allocation(instantiate(spec))


def test_removing_conv_channels_gives_closed_form_delta():
    spec = get_spec("mini_vgg8")
    net = instantiate(spec, seed=0)
    rng = np.random.default_rng(0)
    # conv3: 8 -> 16 channels at 14x14, 3x3 kernels; its consumer conv4 has 16 outputs
    base_p, base_f = count_params(spec), count_flops(spec)
    node = spec.node("conv3")
    cin, cout, k = 8, node.params["out_channels"], node.params["kernel"]
    nxt = spec.node("conv4").params["out_channels"]
    hw = 14 * 14
    for _ in range(5):
        r = int(rng.integers(1, cout))
        removed = sorted(rng.choice(cout, r, replace=False).tolist())
        pspec, _ = apply_plan(spec, net.state_dict(), PruningPlan(filters={"conv3": removed}))
        dp = r * (cin * k * k + 1) + 2 * r + r * nxt * k * k
        # conv3 outputs, then bn (2) and relu (1) per element, then conv4 inputs
        df = r * hw * (2 * cin * k * k + 1) + r * hw * (2 + 1) + 2 * r * nxt * k * k * hw
        assert base_p - count_params(pspec) == dp
        assert base_f - count_flops(pspec) == df


def test_costs_are_additive_over_disjoint_subgraphs():
    conv = {"out_channels": 4, "kernel": 3, "padding": 1}
    a, b = one_node("conv", conv, (2, 6, 6)), one_node("relu", {}, (4, 6, 6))
    joined = ModelSpec(
        [NodeSpec("n", "conv", conv), NodeSpec("m", "relu"), NodeSpec("flat", "flatten"), NodeSpec("head", "dense", {"out_features": 2})],
        [("input", "n"), ("n", "m"), ("m", "flat"), ("flat", "head")],
        (2, 6, 6),
        2,
    )
    d = 4 * 36
    assert count_params(joined) - (2 * d + 2) == a[0] + b[0]
    assert count_flops(joined) - (4 * d + 2) == a[1] + b[1]


def test_reduction_examples():
    assert reduction(100, 17) == pytest.approx(83.0)
    assert reduction(100, 100) == 0.0
    # unit invariance: ops versus kilo-ops
    assert reduction(123456, 7890) == pytest.approx(reduction(123.456, 7.890), abs=1e-12)


def test_identical_specs_give_zero_reduction():
    spec = get_spec("mini_vgg8")
    rep = build_report((spec, 0.9), (spec, 0.9), {"dataset": "mnist"})
    assert rep.params_reduction == 0.0 and rep.flops_reduction == 0.0
    assert rep.dataset == "mnist"


def test_pruned_larger_than_baseline_warns(caplog):
    small = get_spec("mini_vgg8")
    big = insert_shortcuts(small, "layer")
    with caplog.at_level(logging.WARNING):
        rep = build_report((small, 1.0), (big, 1.0))
    assert rep.params_reduction <= 0 and rep.flops_reduction < 0
    assert "larger than the baseline" in caplog.text


def test_report_formats():
    spec = insert_shortcuts(get_spec("mini_vgg8"), "layer")
    gates = binarize_gates(init_gates(spec, ["filter", "layer"], 3), {"filter": 0.3, "layer": 0.3})
    plan = plan_from_gates(spec, gates, {"filter": 0.3, "layer": 0.3})
    pspec, _ = apply_plan(spec, instantiate(spec, gates).state_dict(), plan, keep_scaffold=False)
    rep = build_report((get_spec("mini_vgg8"), 0.95), (pspec, 0.94), {"dataset": "mnist", "granularities": ["filter", "layer"]})
    assert 0 < rep.params_reduction < 100
    assert CompressionReport(**json.loads(rep.to_json())) == rep
    text = rep.table()
    assert "Params↓" in text and "multiply-accumulate counted as 2" in text and "94.00%" in text
    lines = rep.to_csv().splitlines()
    assert len(lines) == 2 and lines[0].startswith("dataset,") and "filter+layer" in lines[1]
