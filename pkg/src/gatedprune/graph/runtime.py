"""Executable networks built from a :class:`ModelSpec` plus gates."""

from __future__ import annotations

import zlib
from typing import Iterable

import numpy as np

from .. import ops
from .. import gates as _gates
from ..ops import RunningStats
from ..tensor import Tensor
from .shortcuts import conv_stack
from .spec import INPUT, ModelSpec, SpecError, topo_order, validate


def _node_rng(seed: int, node_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(node_id.encode())])


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GatedNetwork:
    """Parameters, BatchNorm statistics and gates bound to one spec.

    ``params`` maps ``"<node>.<weight|bias|gamma|beta>"`` to trainable tensors;
    ``stats`` maps batchnorm node ids to their running statistics.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], stats: dict[str, RunningStats], gates: Iterable["_gates.Gate"] = (), seed: int = 0):
        self.spec = spec
        self.shapes = validate(spec)
        self.order = topo_order(spec)
        self.nodes = spec.node_map()
        self.params = params
        self.stats = stats
        self.gates: dict[str, "_gates.Gate"] = {}
        self.seed = seed
        self.dropout_rng = np.random.default_rng([seed, 1])
        self.noise_rng = np.random.default_rng([seed, 2])
        self._producers = {nid: spec.producers(nid) for nid in self.order}
        self._filter_at: dict[str, str] = {}
        for g in gates:
            self.bind(g)

    # gates ---------------------------------------------------------------
    def bind(self, gate: "_gates.Gate") -> None:
        node = self.nodes.get(gate.attachment)
        if gate.granularity == "filter":
            if node is None or node.kind != "conv":
                raise SpecError([(gate.attachment, f"orphan gate attachment for {gate.id}")])
            if gate.phi.size != node.params["out_channels"]:
                raise SpecError([(gate.attachment, f"gate {gate.id} length {gate.phi.size} != filter count")])
            self._filter_at[conv_stack(self.spec, node.id)[-1]] = gate.id
        else:
            if node is None or node.kind != "add" or node.params.get("role") != gate.granularity:
                raise SpecError([(gate.attachment, f"orphan gate attachment for {gate.id}")])
        if gate.id in self.gates:
            raise SpecError([(gate.attachment, f"second gate at attachment {gate.id}")])
        self.gates[gate.id] = gate

    def gate_list(self) -> list["_gates.Gate"]:
        return list(self.gates.values())

    # parameters ----------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def trainable(self) -> dict[str, Tensor]:
        """Weights plus trainable gate factors, keyed by name."""
        out = {k: t for k, t in self.params.items() if t.requires_grad}
        for g in self.gates.values():
            if g.trainable:
                out[f"gate:{g.id}"] = g.param
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.params.items()}
        for nid, s in self.stats.items():
            out[f"{nid}.running_mean"] = s.mean.copy()
            out[f"{nid}.running_var"] = s.var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data[...] = state[k]
        for nid, s in self.stats.items():
            s.mean[...] = state[f"{nid}.running_mean"]
            s.var[...] = state[f"{nid}.running_var"]

    # forward -------------------------------------------------------------
    def forward(self, x, mode: str = "eval") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} != spec input {self.spec.input_shape}")
        values: dict[str, Tensor] = {INPUT: x}
        for nid in self.order:
            node = self.nodes[nid]
            ins = [values[p] for p in self._producers[nid]]
            v = self._apply(node, ins, mode)
            gid = self._filter_at.get(nid)
            if gid is not None:
                v = ops.channel_scale(v, _gates.gate_value(self.gates[gid], mode, self.noise_rng))
            values[nid] = v
        return values[self.spec.output]

    __call__ = forward

    def _apply(self, node, ins, mode) -> Tensor:
        p = node.params
        k = node.kind
        nid = node.id
        if k == "conv":
            return ops.conv2d(ins[0], self.params[f"{nid}.weight"], self.params.get(f"{nid}.bias"), p.get("stride", 1), p.get("padding", 0))
        if k == "adapter":
            if p["op"] == "pool":
                return ops.pool2d(ins[0], p["mode"], p["window"], p.get("stride"))
            return ops.conv2d(ins[0], self.params[f"{nid}.weight"], None, 1, 0)
        if k == "dense":
            return ops.dense(ins[0], self.params[f"{nid}.weight"], self.params.get(f"{nid}.bias"))
        if k == "batchnorm":
            return ops.batchnorm(ins[0], self.params[f"{nid}.gamma"], self.params[f"{nid}.beta"], self.stats[nid], mode, p.get("eps", ops.BN_EPS))
        if k == "relu":
            return ops.relu(ins[0])
        if k == "pool":
            return ops.pool2d(ins[0], p["mode"], p["window"], p.get("stride"))
        if k == "flatten":
            return ops.flatten(ins[0])
        if k == "dropout":
            return ops.dropout(ins[0], p.get("rate", 0.5), self.dropout_rng, mode)
        if k == "add":
            return self._add(node, ins, mode)
        raise ValueError(f"unknown node kind {k!r}")

    def _add(self, node, ins, mode) -> Tensor:
        p = node.params
        maps = p.get("maps") or {}
        gate = None
        if p.get("role"):
            gate = self.gates.get(f"{p['role']}:{node.id}")
        terms = []
        gated = False
        for src, v in zip(self._producers[node.id], ins):
            if gate is not None and not gated and src == p.get("structure"):
                v = ops.scalar_scale(v, _gates.gate_value(gate, mode, self.noise_rng))
                gated = True
            if src in maps:
                v = ops.channel_scatter(v, maps[src], p["channels"])
            terms.append(v)
        out = terms[0]
        for t in terms[1:]:
            out = ops.add(out, t)
        return out


def _input_dims(spec: ModelSpec, shapes, nid) -> tuple:
    src = spec.producers(nid)[0]
    return tuple(spec.input_shape) if src == INPUT else shapes[src]


def init_parameters(spec: ModelSpec, seed: int = 0) -> tuple[dict[str, Tensor], dict[str, RunningStats]]:
    """He-uniform conv/dense weights, zero biases, unit gamma, zero beta."""
    shapes = validate(spec)
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}
    for n in spec.nodes:
        p = n.params
        rng = _node_rng(seed, n.id)
        if n.kind == "conv" or (n.kind == "adapter" and p["op"] == "conv1x1"):
            cin = _input_dims(spec, shapes, n.id)[0]
            kern = p.get("kernel", 1)
            shape = (p["out_channels"], cin, kern, kern)
            params[f"{n.id}.weight"] = Tensor(_he_uniform(rng, shape, cin * kern * kern), True, f"{n.id}.weight")
            if n.kind == "conv" and p.get("bias", True):
                params[f"{n.id}.bias"] = Tensor(np.zeros(p["out_channels"]), True, f"{n.id}.bias")
        elif n.kind == "dense":
            d = _input_dims(spec, shapes, n.id)[0]
            m = p["out_features"]
            params[f"{n.id}.weight"] = Tensor(_he_uniform(rng, (d, m), d), True, f"{n.id}.weight")
            if p.get("bias", True):
                params[f"{n.id}.bias"] = Tensor(np.zeros(m), True, f"{n.id}.bias")
        elif n.kind == "batchnorm":
            c = shapes[n.id][0]
            params[f"{n.id}.gamma"] = Tensor(np.ones(c), True, f"{n.id}.gamma")
            params[f"{n.id}.beta"] = Tensor(np.zeros(c), True, f"{n.id}.beta")
            stats[n.id] = RunningStats.fresh(c, p.get("momentum", ops.BN_MOMENTUM))
    return params, stats


def instantiate(spec: ModelSpec, gates: Iterable["_gates.Gate"] = (), seed: int = 0, state: dict[str, np.ndarray] | None = None) -> GatedNetwork:
    params, stats = init_parameters(spec, seed)
    net = GatedNetwork(spec, params, stats, gates, seed)
    if state is not None:
        net.load_state_dict(state)
    return net
