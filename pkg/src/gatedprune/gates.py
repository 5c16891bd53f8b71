"""Learnable scaling-factor gates and their L1 sparsity penalty.

A filter gate holds one factor per output channel of a conv stack; layer,
branch and block gates hold a single factor that scales the structure side
of a shortcut add.  Gate values are ``clamp(phi + noise, 0, 1)``; noise is
off unless a gate is built with a positive amplitude.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .graph.shortcuts import GRANULARITIES, site_adds
from .graph.spec import ModelSpec
from .tensor import Tensor

log = logging.getLogger(__name__)

_LAMBDA_FIELD = {"filter": "lambda_f", "layer": "lambda_l", "branch": "lambda_r", "block": "lambda_b"}


@dataclass(eq=False)
class Gate:
    granularity: str
    attachment: str
    phi: np.ndarray
    noise: float = 0.0
    trainable: bool = True
    original: np.ndarray | None = None
    param: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        self.phi = np.array(self.phi, dtype=np.float64).reshape(-1)
        if self.granularity != "filter" and self.phi.size != 1:
            raise ValueError(f"{self.granularity} gate must be scalar, got {self.phi.size} entries")
        # shares memory with phi, so in-place optimizer updates are visible to both
        self.param = Tensor(self.phi, requires_grad=self.trainable, name=self.id)

    @property
    def id(self) -> str:
        return f"{self.granularity}:{self.attachment}"

    def copy(self) -> "Gate":
        g = Gate(self.granularity, self.attachment, self.phi.copy(), self.noise, self.trainable)
        g.original = None if self.original is None else self.original.copy()
        return g

    def freeze(self) -> None:
        self.trainable = False
        self.param.requires_grad = False


@dataclass
class SparsityConfig:
    lambda_f: float = 0.0
    lambda_l: float = 0.0
    lambda_r: float = 0.0
    lambda_b: float = 0.0
    weight_rule: str = "one_over_count"
    weights: dict[str, float] = field(default_factory=dict)

    def lam(self, granularity: str) -> float:
        return getattr(self, _LAMBDA_FIELD[granularity])

    @classmethod
    def uniform(cls, granularities, value: float = 1.0) -> "SparsityConfig":
        return cls(**{_LAMBDA_FIELD[g]: value for g in granularities})


def gate_value(gate: Gate, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    x = gate.param
    if mode == "train" and gate.noise > 0:
        if rng is None:
            raise ValueError("noisy gate in train mode needs a random generator")
        eps = rng.uniform(-gate.noise, gate.noise, size=gate.phi.shape)
        x = ops.add(x, Tensor(eps))
    return ops.clamp(x, 0.0, 1.0)


def apply_filter_gate(x: Tensor, gate: Gate, mode: str = "eval", rng=None) -> Tensor:
    if gate.granularity != "filter":
        raise ValueError(f"{gate.id} is not a filter gate")
    if x.ndim < 2 or x.shape[1] != gate.phi.size:
        raise ValueError(f"filter gate {gate.id} has {gate.phi.size} entries, input has shape {x.shape}")
    return ops.channel_scale(x, gate_value(gate, mode, rng))


def apply_structure_gate(structure_output: Tensor, gate: Gate, shortcut_input: Tensor, mode: str = "eval", rng=None) -> Tensor:
    """structure_output * gate + shortcut_input."""
    if gate.granularity == "filter":
        raise ValueError(f"{gate.id} is not a structure gate")
    if structure_output.shape != shortcut_input.shape:
        raise ValueError(
            f"structure output {structure_output.shape} and shortcut {shortcut_input.shape} "
            "differ; the site needs a dimension adapter"
        )
    scaled = ops.scalar_scale(structure_output, gate_value(gate, mode, rng))
    return ops.add(scaled, shortcut_input)


def gate_weight(gate: Gate, gates: list[Gate], config: SparsityConfig) -> float:
    if config.weight_rule == "explicit":
        return config.weights.get(gate.id, 1.0)
    if config.weight_rule != "one_over_count":
        raise ValueError(f"unknown weight rule {config.weight_rule!r}")
    if gate.granularity == "filter":
        return 1.0 / gate.phi.size
    return 1.0 / sum(1 for g in gates if g.granularity == gate.granularity)


def sparsity_loss(gates: list[Gate], config: SparsityConfig) -> Tensor:
    """Sum over granularities of lambda * sum(weight * |phi|_1)."""
    terms = []
    for g in gates:
        lam = config.lam(g.granularity)
        if lam == 0.0:
            continue
        terms.append(ops.scale(ops.abs_sum(g.param), lam * gate_weight(g, gates, config)))
    return ops.sum_scalars(terms)


def attachment_points(spec: ModelSpec, granularity: str) -> list[tuple[str, int]]:
    """(attachment id, gate length) for one granularity, in spec order."""
    if granularity == "filter":
        return [
            (n.id, n.params["out_channels"])
            for n in spec.nodes
            if n.kind == "conv" and n.prunable and not n.artificial
        ]
    adds = site_adds(spec, granularity)
    order = [n.id for n in spec.nodes]
    return [(a, 1) for a in sorted(adds.values(), key=order.index)]


def init_gates(spec: ModelSpec, enabled, seed: int = 0, noise: float = 0.0) -> list[Gate]:
    """One gate per attachment point of each enabled granularity, phi ~ U(0,1)."""
    rng = np.random.default_rng(seed)
    gates = []
    for gran in GRANULARITIES:
        if gran not in enabled:
            continue
        points = attachment_points(spec, gran)
        if not points:
            log.warning("granularity %s enabled but the spec has no attachment points", gran)
        for att, length in points:
            gates.append(Gate(gran, att, rng.uniform(0.0, 1.0, size=length), noise))
    unknown = set(enabled) - set(GRANULARITIES)
    if unknown:
        raise ValueError(f"unknown granularities {sorted(unknown)}")
    return gates


def project_gates(gates: list[Gate]) -> None:
    for g in gates:
        np.clip(g.phi, 0.0, 1.0, out=g.phi)


def binarize_gates(gates: list[Gate], thresholds: dict[str, float]) -> list[Gate]:
    """Copies with phi snapped to {0,1}: entries below the threshold become 0.

    Granularities without a threshold are copied unchanged.  The first
    pre-binarization values are kept in ``original``.
    """
    out = []
    for g in gates:
        c = g.copy()
        t = thresholds.get(g.granularity)
        if t is not None:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold {t} for {g.granularity} outside [0,1]")
            if c.original is None:
                c.original = g.phi.copy()
            c.phi[...] = np.where(g.phi < t, 0.0, 1.0)
        out.append(c)
    return out
