"""Declarative network description with shape inference and JSON round-trip.

A :class:`ModelSpec` is a DAG of :class:`NodeSpec` values.  The pseudo-node
``"input"`` produces the image batch; ``spec.output`` names the logits node.
Shapes exclude the batch axis: (C, H, W) for activations, (D,) for features.

Add nodes carry their residual role in ``params``:

``structure`` / ``shortcut``
    producer ids of the gated side and the bypass side
``role`` / ``site``
    granularity (``layer``, ``branch`` or ``block``) and the site id
    (conv id for layers, group id for branches and blocks)
``maps`` / ``channels``
    optional per-producer channel index lists, written by surgery when an
    input lost channels; the listed positions place the input's channels
    inside a zero tensor of ``channels`` width
"""

from __future__ import annotations

import copy
import heapq
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

INPUT = "input"
FORMAT = "gatedprune.modelspec/1"

KINDS = ("conv", "dense", "pool", "batchnorm", "relu", "add", "flatten", "dropout", "adapter")

Shape = tuple[int, ...]


class SpecError(ValueError):
    """Structured spec violation; ``diagnostics`` lists (node id, message) pairs."""

    def __init__(self, diagnostics: list[tuple[str, str]]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{node}: {msg}" if node else msg for node, msg in diagnostics))


@dataclass
class NodeSpec:
    id: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    prunable: bool = False
    artificial: bool = False

    def __post_init__(self):
        if self.kind == "adapter":
            self.prunable = False
            self.artificial = True


@dataclass
class Group:
    """A branch (sequential path) or block (union of branches) annotation."""

    id: str
    entry: str
    exit: str
    nodes: list[str] = field(default_factory=list)
    branches: list[str] = field(default_factory=list)


@dataclass
class ModelSpec:
    nodes: list[NodeSpec]
    edges: list[tuple[str, str]]
    input_shape: Shape
    num_classes: int
    output: str | None = None
    branches: list[Group] = field(default_factory=list)
    blocks: list[Group] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.edges = [tuple(e) for e in self.edges]
        if self.output is None and self.nodes:
            self.output = self.nodes[-1].id

    # lookups -------------------------------------------------------------
    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def node_map(self) -> dict[str, NodeSpec]:
        return {n.id: n for n in self.nodes}

    def producers(self, node_id: str) -> list[str]:
        return [a for a, b in self.edges if b == node_id]

    def consumers(self, node_id: str) -> list[str]:
        return [b for a, b in self.edges if a == node_id]

    def group(self, kind: str, group_id: str) -> Group:
        for g in self.branches if kind == "branch" else self.blocks:
            if g.id == group_id:
                return g
        raise KeyError(f"{kind} {group_id}")

    def copy(self) -> "ModelSpec":
        return copy.deepcopy(self)

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "format": FORMAT,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "output": self.output,
            "nodes": [asdict(n) for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "branches": [asdict(g) for g in self.branches],
            "blocks": [asdict(g) for g in self.blocks],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        if d.get("format", FORMAT) != FORMAT:
            raise SpecError([("", f"unsupported spec format {d.get('format')!r}")])
        try:
            return cls(
                nodes=[NodeSpec(**n) for n in d["nodes"]],
                edges=[tuple(e) for e in d["edges"]],
                input_shape=tuple(d["input_shape"]),
                num_classes=int(d["num_classes"]),
                output=d.get("output"),
                branches=[Group(**g) for g in d.get("branches", [])],
                blocks=[Group(**g) for g in d.get("blocks", [])],
                meta=d.get("meta", {}),
            )
        except (KeyError, TypeError) as exc:
            raise SpecError([("", f"malformed spec document: {exc}")]) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelSpec":
        return cls.from_json(Path(path).read_text())


def conv_out(size: int, k: int, stride: int, padding: int) -> int | None:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        return None
    return span // stride + 1


def topo_order(spec: ModelSpec) -> list[str]:
    """Node ids in dependency order, ties broken by position in ``spec.nodes``."""
    ids = [n.id for n in spec.nodes]
    pos = {nid: i for i, nid in enumerate(ids)}
    indeg = {nid: 0 for nid in ids}
    succ: dict[str, list[str]] = {nid: [] for nid in ids}
    succ[INPUT] = []
    for a, b in spec.edges:
        if b in indeg and (a in succ):
            indeg[b] += 1
            succ[a].append(b)
    ready = [(pos[n], n) for n in ids if indeg[n] == 0]
    for b in succ[INPUT]:
        indeg[b] -= 1
        if indeg[b] == 0:
            ready.append((pos[b], b))
    heapq.heapify(ready)
    order = []
    while ready:
        _, n = heapq.heappop(ready)
        order.append(n)
        for b in succ[n]:
            indeg[b] -= 1
            if indeg[b] == 0:
                heapq.heappush(ready, (pos[b], b))
    if len(order) != len(ids):
        stuck = sorted(set(ids) - set(order), key=pos.get)
        raise SpecError([(n, "part of a cycle or fed by one") for n in stuck])
    return order


def _infer(node: NodeSpec, prods: list[str], ins: list[Shape], diag: list) -> Shape | None:
    p = node.params
    k = node.kind

    def need(n_inputs):
        if len(ins) != n_inputs:
            diag.append((node.id, f"{k} expects {n_inputs} input(s), got {len(ins)}"))
            return False
        return True

    if k == "add":
        if len(ins) < 2:
            diag.append((node.id, f"add expects at least 2 inputs, got {len(ins)}"))
            return None
        maps = p.get("maps") or {}
        if maps:
            width = p.get("channels")
            outs = []
            for src, shp in zip(prods, ins):
                m = maps.get(src)
                if m is None:
                    outs.append(shp)
                    continue
                if len(shp) != 3 or len(m) != shp[0] or (m and max(m) >= width):
                    diag.append((node.id, f"channel map for {src} does not fit shape {shp}"))
                    return None
                outs.append((width,) + tuple(shp[1:]))
            ins = outs
        if any(s != ins[0] for s in ins):
            diag.append((node.id, f"add input shapes differ: {[list(s) for s in ins]}"))
            return None
        return ins[0]
    if not need(1):
        return None
    s = ins[0]
    if k in ("conv",) or (k == "adapter" and p.get("op") == "conv1x1"):
        if len(s) != 3:
            diag.append((node.id, f"conv needs a (C,H,W) input, got {list(s)}"))
            return None
        kern = p.get("kernel", 1)
        stride = p.get("stride", 1)
        pad = p.get("padding", 0)
        h = conv_out(s[1], kern, stride, pad)
        w = conv_out(s[2], kern, stride, pad)
        if h is None or w is None:
            diag.append((node.id, f"conv output extent not a positive integer for input {list(s)}"))
            return None
        return (p["out_channels"], h, w)
    if k == "pool" or (k == "adapter" and p.get("op") == "pool"):
        if len(s) != 3:
            diag.append((node.id, f"pool needs a (C,H,W) input, got {list(s)}"))
            return None
        win = p["window"]
        stride = p.get("stride", win)
        if win > s[1] or win > s[2]:
            diag.append((node.id, f"pool window {win} larger than input {list(s)}"))
            return None
        h = conv_out(s[1], win, stride, 0)
        w = conv_out(s[2], win, stride, 0)
        if h is None or w is None:
            diag.append((node.id, f"pool output extent not integral for input {list(s)}"))
            return None
        return (s[0], h, w)
    if k == "dense":
        if len(s) != 1:
            diag.append((node.id, f"dense needs a flat input, got {list(s)}"))
            return None
        return (p["out_features"],)
    if k == "flatten":
        n = 1
        for e in s:
            n *= e
        return (n,)
    if k in ("batchnorm", "relu", "dropout"):
        return s
    if k == "adapter":
        diag.append((node.id, f"unknown adapter op {p.get('op')!r}"))
        return None
    diag.append((node.id, f"unknown node kind {k!r}"))
    return None


def validate(spec: ModelSpec) -> dict[str, Shape]:
    """Infer every node's output shape; raise :class:`SpecError` on any violation."""
    if not spec.nodes:
        raise SpecError([("", "no nodes")])
    diag: list[tuple[str, str]] = []
    ids = [n.id for n in spec.nodes]
    seen = set()
    for nid in ids:
        if nid in seen or nid == INPUT:
            diag.append((nid, "duplicate or reserved node id"))
        seen.add(nid)
    known = seen | {INPUT}
    for a, b in spec.edges:
        for end in (a, b):
            if end not in known:
                diag.append((end, f"edge ({a} -> {b}) references unknown node {end!r}"))
        if b == INPUT:
            diag.append((a, "edge into the input node"))
    kinds = {n.id: n.kind for n in spec.nodes}
    # an add may sum one tensor with itself (e.g. a branch whose layers were all removed)
    dup = [e for e in set(spec.edges) if spec.edges.count(e) > 1 and kinds.get(e[1]) != "add"]
    if dup:
        diag.append(("", f"duplicate edges {sorted(dup)}"))
    if spec.output not in seen:
        diag.append((str(spec.output), "output node does not exist"))
    if diag:
        raise SpecError(diag)
    order = topo_order(spec)

    nodes = spec.node_map()
    shapes: dict[str, Shape] = {INPUT: tuple(spec.input_shape)}
    for nid in order:
        node = nodes[nid]
        prods = spec.producers(nid)
        if not prods:
            diag.append((nid, "node has no producer"))
            continue
        if any(p not in shapes for p in prods):
            continue
        shp = _infer(node, prods, [shapes[p] for p in prods], diag)
        if shp is not None:
            shapes[nid] = shp
        if node.kind == "add":
            for key in ("structure", "shortcut"):
                ref = node.params.get(key)
                if ref is not None and ref not in prods:
                    diag.append((nid, f"add {key} {ref!r} is not one of its producers"))
    for nid in ids:
        if nid != spec.output and not spec.consumers(nid):
            diag.append((nid, "dangling node: output is never consumed"))
    if spec.output in shapes and shapes[spec.output] != (spec.num_classes,):
        diag.append(
            (spec.output, f"output shape {list(shapes[spec.output])} != ({spec.num_classes},)")
        )
    for g in spec.branches + spec.blocks:
        for ref in [g.entry, g.exit, *g.nodes]:
            if ref not in known:
                diag.append((g.id, f"group references unknown node {ref!r}"))
    for blk in spec.blocks:
        names = {b.id for b in spec.branches}
        for bid in blk.branches:
            if bid not in names:
                diag.append((blk.id, f"block references unknown branch {bid!r}"))
    seen_branch_nodes: dict[str, str] = {}
    for br in spec.branches:
        for n in br.nodes:
            if n in seen_branch_nodes:
                diag.append((br.id, f"node {n} also belongs to branch {seen_branch_nodes[n]}"))
            seen_branch_nodes[n] = br.id
    if diag:
        raise SpecError(diag)
    del shapes[INPUT]
    return shapes


def shape_table(spec: ModelSpec) -> str:
    shapes = validate(spec)
    width = max(len(n.id) for n in spec.nodes)
    lines = [f"{'input':<{width}}  {'-':<9}  {'x'.join(map(str, spec.input_shape))}"]
    for nid in topo_order(spec):
        node = spec.node(nid)
        lines.append(f"{nid:<{width}}  {node.kind:<9}  {'x'.join(map(str, shapes[nid]))}")
    return "\n".join(lines)
