"""Turn binarized gates into a pruning plan and rewrite the network physically.

Parameters travel as a flat ``name -> ndarray`` state (see
:meth:`GatedNetwork.state_dict`): ``<node>.weight``, ``.bias``, ``.gamma``,
``.beta``, ``.running_mean`` and ``.running_var``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .gates import Gate
from .graph.runtime import GatedNetwork
from .graph.shortcuts import STRUCTURES, conv_stack, site_adds
from .graph.spec import INPUT, ModelSpec, topo_order, validate

log = logging.getLogger(__name__)


class SurgeryError(ValueError):
    pass


@dataclass
class PruningPlan:
    """What to remove.

    ``filters`` maps conv ids to removed output channels; ``zeroed`` lists
    channels that must survive (to keep the graph connected) but are
    silenced; ``structures`` maps a granularity to removed site ids;
    ``scaffold`` lists artificial nodes that become plain wires.
    """

    filters: dict[str, list[int]] = field(default_factory=dict)
    zeroed: dict[str, list[int]] = field(default_factory=dict)
    structures: dict[str, list[str]] = field(default_factory=dict)
    scaffold: list[str] = field(default_factory=list)
    thresholds: dict[str, float] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not (self.filters or self.zeroed or any(self.structures.values()))

    def structure_part(self) -> "PruningPlan":
        return PruningPlan(structures={k: list(v) for k, v in self.structures.items()}, scaffold=list(self.scaffold), thresholds=dict(self.thresholds))

    def filter_part(self) -> "PruningPlan":
        return PruningPlan(filters={k: list(v) for k, v in self.filters.items()}, zeroed={k: list(v) for k, v in self.zeroed.items()}, thresholds=dict(self.thresholds))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        return cls(
            filters={k: list(map(int, v)) for k, v in d.get("filters", {}).items()},
            zeroed={k: list(map(int, v)) for k, v in d.get("zeroed", {}).items()},
            structures={k: list(v) for k, v in d.get("structures", {}).items()},
            scaffold=list(d.get("scaffold", [])),
            thresholds=dict(d.get("thresholds", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        return cls.from_dict(json.loads(text))


# graph helpers -------------------------------------------------------------


def _ancestors(spec: ModelSpec, nid: str) -> set[str]:
    seen = {nid}
    stack = [nid]
    while stack:
        for p in spec.producers(stack.pop()):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def structure_region(spec: ModelSpec, add_id: str) -> set[str]:
    """Nodes computing the gated side of a shortcut add but not its bypass."""
    add = spec.node(add_id)
    s = add.params["structure"]
    others = [p for p in spec.producers(add_id) if p != s]
    if not others:
        raise SurgeryError(f"add {add_id} has no bypass input")
    keep = set()
    for o in others:
        keep |= _ancestors(spec, o)
    region = _ancestors(spec, s) - keep
    region.discard(INPUT)
    for n in region:
        leaks = [c for c in spec.consumers(n) if c not in region and c != add_id]
        if leaks:
            raise SurgeryError(f"structure at {add_id}: node {n} also feeds {leaks}")
    return region


def _site_add(spec: ModelSpec, granularity: str, site: str) -> str:
    adds = site_adds(spec, granularity)
    if site not in adds:
        raise SurgeryError(f"{granularity} site {site!r}: unprunable without shortcut")
    return adds[site]


# planning ------------------------------------------------------------------


def plan_from_gates(spec: ModelSpec, gates: list[Gate], thresholds: dict[str, float]) -> PruningPlan:
    """Entries below their granularity threshold become removals.

    A conv losing every filter becomes a layer removal when it has a layer
    shortcut; otherwise its largest-phi filter is kept and silenced.
    """
    plan = PruningPlan(thresholds=dict(thresholds))
    nodes = spec.node_map()
    removed_sites: list[tuple[str, str, str]] = []
    for g in gates:
        if g.granularity == "filter" or g.granularity not in thresholds:
            continue
        add = nodes.get(g.attachment)
        if add is None or add.kind != "add" or add.params.get("role") != g.granularity:
            raise SurgeryError(f"gate {g.id}: unprunable without shortcut")
        if g.phi[0] < thresholds[g.granularity]:
            removed_sites.append((g.granularity, add.params["site"], add.id))

    layer_adds = site_adds(spec, "layer")
    promoted = []
    filters, zeroed = {}, {}
    for g in gates:
        if g.granularity != "filter" or "filter" not in thresholds:
            continue
        if g.attachment not in nodes:
            raise SurgeryError(f"gate {g.id}: attachment not in spec")
        drop = np.flatnonzero(g.phi < thresholds["filter"]).tolist()
        if not drop:
            continue
        if len(drop) == g.phi.size:
            if g.attachment in layer_adds:
                promoted.append(("layer", g.attachment, layer_adds[g.attachment]))
                continue
            ref = g.original if g.original is not None else g.phi
            keep = int(np.argmax(ref))
            drop.remove(keep)
            zeroed[g.attachment] = [keep]
        if drop:
            filters[g.attachment] = drop

    candidates = removed_sites + [p for p in promoted if p[2] not in {r[2] for r in removed_sites}]
    regions = {add_id: structure_region(spec, add_id) for _, _, add_id in candidates}
    gone = set().union(*regions.values()) if regions else set()
    structures: dict[str, list[str]] = {}
    for gran, site, add_id in candidates:
        if add_id in gone:
            continue  # nested inside another removed structure
        structures.setdefault(gran, []).append(site)
        if nodes[add_id].artificial:
            plan.scaffold.append(add_id)
    plan.structures = {k: sorted(v) for k, v in structures.items()}
    plan.filters = {k: v for k, v in sorted(filters.items()) if k not in gone}
    plan.zeroed = {k: v for k, v in sorted(zeroed.items()) if k not in gone}
    plan.scaffold.sort()
    return plan


# surgery primitives --------------------------------------------------------


def _delete_nodes(spec: ModelSpec, state: dict, ids: set[str]) -> None:
    spec.nodes = [n for n in spec.nodes if n.id not in ids]
    spec.edges = [e for e in spec.edges if e[0] not in ids and e[1] not in ids]
    for k in [k for k in state if k.split(".")[0] in ids and k.rsplit(".", 1)[0] in ids]:
        del state[k]
    # groups whose exit vanished were nested inside a removed structure
    spec.branches = [g for g in spec.branches if g.exit not in ids]
    spec.blocks = [g for g in spec.blocks if g.exit not in ids]
    live = {g.id for g in spec.branches}
    for b in spec.blocks:
        b.branches = [x for x in b.branches if x in live]
    for g in spec.branches + spec.blocks:
        g.nodes = [n for n in g.nodes if n not in ids]


def _drop_channels(spec: ModelSpec, state: dict, shapes: dict, producer: str, removed: list[int], width: int) -> None:
    """Remove channels ``removed`` from the output of ``producer`` in every consumer."""
    if not removed:
        return
    removed_set = set(removed)
    nodes = spec.node_map()
    for cid in dict.fromkeys(spec.consumers(producer)):
        c = nodes[cid]
        k = c.kind
        if k == "conv" or (k == "adapter" and c.params.get("op") == "conv1x1"):
            w = state[f"{cid}.weight"]
            if len(removed_set) >= w.shape[1]:
                raise SurgeryError(f"{cid} would lose its entire input")
            state[f"{cid}.weight"] = np.delete(w, removed, axis=1)
        elif k == "dense":
            w = state[f"{cid}.weight"]
            if len(removed_set) >= w.shape[0]:
                raise SurgeryError(f"{cid} would lose its entire input")
            state[f"{cid}.weight"] = np.delete(w, removed, axis=0)
        elif k == "batchnorm":
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                state[f"{cid}.{suffix}"] = np.delete(state[f"{cid}.{suffix}"], removed)
            _drop_channels(spec, state, shapes, cid, removed, width)
        elif k in ("relu", "pool", "dropout", "adapter"):
            _drop_channels(spec, state, shapes, cid, removed, width)
        elif k == "flatten":
            src = shapes[producer] if producer != INPUT else spec.input_shape
            hw = int(np.prod(src[1:]))
            feats = [r * hw + j for r in sorted(removed_set) for j in range(hw)]
            _drop_channels(spec, state, shapes, cid, feats, width * hw)
        elif k == "add":
            maps = c.params.setdefault("maps", {})
            c.params.setdefault("channels", shapes[cid][0])
            cur = maps.get(producer, list(range(width)))
            new = [m for i, m in enumerate(cur) if i not in removed_set]
            if not new:
                raise SurgeryError(f"add {cid} would lose every channel from {producer}")
            maps[producer] = new
        else:
            raise SurgeryError(f"cannot propagate channel removal into {k} node {cid}")


def _collapse(spec: ModelSpec, state: dict, shapes: dict, add_id: str, keep: str) -> None:
    """Replace add ``add_id`` by a wire from its input ``keep``."""
    add = spec.node(add_id)
    maps = add.params.get("maps") or {}
    m = maps.get(keep)
    width = shapes[add_id][0]
    if m is not None and len(m) < width:
        mset = set(m)
        _drop_channels(spec, state, shapes, add_id, [i for i in range(width) if i not in mset], width)
    edges = []
    for a, b in spec.edges:
        if b == add_id:
            continue
        edges.append((keep, b) if a == add_id else (a, b))
    spec.edges = edges
    for n in spec.nodes:
        if n.kind != "add" or n.id == add_id:
            continue
        for key in ("structure", "shortcut"):
            if n.params.get(key) == add_id:
                n.params[key] = keep
        nmaps = n.params.get("maps")
        if nmaps and add_id in nmaps:
            moved = nmaps.pop(add_id)
            if keep in nmaps and nmaps[keep] != moved:
                raise SurgeryError(f"add {n.id}: conflicting channel maps after collapsing {add_id}")
            nmaps[keep] = moved
    for g in spec.branches + spec.blocks:
        if g.entry == add_id:
            g.entry = keep
        if g.exit == add_id:
            g.exit = keep
    if spec.output == add_id:
        spec.output = keep
    _delete_nodes(spec, state, {add_id})


def _remove_dead(spec: ModelSpec, state: dict) -> None:
    while True:
        dead = {n.id for n in spec.nodes if n.id != spec.output and not spec.consumers(n.id)}
        if not dead:
            return
        _delete_nodes(spec, state, dead)


def _simplify_maps(spec: ModelSpec, shapes: dict) -> None:
    for n in spec.nodes:
        if n.kind != "add" or not n.params.get("maps"):
            continue
        maps = n.params["maps"]
        width = n.params["channels"]
        for src in list(maps):
            if src not in spec.producers(n.id):
                del maps[src]
            elif maps[src] == list(range(width)):
                del maps[src]
        if not maps:
            n.params.pop("maps", None)
            n.params.pop("channels", None)


def _canonicalize(spec: ModelSpec) -> None:
    order = topo_order(spec)
    pos = {nid: i for i, nid in enumerate(order)}
    pos[INPUT] = -1
    nodes = spec.node_map()
    spec.nodes = [nodes[i] for i in order]
    spec.edges = sorted(spec.edges, key=lambda e: (pos[e[1]],))
    for g in spec.branches + spec.blocks:
        g.nodes = sorted(set(g.nodes), key=pos.get)
    live_branches = {g.id for g in spec.branches}
    for b in spec.blocks:
        b.branches = [x for x in b.branches if x in live_branches]


def _silence(spec: ModelSpec, state: dict, conv_id: str, channels: list[int]) -> None:
    stack = conv_stack(spec, conv_id)
    bn = next((n for n in stack if spec.node(n).kind == "batchnorm"), None)
    if bn is not None:
        state[f"{bn}.gamma"][channels] = 0.0
        state[f"{bn}.beta"][channels] = 0.0
    else:
        state[f"{conv_id}.weight"][channels] = 0.0
        if f"{conv_id}.bias" in state:
            state[f"{conv_id}.bias"][channels] = 0.0


def _remove_filters(spec: ModelSpec, state: dict, conv_id: str, removed: list[int]) -> None:
    shapes = validate(spec)
    node = spec.node(conv_id)
    width = node.params["out_channels"]
    removed = sorted(set(removed))
    if any(r < 0 or r >= width for r in removed):
        raise SurgeryError(f"{conv_id}: channel index out of range {removed}")
    if len(removed) >= width:
        raise SurgeryError(f"{conv_id}: cannot remove every filter without a layer shortcut")
    state[f"{conv_id}.weight"] = np.delete(state[f"{conv_id}.weight"], removed, axis=0)
    if f"{conv_id}.bias" in state:
        state[f"{conv_id}.bias"] = np.delete(state[f"{conv_id}.bias"], removed)
    node.params["out_channels"] = width - len(removed)
    _drop_channels(spec, state, shapes, conv_id, removed, width)


def _remove_structure(spec: ModelSpec, state: dict, granularity: str, site: str) -> None:
    add_id = _site_add(spec, granularity, site)
    region = structure_region(spec, add_id)
    shapes = validate(spec)
    add = spec.node(add_id)
    _delete_nodes(spec, state, region)
    if granularity in ("branch", "block"):
        groups = spec.branches if granularity == "branch" else spec.blocks
        groups[:] = [g for g in groups if g.id != site]
    rest = spec.producers(add_id)
    if len(set(rest)) != 1:
        raise SurgeryError(f"{add_id}: expected one bypass input after removal, found {rest}")
    keep = rest[0]
    if add.params.get("shortcut") not in (keep, None):
        add.params["shortcut"] = keep
    _collapse(spec, state, shapes, add_id, keep)


def _drop_scaffold(spec: ModelSpec, state: dict) -> None:
    for n in [n for n in spec.nodes if n.kind == "add" and n.artificial]:
        if n.id not in spec.node_map():
            continue
        s = n.params["structure"]
        shapes = validate(spec)
        spec.edges = [e for e in spec.edges if not (e[1] == n.id and e[0] != s)]
        _collapse(spec, state, shapes, n.id, s)
        _remove_dead(spec, state)


def apply_plan(spec: ModelSpec, state: dict, plan: PruningPlan, keep_scaffold: bool = True) -> tuple[ModelSpec, dict]:
    """Physically remove everything in ``plan``; returns new (spec, state).

    Structures go first, then filters.  With ``keep_scaffold`` the result
    computes exactly what the zero-gated network computed; without it every
    surviving artificial shortcut is dropped too, which changes the function.
    """
    out = spec.copy()
    st = {k: np.array(v, dtype=np.float64, copy=True) for k, v in state.items()}
    validate(out)
    ids = {n.id for n in out.nodes}
    for conv_id in list(plan.filters) + list(plan.zeroed):
        if conv_id not in ids or out.node(conv_id).kind != "conv":
            raise SurgeryError(f"plan/spec mismatch: no conv {conv_id!r}")
    for gran, sites in plan.structures.items():
        if gran not in STRUCTURES:
            raise SurgeryError(f"plan/spec mismatch: unknown granularity {gran!r}")
        for site in sites:
            _site_add(out, gran, site)

    for gran in ("block", "branch", "layer"):
        for site in plan.structures.get(gran, []):
            if site not in site_adds(out, gran):
                continue  # swallowed by an enclosing removal
            _remove_structure(out, st, gran, site)
            _remove_dead(out, st)

    alive = {n.id for n in out.nodes}
    for conv_id, chans in plan.zeroed.items():
        if conv_id in alive:
            _silence(out, st, conv_id, chans)
    for conv_id, chans in plan.filters.items():
        if conv_id in alive:
            _remove_filters(out, st, conv_id, chans)
    _remove_dead(out, st)

    if not keep_scaffold:
        _drop_scaffold(out, st)
    shapes = validate(out)
    _simplify_maps(out, shapes)
    _canonicalize(out)
    validate(out)
    for n in out.nodes:
        if n.kind == "add" and len(out.producers(n.id)) < 2:
            raise SurgeryError(f"add {n.id} left with fewer than two inputs")
    return out, st


def verify_equivalence(gated: GatedNetwork, pruned: GatedNetwork, n_samples: int, input_shape, seed: int = 0) -> float:
    """Max |logit difference| between two networks on seeded normal inputs (eval mode)."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_samples, *tuple(input_shape)[-len(gated.spec.input_shape):]))
    a = gated.forward(x, "eval").data
    b = pruned.forward(x, "eval").data
    if a.shape != b.shape:
        raise SurgeryError(f"output shapes differ: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def prune_network(net: GatedNetwork, plan: PruningPlan, keep_scaffold: bool = True) -> GatedNetwork:
    """Apply ``plan`` to a live network and return the gate-free pruned network."""
    from .graph.runtime import instantiate

    spec, state = apply_plan(net.spec, net.state_dict(), plan, keep_scaffold)
    return instantiate(spec, [], net.seed, state=state)
