"""Residual shortcut insertion around prunable structures.

A structure site is wrapped as ``add(structure_exit, shortcut)`` where the
shortcut is the site's entry tensor, optionally reshaped by an adapter chain.
Consumers of the exit are rewired to the add, so a zero structure gate turns
the site into a plain wire from its entry.
"""

from __future__ import annotations

import logging

from .spec import Group, ModelSpec, NodeSpec, SpecError, validate

log = logging.getLogger(__name__)

GRANULARITIES = ("filter", "layer", "branch", "block")
STRUCTURES = ("layer", "branch", "block")
POLICIES = ("skip", "adapt")


class AdapterError(ValueError):
    pass


def make_dimension_adapter(src_shape, dst_shape, prefix: str = "adapt") -> list[NodeSpec]:
    """Pooling and/or 1x1 conv chain mapping ``src_shape`` onto ``dst_shape``.

    Shapes are (C,H,W) or (N,C,H,W).  The conv is bias-free; pooling is
    average pooling with window = stride = spatial ratio.
    """
    src = tuple(src_shape)[-3:]
    dst = tuple(dst_shape)[-3:]
    if len(src) != 3 or len(dst) != 3:
        raise AdapterError(f"adapter needs activation shapes, got {src_shape} and {dst_shape}")
    if src == dst:
        return []
    (cs, hs, ws), (cd, hd, wd) = src, dst
    chain: list[NodeSpec] = []
    if (hs, ws) != (hd, wd):
        if hd > hs or wd > ws or hs % hd or ws % wd or hs // hd != ws // wd:
            raise AdapterError(
                f"cannot pool {hs}x{ws} down to {hd}x{wd}: ratio must be an equal integer"
            )
        r = hs // hd
        chain.append(
            NodeSpec(f"{prefix}_pool", "adapter", {"op": "pool", "mode": "avg", "window": r, "stride": r})
        )
    if cs != cd:
        chain.append(
            NodeSpec(f"{prefix}_conv", "adapter", {"op": "conv1x1", "out_channels": cd, "kernel": 1, "bias": False})
        )
    return chain


def conv_stack(spec: ModelSpec, conv_id: str) -> list[str]:
    """The conv node followed by its sole-consumer batchnorm and relu, if present."""
    nodes = spec.node_map()
    stack = [conv_id]
    for kind in ("batchnorm", "relu"):
        cons = spec.consumers(stack[-1])
        if len(cons) == 1 and nodes[cons[0]].kind == kind:
            stack.append(cons[0])
    return stack


def layer_sites(spec: ModelSpec) -> list[tuple[str, str, str]]:
    """(conv id, entry, exit) for every prunable, non-artificial conv."""
    sites = []
    for n in spec.nodes:
        if n.kind == "conv" and n.prunable and not n.artificial:
            prods = spec.producers(n.id)
            if len(prods) == 1:
                sites.append((n.id, prods[0], conv_stack(spec, n.id)[-1]))
    return sites


def structure_sites(spec: ModelSpec, granularity: str) -> list[tuple[str, str, str, Group | None]]:
    """(site id, entry, exit, own group) for one structural granularity."""
    if granularity == "layer":
        return [(c, a, b, None) for c, a, b in layer_sites(spec)]
    if granularity == "branch":
        return [(g.id, g.entry, g.exit, g) for g in spec.branches]
    if granularity == "block":
        return [(g.id, g.entry, g.exit, g) for g in spec.blocks]
    raise ValueError(f"unknown granularity {granularity!r}; expected one of {STRUCTURES}")


def site_adds(spec: ModelSpec, granularity: str) -> dict[str, str]:
    """site id -> add node id for every shortcut add carrying ``granularity``."""
    out = {}
    for n in spec.nodes:
        if n.kind == "add" and n.params.get("role") == granularity:
            out[n.params["site"]] = n.id
    return out


def _trace_adapters(spec: ModelSpec, node_id: str) -> str:
    nodes = spec.node_map()
    while node_id in nodes and nodes[node_id].kind == "adapter":
        node_id = spec.producers(node_id)[0]
    return node_id


def _find_existing(spec: ModelSpec, role: str, site: str, entry: str, exit_: str) -> NodeSpec | None:
    nodes = spec.node_map()
    for n in spec.nodes:
        if n.kind == "add" and n.params.get("role") == role and n.params.get("site") == site:
            return n
    for cid in spec.consumers(exit_):
        c = nodes[cid]
        if c.kind != "add" or c.params.get("role"):
            continue
        others = [p for p in spec.producers(cid) if p != exit_]
        if len(others) == 1 and _trace_adapters(spec, others[0]) == entry:
            return c
    return None


def _fresh_id(taken: set[str], base: str) -> str:
    new = base
    i = 1
    while new in taken:
        new = f"{base}{i}"
        i += 1
    taken.add(new)
    return new


def _wrap(spec: ModelSpec, entry: str, exit_: str, role: str, site: str, own: Group | None, chain: list[NodeSpec]) -> str:
    nodes_before = [n.id for n in spec.nodes]
    taken = set(nodes_before)
    add_id = _fresh_id(taken, f"{site}.{role}_add")
    renamed = []
    for a in chain:
        a.id = _fresh_id(taken, f"{site}.{role}_{a.id}")
        renamed.append(a)
    shortcut_src = renamed[-1].id if renamed else entry

    new_edges = []
    for a, b in spec.edges:
        new_edges.append((add_id, b) if a == exit_ else (a, b))
    prev = entry
    for a in renamed:
        new_edges.append((prev, a.id))
        prev = a.id
    new_edges.append((exit_, add_id))
    new_edges.append((shortcut_src, add_id))
    spec.edges = new_edges

    for n in spec.nodes:
        if n.kind == "add":
            for key in ("structure", "shortcut"):
                if n.params.get(key) == exit_:
                    n.params[key] = add_id
            maps = n.params.get("maps")
            if maps and exit_ in maps:
                maps[add_id] = maps.pop(exit_)

    add = NodeSpec(
        add_id,
        "add",
        {"role": role, "site": site, "structure": exit_, "shortcut": shortcut_src},
        artificial=True,
    )
    idx = nodes_before.index(exit_) + 1
    spec.nodes[idx:idx] = renamed + [add]

    for g in spec.branches + spec.blocks:
        if g is own:
            continue
        if g.entry == exit_:
            g.entry = add_id
        if exit_ in g.nodes:
            g.nodes.extend([a.id for a in renamed] + [add_id])
        if g.exit == exit_:
            g.exit = add_id
    if spec.output == exit_:
        spec.output = add_id
    return add_id


def insert_shortcuts(spec: ModelSpec, granularity: str, mismatch_policy: str = "skip") -> ModelSpec:
    """Return a copy of ``spec`` with a gated shortcut add at every ``granularity`` site.

    Sites whose entry and exit shapes differ are skipped (``skip``) or bridged
    by an adapter chain (``adapt``).  Skipped site ids are listed in
    ``meta["skipped_sites"][granularity]``.  Existing shortcuts are reused.
    """
    if granularity not in STRUCTURES:
        raise ValueError(f"unknown granularity {granularity!r}; expected one of {STRUCTURES}")
    if mismatch_policy not in POLICIES:
        raise ValueError(f"unknown mismatch policy {mismatch_policy!r}; expected one of {POLICIES}")
    out = spec.copy()
    validate(out)
    skipped = []
    for site, entry, exit_, own in structure_sites(out, granularity):
        # earlier insertions may have moved group boundaries
        if own is not None:
            entry, exit_ = own.entry, own.exit
        else:
            entry = out.producers(site)[0]
            exit_ = conv_stack(out, site)[-1]
        existing = _find_existing(out, granularity, site, entry, exit_)
        if existing is not None:
            existing.params.setdefault("role", granularity)
            existing.params.setdefault("site", site)
            existing.params.setdefault("structure", exit_)
            existing.params.setdefault(
                "shortcut", next(p for p in out.producers(existing.id) if p != exit_)
            )
            continue
        shapes = validate(out)
        src = out.input_shape if entry == "input" else shapes[entry]
        dst = shapes[exit_]
        chain: list[NodeSpec] = []
        if tuple(src) != tuple(dst):
            if mismatch_policy == "skip":
                skipped.append(site)
                continue
            try:
                chain = make_dimension_adapter(src, dst)
            except AdapterError as exc:
                log.warning("site %s left without shortcut: %s", site, exc)
                skipped.append(site)
                continue
        _wrap(out, entry, exit_, granularity, site, own, chain)
    record = out.meta.setdefault("skipped_sites", {})
    record[granularity] = sorted(set(record.get(granularity, [])) | set(skipped))
    try:
        validate(out)
    except SpecError as exc:  # pragma: no cover - would be a bug in _wrap
        raise SpecError([("", f"shortcut insertion produced an invalid spec: {exc}")]) from exc
    return out
