"""Model specs, shortcut insertion, the built-in catalog and runtime graphs."""

from .catalog import builtin_specs, get_spec
from .runtime import GatedNetwork, init_parameters, instantiate
from .shortcuts import (
    GRANULARITIES,
    STRUCTURES,
    AdapterError,
    conv_stack,
    insert_shortcuts,
    make_dimension_adapter,
    site_adds,
)
from .spec import INPUT, Group, ModelSpec, NodeSpec, SpecError, shape_table, topo_order, validate

__all__ = [
    "AdapterError",
    "GRANULARITIES",
    "GatedNetwork",
    "Group",
    "INPUT",
    "ModelSpec",
    "NodeSpec",
    "STRUCTURES",
    "SpecError",
    "builtin_specs",
    "conv_stack",
    "get_spec",
    "init_parameters",
    "insert_shortcuts",
    "instantiate",
    "make_dimension_adapter",
    "shape_table",
    "site_adds",
    "topo_order",
    "validate",
]
