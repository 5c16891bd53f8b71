"""Parameter/FLOP cost model and compression reports.

FLOP convention: one multiply-accumulate = 2 FLOPs.  Per sample:

* conv: 2*Cout*Cin*Kh*Kw*H'*W' (+ Cout*H'*W' with bias)
* dense: 2*D*M + M
* pool, relu, add: one per output element
* batchnorm: two per element (eval-mode scale and shift)
* flatten, dropout: free
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

from .graph.spec import INPUT, ModelSpec, validate

log = logging.getLogger(__name__)

FLOP_CONVENTION = "FLOPs per sample, multiply-accumulate counted as 2"


def _prod(shape) -> int:
    n = 1
    for e in shape:
        n *= e
    return n


def _in_shape(spec, shapes, nid):
    src = spec.producers(nid)[0]
    return tuple(spec.input_shape) if src == INPUT else shapes[src]


def _is_conv(node) -> bool:
    return node.kind == "conv" or (node.kind == "adapter" and node.params.get("op") == "conv1x1")


def node_params(spec: ModelSpec, shapes, node) -> int:
    p = node.params
    if _is_conv(node):
        cin = _in_shape(spec, shapes, node.id)[0]
        k = p.get("kernel", 1)
        bias = node.kind == "conv" and p.get("bias", True)
        return p["out_channels"] * cin * k * k + (p["out_channels"] if bias else 0)
    if node.kind == "dense":
        d = _in_shape(spec, shapes, node.id)[0]
        m = p["out_features"]
        return d * m + (m if p.get("bias", True) else 0)
    if node.kind == "batchnorm":
        return 2 * shapes[node.id][0]
    return 0


def node_flops(spec: ModelSpec, shapes, node) -> int:
    p = node.params
    out = shapes[node.id]
    if _is_conv(node):
        cin = _in_shape(spec, shapes, node.id)[0]
        k = p.get("kernel", 1)
        cout, h, w = out
        bias = node.kind == "conv" and p.get("bias", True)
        return 2 * cout * cin * k * k * h * w + (cout * h * w if bias else 0)
    if node.kind == "dense":
        d = _in_shape(spec, shapes, node.id)[0]
        m = p["out_features"]
        return 2 * d * m + (m if p.get("bias", True) else 0)
    if node.kind in ("pool", "relu", "add", "adapter"):
        return _prod(out)
    if node.kind == "batchnorm":
        return 2 * _prod(out)
    return 0


def count_params(spec: ModelSpec) -> int:
    if not spec.nodes:
        return 0
    shapes = validate(spec)
    return sum(node_params(spec, shapes, n) for n in spec.nodes)


def count_flops(spec: ModelSpec, input_shape=None) -> int:
    if not spec.nodes:
        return 0
    if input_shape is not None and tuple(input_shape)[-3:] != tuple(spec.input_shape):
        spec = spec.copy()
        spec.input_shape = tuple(input_shape)[-len(spec.input_shape):]
    shapes = validate(spec)
    return sum(node_flops(spec, shapes, n) for n in spec.nodes)


def reduction(baseline: float, pruned: float) -> float:
    if baseline == 0:
        return 0.0
    return 100.0 * (1.0 - pruned / baseline)


@dataclass
class CompressionReport:
    dataset: str
    baseline_accuracy: float
    pruned_accuracy: float
    baseline_params: int
    pruned_params: int
    baseline_flops: int
    pruned_flops: int
    params_reduction: float
    flops_reduction: float
    granularities: list[str] = field(default_factory=list)
    thresholds: dict[str, float] = field(default_factory=dict)
    epochs: dict[str, int] = field(default_factory=dict)
    flop_convention: str = FLOP_CONVENTION
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    CSV_FIELDS = (
        "dataset",
        "granularities",
        "baseline_accuracy",
        "pruned_accuracy",
        "baseline_params",
        "pruned_params",
        "params_reduction",
        "baseline_flops",
        "pruned_flops",
        "flops_reduction",
    )

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in self.CSV_FIELDS}
        row["granularities"] = "+".join(self.granularities)
        return row

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()

    def table(self) -> str:
        """Aligned text: Dataset | Accuracy | %Params down | %FLOPs down."""
        head = ("Dataset", "Accuracy", "Params↓", "% Flops↓")
        rows = [
            ("baseline", f"{100 * self.baseline_accuracy:.2f}%", f"{self.baseline_params}", f"{self.baseline_flops}"),
            (
                self.dataset,
                f"{100 * self.pruned_accuracy:.2f}%",
                f"{self.params_reduction:.2f}%",
                f"{self.flops_reduction:.2f}%",
            ),
        ]
        widths = [max(len(r[i]) for r in (head, *rows)) for i in range(4)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(head, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append(f"({self.flop_convention}; granularities: {'+'.join(self.granularities) or 'none'})")
        return "\n".join(lines)


def build_report(baseline, pruned, meta: dict | None = None) -> CompressionReport:
    """``baseline`` and ``pruned`` are (spec, accuracy) pairs."""
    meta = dict(meta or {})
    (bspec, bacc), (pspec, pacc) = baseline, pruned
    bp, pp = count_params(bspec), count_params(pspec)
    bf, pf = count_flops(bspec), count_flops(pspec)
    if pp > bp or pf > bf:
        log.warning("pruned network is larger than the baseline (params %d > %d or flops %d > %d)", pp, bp, pf, bf)
    return CompressionReport(
        dataset=meta.pop("dataset", "unknown"),
        baseline_accuracy=float(bacc),
        pruned_accuracy=float(pacc),
        baseline_params=bp,
        pruned_params=pp,
        baseline_flops=bf,
        pruned_flops=pf,
        params_reduction=reduction(bp, pp),
        flops_reduction=reduction(bf, pf),
        granularities=list(meta.pop("granularities", [])),
        thresholds=dict(meta.pop("thresholds", {})),
        epochs=dict(meta.pop("epochs", {})),
        meta=meta,
    )
