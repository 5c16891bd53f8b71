"""Built-in network specs: VGG-16 variant, ResNet-56 and desk-scale analogues."""

from __future__ import annotations

from typing import Callable

from .spec import INPUT, Group, ModelSpec, NodeSpec


class _Builder:
    def __init__(self):
        self.nodes: list[NodeSpec] = []
        self.edges: list[tuple[str, str]] = []
        self.last = INPUT

    def node(self, nid, kind, params=None, src=None, prunable=False) -> str:
        self.nodes.append(NodeSpec(nid, kind, dict(params or {}), prunable=prunable))
        srcs = [self.last if src is None else src] if not isinstance(src, list) else src
        for s in srcs:
            self.edges.append((s, nid))
        self.last = nid
        return nid

    def conv_bn(self, name, out, kernel=3, stride=1, padding=1, relu=True, bias=True, src=None, prunable=True):
        ids = [
            self.node(
                name,
                "conv",
                {"out_channels": out, "kernel": kernel, "stride": stride, "padding": padding, "bias": bias},
                src=src,
                prunable=prunable,
            ),
            self.node(f"{name}_bn", "batchnorm"),
        ]
        if relu:
            ids.append(self.node(f"{name}_relu", "relu"))
        return ids


def _vgg(cfg, input_shape, num_classes, fc_width, name) -> ModelSpec:
    """``cfg`` entries: int = conv width, "M" = 2x2 max pool, "G" = global max pool."""
    b = _Builder()
    ci = pi = 0
    side = input_shape[1]
    for item in cfg:
        if item in ("M", "G"):
            pi += 1
            win = 2 if item == "M" else side
            side //= win
            b.node(f"pool{pi}", "pool", {"mode": "max", "window": win, "stride": win})
        else:
            ci += 1
            b.conv_bn(f"conv{ci}", item)
    b.node("flatten", "flatten")
    b.node("fc1", "dense", {"out_features": fc_width})
    b.node("fc1_bn", "batchnorm")
    b.node("fc1_relu", "relu")
    b.node("fc1_drop", "dropout", {"rate": 0.5})
    b.node("fc2", "dense", {"out_features": num_classes})
    return ModelSpec(
        b.nodes, b.edges, input_shape, num_classes, output="fc2", meta={"name": name, "l2": 0.05}
    )


def vgg16_custom(input_shape=(3, 32, 32), num_classes=10) -> ModelSpec:
    """13 conv stacks with BatchNorm, one hidden dense layer with BatchNorm and dropout 0.5."""
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
    return _vgg(cfg, input_shape, num_classes, 512, "vgg16_custom")


def mini_vgg8(input_shape=(1, 28, 28), num_classes=10) -> ModelSpec:
    """Six conv stacks in three stages (the last globally pooled) plus two dense layers."""
    return _vgg([8, 8, "M", 16, 16, "M", 32, 32, "G"], input_shape, num_classes, 64, "mini_vgg8")


def _resnet(stages, input_shape, num_classes, name, stem=None) -> ModelSpec:
    """``stages`` is a list of (channels, n_blocks); later stages downsample by 2."""
    b = _Builder()
    stem = stem or stages[0][0]
    b.conv_bn("stem", stem, bias=False)
    branches, blocks = [], []
    width = stem
    k = 0
    for si, (ch, n_blocks) in enumerate(stages):
        for bi in range(n_blocks):
            k += 1
            p = f"b{k}"
            entry = b.last
            down = si > 0 and bi == 0
            body = []
            if down:
                # integral output extents rule out stride-2 3x3 convs on even inputs
                body.append(b.node(f"{p}_down", "pool", {"mode": "avg", "window": 2, "stride": 2}, src=entry))
            body += b.conv_bn(f"{p}_conv1", ch, bias=False, src=None if down else entry)
            body += b.conv_bn(f"{p}_conv2", ch, relu=False, bias=False)
            exit_ = b.last
            proj = []
            shortcut = entry
            if down or ch != width:
                src = entry
                if down:
                    proj.append(b.node(f"{p}_proj_pool", "pool", {"mode": "avg", "window": 2, "stride": 2}, src=entry))
                    src = None
                proj.append(
                    b.node(
                        f"{p}_proj",
                        "conv",
                        {"out_channels": ch, "kernel": 1, "stride": 1, "padding": 0, "bias": False},
                        src=src,
                    )
                )
                proj.append(b.node(f"{p}_proj_bn", "batchnorm"))
                shortcut = proj[-1]
            add = b.node(
                f"{p}_add",
                "add",
                {"role": "branch", "site": f"{p}_branch", "structure": exit_, "shortcut": shortcut},
                src=[exit_, shortcut],
            )
            out = b.node(f"{p}_relu", "relu")
            branches.append(Group(f"{p}_branch", entry, exit_, list(body)))
            blocks.append(Group(f"{p}_block", entry, out, list(body) + proj + [add, out], [f"{p}_branch"]))
            width = ch
    h = input_shape[1]
    for _ in stages[1:]:
        h //= 2
    b.node("gap", "pool", {"mode": "avg", "window": h, "stride": h})
    b.node("flatten", "flatten")
    b.node("fc", "dense", {"out_features": num_classes})
    return ModelSpec(
        b.nodes, b.edges, input_shape, num_classes, output="fc", branches=branches, blocks=blocks, meta={"name": name}
    )


def resnet56(input_shape=(3, 32, 32), num_classes=10) -> ModelSpec:
    """CIFAR ResNet-56: 27 basic blocks in three stages; downsampling blocks pool first and project the shortcut."""
    return _resnet([(16, 9), (32, 9), (64, 9)], input_shape, num_classes, "resnet56")


def mini_resnet(input_shape=(1, 8, 8), num_classes=2) -> ModelSpec:
    """Three basic blocks; the second one downsamples and has a projection shortcut."""
    return _resnet([(8, 1), (16, 2)], input_shape, num_classes, "mini_resnet")


CATALOG: dict[str, Callable[..., ModelSpec]] = {
    "vgg16_custom": vgg16_custom,
    "resnet56": resnet56,
    "mini_vgg8": mini_vgg8,
    "mini_resnet": mini_resnet,
}


def builtin_specs() -> dict[str, Callable[..., ModelSpec]]:
    return dict(CATALOG)


def get_spec(name: str, input_shape=None, num_classes=None) -> ModelSpec:
    if name not in CATALOG:
        raise KeyError(f"unknown spec {name!r}; available: {', '.join(sorted(CATALOG))}")
    kwargs = {}
    if input_shape is not None:
        kwargs["input_shape"] = tuple(input_shape)
    if num_classes is not None:
        kwargs["num_classes"] = num_classes
    return CATALOG[name](**kwargs)
