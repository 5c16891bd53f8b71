"""Training, threshold search and the end-to-end prune protocol.

Protocol: insert shortcuts, train with gates and the sparsity loss, pick
per-granularity thresholds on a validation split, binarize, fine-tune with
the binarized gates, cut the network, fine-tune the pruned network, report.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import ops
from .checkpoint import Checkpoint
from .data import Dataset, load_named, split_off, subset, synthetic_planted
from .gates import Gate, SparsityConfig, binarize_gates, init_gates, project_gates, sparsity_loss
from .graph.catalog import CATALOG, get_spec
from .graph.runtime import GatedNetwork, instantiate
from .graph.shortcuts import GRANULARITIES, insert_shortcuts
from .graph.spec import ModelSpec
from .metrics import CompressionReport, build_report
from .optim import SGD
from .surgery import PruningPlan, apply_plan, plan_from_gates, verify_equivalence
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

SEARCH_ORDER = ("block", "branch", "layer", "filter")
EQUIVALENCE_TOL = 1e-8


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# configuration -------------------------------------------------------------


@dataclass
class ThresholdPolicy:
    start: float = 0.0
    stop: float = 0.5
    step: float = 0.01
    max_drop: float = 1.0  # percentage points
    recalibrate_bn: bool = True
    calibration_batches: int = 4

    def grid(self) -> np.ndarray:
        n = int(round((self.stop - self.start) / self.step))
        return np.round(self.start + self.step * np.arange(n + 1), 10)


@dataclass
class ExperimentConfig:
    """Everything one pruning run needs.  Serialized as flat JSON."""

    spec: str = "mini_vgg8"  # catalog name or path to a spec JSON file
    dataset: str = "synthetic"  # mnist | fashion | cifar10 | synthetic
    data_dir: str | None = None
    subset_per_class: int | None = None
    synthetic_n: int = 400
    synthetic_test_n: int = 400
    validation_fraction: float = 0.1
    granularities: list[str] = field(default_factory=lambda: ["filter"])
    lambdas: dict[str, float] | None = None  # default: 1.0 per enabled granularity
    mismatch_policy: str = "skip"
    gate_noise: float = 0.0
    epochs: int = 15
    fine_tune_binarized: int = 10
    fine_tune: int = 20
    batch_size: int = 64
    lr: float = 0.01
    gate_lr_scale: float = 1.0
    lr_milestones: list[float] = field(default_factory=lambda: [0.5, 0.75])
    lr_gamma: float = 0.1
    momentum: float = 0.9
    l2: float = 5e-4
    seed: int = 0
    threshold: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    thresholds: dict[str, float] | None = None  # skip the search when given
    keep_scaffold: bool = True
    freeze_except_bn_dense: bool = False
    baseline: str = "gated"  # "gated": unbinarized gated net; "train": ungated net trained identically
    out_dir: str = "runs/default"
    save_checkpoints: bool = True

    def __post_init__(self):
        if isinstance(self.threshold, dict):
            self.threshold = ThresholdPolicy(**self.threshold)
        self.granularities = list(self.granularities)
        self.validate()

    def validate(self) -> None:
        bad = [g for g in self.granularities if g not in GRANULARITIES]
        if bad:
            raise ConfigError(f"unknown granularity {bad[0]!r}; choose from {', '.join(GRANULARITIES)}")
        if not self.granularities:
            raise ConfigError("granularities must be nonempty")
        if len(set(self.granularities)) != len(self.granularities):
            raise ConfigError("granularities repeat")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for k in ("epochs", "fine_tune_binarized", "fine_tune"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self.baseline not in ("gated", "train"):
            raise ConfigError(f"baseline must be 'gated' or 'train', got {self.baseline!r}")
        if self.mismatch_policy not in ("skip", "adapt"):
            raise ConfigError(f"unknown mismatch policy {self.mismatch_policy!r}")

    def sparsity(self) -> SparsityConfig:
        lams = self.lambdas if self.lambdas is not None else {g: 1.0 for g in self.granularities}
        unknown = set(lams) - set(GRANULARITIES)
        if unknown:
            raise ConfigError(f"unknown lambda key {sorted(unknown)[0]!r}")
        return _sparsity_from({g: lams.get(g, 0.0) for g in self.granularities})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        d = dict(d)
        if isinstance(d.get("threshold"), dict):
            tnames = {f.name for f in dataclasses.fields(ThresholdPolicy)}
            bad = sorted(set(d["threshold"]) - tnames)
            if bad:
                raise ConfigError(f"unknown threshold key {bad[0]!r}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"missing config file {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {p} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {p} must hold a JSON object")
        return cls.from_dict(d)


def _sparsity_from(lams: dict[str, float]) -> SparsityConfig:
    return SparsityConfig(
        lambda_f=lams.get("filter", 0.0), lambda_l=lams.get("layer", 0.0), lambda_r=lams.get("branch", 0.0), lambda_b=lams.get("block", 0.0)
    )


# loss and training ---------------------------------------------------------


def combined_loss(data_loss: Tensor, gates: list[Gate], config: SparsityConfig, l2=0.0) -> Tensor:
    """data loss + sparsity loss + L2 term; inactive terms are left out entirely."""
    terms = [data_loss]
    if any(config.lam(g.granularity) != 0.0 for g in gates):
        terms.append(sparsity_loss(gates, config))
    if isinstance(l2, Tensor):
        terms.append(l2)
    elif l2 != 0.0:
        terms.append(Tensor(float(l2)))
    return terms[0] if len(terms) == 1 else ops.sum_scalars(terms)


def lr_at(epoch: int, epochs: int, base: float, milestones=(0.5, 0.75), gamma: float = 0.1) -> float:
    lr = base
    for m in milestones:
        if epoch >= int(round(m * epochs)):
            lr *= gamma
    return lr


def accuracy(net: GatedNetwork, data: Dataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = 0
    for s in range(0, len(data), batch_size):
        logits = net.forward(data.images[s : s + batch_size], "eval").data
        hits += int(np.sum(np.argmax(logits, axis=1) == data.labels[s : s + batch_size]))
    return hits / len(data)


def mean_abs_phi(gates: Iterable[Gate]) -> dict[str, float]:
    out = {}
    for gran in GRANULARITIES:
        vals = [np.abs(g.phi) for g in gates if g.granularity == gran]
        if vals:
            out[gran] = float(np.mean(np.concatenate(vals)))
    return out


@dataclass
class TrainSettings:
    epochs: int
    batch_size: int = 64
    lr: float = 0.01
    gate_lr_scale: float = 1.0
    milestones: tuple = (0.5, 0.75)
    gamma: float = 0.1
    momentum: float = 0.9
    l2: float = 0.0
    seed: int = 0
    freeze_except_bn_dense: bool = False

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, epochs: int, seed: int, freeze: bool = False) -> "TrainSettings":
        return cls(epochs, cfg.batch_size, cfg.lr, cfg.gate_lr_scale, tuple(cfg.lr_milestones), cfg.lr_gamma, cfg.momentum, cfg.l2, seed, freeze)


def _trainable(net: GatedNetwork, freeze_except_bn_dense: bool) -> dict[str, Tensor]:
    params = net.trainable()
    if not freeze_except_bn_dense:
        return params
    keep = {}
    for k, t in params.items():
        node = k.split(".")[0]
        if not k.startswith("gate:") and net.nodes[node].kind in ("batchnorm", "dense"):
            keep[k] = t
    return keep


def train(
    net: GatedNetwork,
    data: Dataset,
    settings: TrainSettings,
    sparsity: SparsityConfig | None = None,
    eval_data: Dataset | None = None,
    callbacks: Iterable[Callable[[dict], None]] = (),
    optimizer: SGD | None = None,
    stage: str = "train",
) -> list[dict]:
    """Minibatch SGD with the combined loss; returns one metrics record per epoch.

    Each step: train-mode forward, combined loss, backward, momentum SGD,
    then gate phis are projected back to [0, 1].
    """
    if data.sample_shape != tuple(net.spec.input_shape):
        raise ValueError(f"dataset samples {data.sample_shape} do not match spec input {tuple(net.spec.input_shape)}")
    sparsity = sparsity or SparsityConfig()
    opt = optimizer or SGD(settings.momentum)
    params = _trainable(net, settings.freeze_except_bn_dense)
    weights = [t for k, t in params.items() if k.endswith(".weight")]
    gates = net.gate_list()
    n = len(data)
    history = []
    for epoch in range(settings.epochs):
        lr = lr_at(epoch, settings.epochs, settings.lr, settings.milestones, settings.gamma)
        perm = np.random.default_rng([settings.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for b, s in enumerate(range(0, n, settings.batch_size)):
            idx = perm[s : s + settings.batch_size]
            if len(idx) < 2:
                continue  # batchnorm needs two samples
            with Tape() as tape:
                logits = net.forward(data.images[idx], "train")
                dl = ops.softmax_cross_entropy(logits, data.labels[idx])
                l2 = ops.l2_penalty(weights, settings.l2) if settings.l2 else 0.0
                loss = combined_loss(dl, gates, sparsity, l2)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"{stage}: non-finite loss {value} at epoch {epoch} batch {b}")
            grads = backward(tape, loss)
            arrays = {k: t.data for k, t in params.items()}
            g = {k: grads.get(t.id, np.zeros_like(t.data)) for k, t in params.items()}
            if settings.gate_lr_scale != 1.0:
                g = {k: v * settings.gate_lr_scale if k.startswith("gate:") else v for k, v in g.items()}
            opt.step(arrays, g, lr)
            project_gates(gates)
            total += value * len(idx)
            seen += len(idx)
        rec = {"stage": stage, "epoch": epoch, "lr": lr, "loss": total / max(seen, 1)}
        if eval_data is not None and len(eval_data):
            rec["eval_acc"] = accuracy(net, eval_data)
        for gran, v in mean_abs_phi(gates).items():
            rec[f"mean_phi_{gran}"] = v
        log.info("%s epoch %d: %s", stage, epoch, rec)
        history.append(rec)
        for cb in callbacks:
            cb(rec)
    return history


# threshold search ----------------------------------------------------------


def _binarized_view(net: GatedNetwork, gates: list[Gate], calib: Dataset | None, policy: ThresholdPolicy, batch_size: int) -> GatedNetwork:
    stats = {k: ops.RunningStats(s.mean.copy(), s.var.copy(), s.momentum) for k, s in net.stats.items()}
    view = GatedNetwork(net.spec, net.params, stats, gates, net.seed)
    if calib is not None and policy.recalibrate_bn and stats:
        # exact average of per-batch statistics over a few fixed batches
        for k in range(policy.calibration_batches):
            chunk = calib.images[k * batch_size : (k + 1) * batch_size]
            if len(chunk) < 2:
                break
            for s in stats.values():
                s.momentum = k / (k + 1)
            view.forward(chunk, "train")
        for s in stats.values():
            s.momentum = ops.BN_MOMENTUM
    return view


def threshold_search(
    net: GatedNetwork,
    eval_data: Dataset,
    granularities: Iterable[str],
    policy: ThresholdPolicy | None = None,
    calib_data: Dataset | None = None,
    batch_size: int = 64,
) -> tuple[dict[str, float], list[dict]]:
    """Largest grid threshold per granularity whose accuracy drop stays within policy.

    Granularities are searched one at a time in block, branch, layer, filter
    order; earlier choices stay fixed while later ones are searched and
    not-yet-searched granularities keep their raw gate values.  Returns the
    thresholds and a trace of every evaluated candidate.
    """
    policy = policy or ThresholdPolicy()
    if len(eval_data) == 0:
        raise ValueError("threshold search needs a nonempty evaluation set")
    gates = net.gate_list()
    ref = 100.0 * accuracy(net, eval_data)
    chosen: dict[str, float] = {}
    trace = []
    for gran in [g for g in SEARCH_ORDER if g in set(granularities)]:
        cache: dict[bytes, float] = {}
        best = None
        for t in policy.grid():
            trial = {**chosen, gran: float(t)}
            bg = binarize_gates(gates, trial)
            key = np.concatenate([g.phi for g in bg]).tobytes() if bg else b""
            if key not in cache:
                cache[key] = 100.0 * accuracy(_binarized_view(net, bg, calib_data, policy, batch_size), eval_data)
            acc = cache[key]
            ok = ref - acc <= policy.max_drop
            trace.append({"granularity": gran, "threshold": float(t), "accuracy": acc, "reference": ref, "ok": ok})
            if ok:
                best = float(t)
        if best is None:
            log.warning("no %s threshold keeps the accuracy drop within %.2f points; using 0", gran, policy.max_drop)
            best = 0.0
        chosen[gran] = best
    return chosen, trace


# end-to-end ----------------------------------------------------------------


def resolve_spec(name_or_path: str, input_shape=None, num_classes=None) -> ModelSpec:
    if name_or_path in CATALOG:
        return get_spec(name_or_path, input_shape, num_classes)
    p = Path(name_or_path)
    if not p.exists():
        raise ConfigError(f"spec {name_or_path!r} is neither a catalog name nor an existing file")
    return ModelSpec.load(p)


def with_shortcuts(spec: ModelSpec, granularities: Iterable[str], policy: str = "skip") -> ModelSpec:
    """Insert shortcuts innermost first: layer, then branch, then block."""
    out = spec
    for gran in ("layer", "branch", "block"):
        if gran in set(granularities):
            out = insert_shortcuts(out, gran, policy)
    return out


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        kind = cfg.spec if cfg.spec in ("mini_resnet", "mini_vgg8") else "mini_resnet"
        train_ds = synthetic_planted(kind, cfg.synthetic_n, cfg.seed)
        test_ds = synthetic_planted(kind, cfg.synthetic_test_n, cfg.seed + 100_003)
        return train_ds, dataclasses.replace(test_ds, split="test")
    train_ds = load_named(cfg.dataset, "train", cfg.data_dir)
    test_ds = load_named(cfg.dataset, "test", cfg.data_dir)
    if cfg.subset_per_class:
        train_ds = subset(train_ds, cfg.subset_per_class, cfg.seed)
    return train_ds, test_ds


def _metrics_csv(history: list[dict]) -> str:
    cols = ["stage", "epoch", "lr", "loss", "eval_acc"] + [f"mean_phi_{g}" for g in GRANULARITIES]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", restval="")
    w.writeheader()
    for rec in history:
        w.writerow({k: rec.get(k, "") for k in cols})
    return buf.getvalue()


@dataclass
class PipelineResult:
    report: CompressionReport
    plan: PruningPlan
    thresholds: dict[str, float]
    gated: GatedNetwork
    binarized: GatedNetwork
    pruned: GatedNetwork
    history: list[dict]
    equivalence: float
    out_dir: Path | None


def prune_pipeline(cfg: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None, write: bool = True) -> PipelineResult:
    """Run the whole protocol and (optionally) write artifacts to ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    stage = "setup"
    artifacts: dict[str, str | bytes] = {}

    def flush():
        if not write:
            return
        out.mkdir(parents=True, exist_ok=True)
        for name, body in artifacts.items():
            (out / name).write_bytes(body if isinstance(body, bytes) else body.encode())

    try:
        artifacts["config.json"] = cfg.to_json() + "\n"
        stage = "data"
        train_full, test_ds = data if data is not None else load_data(cfg)
        train_ds, val_ds = split_off(train_full, cfg.validation_fraction, cfg.seed)

        stage = "spec"
        base = resolve_spec(cfg.spec, train_ds.sample_shape, train_ds.num_classes)
        gated_spec = with_shortcuts(base, cfg.granularities, cfg.mismatch_policy)

        stage = "train"
        gates = init_gates(gated_spec, cfg.granularities, cfg.seed, cfg.gate_noise)
        net = instantiate(gated_spec, gates, cfg.seed)
        history: list[dict] = []
        opt = SGD(cfg.momentum)
        history += train(net, train_ds, TrainSettings.from_config(cfg, cfg.epochs, cfg.seed), cfg.sparsity(), val_ds, optimizer=opt)
        if cfg.save_checkpoints:
            artifacts["gated.ckpt"] = Checkpoint(gated_spec, net.state_dict(), net.gate_list(), opt.state_dict(), cfg.epochs, history).to_bytes()
        gated_test = accuracy(net, test_ds)

        stage = "threshold_search"
        if cfg.thresholds is not None:
            thresholds = {g: float(cfg.thresholds[g]) for g in cfg.granularities if g in cfg.thresholds}
            trace = []
        else:
            thresholds, trace = threshold_search(net, val_ds, cfg.granularities, cfg.threshold, train_ds, cfg.batch_size)

        stage = "binarize"
        bgates = binarize_gates(net.gate_list(), thresholds)
        for g in bgates:
            g.freeze()
        bnet = GatedNetwork(gated_spec, net.params, net.stats, bgates, cfg.seed)
        history += train(bnet, train_ds, TrainSettings.from_config(cfg, cfg.fine_tune_binarized, cfg.seed + 1), None, val_ds, stage="fine_tune_binarized")
        binarized_test = accuracy(bnet, test_ds)

        stage = "surgery"
        plan = plan_from_gates(gated_spec, bgates, thresholds)
        artifacts["plan.json"] = plan.to_json() + "\n"
        kept_spec, kept_state = apply_plan(gated_spec, bnet.state_dict(), plan, keep_scaffold=True)
        kept = instantiate(kept_spec, [], cfg.seed, state=kept_state)
        diff = verify_equivalence(bnet, kept, 16, gated_spec.input_shape, cfg.seed)
        if diff > EQUIVALENCE_TOL:
            raise RuntimeError(f"pruned network deviates from the zero-gate network by {diff:.3e}")
        if cfg.keep_scaffold:
            pruned = kept
        else:
            pspec, pstate = apply_plan(gated_spec, bnet.state_dict(), plan, keep_scaffold=False)
            pruned = instantiate(pspec, [], cfg.seed, state=pstate)

        stage = "fine_tune"
        history += train(
            pruned, train_ds, TrainSettings.from_config(cfg, cfg.fine_tune, cfg.seed + 2, cfg.freeze_except_bn_dense), None, val_ds, stage="fine_tune"
        )
        if cfg.save_checkpoints:
            artifacts["pruned.ckpt"] = Checkpoint(pruned.spec, pruned.state_dict(), [], {}, cfg.fine_tune, []).to_bytes()

        stage = "evaluate"
        pruned_acc = accuracy(pruned, test_ds)
        if cfg.baseline == "train":
            bnet0 = instantiate(base, [], cfg.seed)
            history += train(bnet0, train_ds, TrainSettings.from_config(cfg, cfg.epochs, cfg.seed), None, val_ds, stage="baseline")
            base_acc = accuracy(bnet0, test_ds)
        else:
            base_acc = gated_test

        stage = "report"
        report = build_report(
            (base, base_acc),
            (pruned.spec, pruned_acc),
            {
                "dataset": cfg.dataset,
                "granularities": list(cfg.granularities),
                "thresholds": thresholds,
                "epochs": {"train": cfg.epochs, "fine_tune_binarized": cfg.fine_tune_binarized, "fine_tune": cfg.fine_tune},
                "spec": base.meta.get("name", cfg.spec),
                "seed": cfg.seed,
                "baseline_kind": cfg.baseline,
                "gated_accuracy": gated_test,
                "binarized_accuracy": binarized_test,
                "equivalence_max_abs_diff": diff,
                "keep_scaffold": cfg.keep_scaffold,
                "normalization": {"mean": list(train_ds.mean), "std": list(train_ds.std)},
                "train_samples": len(train_ds),
                "validation_samples": len(val_ds),
                "test_samples": len(test_ds),
                "removed": {k: v for k, v in plan.structures.items()},
                "filters_removed": int(sum(len(v) for v in plan.filters.values())),
            },
        )
        artifacts["report.json"] = report.to_json() + "\n"
        artifacts["report.csv"] = report.to_csv()
        artifacts["metrics.csv"] = _metrics_csv(history)
        artifacts["threshold_trace.json"] = json.dumps(trace, indent=1) + "\n"
        flush()
        return PipelineResult(report, plan, thresholds, net, bnet, pruned, history, diff, out if write else None)
    except Exception as e:
        flush()  # keep whatever was produced before the failure
        if isinstance(e, PipelineError):
            raise
        raise PipelineError(stage, e) from e


def sweep(cfg: ExperimentConfig, granularity_sets: list[list[str]], data=None) -> str:
    """Run one pipeline per granularity subset under ``cfg.out_dir``; returns the combined CSV."""
    rows = []
    for i, grans in enumerate(granularity_sets):
        sub = dataclasses.replace(cfg, granularities=list(grans), out_dir=str(Path(cfg.out_dir) / f"run{i:02d}_{'+'.join(grans)}"))
        res = prune_pipeline(sub, data)
        rows.append(res.report.to_csv(header=not rows))
    text = "".join(rows)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "sweep.csv").write_text(text)
    return text
