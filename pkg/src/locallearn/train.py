"""Training a split network: simultaneous, asynchronous (cached) and parallel modes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import queue
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .graph import (LayerGraph, LocalModule, build_local_modules, build_template, counts_to_slices,
                    interpolate_lambdas, split_balanced_memory, split_counts)
from .nn import load_state, state_dict
from .optim import SGD, cosine_lr

log = logging.getLogger(__name__)

MODES = ("simultaneous", "async", "parallel")

DEVIATION_FLAGS = {
    "contrastive_sign": "negative log of the softmax ratio, so the loss is minimised",
    "projection_l2_normalized": True,
    "init": "fan-in scaled uniform: conv sqrt(6/fan_in), linear sqrt(1/fan_in)",
    "batch_norm": "batch statistics in train mode, running averages (momentum 0.9) in eval mode",
    "aux_weight_decay": "auxiliary nets share the main network's weight decay",
    "k2_lambdas": "K=2 uses the first-module lambda endpoints",
}


class DivergenceError(RuntimeError):
    def __init__(self, step: int, module: int, value: float):
        super().__init__(f"loss diverged at step {step} in module {module} (value {value})")
        self.step = step
        self.module = module


@dataclass
class TrainPlan:
    template: str = "resnet8"
    widths: tuple | None = None
    k: int = 4
    split: str = "equal"            # equal | balanced
    variant: str = "softmax"        # softmax | contrast
    head: str = "conv_mlp"          # conv_mlp | linear (softmax label head)
    lambda1_first: float = 1.0
    lambda2_first: float = 1.0
    lambda1_last: float = 1.0
    lambda2_last: float = 1.0
    tau: float = losses.DEFAULT_TAU
    mode: str = "simultaneous"
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    seed: int = 0
    width_scale: float = 1.0
    projection_dim: int = 32
    max_steps: int = 0              # 0: run all epochs
    queue_capacity: int = 2
    watchdog_seconds: float = 120.0

    def validate(self) -> "TrainPlan":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("async", "parallel") and self.k < 2:
            raise ValueError(f"mode={self.mode} requires K >= 2")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.split not in ("equal", "balanced"):
            raise ValueError(f"split must be 'equal' or 'balanced', got {self.split!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if min(self.lambda1_first, self.lambda2_first, self.lambda1_last, self.lambda2_last) < 0:
            raise ValueError("lambda endpoints must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["widths"] is not None:
            d["widths"] = list(d["widths"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown plan fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("widths") is not None:
            d["widths"] = tuple(d["widths"])
        return cls(**d)

    def lambdas(self) -> list[tuple[float, float]]:
        if self.k < 2:
            return []
        return interpolate_lambdas(self.lambda1_first, self.lambda2_first, self.lambda1_last,
                                   self.lambda2_last, self.k)


@dataclass
class TrainData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    def __post_init__(self):
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ValueError("inputs and labels differ in length")

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])


@dataclass
class Model:
    graph: LayerGraph
    modules: list[LocalModule]

    def parameters(self):
        out = []
        for m in self.modules:
            out.extend(m.parameters())
        return out

    def state(self) -> list[list[np.ndarray]]:
        return [[a for net in m.all_modules() for a in state_dict(net)] for m in self.modules]

    def load(self, state) -> None:
        for m, st in zip(self.modules, state):
            i = 0
            for net in m.all_modules():
                n = len(net.parameters()) + len(net.buffers())
                load_state(net, st[i:i + n])
                i += n

    def features(self, x: np.ndarray, upto: int, batch_size: int = 256) -> np.ndarray:
        """Eval-mode output of modules 1..upto (``upto=0`` returns the input)."""
        if upto == 0:
            return np.asarray(x, dtype=np.float64)
        outs = []
        for m in self.modules[:upto]:
            m.eval()
        with ad.no_grad():
            for s in range(0, len(x), batch_size):
                h = Tensor(x[s:s + batch_size])
                for m in self.modules[:upto]:
                    h = m(h)
                outs.append(h.data)
        for m in self.modules[:upto]:
            m.train()
        return np.concatenate(outs)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.features(x, len(self.modules), batch_size).argmax(axis=1)

    def error(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) != y))


def plan_slices(plan: TrainPlan, graph: LayerGraph, batch_size: int | None = None, image_shape=None) -> list[slice]:
    """Equal layer counts, or the partition minimising the largest module footprint.

    The balanced footprint of a module ending at layer j includes the
    auxiliary nets it would carry there (any term whose coefficient is
    positive at either endpoint) or, for the final module, the classifier
    head and its loss.
    """
    if plan.split == "equal" or plan.k == 1:
        return counts_to_slices(split_counts(len(graph), plan.k))
    from .memory import aux_cost, head_cost, layer_costs

    bs = batch_size or plan.batch_size
    costs = layer_costs(graph, bs)
    prefix = np.concatenate([[0], np.cumsum(costs)])
    image_shape = tuple(image_shape or graph.input_shape)
    l1 = max(plan.lambda1_first, plan.lambda1_last)
    l2 = max(plan.lambda2_first, plan.lambda2_last)
    rng = np.random.default_rng(0)
    extra = []
    for j in range(1, len(graph) + 1):
        mod = build_local_modules(graph, [slice(0, j), slice(j, len(graph))], [(l1, l2)], plan.variant,
                                  plan.head, image_shape, graph.n_classes, plan.tau, plan.width_scale,
                                  plan.projection_dim, rng)[0] if (l1 or l2) else None
        extra.append(aux_cost(mod, bs, image_shape) if mod is not None else 0)
    last = head_cost(graph, bs)

    def module_cost(i, j):
        return prefix[j] - prefix[i] + (last if j == len(graph) else extra[j - 1])

    return split_balanced_memory(costs, plan.k, module_cost)


def build_model(plan: TrainPlan, input_shape, n_classes: int, image_shape=None) -> Model:
    rng = np.random.default_rng([plan.seed, 1])
    graph = build_template(plan.template, input_shape, n_classes, rng, widths=plan.widths)
    slices = plan_slices(plan, graph, image_shape=image_shape or input_shape)
    modules = build_local_modules(graph, slices, plan.lambdas(), plan.variant, plan.head,
                                  image_shape or input_shape, n_classes, plan.tau, plan.width_scale,
                                  plan.projection_dim, rng)
    return Model(graph, modules)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the incomplete tail batch is dropped."""
    perm = np.random.default_rng([seed, 2, epoch]).permutation(n)
    nb = max(n // batch_size, 1) if n >= batch_size else 1
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(nb)]


def schedule(plan: TrainPlan, n_train: int) -> list[tuple[int, np.ndarray]]:
    """(epoch, batch indices) for every optimisation step of the run."""
    steps = []
    for e in range(plan.epochs):
        for b in epoch_batches(n_train, plan.batch_size, plan.seed, e):
            steps.append((e, b))
            if plan.max_steps and len(steps) >= plan.max_steps:
                return steps
    return steps


def make_optimizers(plan: TrainPlan, model: Model) -> list[SGD]:
    return [SGD(m.parameters(), plan.lr, plan.momentum, plan.nesterov, plan.weight_decay) for m in model.modules]


def _set_dropout_step(module: LocalModule, step: int) -> None:
    stack = list(module.all_modules())
    while stack:
        net = stack.pop()
        if hasattr(net, "p") and hasattr(net, "layer_id"):
            net.step = step
        stack.extend(net.children())


def module_step(m: LocalModule, opt: SGD, h: Tensor, x_raw: np.ndarray, y: np.ndarray, lr: float, step: int,
                hook: Callable | None = None, loss_weight: float = 1.0) -> tuple[Tensor, dict]:
    """Forward, local loss, backward and update for one module on one batch.

    Returns the detached module output and the loss terms.
    """
    _set_dropout_step(m, step)
    opt.zero_grad()
    out = m(h)
    if m.is_last:
        loss = losses.e2e_loss(out, y)
        terms = {"recon": 0.0, "label": loss.item()}
        pred = out.data.argmax(axis=1)
        terms["err"] = float(np.mean(pred != y))
    else:
        lb = losses.infopro_module_loss(m, out, x_raw, y)
        loss = lb.total
        terms = {"recon": lb.reconstruction_term, "label": lb.label_term}
    terms["total"] = loss.item()
    if not math.isfinite(terms["total"]):
        raise DivergenceError(step, m.index, terms["total"])
    if loss_weight != 1.0:
        loss = ad.scale(loss, loss_weight)
    if hook is not None:
        hook("pre", m.index)
    ad.backward(loss)
    if hook is not None:
        hook("post", m.index)
    opt.step(lr)
    return ad.detach(out), terms


class _EpochLog:
    def __init__(self, k: int):
        self.sums = [{"recon": 0.0, "label": 0.0, "total": 0.0} for _ in range(k)]
        self.counts = [0] * k
        self.err_sum = 0.0
        self.err_count = 0

    def add(self, idx: int, terms: dict):
        for key in ("recon", "label", "total"):
            self.sums[idx][key] += terms[key]
        self.counts[idx] += 1
        if "err" in terms:
            self.err_sum += terms["err"]
            self.err_count += 1

    def rows(self, epoch, test_err, lr):
        train_err = self.err_sum / self.err_count if self.err_count else float("nan")
        out = []
        for i, (s, c) in enumerate(zip(self.sums, self.counts)):
            c = max(c, 1)
            out.append({"epoch": epoch, "module": i + 1, "recon": s["recon"] / c, "label": s["label"] / c,
                        "total": s["total"] / c, "train_err": train_err, "test_err": test_err, "lr": lr})
        return out


@dataclass
class TrainResult:
    model: Model
    plan: TrainPlan
    metrics: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def final_test_err(self) -> float:
        return self.metrics[-1]["test_err"] if self.metrics else float("nan")


def _grouped(steps):
    by_epoch: dict[int, list] = {}
    for t, (e, b) in enumerate(steps):
        by_epoch.setdefault(e, []).append((t, b))
    return by_epoch


def train_simultaneous(plan: TrainPlan, data: TrainData, model: Model | None = None, hook=None,
                       on_epoch_end=None, loss_weights=None) -> TrainResult:
    """Per batch: each module in turn runs forward, its own loss, backward and update."""
    plan.validate()
    model = model or build_model(plan, data.input_shape, data.n_classes)
    opts = make_optimizers(plan, model)
    steps = schedule(plan, len(data.x_train))
    total = len(steps)
    weights = loss_weights or [1.0] * len(model.modules)
    metrics = []
    if on_epoch_end is not None:
        on_epoch_end(0, model)
    lr = plan.lr
    for e, items in _grouped(steps).items():
        elog = _EpochLog(len(model.modules))
        for t, b in items:
            lr = cosine_lr(t, total, plan.lr)
            x_raw, y = data.x_train[b], data.y_train[b]
            h = Tensor(x_raw)
            for i, (m, opt) in enumerate(zip(model.modules, opts)):
                h, terms = module_step(m, opt, h, x_raw, y, lr, t, hook, weights[i])
                elog.add(i, terms)
        metrics.extend(elog.rows(e + 1, model.error(data.x_test, data.y_test), lr))
        if on_epoch_end is not None:
            on_epoch_end(e + 1, model)
    return TrainResult(model, plan, metrics)


# ----------------------------------------------------------------- asynchronous

@dataclass
class ActivationCache:
    """Detached outputs of a fully trained module, keyed by example id."""
    module_index: int
    ids: np.ndarray
    features: np.ndarray
    checkpoint_id: str

    def __post_init__(self):
        if len(self.ids) != len(self.features):
            raise ValueError(f"cache holds {len(self.features)} features for {len(self.ids)} ids")
        self.features = np.array(self.features, copy=True)
        self.features.flags.writeable = False

    def lookup(self, ids) -> np.ndarray:
        pos = np.searchsorted(self.ids, ids)
        if np.any(pos >= len(self.ids)) or np.any(self.ids[np.minimum(pos, len(self.ids) - 1)] != ids):
            raise KeyError("example id missing from activation cache")
        return self.features[pos]

    def save(self, path) -> None:
        np.savez(path, module_index=self.module_index, ids=self.ids, features=self.features,
                 checkpoint_id=self.checkpoint_id)

    @classmethod
    def load(cls, path) -> "ActivationCache":
        with np.load(path) as z:
            return cls(int(z["module_index"]), z["ids"], z["features"], str(z["checkpoint_id"]))


def checkpoint_id(module: LocalModule) -> str:
    h = hashlib.sha256()
    for net in module.all_modules():
        for a in state_dict(net):
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def build_cache(module: LocalModule, inputs: np.ndarray, ids: np.ndarray | None = None,
                batch_size: int = 256) -> ActivationCache:
    ids = np.arange(len(inputs)) if ids is None else np.asarray(ids)
    module.eval()
    outs = []
    with ad.no_grad():
        for s in range(0, len(inputs), batch_size):
            outs.append(module(Tensor(inputs[s:s + batch_size])).data)
    module.train()
    return ActivationCache(module.index, ids, np.concatenate(outs), checkpoint_id(module))


def train_module_on_inputs(plan: TrainPlan, m: LocalModule, opt: SGD, inputs: np.ndarray, data: TrainData,
                           steps) -> list[dict]:
    """Train one module to completion on fixed inputs; returns per-epoch loss means."""
    if len(inputs) != len(data.x_train):
        raise ValueError(f"cache/dataset size mismatch: {len(inputs)} cached vs {len(data.x_train)} examples")
    total = len(steps)
    out = []
    for e, items in _grouped(steps).items():
        elog = _EpochLog(1)
        lr = plan.lr
        for t, b in items:
            lr = cosine_lr(t, total, plan.lr)
            _, terms = module_step(m, opt, Tensor(inputs[b]), data.x_train[b], data.y_train[b], lr, t)
            elog.add(0, terms)
        out.append((e + 1, elog, lr))
    return out


def train_async(plan: TrainPlan, data: TrainData, model: Model | None = None,
                cache_dir: str | Path | None = None, epochs_per_module=None) -> TrainResult:
    """Train module 1 to completion, cache its outputs, train module 2 on the cache, and so on."""
    plan.validate()
    if plan.k < 2:
        raise ValueError("asynchronous training requires K >= 2")
    model = model or build_model(plan, data.input_shape, data.n_classes)
    opts = make_optimizers(plan, model)
    inputs = data.x_train
    metrics = []
    caches = []
    for i, (m, opt) in enumerate(zip(model.modules, opts)):
        ep = plan.epochs if epochs_per_module is None else epochs_per_module[i]
        sub = TrainPlan.from_dict({**plan.to_dict(), "epochs": ep})
        for epoch, elog, lr in train_module_on_inputs(plan, m, opt, inputs, data, schedule(sub, len(inputs))):
            for row in elog.rows(epoch, float("nan"), lr):
                row["module"] = i + 1
                metrics.append(row)
        if not m.is_last:
            cache = build_cache(m, inputs)
            if cache_dir is not None:
                path = Path(cache_dir) / f"cache_module{i + 1}.npz"
                cache.save(path)
                cache = ActivationCache.load(path)
            caches.append(cache)
            inputs = cache.features
    test_err = model.error(data.x_test, data.y_test)
    for row in metrics:
        row["test_err"] = test_err
    return TrainResult(model, plan, metrics, {"caches": caches})


# ----------------------------------------------------------------- parallel

_STOP = object()


def train_parallel(plan: TrainPlan, data: TrainData, model: Model | None = None) -> TrainResult:
    """One worker thread per module, connected by bounded FIFO queues.

    Worker k consumes detached activations of batch t from worker k-1 in
    batch order, trains on them and forwards its own detached output, so the
    sequence of updates each module sees is exactly that of simultaneous mode.
    """
    plan.validate()
    if plan.k < 2:
        raise ValueError("parallel training requires K >= 2")
    model = model or build_model(plan, data.input_shape, data.n_classes)
    opts = make_optimizers(plan, model)
    steps = schedule(plan, len(data.x_train))
    total = len(steps)
    k = len(model.modules)
    metrics = []
    lr = plan.lr
    for e, items in _grouped(steps).items():
        chans = [queue.Queue(maxsize=plan.queue_capacity) for _ in range(k - 1)]
        elog = _EpochLog(k)
        errors: list[BaseException] = []
        abort = threading.Event()

        def worker(i: int):
            m, opt = model.modules[i], opts[i]
            try:
                for t, b in items:
                    if abort.is_set():
                        return
                    if i == 0:
                        h = Tensor(data.x_train[b])
                    else:
                        try:
                            msg = chans[i - 1].get(timeout=plan.watchdog_seconds)
                        except queue.Empty:
                            raise RuntimeError(f"worker {i + 1}: no activation for step {t} within "
                                               f"{plan.watchdog_seconds}s (pipeline stalled)") from None
                        if msg is _STOP:
                            return
                        t_in, h = msg
                        if t_in != t:
                            raise RuntimeError(f"worker {i + 1}: expected step {t}, received {t_in}")
                    out, terms = module_step(m, opt, h, data.x_train[b], data.y_train[b],
                                             cosine_lr(t, total, plan.lr), t)
                    elog.add(i, terms)
                    if i < k - 1:
                        _put(chans[i], (t, out), abort, plan.watchdog_seconds, i)
            except BaseException as exc:  # surfaced in the driver thread
                errors.append(exc)
                abort.set()
                if i < k - 1:
                    try:
                        chans[i].put_nowait(_STOP)
                    except queue.Full:
                        pass

        threads = [threading.Thread(target=worker, args=(i,), name=f"module-{i + 1}") for i in range(k)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if errors:
            raise errors[0]
        lr = cosine_lr(items[-1][0], total, plan.lr)
        metrics.extend(elog.rows(e + 1, model.error(data.x_test, data.y_test), lr))
    return TrainResult(model, plan, metrics)


def _put(q: queue.Queue, item, abort: threading.Event, timeout: float, i: int) -> None:
    waited = 0.0
    while True:
        if abort.is_set():
            return
        try:
            q.put(item, timeout=0.5)
            return
        except queue.Full:
            waited += 0.5
            if waited >= timeout:
                raise RuntimeError(f"worker {i + 1}: downstream queue full for {timeout}s (pipeline stalled)")


def train(plan: TrainPlan, data: TrainData, **kw) -> TrainResult:
    fn = {"simultaneous": train_simultaneous, "async": train_async, "parallel": train_parallel}[plan.mode]
    return fn(plan, data, **kw)


# ----------------------------------------------------------------- outputs

METRIC_FIELDS = ["epoch", "module", "recon", "label", "total", "train_err", "test_err", "lr"]


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r[f] if isinstance(r[f], int) else repr(float(r[f])) for f in METRIC_FIELDS])
    return buf.getvalue()


def run_metadata(plan: TrainPlan, extra: dict | None = None) -> dict:
    return {
        "plan": plan.to_dict(),
        "environment": {"python": platform.python_version(), "numpy": np.__version__,
                        "dtype": "float64"},
        "deviation_flags": DEVIATION_FLAGS,
        **(extra or {}),
    }


def write_run(result: TrainResult, out_dir, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        f.write(metrics_csv(result.metrics))
    (out / "run.json").write_text(json.dumps(run_metadata(result.plan, extra), indent=2, sort_keys=True))
    arrays = {}
    for i, st in enumerate(result.model.state()):
        for j, a in enumerate(st):
            arrays[f"m{i + 1}_{j:03d}"] = a
    np.savez(out / "checkpoint.npz", **arrays)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}
