"""Supervised training: MSE loss, AMSGrad, stratified nested subsets, run manifests."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core import DataSample, ValidationError, normalize_rf
from .models import Model, load_parameters

LOSSES = ("mse",)


class NumericalError(ArithmeticError):
    """Non-finite gradients or a diverging loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps_opt: float = 1e-8
    batch_size: int = 1
    fraction: float = 1.0
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValidationError("epochs must be a positive integer")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValidationError("betas must be two values in [0, 1)")
        if not self.eps_opt > 0:
            raise ValidationError("eps_opt must be positive")
        if self.batch_size != 1:
            raise ValidationError("only batch_size = 1 is supported")
        if not 0 < self.fraction <= 1:
            raise ValidationError("fraction must lie in (0, 1]")
        if self.loss not in LOSSES:
            raise ValidationError(f"unknown loss {self.loss!r}")

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            if k == "betas":
                v = ", ".join(repr(b) for b in v)
            out.append(f"{k}: {v!r}" if isinstance(v, float) else f"{k}: {v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            key, value = key.strip(), value.strip()
            if key not in types:
                continue
            if key == "betas":
                kw[key] = tuple(float(v) for v in value.split(","))
            elif key in ("epochs", "batch_size", "seed"):
                kw[key] = int(value)
            elif key == "loss":
                kw[key] = value
            else:
                kw[key] = float(value)
        return cls(**kw)


# -- loss and optimizer -------------------------------------------------------------

def mse_loss(x, y):
    """Mean squared error and its gradient ``2 (x - y) / N`` w.r.t. ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shapes differ: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.mean(d * d)), 2.0 * d / d.size


@dataclass
class AmsgradState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    v_max: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params) -> "AmsgradState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])


def amsgrad_step(params, grads, state: AmsgradState, cfg: TrainConfig):
    """One AMSGrad update.  Returns ``(new_params, state)``; ``state`` is updated in place."""
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter tensor {i}; step rejected")
    if not state.m:
        fresh = AmsgradState.zeros_like(params)
        state.m, state.v, state.v_max = fresh.m, fresh.v, fresh.v_max
    b1, b2 = cfg.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    out = []
    for p, g, m, v, vm in zip(params, grads, state.m, state.v, state.v_max):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        np.maximum(vm, v, out=vm)
        denom = np.sqrt(vm) / math.sqrt(bc2) + cfg.eps_opt
        out.append(p - (cfg.lr / bc1) * m / denom)
    return out, state


# -- data subsets ------------------------------------------------------------------------

def subset_size(n: int, fraction: float) -> int:
    """``fraction * n`` rounded half up; 0.04 of 176 gives 7."""
    return int(math.floor(fraction * n + 0.5))


def select_subset(ids, labels, fraction: float, seed: int) -> list:
    """Stratified, nested subset of ``ids``.

    Each class is shuffled with ``seed`` and the classes are interleaved
    round-robin; a subset is a prefix of that order, so smaller fractions
    are contained in larger ones and class counts differ by at most one
    while every class still has members left.
    """
    ids, labels = list(ids), list(labels)
    if len(ids) != len(labels):
        raise ValidationError("ids and labels differ in length")
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must lie in (0, 1]")
    n = subset_size(len(ids), fraction)
    if n == 0:
        raise ValidationError(f"fraction {fraction} of {len(ids)} samples selects nothing")
    return stratified_order(ids, labels, seed)[:n]


def stratified_order(ids, labels, seed: int) -> list:
    rng = np.random.default_rng(seed)
    classes = sorted(set(labels))
    pools = []
    for c in classes:
        members = [i for i, l in zip(ids, labels) if l == c]
        pools.append([members[k] for k in rng.permutation(len(members))])
    order = [pools[k] for k in rng.permutation(len(pools))]
    out = []
    for r in range(max((len(p) for p in order), default=0)):
        out.extend(p[r] for p in order if r < len(p))
    return out


def train_test_split(ids, labels, num_test: int):
    """Fixed held-out set: the first ``num_test`` ids of the seed-0 stratified order."""
    ids = list(ids)
    if not 0 <= num_test < len(ids):
        raise ValidationError("num_test must leave at least one training sample")
    test = stratified_order(ids, labels, 0)[:num_test]
    held = set(test)
    return [i for i in ids if i not in held], test


# -- training loop ------------------------------------------------------------------------

@dataclass
class TrainRun:
    config: TrainConfig
    subset: list
    history: list = field(default_factory=list)
    parameters: list = field(default_factory=list)
    optimizer: AmsgradState | None = None

    def manifest(self, extra: dict | None = None) -> str:
        lines = ["# training run", self.config.to_text().rstrip("\n")]
        for k, v in (extra or {}).items():
            lines.append(f"{k}: {v}")
        lines.append(f"subset_size: {len(self.subset)}")
        lines.append("subset_ids: " + ", ".join(str(i) for i in self.subset))
        lines.append("epoch\tloss")
        lines.extend(f"{e + 1}\t{loss!r}" for e, loss in enumerate(self.history))
        return "\n".join(lines) + "\n"


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, run: TrainRun):
        super().__init__(message)
        self.run = run


def model_input(sample: DataSample) -> np.ndarray:
    return normalize_rf(sample.frame_at(0.0)).data


def train(model: Model, samples: dict, cfg: TrainConfig, train_ids=None, progress=None) -> TrainRun:
    """Train ``model`` in place on ``samples`` (id -> DataSample) and return the run record.

    The subset is drawn from ``train_ids`` (default: all ids) with the
    config's fraction and seed; each epoch visits it in a fresh seeded order.
    """
    train_ids = list(samples) if train_ids is None else list(train_ids)
    labels = [samples[i].lesion_class for i in train_ids]
    subset = select_subset(train_ids, labels, cfg.fraction, cfg.seed)
    for i in subset:
        if samples[i].target is None:
            raise ValidationError(f"sample {i} has no target image")
    inputs = {i: model_input(samples[i]) for i in subset}
    rng = np.random.default_rng(cfg.seed)
    state = AmsgradState.zeros_like(model.parameters())
    run = TrainRun(cfg, subset, optimizer=state)
    good = [p.copy() for p in model.parameters()]

    for epoch in range(cfg.epochs):
        total = 0.0
        for k in rng.permutation(len(subset)):
            sid = subset[k]
            model.zero_grad()
            out = model.forward(inputs[sid])
            loss, g = mse_loss(out, samples[sid].target.pixels)
            if not math.isfinite(loss):
                load_parameters(model, good)
                run.parameters = good
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch + 1}", run)
            model.backward(g)
            try:
                new, _ = amsgrad_step(model.parameters(), model.gradients(), state, cfg)
            except NumericalError as exc:
                load_parameters(model, good)
                run.parameters = good
                raise TrainingDiverged(str(exc), run) from None
            load_parameters(model, new)
            total += loss
        run.history.append(total / len(subset))
        good = [p.copy() for p in model.parameters()]
        if progress is not None:
            progress(epoch + 1, run.history[-1])
    run.parameters = good
    return run


def predict(model: Model, sample: DataSample) -> np.ndarray:
    return model.forward(model_input(sample))
