"""ResNets, the three model variants, and checkpoint I/O.

A ResNet segment with ``convs`` convolutions is laid out as

    stem conv (1 -> C), GN, ReLU
    ``blocks`` residual blocks sharing the remaining ``convs - 1`` convs
        (earlier blocks take the extras); each conv is followed by GN and
        ReLU and an identity skip spans the block
    the last conv of the final block sits after its skip and maps C -> 1

followed by the final activation.  A ResNet of twice the depth stacks two
segments, so its parameter count is exactly twice that of one segment.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ContainerFormatError, TruncationError, ValidationError
from .layers import Activation, Conv2dWS, GroupNorm
from .migration import MigrationPlan, migrate_adjoint, migrate_array
from .processing import (ProcessingConfig, envelope_backward, envelope_forward,
                         log_compress_backward, log_compress_forward,
                         to_unit_range_backward, to_unit_range_forward)

VARIANTS = ("complete", "pre_only", "post_only")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "complete"
    channels: int = 64
    kernel: int = 5
    blocks_per_resnet: int = 3
    convs_per_resnet: int = 16
    groups: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown model variant {self.variant!r}")
        if self.channels < 1 or self.groups < 1 or self.channels % self.groups:
            raise ValidationError("groups must divide channels")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError("kernel size must be odd")
        if self.blocks_per_resnet < 1 or self.convs_per_resnet - 1 < self.blocks_per_resnet:
            raise ValidationError("need at least one conv per residual block after the stem")


def block_sizes(convs: int, blocks: int) -> list:
    """Number of convs per residual block for one segment."""
    base, extra = divmod(convs - 1, blocks)
    return [base + (i < extra) for i in range(blocks)]


class _Segment:
    def __init__(self, channels, kernel, blocks, convs, groups, rng):
        self.stem = (Conv2dWS(1, channels, kernel, rng), GroupNorm(channels, groups), Activation("relu"))
        self.blocks = []
        sizes = block_sizes(convs, blocks)
        for i, n in enumerate(sizes):
            inner = n - 1 if i == len(sizes) - 1 else n
            self.blocks.append([(Conv2dWS(channels, channels, kernel, rng),
                                 GroupNorm(channels, groups), Activation("relu"))
                                for _ in range(inner)])
        self.head = Conv2dWS(channels, 1, kernel, rng)

    def named_layers(self, prefix):
        names = ("conv", "gn")
        for n, layer in zip(names, self.stem[:2]):
            yield f"{prefix}stem.{n}", layer
        for b, units in enumerate(self.blocks):
            for u, unit in enumerate(units):
                for n, layer in zip(names, unit[:2]):
                    yield f"{prefix}block{b}.{u}.{n}", layer
        yield f"{prefix}head.conv", self.head

    def forward(self, x):
        h = x
        for layer in self.stem:
            h = layer.forward(h)
        for units in self.blocks:
            skip = h
            for unit in units:
                for layer in unit:
                    h = layer.forward(h)
            h = h + skip
        return self.head.forward(h)

    def backward(self, g):
        g = self.head.backward(g)
        for units in reversed(self.blocks):
            g_skip = g
            for unit in reversed(units):
                for layer in reversed(unit):
                    g = layer.backward(g)
            g = g + g_skip
        for layer in reversed(self.stem):
            g = layer.backward(g)
        return g


class ResNet:
    """Single-channel in, single-channel out; spatial size preserved."""

    def __init__(self, channels, kernel, blocks, convs, groups, final_activation,
                 segments: int = 1, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.segments = [_Segment(channels, kernel, blocks, convs, groups, rng) for _ in range(segments)]
        self.final = Activation(final_activation)

    def named_layers(self, prefix=""):
        for s, seg in enumerate(self.segments):
            yield from seg.named_layers(f"{prefix}seg{s}.")

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != 1:
            raise ValidationError(f"ResNet expects a [1, H, W] input, got {x.shape}")
        h = x
        for seg in self.segments:
            h = seg.forward(h)
        return self.final.forward(h)

    def backward(self, g):
        g = self.final.backward(g)
        for seg in reversed(self.segments):
            g = seg.backward(g)
        return g


class Model:
    """One of the three variants: ResNets around a frozen zero-angle migration chain."""

    def __init__(self, spec: ModelSpec, plan: MigrationPlan,
                 cfg: ProcessingConfig = ProcessingConfig(), seed: int = 0):
        self.spec, self.plan, self.cfg, self.seed = spec, plan, cfg, seed
        plan.acq.angle_index(0.0)  # the chain needs a zero-angle frame
        rng = np.random.default_rng(seed)
        args = (spec.channels, spec.kernel, spec.blocks_per_resnet, spec.convs_per_resnet, spec.groups)
        self.pre = self.post = None
        if spec.variant == "complete":
            self.pre = ResNet(*args, "tanh", segments=1, rng=rng)
            self.post = ResNet(*args, "sigmoid", segments=1, rng=rng)
        elif spec.variant == "pre_only":
            self.pre = ResNet(*args, "tanh", segments=2, rng=rng)
        else:
            self.post = ResNet(*args, "sigmoid", segments=2, rng=rng)
        self._saved = None

    # parameters in declaration order
    def named_layers(self):
        if self.pre is not None:
            yield from self.pre.named_layers("pre.")
        if self.post is not None:
            yield from self.post.named_layers("post.")

    def named_parameters(self):
        for lname, layer in self.named_layers():
            for pname, value in layer.params.items():
                yield f"{lname}.{pname}", layer, pname, value

    def parameters(self) -> list:
        return [v for _, _, _, v in self.named_parameters()]

    def gradients(self) -> list:
        return [layer.grads[p] for _, layer, p, _ in self.named_parameters()]

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()

    def forward(self, rf: np.ndarray) -> np.ndarray:
        """``[num_elements, num_samples]`` RF data -> normalized ``[nz, nx]`` image."""
        x = np.asarray(rf, dtype=np.float64)
        if x.shape != self.plan.data_shape:
            raise ValidationError(f"input shape {x.shape} does not match {self.plan.data_shape}")
        if self.pre is not None:
            x = self.pre.forward(x[None])[0]
        img = migrate_array(x, self.plan, 0.0)
        e, env_saved = envelope_forward(img, self.cfg)
        db, log_saved = log_compress_forward(e, self.cfg)
        u, _ = to_unit_range_forward(db, self.cfg)
        if self.post is not None:
            u = self.post.forward(u[None])[0]
        self._saved = (env_saved, log_saved)
        return u

    def backward(self, g: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the RF input."""
        if self._saved is None:
            raise RuntimeError("Model.backward called before forward")
        env_saved, log_saved = self._saved
        self._saved = None
        g = np.asarray(g, dtype=np.float64)
        if self.post is not None:
            g = self.post.backward(g[None])[0]
        g = to_unit_range_backward(g, self.cfg)
        g = log_compress_backward(g, log_saved)
        g = envelope_backward(g, env_saved, self.cfg)
        g = migrate_adjoint(g, self.plan, 0.0)
        if self.pre is not None:
            g = self.pre.backward(g[None])[0]
        return g


def build_model(spec: ModelSpec, plan: MigrationPlan,
                cfg: ProcessingConfig = ProcessingConfig(), seed: int = 0) -> Model:
    return Model(spec, plan, cfg, seed)


def param_count(model_or_spec) -> int:
    """Trainable parameter count of a model, or of the model a spec would build."""
    if isinstance(model_or_spec, ModelSpec):
        return spec_param_count(model_or_spec)
    return int(sum(v.size for v in model_or_spec.parameters()))


def segment_param_count(channels: int, kernel: int, blocks: int, convs: int) -> int:
    """Closed form for one ResNet segment."""
    k2 = kernel * kernel
    gn = 2 * channels
    stem = k2 * channels + channels + gn
    inner = (convs - 2) * (k2 * channels * channels + channels + gn)
    head = k2 * channels + 1
    return stem + inner + head


def spec_param_count(spec: ModelSpec) -> int:
    # every variant carries two segments in total
    return 2 * segment_param_count(spec.channels, spec.kernel, spec.blocks_per_resnet,
                                   spec.convs_per_resnet)


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model: Model, epoch: int = 0, optimizer_step: int = 0,
                    extra: dict | None = None) -> None:
    """Text manifest, a blank line, then float32 little-endian parameters in declaration order."""
    lines = [f"version: {CHECKPOINT_VERSION}"]
    lines += [f"{k}: {v}" for k, v in asdict(model.spec).items()]
    lines += [f"seed: {model.seed}", f"epoch: {epoch}", f"optimizer_step: {optimizer_step}",
              f"dynamic_range_db: {model.cfg.dynamic_range!r}"]
    params = list(model.named_parameters())
    lines.append(f"num_tensors: {len(params)}")
    lines.append(f"num_values: {sum(v.size for *_, v in params)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    for name, _, _, v in params:
        lines.append(f"tensor: {name} {'x'.join(str(d) for d in v.shape)}")
    blob = b"".join(np.asarray(v, dtype="<f4").tobytes() for *_, v in params)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        fh.write(blob)


def read_checkpoint_header(path):
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise ContainerFormatError("checkpoint header is not terminated by a blank line", "header")
    header, tensors = {}, []
    for line in raw[:end].decode("ascii").splitlines():
        key, sep, value = line.partition(": ")
        if not sep:
            raise ContainerFormatError("malformed checkpoint header line", line)
        if key == "tensor":
            name, shape = value.split(" ")
            tensors.append((name, tuple(int(d) for d in shape.split("x") if d)))
        else:
            header[key] = value
    return header, tensors, raw[end + 2:]


def load_checkpoint(path, plan: MigrationPlan, cfg: ProcessingConfig | None = None):
    """Rebuild a model from a checkpoint.  Returns ``(model, header)``."""
    header, tensors, blob = read_checkpoint_header(path)
    try:
        spec = ModelSpec(variant=header["variant"], channels=int(header["channels"]),
                         kernel=int(header["kernel"]),
                         blocks_per_resnet=int(header["blocks_per_resnet"]),
                         convs_per_resnet=int(header["convs_per_resnet"]),
                         groups=int(header["groups"]))
        seed = int(header["seed"])
        dr = float(header["dynamic_range_db"])
    except KeyError as exc:
        raise ContainerFormatError("missing checkpoint key", exc.args[0]) from None
    if cfg is None:
        cfg = ProcessingConfig(dynamic_range=dr)
    model = Model(spec, plan, cfg, seed)
    params = list(model.named_parameters())
    if [(n, v.shape) for n, _, _, v in params] != tensors:
        raise ValidationError("checkpoint tensors do not match the model layout")
    total = sum(v.size for *_, v in params)
    if len(blob) != 4 * total:
        raise TruncationError(f"checkpoint payload holds {len(blob)} bytes, expected {4 * total}")
    values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    pos = 0
    for _, layer, pname, v in params:
        layer.params[pname] = values[pos:pos + v.size].reshape(v.shape).copy()
        pos += v.size
    model.zero_grad()
    return model, header


def load_parameters(model: Model, values) -> None:
    """Copy a flat list of arrays into the model in declaration order."""
    for (_, layer, pname, v), new in zip(model.named_parameters(), values):
        layer.params[pname] = np.array(new, dtype=np.float64).reshape(v.shape)
