import numpy as np
import pytest

from conftest import central_diff, rel_err
from pwfk.core import AcquisitionParams, ProbeGeometry, TruncationError, ValidationError
from pwfk.migration import MigrationPlan, migrate_array
from pwfk.models import (ModelSpec, ResNet, block_sizes, build_model, load_checkpoint, param_count,
                         save_checkpoint, segment_param_count)
from pwfk.processing import ProcessingConfig, envelope_forward, log_compress_forward, to_unit_range_forward


@pytest.fixture(scope="module")
def plan():
    geom = ProbeGeometry(8, 0.3e-3)
    acq = AcquisitionParams(sampling_freq=10e6, center_freq=2.5e6, num_samples=64,
                            angles=(-0.1, 0.0, 0.1))
    return MigrationPlan(geom, acq)


TINY = dict(channels=4, kernel=3, blocks_per_resnet=2, convs_per_resnet=4, groups=2)


def test_block_layout():
    assert block_sizes(16, 3) == [5, 5, 5]
    assert block_sizes(8, 3) == [3, 2, 2]
    assert sum(block_sizes(32, 3)) == 31


def test_default_param_parity(plan):
    counts = {v: param_count(ModelSpec(variant=v)) for v in ("complete", "pre_only", "post_only")}
    assert len(set(counts.values())) == 1
    # closed form: 2 x (stem + 14 inner convs with GN + head)
    k2, c = 25, 64
    seg = (k2 * c + c + 2 * c) + 14 * (k2 * c * c + c + 2 * c) + (k2 * c + 1)
    assert counts["complete"] == 2 * seg
    small = {v: param_count(build_model(ModelSpec(variant=v, **TINY), plan))
             for v in ("complete", "pre_only", "post_only")}
    assert len(set(small.values())) == 1
    assert small["complete"] == param_count(ModelSpec(**TINY))


def test_doubling_depth_doubles_conv_parameters():
    one = ResNet(8, 5, 3, 16, 8, "sigmoid", segments=1)
    two = ResNet(8, 5, 3, 16, 8, "sigmoid", segments=2)

    def conv_params(net):
        return sum(l.params["weight"].size + l.params["bias"].size
                   for n, l in net.named_layers() if n.endswith("conv"))

    assert conv_params(two) == 2 * conv_params(one)
    assert segment_param_count(8, 5, 3, 16) == sum(
        v.size for _, l in one.named_layers() for v in l.params.values())


def test_zero_parameters_give_half(rng):
    net = ResNet(4, 3, 2, 5, 2, "sigmoid")
    for _, layer in net.named_layers():
        for k in layer.params:
            layer.params[k] = np.zeros_like(layer.params[k])
    out = net.forward(rng.standard_normal((1, 6, 7)))
    assert np.array_equal(out, np.full((1, 6, 7), 0.5))


def test_resnet_gradient(rng):
    net = ResNet(4, 3, 1, 4, 2, "sigmoid", rng=rng)
    for _, layer in net.named_layers():
        if "beta" in layer.params:
            layer.params["beta"] = 0.1 * rng.standard_normal(layer.params["beta"].shape)
    x = rng.standard_normal((1, 8, 8))
    w = rng.standard_normal((1, 8, 8))
    f = lambda: float(np.sum(w * net.forward(x)))  # noqa: E731
    net.forward(x)
    gx = net.backward(w)
    assert rel_err(gx, central_diff(f, x)) <= 1e-3
    for name, layer in net.named_layers():
        for p, v in layer.params.items():
            assert rel_err(layer.grads[p], central_diff(f, v)) <= 1e-3, (name, p)


def test_resnet_input_shape():
    with pytest.raises(ValidationError):
        ResNet(4, 3, 1, 4, 2, "tanh").forward(np.zeros((2, 4, 4)))


def test_spec_validation():
    with pytest.raises(ValidationError):
        ModelSpec(variant="huge")
    with pytest.raises(ValidationError):
        ModelSpec(channels=12, groups=8)
    with pytest.raises(ValidationError):
        ModelSpec(blocks_per_resnet=3, convs_per_resnet=3)


@pytest.mark.parametrize("variant", ["complete", "pre_only", "post_only"])
def test_model_output_range(plan, rng, variant):
    model = build_model(ModelSpec(variant=variant, **TINY), plan, seed=3)
    out = model.forward(rng.standard_normal(plan.data_shape))
    assert out.shape == plan.image_shape
    assert out.min() >= 0 and out.max() <= 1


def test_pre_only_composition(plan, rng):
    model = build_model(ModelSpec(variant="pre_only", **TINY), plan, seed=1)
    x = rng.standard_normal(plan.data_shape)
    staged = model.pre.forward(x[None])[0]
    e, _ = envelope_forward(migrate_array(staged, plan, 0.0))
    expected = to_unit_range_forward(log_compress_forward(e)[0])[0]
    assert np.allclose(model.forward(x), expected, atol=1e-14)


def test_complete_model_gradient(plan, rng, monkeypatch):
    model = build_model(ModelSpec(variant="complete", channels=2, kernel=3, blocks_per_resnet=1,
                                  convs_per_resnet=3, groups=1), plan,
                        ProcessingConfig(dynamic_range=200.0), seed=2)
    x = rng.standard_normal(plan.data_shape)
    w = rng.standard_normal(plan.image_shape)
    f = lambda: float(np.sum(w * model.forward(x)))  # noqa: E731
    model.zero_grad()
    model.forward(x)
    gx = model.backward(w)
    # downstream of the image maximum the gradient is exact
    post = [(n, l, p, v) for n, l, p, v in model.named_parameters() if n.startswith("post.")]
    for name, layer, p, v in post[:4]:
        assert rel_err(layer.grads[p], central_diff(f, v)) <= 1e-3, name
    # upstream, the backward pass treats the maximum as a constant, so the oracle freezes it;
    # the wide dynamic range keeps every pixel clear of the clip
    e_max = envelope_forward(migrate_array(model.pre.forward(x[None])[0], plan, 0.0))[0].max()

    def frozen(e, cfg):
        return 20.0 * np.log10(e / e_max), None

    monkeypatch.setattr("pwfk.models.log_compress_forward", frozen)
    name, layer, p, v = next(iter(model.named_parameters()))
    assert name.startswith("pre.")
    assert rel_err(layer.grads[p], central_diff(f, v)) <= 1e-3
    assert rel_err(gx, central_diff(f, x)) <= 1e-3


def test_checkpoint_round_trip(tmp_path, plan):
    model = build_model(ModelSpec(**TINY), plan, seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, epoch=3, optimizer_step=12, extra={"test_ids": "a,b"})
    back, header = load_checkpoint(path, plan)
    assert header["epoch"] == "3" and header["test_ids"] == "a,b"
    assert back.spec == model.spec
    for a, b in zip(model.parameters(), back.parameters()):
        assert np.array_equal(a.astype(np.float32), b)
    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(path2, back, epoch=3, optimizer_step=12, extra={"test_ids": "a,b"})
    assert path.read_bytes() == path2.read_bytes()
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(TruncationError):
        load_checkpoint(path, plan)


def test_model_needs_zero_angle():
    geom = ProbeGeometry(8, 0.3e-3)
    acq = AcquisitionParams(sampling_freq=10e6, center_freq=2.5e6, num_samples=64, angles=(0.1,))
    with pytest.raises(ValidationError):
        build_model(ModelSpec(**TINY), MigrationPlan(geom, acq))
