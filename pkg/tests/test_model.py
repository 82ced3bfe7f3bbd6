import numpy as np
import pytest
import torch

from tinc3d.model import (
    ChannelSeparatedBlock,
    EncoderConfig,
    ModelConfigError,
    ProjectorConfig,
    build_model,
    encode,
    feature_shapes,
    param_groups,
    project,
)

SMALL = EncoderConfig(input_shape=(8, 32, 32), stem_channels=8, stem_stride=(1, 2, 2),
                      stage_channels=(8, 16), blocks_per_stage=(1, 1), representation_dim=24)
SMALL_PROJ = ProjectorConfig(hidden_dims=(32,), output_dim=16)


def test_desk_config_shapes():
    model = build_model(EncoderConfig(), ProjectorConfig(), seed=0)
    x = np.random.default_rng(0).random((2, 16, 64, 64), dtype=np.float32)
    reps = encode(model, x)
    assert reps.shape == (2, 128)
    assert project(model, reps).shape == (2, 8)


def test_channel_axis_optional():
    model = build_model(SMALL, SMALL_PROJ)
    x = torch.rand(3, 8, 32, 32)
    assert torch.equal(encode(model, x), encode(model, x.unsqueeze(1)))


def test_wrong_input_shape_rejected():
    model = build_model(SMALL, SMALL_PROJ)
    with pytest.raises(ValueError, match="expected volumes"):
        encode(model, torch.rand(2, 8, 30, 32))
    with pytest.raises(ValueError, match="expected representations"):
        project(model, torch.rand(2, 5))


@pytest.mark.parametrize("kwargs", [
    dict(input_shape=(8, 32)),
    dict(stem_stride=(1, 2)),
    dict(stage_channels=(8,), blocks_per_stage=(1, 2)),
    dict(representation_dim=0),
])
def test_incompatible_config_rejected(kwargs):
    with pytest.raises(ModelConfigError):
        cfg = EncoderConfig(**kwargs)
        feature_shapes(cfg)


def test_build_is_seeded():
    a = build_model(SMALL, SMALL_PROJ, seed=3)
    b = build_model(SMALL, SMALL_PROJ, seed=3)
    c = build_model(SMALL, SMALL_PROJ, seed=4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    build_model(SMALL, SMALL_PROJ, seed=0)
    assert torch.equal(torch.rand(3), expected)


def test_depthwise_parameter_count():
    for c in (4, 16, 48):
        block = ChannelSeparatedBlock(c, c)
        assert block.depthwise.weight.numel() == c * 3 ** 3
        assert block.depthwise.groups == c


def test_inference_is_batch_independent():
    model = build_model(SMALL, SMALL_PROJ)
    x = torch.rand(5, 8, 32, 32)
    full = encode(model, x)
    for i in range(5):
        torch.testing.assert_close(encode(model, x[i:i + 1])[0], full[i], rtol=1e-5, atol=1e-6)


def test_zero_volume_gives_finite_output():
    model = build_model(SMALL, SMALL_PROJ)
    reps = encode(model, torch.zeros(2, 8, 32, 32))
    assert torch.isfinite(reps).all()
    assert torch.isfinite(project(model, reps)).all()


def test_projections_are_not_normalized():
    model = build_model(SMALL, SMALL_PROJ)
    z = project(model, torch.rand(6, 24) * 10)
    norms = z.norm(dim=1)
    assert not torch.allclose(norms, torch.ones_like(norms), atol=1e-3)


def _double(model):
    model = model.double()
    model.eval()
    return model


def test_encoder_directional_derivative_matches_finite_difference():
    torch.manual_seed(0)
    model = _double(build_model(SMALL, SMALL_PROJ))
    x = torch.rand(2, 8, 32, 32, dtype=torch.float64)
    v = torch.randn_like(x)

    def f(inp):
        return model.encoder(inp).sum()

    xg = x.clone().requires_grad_(True)
    f(xg).backward()
    analytic = float((xg.grad * v).sum())
    # small step so no ReLU kink falls inside the interval
    h = 1e-6
    with torch.no_grad():
        numeric = float((f(x + h * v) - f(x - h * v)) / (2 * h))
    assert abs(analytic - numeric) <= 1e-6 * max(1.0, abs(numeric))


def test_projector_gradient_matches_finite_difference():
    model = _double(build_model(SMALL, SMALL_PROJ))
    r = torch.rand(4, 24, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: model.projector(t).square().sum(), (r,),
                                    eps=1e-6, atol=1e-6)


def test_weight_decay_exempts_bias_and_norm():
    model = build_model(SMALL, SMALL_PROJ)
    decay, exempt = param_groups(model, 1e-4)
    assert decay["weight_decay"] == 1e-4 and exempt["weight_decay"] == 0.0
    ids = {id(p) for p in exempt["params"]}
    for m in model.modules():
        if isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm3d)):
            assert id(m.weight) in ids and id(m.bias) in ids
        if isinstance(m, torch.nn.Linear):
            assert id(m.bias) in ids and id(m.weight) not in ids
    total = sum(p.numel() for p in model.parameters())
    assert sum(p.numel() for g in (decay, exempt) for p in g["params"]) == total
