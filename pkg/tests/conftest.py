import pytest

from tinc3d.augment3d import AugmentConfig
from tinc3d.model import EncoderConfig, ProjectorConfig
from tinc3d.pairs import SamplerConfig
from tinc3d.pretrain import PretrainConfig
from tinc3d.synthgen import SynthConfig, generate_cohort

TINY_SHAPE = (8, 32, 32)


def tiny_pretrain_config(**kwargs) -> PretrainConfig:
    base = dict(
        epochs=3, warmup_epochs=1, checkpoint_every=1,
        sampler=SamplerConfig(batch_size=4),
        augment=AugmentConfig(output_shape=TINY_SHAPE, blur_kernel=5),
        encoder=EncoderConfig(input_shape=TINY_SHAPE, stem_channels=8, stem_stride=(1, 2, 2),
                              stage_channels=(8, 16), representation_dim=16),
        projector=ProjectorConfig(hidden_dims=(32,), output_dim=32),
    )
    base.update(kwargs)
    return PretrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_cohort")
    return generate_cohort(SynthConfig(n_patients=12, volume_shape=TINY_SHAPE, seed=1), out)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
