import dataclasses
import math

import pytest
import torch

from conftest import tiny_pretrain_config
from tinc3d.config import pretrain_config_from_dict
from tinc3d.pairs import training_steps_per_epoch
from tinc3d.pretrain import (
    HISTORY_COLUMNS,
    FingerprintMismatchError,
    NonFiniteLossError,
    PretrainConfig,
    epoch_means,
    load_model,
    lr_at,
    new_state,
    pretrain,
    read_history,
    read_meta,
    with_method,
)


def test_lr_schedule_shape():
    cfg = PretrainConfig(epochs=20, warmup_epochs=4, base_lr=1e-3)
    spe = 5
    assert lr_at(0, cfg, spe) == 0.0
    assert lr_at(10, cfg, spe) == pytest.approx(5e-4)
    assert lr_at(20, cfg, spe) == pytest.approx(1e-3)
    assert lr_at(100, cfg, spe) == pytest.approx(0.0, abs=1e-15)
    mid = 20 + 40
    assert lr_at(mid, cfg, spe) == pytest.approx(5e-4)
    lrs = [lr_at(s, cfg, spe) for s in range(20, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(101, cfg, spe)
    ramp = PretrainConfig(epochs=2, warmup_epochs=2, base_lr=1.0)
    assert [lr_at(s, ramp, 2) for s in range(5)] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_lr_without_warmup_starts_at_base():
    cfg = PretrainConfig(epochs=2, warmup_epochs=0, base_lr=0.1)
    assert lr_at(0, cfg, 3) == 0.1
    assert lr_at(3, cfg, 3) == pytest.approx(0.05)


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(warmup_epochs=401),
                                    dict(base_lr=0.0), dict(checkpoint_every=0)])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        PretrainConfig(**kwargs)


def test_shape_mismatch_between_sections():
    with pytest.raises(ValueError, match="output_shape"):
        tiny_pretrain_config(encoder=PretrainConfig().encoder)


def test_config_roundtrip_and_fingerprint():
    cfg = tiny_pretrain_config()
    again = pretrain_config_from_dict(dataclasses.asdict(cfg))
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()
    assert dataclasses.replace(cfg, checkpoint_every=7).fingerprint() == cfg.fingerprint()
    assert dataclasses.replace(cfg, base_lr=1e-3).fingerprint() != cfg.fingerprint()


def test_step_accounting_and_outputs(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config()
    res = pretrain(tiny_cohort, cfg, tmp_path)
    spe = training_steps_per_epoch(tiny_cohort, cfg.sampler)
    assert res.state.global_step == cfg.epochs * spe == len(res.history)
    assert [r["step"] for r in res.history] == list(range(1, len(res.history) + 1))
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == [
        "ckpt_1.bin", "ckpt_2.bin", "ckpt_3.bin"]
    meta = read_meta(res.checkpoint)
    assert meta["epoch"] == 3 and meta["global_step"] == res.state.global_step
    assert meta["fingerprint"] == cfg.fingerprint()
    rows = read_history(tmp_path / meta["loss_history"])
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert [r["total"] for r in rows] == [r["total"] for r in res.history]
    assert res.history[-1]["lr"] == pytest.approx(0.0, abs=1e-15)
    assert all(math.isfinite(r["total"]) for r in rows)


def test_same_seed_is_deterministic(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config(epochs=2)
    a = pretrain(tiny_cohort, cfg, tmp_path / "a")
    b = pretrain(tiny_cohort, cfg, tmp_path / "b")
    assert [r["total"] for r in a.history] == [r["total"] for r in b.history]
    assert (tmp_path / "a/loss_history.csv").read_bytes() == \
        (tmp_path / "b/loss_history.csv").read_bytes()


def test_resume_matches_uninterrupted_run(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config()
    full = pretrain(tiny_cohort, cfg, tmp_path / "full")
    part = pretrain(tiny_cohort, cfg, tmp_path / "part", stop_after_epoch=1)
    assert part.state.epoch == 1
    done = pretrain(tiny_cohort, cfg, tmp_path / "part", resume_from=part.checkpoint)
    assert len(done.history) == len(full.history)
    assert abs(done.history[-1]["total"] - full.history[-1]["total"]) <= 1e-6
    fs, ds = full.state.model.state_dict(), done.state.model.state_dict()
    for k in fs:
        torch.testing.assert_close(ds[k], fs[k], rtol=0, atol=1e-6)


def test_resume_at_final_epoch_runs_nothing(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config(epochs=1)
    first = pretrain(tiny_cohort, cfg, tmp_path)
    again = pretrain(tiny_cohort, cfg, tmp_path, resume_from=first.checkpoint)
    assert again.state.global_step == first.state.global_step
    assert again.checkpoint == first.checkpoint


def test_resume_with_other_config_rejected(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config(epochs=1)
    first = pretrain(tiny_cohort, cfg, tmp_path)
    with pytest.raises(FingerprintMismatchError):
        pretrain(tiny_cohort, dataclasses.replace(cfg, base_lr=1.0), tmp_path,
                 resume_from=first.checkpoint)


def test_non_finite_loss_aborts(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config(epochs=2, base_lr=1e30)
    with pytest.raises(NonFiniteLossError) as info:
        pretrain(tiny_cohort, cfg, tmp_path)
    assert info.value.step >= 2


def test_load_model_roundtrip(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config(epochs=1)
    res = pretrain(tiny_cohort, cfg, tmp_path)
    model = load_model(res.checkpoint)
    ref = res.state.model.state_dict()
    assert all(torch.equal(ref[k], v) for k, v in model.state_dict().items())
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing.bin")


def test_methods_share_regularizers_at_first_step(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config(epochs=1)
    rows = {m: pretrain(tiny_cohort, with_method(cfg, m), tmp_path / m).history[0]
            for m in ("tinc", "vicreg")}
    for key in ("variance_a", "variance_b", "covariance_a", "covariance_b"):
        assert rows["tinc"][key] == rows["vicreg"][key]
    assert rows["tinc"]["similarity"] != rows["vicreg"]["similarity"]
    barlow = pretrain(tiny_cohort, with_method(cfg, "barlow"), tmp_path / "bt").history[0]
    assert barlow["total"] == pytest.approx(barlow["similarity"] + barlow["covariance_a"])
    with pytest.raises(ValueError):
        with_method(cfg, "simclr")


def test_training_reduces_loss(tiny_cohort, tmp_path):
    cfg = tiny_pretrain_config(epochs=12, warmup_epochs=1, base_lr=2e-3)
    res = pretrain(tiny_cohort, cfg, tmp_path)
    means = epoch_means(res.history)
    assert sum(means[-3:]) < sum(means[:3])


def test_zero_weight_decay_keeps_groups():
    state = new_state(tiny_pretrain_config(weight_decay=0.0))
    assert [g["weight_decay"] for g in state.optimizer.param_groups] == [0.0, 0.0]
