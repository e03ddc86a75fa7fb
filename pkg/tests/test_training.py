import copy
import dataclasses
import os

import numpy as np
import pytest
import torch

from wadain_vc.data_manifest import Manifest, ManifestError, UtteranceRecord
from wadain_vc.networks import GeneratorConfig, ModelConfig, build_models, load_checkpoint
from wadain_vc.objectives import LossWeights, NonFiniteLossError, lsgan_g_loss
from wadain_vc.synthetic import make_toy_manifest
from wadain_vc.training import (FeatureStore, TrainingConfig, crop, make_optimizers, read_log, sample_batch,
                                train, train_step)


def small_model_cfg(n=2):
    return ModelConfig(n_speakers=n, generator=GeneratorConfig(base_channels=4, bottleneck_channels=16,
                                                               n_bottleneck_blocks=2, embedding_dim=8),
                       disc_channels=4, encoder_channels=16)


def small_train_cfg(**kw):
    base = dict(batch_size=2, segment_frames=32, total_iterations=4, checkpoint_every=2, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture
def toy(tmp_path):
    return make_toy_manifest(tmp_path / "toy", n_speakers=2, n_train=3, frames=80)


def test_crop_exact_and_wrap():
    rng = np.random.default_rng(0)
    x = np.arange(256 * 2, dtype=np.float32).reshape(256, 2)
    assert np.array_equal(crop(x, 256, rng), x)
    short = crop(x[:100], 256, rng)
    assert short.shape == (256, 2) and np.array_equal(short[100:200], x[:100])


def test_sample_batch_deterministic(toy):
    store, cfg = FeatureStore(toy), small_train_cfg()
    a = sample_batch(store, cfg, np.random.default_rng(5))
    b = sample_batch(store, cfg, np.random.default_rng(5))
    for f in ("x_s", "s_x", "x_t", "s_y"):
        assert torch.equal(getattr(a, f), getattr(b, f))
    assert a.x_s.shape == (2, 1, 37, 32)


def test_sample_batch_uniform(tmp_path):
    m = make_toy_manifest(tmp_path / "u", n_speakers=3, n_train=1, frames=40)
    store = FeatureStore(m)
    cfg = small_train_cfg(batch_size=1, segment_frames=40)
    rng = np.random.default_rng(1)
    n = 10000
    counts = np.bincount([int(sample_batch(store, cfg, rng).s_x) for _ in range(n)], minlength=3)
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) < 3 * sigma), counts


def test_store_errors(toy):
    with pytest.raises(ManifestError):
        FeatureStore(Manifest(records=[], speaker_table={}, mcep_stats={"mean": [0], "std": [1]}))
    broken = copy.deepcopy(toy)
    broken.records[0] = dataclasses.replace(broken.records[0], feature_cache_path="/nonexistent.npz")
    with pytest.raises(ManifestError, match=broken.records[0].utt_id):
        FeatureStore(broken)


def _setup(toy, seed=0, **kw):
    torch.manual_seed(seed)
    cfg = small_train_cfg(**kw)
    models = build_models(small_model_cfg()).train()
    opts = make_optimizers(models, cfg)
    batch = sample_batch(FeatureStore(toy), cfg, np.random.default_rng(seed))
    return cfg, models, opts, batch


def _snap(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _changed(before, module):
    return {k for k, v in module.state_dict().items() if not torch.equal(v, before[k])}


def test_train_step_updates_every_parameter(toy):
    cfg, models, opts, batch = _setup(toy)
    before = {k: _snap(m) for k, m in models.modules().items()}
    report = train_step(batch, models, opts, cfg)
    for name, mod in models.modules().items():
        params = {k for k, _ in mod.named_parameters()}
        assert params <= _changed(before[name], mod), f"{name}: dead {params - _changed(before[name], mod)}"
    assert report.weighted_total_g == pytest.approx(report.g_adv + 10 * report.cyc + report.spk_rec)


def test_parameter_isolation(toy):
    cfg, models, opts, batch = _setup(toy, g_lr=0.0, e_lr=0.0)
    g0, e0, d0 = _snap(models.generator), _snap(models.encoder), _snap(models.discriminator)
    train_step(batch, models, opts, cfg)
    assert not _changed(g0, models.generator) and not _changed(e0, models.encoder)
    assert _changed(d0, models.discriminator)
    cfg, models, opts, batch = _setup(toy, d_lr=0.0)
    d0 = _snap(models.discriminator)
    train_step(batch, models, opts, cfg)
    assert not _changed(d0, models.discriminator)


def test_gating_only_adversarial_generator_gradient(toy):
    cfg, models, opts, batch = _setup(toy, d_lr=0.0, losses=LossWeights(lambda_cyc=0.0, lambda_spk=0.0))
    ref_models = copy.deepcopy(models)
    ref_opt = torch.optim.Adam(ref_models.generator.parameters(), lr=cfg.g_lr,
                               betas=(cfg.adam_beta1, cfg.adam_beta2))
    train_step(batch, models, opts, cfg)
    # reference: one Adam step on g_adv alone
    G, D, E = ref_models.generator, ref_models.discriminator, ref_models.encoder
    y = G(batch.x_s, E(batch.x_t, batch.s_y))
    ref_opt.zero_grad()
    lsgan_g_loss(D(y, batch.s_y)).backward()
    ref_opt.step()
    for (k, a), (_, b) in zip(models.generator.state_dict().items(), G.state_dict().items()):
        assert torch.allclose(a, b, atol=1e-7), k


def test_step_reproducible(toy):
    reports = []
    for _ in range(2):
        torch.use_deterministic_algorithms(True)
        cfg, models, opts, batch = _setup(toy, seed=3)
        reports.append(train_step(batch, models, opts, cfg).to_dict())
    assert reports[0] == reports[1]


def test_non_finite_aborts(toy):
    cfg, models, opts, batch = _setup(toy)
    batch.x_s[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as ei:
        train_step(batch, models, opts, cfg)
    assert ei.value.component == "d_adv"


def test_zero_iterations_initial_checkpoint(toy, tmp_path):
    out = tmp_path / "run"
    final = train(toy, small_train_cfg(total_iterations=0), small_model_cfg(), out)
    assert os.path.basename(final) == "ckpt_00000000.pt"
    assert sorted(p.name for p in out.glob("*.pt")) == ["ckpt_00000000.pt"]
    assert read_log(out / "train_log.jsonl") == []


def test_log_and_checkpoints(toy, tmp_path):
    out = tmp_path / "run"
    train(toy, small_train_cfg(total_iterations=5, checkpoint_every=2), small_model_cfg(), out)
    log = read_log(out / "train_log.jsonl")
    assert [r["iteration"] for r in log] == [1, 2, 3, 4, 5]
    assert {"g_adv", "d_adv", "cyc", "spk_rec", "g_lr", "d_lr", "e_lr", "wall_clock"} <= set(log[0])
    assert sorted(p.name for p in out.glob("*.pt")) == [f"ckpt_{i:08d}.pt" for i in (2, 4, 5)]
    assert load_checkpoint(out / "ckpt_00000005.pt")["iteration"] == 5


def test_speaker_count_mismatch(toy, tmp_path):
    with pytest.raises(ValueError):
        train(toy, small_train_cfg(), small_model_cfg(3), tmp_path / "r")


def run_split_equivalence(manifest, tmp_path, total, split, model_cfg=None, **cfg_kw):
    """Uninterrupted run vs run stopped at ``split`` and resumed; returns max |diff|."""
    model_cfg = model_cfg or small_model_cfg()
    full = train(manifest, small_train_cfg(total_iterations=total, checkpoint_every=total, **cfg_kw),
                 model_cfg, tmp_path / "full")
    train(manifest, small_train_cfg(total_iterations=split, checkpoint_every=split, **cfg_kw),
          model_cfg, tmp_path / "split")
    resumed = train(manifest, small_train_cfg(total_iterations=total, checkpoint_every=total, **cfg_kw),
                    model_cfg, tmp_path / "split", resume=str(tmp_path / "split" / f"ckpt_{split:08d}.pt"))
    a, b = load_checkpoint(full), load_checkpoint(resumed)
    diff = 0.0
    for name in a["models"]:
        for k, v in a["models"][name].items():
            diff = max(diff, (v.double() - b["models"][name][k].double()).abs().max().item())
    n_log = len(read_log(tmp_path / "split" / "train_log.jsonl"))
    return diff, n_log


def test_resume_equivalence_short(toy, tmp_path):
    diff, n_log = run_split_equivalence(toy, tmp_path, total=6, split=3)
    assert diff == 0.0
    assert n_log == 6
