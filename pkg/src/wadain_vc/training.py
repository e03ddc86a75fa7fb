"""Batch sampling, the alternating D / (G+E) update and resumable training runs."""
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .data_manifest import TRAIN, Manifest, ManifestError, load_record_features
from .networks import ModelConfig, Models, build_models, load_checkpoint, save_checkpoint
from .objectives import (LossReport, LossWeights, NonFiniteLossError, cycle_loss, identity_loss,
                         lsgan_d_loss, lsgan_g_loss, spk_rec_loss, total_losses)

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    batch_size: int = 8
    segment_frames: int = 256
    g_lr: float = 2e-4
    d_lr: float = 1e-4
    e_lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    total_iterations: int = 250000
    checkpoint_every: int = 10000
    seed: int = 0
    deterministic: bool = True
    losses: LossWeights = field(default_factory=LossWeights)

    def validate(self, time_factor: int = 1):
        if self.batch_size < 1 or self.segment_frames < 1:
            raise ValueError("training.batch_size and training.segment_frames must be positive")
        if min(self.g_lr, self.d_lr, self.e_lr) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.total_iterations < 0 or self.checkpoint_every < 1:
            raise ValueError("training.total_iterations >= 0 and training.checkpoint_every >= 1 required")
        if self.segment_frames % time_factor:
            raise ValueError(f"training.segment_frames={self.segment_frames} must be divisible by "
                             f"the generator's temporal factor {time_factor}")
        self.losses.validate()


@dataclass
class TrainBatch:
    x_s: torch.Tensor
    s_x: torch.Tensor
    x_t: torch.Tensor
    s_y: torch.Tensor

    def __post_init__(self):
        b = self.x_s.shape[0]
        if not (self.x_t.shape[0] == self.s_x.shape[0] == self.s_y.shape[0] == b):
            raise ValueError("TrainBatch members disagree on batch size")


class FeatureStore:
    """Training-split MCEPs held in memory, normalized with the manifest's global stats."""

    def __init__(self, manifest: Manifest, split: str = TRAIN):
        recs = manifest.split(split) if split else list(manifest.records)
        if not recs:
            raise ManifestError("manifest has no records to sample from")
        if manifest.mcep_stats is None:
            raise ManifestError("manifest lacks mcep_stats; run feature caching first")
        self.mean = np.asarray(manifest.mcep_stats["mean"], dtype=np.float32)
        self.std = np.asarray(manifest.mcep_stats["std"], dtype=np.float32)
        self.utt_ids = [r.utt_id for r in recs]
        self.speakers = np.array([r.speaker_index for r in recs], dtype=np.int64)
        self.feats = [self.normalize(load_record_features(r)["mcep"]) for r in recs]

    def __len__(self):
        return len(self.feats)

    def normalize(self, mcep):
        return ((np.asarray(mcep, dtype=np.float32) - self.mean) / self.std).astype(np.float32)

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def crop(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous ``length``-frame window; shorter inputs are wrap-padded."""
    n = x.shape[0]
    if n < length:
        return np.pad(x, ((0, length - n), (0, 0)), mode="wrap")
    start = int(rng.integers(0, n - length + 1))
    return x[start:start + length]


def sample_batch(store: FeatureStore, cfg: TrainingConfig, rng: np.random.Generator) -> TrainBatch:
    n, b = len(store), cfg.batch_size
    src = rng.integers(0, n, b)
    tgt = rng.integers(0, n, b)

    def stack(idx):
        segs = [crop(store.feats[i], cfg.segment_frames, rng).T for i in idx]
        return torch.from_numpy(np.stack(segs)[:, None])

    x_s, x_t = stack(src), stack(tgt)
    return TrainBatch(x_s=x_s, s_x=torch.from_numpy(store.speakers[src]),
                      x_t=x_t, s_y=torch.from_numpy(store.speakers[tgt]))


def make_optimizers(models: Models, cfg: TrainingConfig) -> dict:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return {
        "generator": torch.optim.Adam(models.generator.parameters(), lr=cfg.g_lr, betas=betas),
        "discriminator": torch.optim.Adam(models.discriminator.parameters(), lr=cfg.d_lr, betas=betas),
        "encoder": torch.optim.Adam(models.encoder.parameters(), lr=cfg.e_lr, betas=betas),
    }


def _check(name, v):
    if not torch.isfinite(v).all():
        raise NonFiniteLossError(name, float(v.detach()))


def train_step(batch: TrainBatch, models: Models, optimizers: dict, cfg: TrainingConfig) -> LossReport:
    G, D, E = models.generator, models.discriminator, models.encoder
    w = cfg.losses
    opt_g, opt_d, opt_e = optimizers["generator"], optimizers["discriminator"], optimizers["encoder"]

    # discriminator update; fakes carry no graph back into G or E
    with torch.no_grad():
        fake = G(batch.x_s, E(batch.x_t, batch.s_y))
    d_adv = lsgan_d_loss(D(batch.x_s, batch.s_x), D(fake, batch.s_y))
    _check("d_adv", d_adv)
    opt_d.zero_grad(set_to_none=True)
    d_adv.backward()
    opt_d.step()

    # joint generator + encoder update
    e_t = E(batch.x_t, batch.s_y)
    y = G(batch.x_s, e_t)
    g_adv = lsgan_g_loss(D(y, batch.s_y))
    e_s = E(batch.x_s, batch.s_x)
    cyc = cycle_loss(batch.x_s, G(y, e_s))
    spk = spk_rec_loss(e_t, E(y, batch.s_y))
    total = g_adv + w.lambda_cyc * cyc + w.lambda_spk * spk
    idl = None
    if w.use_identity:
        idl = identity_loss(batch.x_s, G(batch.x_s, e_s))
        total = total + w.lambda_id * idl
    for name, v in (("g_adv", g_adv), ("cyc", cyc), ("spk_rec", spk), ("id", idl)):
        if v is not None:
            _check(name, v)
    opt_g.zero_grad(set_to_none=True)
    opt_e.zero_grad(set_to_none=True)
    total.backward()
    opt_g.step()
    opt_e.step()
    # D collected gradients from the G pass; drop them so they never reach opt_d
    opt_d.zero_grad(set_to_none=True)
    return total_losses(g_adv, d_adv, cyc, spk, w, id=idl)


def _ckpt_name(it: int) -> str:
    return f"ckpt_{it:08d}.pt"


def _rewrite_log(path: Path, upto: int):
    """Drop records past ``upto`` left behind by an interrupted run."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["iteration"] <= upto]
    path.write_text("".join(ln + "\n" for ln in keep))


def train(manifest: Manifest, cfg: TrainingConfig, model_cfg: ModelConfig, out_dir,
          resume: Optional[str] = None, store: Optional[FeatureStore] = None) -> str:
    """Run (or resume) training; returns the path of the final checkpoint.

    Writes ``train_log.jsonl`` (one record per iteration) and checkpoints every
    ``checkpoint_every`` iterations plus one at the end.
    """
    cfg.validate(model_cfg.generator.time_factor)
    if model_cfg.n_speakers != manifest.n_speakers:
        raise ValueError(f"model.n_speakers={model_cfg.n_speakers} but manifest has {manifest.n_speakers}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    store = store or FeatureStore(manifest)
    torch.manual_seed(cfg.seed)
    models = build_models(model_cfg).train()
    optimizers = make_optimizers(models, cfg)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    log_path = out / "train_log.jsonl"
    if resume:
        state = load_checkpoint(resume, model_cfg, models, optimizers)
        start = state["iteration"]
        rng.bit_generator.state = state["extra"]["numpy_rng"]
        torch.set_rng_state(state["extra"]["torch_rng"])
        _rewrite_log(log_path, start)
        logger.info("resumed from %s at iteration %d", resume, start)
    elif log_path.exists():
        log_path.unlink()

    def checkpoint(it):
        path = out / _ckpt_name(it)
        save_checkpoint(path, models, model_cfg, it, optimizers,
                        extra={"numpy_rng": rng.bit_generator.state, "torch_rng": torch.get_rng_state(),
                               "training_config": dataclasses.asdict(cfg)})
        return str(path)

    final = checkpoint(start) if start == cfg.total_iterations else None
    t0 = time.time()
    with open(log_path, "a") as log:
        for it in range(start, cfg.total_iterations):
            batch = sample_batch(store, cfg, rng)
            report = train_step(batch, models, optimizers, cfg)
            rec = {"iteration": it + 1, **report.to_dict(), "g_lr": cfg.g_lr, "d_lr": cfg.d_lr,
                   "e_lr": cfg.e_lr, "wall_clock": time.time() - t0}
            log.write(json.dumps(rec) + "\n")
            if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.total_iterations:
                log.flush()
                final = checkpoint(it + 1)
    return final


def read_log(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]

