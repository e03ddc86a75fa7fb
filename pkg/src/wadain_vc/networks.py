"""Generator, speaker-conditioned discriminator and speaker encoder.

All networks consume MCEP batches laid out as B x 1 x D x T (D = order + 1).
"""
import dataclasses
import os
from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .norm_layers import DEMOD_IN, EPS, WAdaINConv1d, glu, instance_norm

CHECKPOINT_VERSION = 1


@dataclass
class GeneratorConfig:
    mcep_dim: int = 37
    base_channels: int = 64
    bottleneck_channels: int = 256
    n_bottleneck_blocks: int = 9
    embedding_dim: int = 128
    n_downsample: int = 2
    bottleneck_kernel: int = 5
    demod_axis: str = DEMOD_IN
    residual: bool = True

    def validate(self):
        for name in ("mcep_dim", "base_channels", "bottleneck_channels", "n_bottleneck_blocks",
                     "embedding_dim", "bottleneck_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"generator.{name} must be >= 1")
        if self.n_downsample < 0:
            raise ValueError("generator.n_downsample must be >= 0")
        if self.demod_axis not in ("in", "out"):
            raise ValueError(f"generator.demod_axis must be 'in' or 'out', got {self.demod_axis!r}")

    @property
    def time_factor(self) -> int:
        return 2 ** self.n_downsample


@dataclass
class ModelConfig:
    n_speakers: int = 2
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    disc_channels: int = 32
    encoder_channels: int = 256

    def validate(self):
        if self.n_speakers < 1:
            raise ValueError("model.n_speakers must be >= 1")
        self.generator.validate()

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["generator"] = GeneratorConfig(**d.get("generator", {}))
        return cls(**d)


class ConvINGLU2d(nn.Module):
    def __init__(self, cin, cout, kernel, stride, padding, transpose=False, norm=True):
        super().__init__()
        conv = nn.ConvTranspose2d if transpose else nn.Conv2d
        self.conv = conv(cin, 2 * cout, kernel, stride=stride, padding=padding)
        self.norm = norm

    def forward(self, x):
        x = self.conv(x)
        if self.norm:
            x = instance_norm(x, EPS)
        return glu(x)


class BottleneckBlock(nn.Module):
    def __init__(self, channels, kernel, embedding_dim, demod_axis=DEMOD_IN, residual=True):
        super().__init__()
        self.conv = WAdaINConv1d(channels, 2 * channels, kernel, embedding_dim, demod_axis=demod_axis)
        self.residual = residual

    def forward(self, x, e):
        h = glu(self.conv(x, e))
        return x + h if self.residual else h


class Generator(nn.Module):
    """2-1-2 generator: 2D downsampling, W-AdaIN 1D bottleneck, 2D upsampling."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        base = cfg.base_channels
        f = cfg.time_factor
        self.padded_dim = -(-cfg.mcep_dim // f) * f
        self.inp = ConvINGLU2d(1, base, (5, 15), 1, (2, 7), norm=False)
        down, c = [], base
        for _ in range(cfg.n_downsample):
            down.append(ConvINGLU2d(c, 2 * base, 5, 2, 2))
            c = 2 * base
        self.down = nn.ModuleList(down)
        self.low_channels = c
        self.low_dim = self.padded_dim // f
        flat = c * self.low_dim
        self.to1d = nn.Conv1d(flat, cfg.bottleneck_channels, 1)
        self.blocks = nn.ModuleList(
            BottleneckBlock(cfg.bottleneck_channels, cfg.bottleneck_kernel, cfg.embedding_dim,
                            cfg.demod_axis, cfg.residual)
            for _ in range(cfg.n_bottleneck_blocks))
        self.from1d = nn.Conv1d(cfg.bottleneck_channels, flat, 1)
        up = []
        for i in range(cfg.n_downsample):
            cout = base if i == cfg.n_downsample - 1 else 2 * base
            up.append(ConvINGLU2d(c, cout, 4, 2, 1, transpose=True))
            c = cout
        self.up = nn.ModuleList(up)
        self.out = nn.Conv2d(c, 1, (5, 15), padding=(2, 7))

    def forward(self, x, e):
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.mcep_dim:
            raise ValueError(f"expected B x 1 x {self.cfg.mcep_dim} x T input, got {tuple(x.shape)}")
        if x.shape[3] % self.cfg.time_factor:
            raise ValueError(f"T={x.shape[3]} not divisible by {self.cfg.time_factor}")
        if e.shape[0] != x.shape[0]:
            raise ValueError(f"batch mismatch: x {x.shape[0]}, e {e.shape[0]}")
        d = x.shape[2]
        h = F.pad(x, (0, 0, 0, self.padded_dim - d), mode="replicate") if self.padded_dim > d else x
        h = self.inp(h)
        for blk in self.down:
            h = blk(h)
        b, c, hd, t = h.shape
        h = instance_norm(self.to1d(h.reshape(b, c * hd, t)))
        for blk in self.blocks:
            h = blk(h, e)
        h = instance_norm(self.from1d(h)).reshape(b, c, hd, t)
        for blk in self.up:
            h = blk(h)
        return self.out(h)[:, :, :d, :]


def _check_ids(s, n):
    if s.dtype not in (torch.int64, torch.int32):
        raise ValueError("speaker ids must be an integer tensor")
    if s.numel() and (int(s.min()) < 0 or int(s.max()) >= n):
        raise ValueError(f"speaker id out of range [0, {n}): {s.tolist()}")


class Discriminator(nn.Module):
    """Four shared conv layers, then one output head per training speaker."""

    def __init__(self, mcep_dim: int, n_speakers: int, channels: int = 32):
        super().__init__()
        c = channels
        self.n_speakers = n_speakers
        self.trunk = nn.Sequential(
            nn.Conv2d(1, c, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 4 * c, 3, (2, 1), 1), nn.LeakyReLU(0.2),
        )
        with torch.no_grad():
            _, tc, th, _ = self.trunk(torch.zeros(1, 1, mcep_dim, 8)).shape
        # N parallel 1x1 heads over (channels x reduced frequency), stacked into one conv
        self.heads = nn.Conv1d(tc * th, n_speakers, 1)

    def forward(self, x, s):
        _check_ids(s, self.n_speakers)
        h = self.trunk(x)
        b, c, hd, t = h.shape
        o = self.heads(h.reshape(b, c * hd, t))            # B x N x T'
        o = o.gather(1, s.view(-1, 1, 1).expand(-1, 1, t))  # switch: head s_b for sample b
        return o.mean(dim=(1, 2))


def statistic_pooling(h, eps: float = 1e-5):
    """Concatenate per-channel mean and std over time: B x C x T -> B x 2C."""
    mu = h.mean(dim=2)
    # shifted so constant activations pool to exactly 0 while the gradient stays finite
    sd = (h.var(dim=2, unbiased=False) + eps).sqrt() - eps ** 0.5
    return torch.cat([mu, sd], dim=1)


class SpeakerEncoder(nn.Module):
    """TDNN trunk + statistic pooling + per-speaker output heads.

    With ``s=None`` the embedding is the average over all heads.
    """

    def __init__(self, mcep_dim: int, n_speakers: int, channels: int = 256, embedding_dim: int = 128):
        super().__init__()
        c = channels
        self.n_speakers = n_speakers
        self.trunk = nn.Sequential(
            nn.Conv1d(mcep_dim, c, 5, padding=2), nn.LeakyReLU(0.2),
            nn.Conv1d(c, c, 3, dilation=2, padding=2), nn.LeakyReLU(0.2),
            nn.Conv1d(c, c, 3, dilation=3, padding=3), nn.LeakyReLU(0.2),
            nn.Conv1d(c, c, 1), nn.LeakyReLU(0.2),
        )
        self.head_weight = nn.Parameter(torch.randn(n_speakers, 2 * c, embedding_dim) / (2 * c) ** 0.5)
        self.head_bias = nn.Parameter(torch.zeros(n_speakers, embedding_dim))

    def forward(self, x, s: Optional[torch.Tensor] = None):
        pooled = statistic_pooling(self.trunk(x.squeeze(1)))
        if s is None:
            return pooled @ self.head_weight.mean(0) + self.head_bias.mean(0)
        _check_ids(s, self.n_speakers)
        return torch.einsum("bc,bce->be", pooled, self.head_weight[s]) + self.head_bias[s]


@dataclass
class Models:
    generator: Generator
    discriminator: Discriminator
    encoder: SpeakerEncoder

    def modules(self):
        return {"generator": self.generator, "discriminator": self.discriminator, "encoder": self.encoder}

    def train(self, mode=True):
        for m in self.modules().values():
            m.train(mode)
        return self


def build_models(cfg: ModelConfig) -> Models:
    cfg.validate()
    g = cfg.generator
    return Models(
        generator=Generator(g),
        discriminator=Discriminator(g.mcep_dim, cfg.n_speakers, cfg.disc_channels),
        encoder=SpeakerEncoder(g.mcep_dim, cfg.n_speakers, cfg.encoder_channels, g.embedding_dim),
    )


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, models: Models, cfg: ModelConfig, iteration: int,
                    optimizers: Optional[dict] = None, extra: Optional[dict] = None):
    """Serialize parameters, optimizer state and config; write-temp-then-rename."""
    state = {
        "version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "iteration": iteration,
        "models": {k: m.state_dict() for k, m in models.modules().items()},
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "extra": extra or {},
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, cfg: Optional[ModelConfig] = None, models: Optional[Models] = None,
                    optimizers: Optional[dict] = None) -> dict:
    """Load a checkpoint; optionally restore into ``models``/``optimizers``.

    Raises :class:`CheckpointError` when ``cfg`` differs from the embedded config.
    """
    state = torch.load(os.fspath(path), map_location="cpu", weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {state.get('version')}")
    if cfg is not None and cfg.to_dict() != state["model_config"]:
        raise CheckpointError(
            f"model config mismatch: checkpoint has {state['model_config']}, expected {cfg.to_dict()}")
    if models is not None:
        for k, m in models.modules().items():
            m.load_state_dict(state["models"][k])
    if optimizers is not None:
        for k, o in optimizers.items():
            o.load_state_dict(state["optimizers"][k])
    return state


def load_models(path) -> tuple:
    state = torch.load(os.fspath(path), map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(state["model_config"])
    models = build_models(cfg)
    load_checkpoint(path, cfg, models)
    models.train(False)
    return models, cfg, state
