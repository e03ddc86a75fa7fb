"""Conditional normalization layers and weight-space adaptive instance norm.

Tensor layouts:
    1D feature maps   B x C x T
    2D feature maps   B x C x H x T
    conv kernels      I x J x K  (I = output channels, J = input channels)
    modulated kernels B x I x J x K
"""
import math
from typing import Callable, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-5

DEMOD_OUT = "out"
DEMOD_IN = "in"


def _standardize(x: torch.Tensor, dims, eps: float) -> torch.Tensor:
    mu = x.mean(dim=dims, keepdim=True)
    sd = x.var(dim=dims, unbiased=False, keepdim=True).sqrt()
    return (x - mu) / (sd + eps)


def instance_norm(f: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per (batch, channel) standardization over all spatial positions, no affine."""
    if f.dim() < 3:
        raise ValueError(f"expected B x C x ... feature map, got shape {tuple(f.shape)}")
    return _standardize(f, tuple(range(2, f.dim())), eps)


def _expand(p: torch.Tensor, ndim: int) -> torch.Tensor:
    return p.reshape(p.shape + (1,) * (ndim - 2))


def cin(f: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    if gamma.shape != beta.shape or gamma.shape != f.shape[:2]:
        raise ValueError(
            f"affine params {tuple(gamma.shape)}/{tuple(beta.shape)} do not match "
            f"feature map batch x channels {tuple(f.shape[:2])}")
    return _expand(gamma, f.dim()) * instance_norm(f, eps) + _expand(beta, f.dim())


def adain(f: torch.Tensor, e: torch.Tensor,
          affine: Callable[[torch.Tensor], Tuple[torch.Tensor, torch.Tensor]],
          eps: float = EPS) -> torch.Tensor:
    gamma, beta = affine(e)
    return cin(f, gamma, beta, eps)


def glu(f: torch.Tensor, dim: int = 1) -> torch.Tensor:
    if f.shape[dim] % 2:
        raise ValueError(f"GLU needs an even channel count, got {f.shape[dim]}")
    a, b = f.chunk(2, dim=dim)
    return a * torch.sigmoid(b)


def wadain_modulate(w: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                    eps: float = EPS, demod_axis: str = DEMOD_OUT) -> torch.Tensor:
    """Modulate a kernel per sample, then standardize it.

    ``w`` is I x J x K, ``gamma``/``beta`` are B x J and scale/shift every
    input channel j. The transformed kernel

        w*[b, i, j, k] = gamma[b, j] * w[i, j, k] + beta[b, j]

    is standardized (population std, ``eps`` added to the std) across the
    output-channel axis i when ``demod_axis == "out"``. Because gamma and beta
    are constant along i, that variant reduces to sign(gamma) * standardize(w)
    up to eps; ``demod_axis == "in"`` standardizes across j instead, which
    keeps the conditioning.
    """
    if w.dim() != 3:
        raise ValueError(f"kernel must be I x J x K, got shape {tuple(w.shape)}")
    if gamma.dim() != 2 or gamma.shape != beta.shape or gamma.shape[1] != w.shape[1]:
        raise ValueError(
            f"affine params {tuple(gamma.shape)}/{tuple(beta.shape)} do not match kernel input "
            f"channels {w.shape[1]}")
    if demod_axis == DEMOD_OUT:
        axis = 1
    elif demod_axis == DEMOD_IN:
        axis = 2
    else:
        raise ValueError(f"demod_axis must be 'out' or 'in', got {demod_axis!r}")
    if w.shape[axis - 1] < 2:
        raise ValueError(f"need at least 2 channels along the demodulation axis, got {w.shape[axis - 1]}")
    ws = gamma[:, None, :, None] * w[None] + beta[:, None, :, None]
    return _standardize(ws, axis, eps)


def modulated_conv1d(f: torch.Tensor, kernels: torch.Tensor, bias=None) -> torch.Tensor:
    """Stride-1 'same' convolution of sample b with its own kernel ``kernels[b]``."""
    b, j, t = f.shape
    _, i, j2, k = kernels.shape
    if j2 != j or kernels.shape[0] != b:
        raise ValueError(f"features {tuple(f.shape)} incompatible with kernels {tuple(kernels.shape)}")
    # grouped conv: one group per batch element
    out = F.conv1d(f.reshape(1, b * j, t), kernels.reshape(b * i, j, k), padding="same", groups=b)
    out = out.reshape(b, i, t)
    if bias is not None:
        out = out + bias[None, :, None]
    return out


def wadain_conv(f: torch.Tensor, w: torch.Tensor, e: torch.Tensor,
                affine: Callable[[torch.Tensor], Tuple[torch.Tensor, torch.Tensor]],
                eps: float = EPS, demod_axis: str = DEMOD_OUT, gain: float = 1.0,
                bias=None) -> torch.Tensor:
    if f.shape[1] != w.shape[1]:
        raise ValueError(f"feature channels {f.shape[1]} != kernel input channels {w.shape[1]}")
    if f.shape[0] != e.shape[0]:
        raise ValueError(f"batch mismatch: features {f.shape[0]}, embeddings {e.shape[0]}")
    gamma, beta = affine(e)
    kernels = wadain_modulate(w, gamma, beta, eps, demod_axis)
    if gain != 1.0:
        kernels = kernels * gain
    return modulated_conv1d(f, kernels, bias)


class AffineFromEmbedding(nn.Module):
    """Linear maps embedding -> (gamma, beta), biased so gamma ~ 1 and beta ~ 0 at init."""

    def __init__(self, embedding_dim: int, channels: int, init_std: float = 0.02):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.gamma = nn.Linear(embedding_dim, channels)
        self.beta = nn.Linear(embedding_dim, channels)
        for lin, b0 in ((self.gamma, 1.0), (self.beta, 0.0)):
            nn.init.normal_(lin.weight, std=init_std)
            nn.init.constant_(lin.bias, b0)

    def forward(self, e):
        if e.shape[-1] != self.embedding_dim:
            raise ValueError(f"embedding dim {e.shape[-1]} != {self.embedding_dim}")
        return self.gamma(e), self.beta(e)


class AdaIN(nn.Module):
    def __init__(self, embedding_dim: int, channels: int, eps: float = EPS):
        super().__init__()
        self.affine = AffineFromEmbedding(embedding_dim, channels)
        self.eps = eps

    def forward(self, f, e):
        return adain(f, e, self.affine, self.eps)


class ConditionalInstanceNorm(nn.Module):
    """CIN conditioned on a concatenated (source, target) speaker-code pair."""

    def __init__(self, n_speakers: int, code_dim: int, channels: int, eps: float = EPS):
        super().__init__()
        self.codes = nn.Embedding(n_speakers, code_dim)
        self.affine = AffineFromEmbedding(2 * code_dim, channels)
        self.eps = eps

    def forward(self, f, s_src, s_tgt):
        e_xy = torch.cat([self.codes(s_src), self.codes(s_tgt)], dim=-1)
        gamma, beta = self.affine(e_xy)
        return cin(f, gamma, beta, self.eps)


class WAdaINConv1d(nn.Module):
    """1D convolution whose kernel is re-derived per sample from a speaker embedding.

    ``gain`` defaults to 1/sqrt(J*K): the standardized kernel has unit entrywise
    std, so without it activations grow by sqrt(fan-in) per layer.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, embedding_dim: int,
                 demod_axis: str = DEMOD_IN, eps: float = EPS, gain=None, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size))
        self.affine = AffineFromEmbedding(embedding_dim, in_channels)
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.demod_axis = demod_axis
        self.eps = eps
        self.gain = 1.0 / math.sqrt(in_channels * kernel_size) if gain is None else gain

    def modulated_kernels(self, e):
        gamma, beta = self.affine(e)
        return wadain_modulate(self.weight, gamma, beta, self.eps, self.demod_axis)

    def forward(self, f, e):
        return wadain_conv(f, self.weight, e, self.affine, self.eps, self.demod_axis,
                           self.gain, self.bias)
