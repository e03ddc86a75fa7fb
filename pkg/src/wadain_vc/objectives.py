"""Loss functions: LSGAN adversarial, cycle, speaker-embedding reconstruction,
plus the older StarGAN-style primitives (identity, domain classifier,
non-least-squares adversarial, speaker-pair concatenation)."""
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_spk: float = 1.0
    lambda_id: float = 5.0
    use_identity: bool = False

    def validate(self):
        for k in ("lambda_cyc", "lambda_spk", "lambda_id"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")


@dataclass
class LossReport:
    g_adv: float
    d_adv: float
    cyc: float
    spk_rec: float
    weighted_total_g: float
    weighted_total_d: float
    id: Optional[float] = None
    domain: Optional[float] = None

    def to_dict(self):
        return asdict(self)


def lsgan_d_loss(d_real, d_fake):
    return ((d_real - 1) ** 2).mean() + (d_fake ** 2).mean()


def lsgan_g_loss(d_fake):
    return ((d_fake - 1) ** 2).mean()


def l1_loss(a, b):
    return (a - b).abs().mean()


def cycle_loss(x, x_cyc):
    return l1_loss(x, x_cyc)


def identity_loss(x, g_xx):
    return l1_loss(x, g_xx)


def spk_rec_loss(e_target, e_converted):
    return l1_loss(e_target, e_converted)


def domain_cls_loss(p, s, floor: float = PROB_FLOOR):
    """Mean negative log posterior of the labelled speaker, floored at ``floor``."""
    picked = p.gather(1, s.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(floor)).mean()


def stargan_vc_adv_losses(d_real, d_fake):
    """Generator/discriminator adversarial terms in their literal
    expectation form: g = -E[D(fake)], d = -E[D(real)] - E[1 - D(fake)]."""
    g = -d_fake.mean()
    d = -d_real.mean() - (1 - d_fake).mean()
    return g, d


def concat_speaker_pair(e_x, e_y):
    return torch.cat([e_x, e_y], dim=-1)


def _f(v):
    if v is None:
        return None
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def total_losses(g_adv, d_adv, cyc, spk_rec, w: LossWeights, id=None, domain=None) -> LossReport:
    """Assemble a :class:`LossReport`; identity enters the G total only if enabled."""
    g_adv, d_adv, cyc, spk_rec, id, domain = map(_f, (g_adv, d_adv, cyc, spk_rec, id, domain))
    total_g = g_adv + w.lambda_cyc * cyc + w.lambda_spk * spk_rec
    if w.use_identity and id is not None:
        total_g += w.lambda_id * id
    for name, v in (("g_adv", g_adv), ("d_adv", d_adv), ("cyc", cyc), ("spk_rec", spk_rec),
                    ("id", id), ("domain", domain)):
        if v is not None and not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return LossReport(g_adv=g_adv, d_adv=d_adv, cyc=cyc, spk_rec=spk_rec,
                      weighted_total_g=total_g, weighted_total_d=d_adv, id=id, domain=domain)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component, value):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
