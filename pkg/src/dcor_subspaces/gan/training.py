"""Alternating GAN optimization with inversion and subspace objectives.

Discriminator objective::

    adv_D + lambda_R1 * R1 + lambda_w * L_w + lambda_p * L_p + lambda_C * L_CE + lambda_DC * L_DC

Generator objective::

    adv_G + lambda_PL * PL + lambda_w * L_w + lambda_p * L_p

R1 and the path-length term are applied lazily (every ``r1_interval`` /
``pl_interval`` steps, weights scaled up by the interval).  On style-mixing
steps both objectives drop L_w and L_p.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError, NumericalAbort
from ..layout import SubspaceLayout
from . import losses
from .networks import Discriminator, Generator

logger = logging.getLogger(__name__)

# single-process training; the R1 heuristic divides by the device count
DEVICE_COUNT = 1


@dataclass
class GanTrainConfig:
    lambda_pl: float = 2.0
    lambda_w: float = 1.0
    lambda_p: float = 2.0
    lambda_c: float = 0.04
    lambda_dc: float = 0.2
    # None selects 0.0002 * resolution / batch_size
    lambda_r1: float | None = None
    style_mixing_prob: float = 0.5
    ring_buffer_batches: int = 5
    learning_rate: float = 2.5e-3
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 2000
    r1_interval: int = 16
    pl_interval: int = 8
    base_channels: int = 32
    max_channels: int = 64
    mapping_layers: int = 8
    mapping_hidden: int = 64
    mapping_lr_mul: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("lambda_pl", "lambda_w", "lambda_p", "lambda_c", "lambda_dc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lambda_r1 is not None and self.lambda_r1 < 0:
            raise ConfigError("lambda_r1 must be >= 0")
        if self.ring_buffer_batches < 1:
            raise ConfigError("ring_buffer_batches must be >= 1")
        if not 0.0 <= self.style_mixing_prob <= 1.0:
            raise ConfigError("style_mixing_prob must lie in [0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.r1_interval < 1 or self.pl_interval < 1:
            raise ConfigError("regularization intervals must be >= 1")

    def r1_weight(self, resolution: int) -> float:
        if self.lambda_r1 is not None:
            return self.lambda_r1
        return 0.0002 * resolution / (self.batch_size * DEVICE_COUNT)


@dataclass
class GanBundle:
    layout: SubspaceLayout
    config: GanTrainConfig
    resolution: int
    generator: Generator
    discriminator: Discriminator
    heads: nn.ModuleDict
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    ring: losses.RingBuffer
    pl_mean: torch.Tensor
    rng: random.Random
    step: int = 0
    log: list[dict] = field(default_factory=list)
    last_checkpoint: str | None = None

    @property
    def trained(self) -> bool:
        return self.step > 0

    def latent_dim(self) -> int:
        return self.layout.total


def build_gan(layout: SubspaceLayout, resolution: int = 32, config: GanTrainConfig | None = None) -> GanBundle:
    config = config or GanTrainConfig()
    torch.manual_seed(config.seed)
    g = Generator(layout, resolution, config.mapping_layers, config.mapping_hidden, config.mapping_lr_mul,
                  config.base_channels, config.max_channels)
    d = Discriminator(layout.total, resolution, config.base_channels, config.max_channels)
    heads = nn.ModuleDict({
        name: nn.Linear(layout.dims[layout.index(name)], n) for name, n in layout.classes.items()
    })
    opt = dict(lr=config.learning_rate, betas=config.betas, eps=config.eps)
    g_opt = torch.optim.Adam(g.parameters(), **opt)
    d_opt = torch.optim.Adam(list(d.parameters()) + list(heads.parameters()), **opt)
    return GanBundle(layout, config, resolution, g, d, heads, g_opt, d_opt,
                     losses.RingBuffer(config.ring_buffer_batches), torch.zeros(()),
                     random.Random(config.seed))


def to_model_range(images) -> torch.Tensor:
    """[0, 1] images (array or tensor) to float32 tensors in [-1, 1]."""
    return torch.as_tensor(np.asarray(images), dtype=torch.float32) * 2.0 - 1.0


def to_unit_range(images: torch.Tensor) -> np.ndarray:
    return ((images.detach().clamp(-1.0, 1.0) + 1.0) / 2.0).numpy()


def _check_finite(record: dict, bundle: GanBundle):
    bad = {k: v for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)}
    if bad:
        raise NumericalAbort(f"non-finite GAN loss at step {record['step']}: {sorted(bad)}", {
            "step": record["step"], "values": bad, "last_checkpoint": bundle.last_checkpoint})


def _style_inputs(g: Generator, w: torch.Tensor, mixing: bool, rng: random.Random, n: int):
    if not mixing:
        return g.broadcast(w)
    w2 = g.map(torch.randn(n, g.layout.total))
    return g.mix(w, w2, rng.randint(1, g.num_ws - 1))


def train_step(bundle: GanBundle, real: torch.Tensor, labels: dict, train_d: bool = True,
               train_g: bool = True) -> dict:
    """One discriminator update followed by one generator update.

    ``real`` is a batch in [-1, 1].  Returns the step record; totals equal the
    weighted sum of the logged components (lazy terms include their interval).
    """
    cfg, g, d, layout = bundle.config, bundle.generator, bundle.discriminator, bundle.layout
    n = len(real)
    step = bundle.step
    mixing = bundle.rng.random() < cfg.style_mixing_prob
    r1_w = cfg.r1_weight(bundle.resolution)
    rec = {"step": step, "mixing": mixing, "inversion": not mixing}
    zero = torch.zeros(())

    # discriminator
    d_adv = r1 = d_lw = d_lp = zero
    sup_parts = {"ce": 0.0, "dc": 0.0, "n_dcor": 0}
    d_total = zero
    if train_d:
        g.requires_grad_(False)
        d.requires_grad_(True)
        with torch.no_grad():
            w = g.map(torch.randn(n, layout.total))
            fake = g.synthesis(_style_inputs(g, w, mixing, bundle.rng, n))
        do_r1 = r1_w > 0 and step % cfg.r1_interval == 0
        real_in = real.detach().requires_grad_(do_r1)
        real_logit, w_hat_real, p_real = d(real_in)
        fake_logit, w_hat_fake, _ = d(fake)
        d_adv = losses.discriminator_adversarial_loss(real_logit, fake_logit)
        if do_r1:
            r1 = losses.r1_penalty(real_in, real_logit)
        if not mixing:
            d_lw = losses.latent_loss(w, w_hat_fake)
            _, _, p_recon = d(g.synthesize(w_hat_real))
            d_lp = losses.pixel_feature_loss(p_real, p_recon)
        sup, sup_parts = losses.subspace_supervision(w_hat_real, bundle.heads, labels, layout, bundle.ring,
                                                     cfg.lambda_c, cfg.lambda_dc)
        d_total = (d_adv + r1_w * cfg.r1_interval * r1 + cfg.lambda_w * d_lw + cfg.lambda_p * d_lp + sup)
        bundle.d_opt.zero_grad(set_to_none=True)
        d_total.backward()
        bundle.d_opt.step()

    # generator
    g_adv = pl = g_lw = g_lp = zero
    g_total = zero
    if train_g:
        g.requires_grad_(True)
        d.requires_grad_(False)
        w = g.map(torch.randn(n, layout.total))
        fake = g.synthesis(_style_inputs(g, w, mixing, bundle.rng, n))
        fake_logit, w_hat_fake, _ = d(fake)
        g_adv = losses.generator_adversarial_loss(fake_logit)
        if not mixing:
            g_lw = losses.latent_loss(w.detach(), w_hat_fake)
            with torch.no_grad():
                _, w_hat_real, p_real = d(real)
            _, _, p_recon = d(g.synthesize(w_hat_real))
            g_lp = losses.pixel_feature_loss(p_real, p_recon)
        if cfg.lambda_pl > 0 and step % cfg.pl_interval == 0:
            m = max(1, n // 2)
            ws_pl = g.broadcast(g.map(torch.randn(m, layout.total)))
            pl, bundle.pl_mean = losses.path_length_penalty(g.synthesis(ws_pl), ws_pl, bundle.pl_mean)
        g_total = g_adv + cfg.lambda_pl * cfg.pl_interval * pl + cfg.lambda_w * g_lw + cfg.lambda_p * g_lp
        bundle.g_opt.zero_grad(set_to_none=True)
        g_total.backward()
        bundle.g_opt.step()
    d.requires_grad_(True)
    g.requires_grad_(True)

    values = {"d_adv": d_adv, "r1": r1, "d_lw": d_lw, "d_lp": d_lp, "d_total": d_total,
              "g_adv": g_adv, "pl": pl, "g_lw": g_lw, "g_lp": g_lp, "g_total": g_total}
    rec.update({k: float(v.detach()) for k, v in values.items()})
    rec.update(sup_parts)
    _check_finite(rec, bundle)
    bundle.step += 1
    bundle.log.append(rec)
    return rec


def train_gan(bundle: GanBundle, train_set, steps: int | None = None, progress=None, checkpoint=None,
              checkpoint_every: int = 0) -> GanBundle:
    """Run ``steps`` training steps on batches drawn from ``train_set`` (a LabeledImageBatch).

    ``checkpoint(bundle)`` is called every ``checkpoint_every`` steps when given.
    """
    cfg = bundle.config
    steps = cfg.steps if steps is None else steps
    if len(train_set) < cfg.batch_size:
        raise ConfigError(f"training set has {len(train_set)} images, fewer than one batch")
    images = to_model_range(train_set.images)
    labels = {k: torch.as_tensor(v) for k, v in train_set.labels.items()}
    for _ in range(steps):
        # per-step seeding makes a resumed run identical to an uninterrupted one
        torch.manual_seed(cfg.seed * 1_000_003 + bundle.step)
        index = torch.randperm(len(train_set))[:cfg.batch_size]
        rec = train_step(bundle, images[index], {k: v[index] for k, v in labels.items()})
        if progress:
            progress(rec)
        if checkpoint and checkpoint_every and bundle.step % checkpoint_every == 0:
            checkpoint(bundle)
    return bundle


def inversion_fraction(log: list[dict]) -> float:
    return float(np.mean([r["inversion"] for r in log])) if log else 0.0


def save_gan(bundle: GanBundle, path) -> None:
    torch.save({
        "kind": "gan",
        "layout": bundle.layout.to_dict(),
        "config": asdict(bundle.config),
        "resolution": bundle.resolution,
        "generator": bundle.generator.state_dict(),
        "discriminator": bundle.discriminator.state_dict(),
        "heads": bundle.heads.state_dict(),
        "g_opt": bundle.g_opt.state_dict(),
        "d_opt": bundle.d_opt.state_dict(),
        "ring": bundle.ring.state_dict(),
        "pl_mean": bundle.pl_mean,
        "rng": bundle.rng.getstate(),
        "step": bundle.step,
        "log": bundle.log,
    }, path)
    bundle.last_checkpoint = str(path)


def load_gan(path) -> GanBundle:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "gan":
        raise ConfigError(f"{path} is not a GAN checkpoint")
    bundle = build_gan(SubspaceLayout.from_dict(blob["layout"]), blob["resolution"], GanTrainConfig(**blob["config"]))
    bundle.generator.load_state_dict(blob["generator"])
    bundle.discriminator.load_state_dict(blob["discriminator"])
    bundle.heads.load_state_dict(blob["heads"])
    bundle.g_opt.load_state_dict(blob["g_opt"])
    bundle.d_opt.load_state_dict(blob["d_opt"])
    bundle.ring.load_state_dict(blob["ring"])
    bundle.pl_mean = blob["pl_mean"]
    bundle.rng.setstate(blob["rng"])
    bundle.step = blob["step"]
    bundle.log = blob["log"]
    bundle.last_checkpoint = str(path)
    return bundle
