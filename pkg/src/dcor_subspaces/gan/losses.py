"""Adversarial, regularization, inversion and subspace losses."""

from __future__ import annotations

from collections import deque

import torch
import torch.nn.functional as F

from .. import dependence
from ..errors import ConfigError
from ..layout import SubspaceLayout


def adversarial_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    """Non-saturating GAN losses on raw logits: (generator loss, discriminator loss)."""
    if real_logits.shape != fake_logits.shape:
        raise ConfigError("real and fake batches must have the same size")
    d_loss = F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()
    g_loss = F.softplus(-fake_logits).mean()
    return g_loss, d_loss


def discriminator_adversarial_loss(real_logits, fake_logits):
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def generator_adversarial_loss(fake_logits):
    return F.softplus(-fake_logits).mean()


def r1_penalty(real_images: torch.Tensor, real_logits: torch.Tensor) -> torch.Tensor:
    """Half the mean squared gradient norm of the real logits w.r.t. the real images."""
    (grad,) = torch.autograd.grad(real_logits.sum(), real_images, create_graph=True)
    return 0.5 * grad.pow(2).flatten(1).sum(1).mean()


def path_length_penalty(images: torch.Tensor, ws: torch.Tensor, pl_mean: torch.Tensor, decay: float = 0.01):
    """Deviation of the Jacobian-vector norm from its running mean.

    Returns (penalty, updated running mean).  ``ws`` must be the per-layer
    style tensor that produced ``images``.
    """
    h, w = images.shape[-2:]
    y = torch.randn_like(images) / (h * w) ** 0.5
    (grad,) = torch.autograd.grad((images * y).sum(), ws, create_graph=True)
    lengths = grad.pow(2).sum(2).mean(1).sqrt()
    new_mean = pl_mean + decay * (lengths.detach().mean() - pl_mean)
    return (lengths - new_mean).pow(2).mean(), new_mean.detach()


def latent_loss(w: torch.Tensor, w_hat: torch.Tensor) -> torch.Tensor:
    """L_w: per-element mean squared error between sampled w and its estimate."""
    return F.mse_loss(w_hat, w)


def pixel_feature_loss(p_real: torch.Tensor, p_reconstructed: torch.Tensor) -> torch.Tensor:
    """L_p: per-element mean squared error between pixel features of x and g(d1(x))."""
    return F.mse_loss(p_reconstructed, p_real)


class RingBuffer:
    """Past (detached) latent batches that enlarge the dCor sample.

    With ``batches`` slots, ``batches - 1`` past entries are kept; the current
    batch fills the last slot and is the only one that carries gradients.
    """

    def __init__(self, batches: int = 5):
        if batches < 1:
            raise ConfigError("ring buffer needs at least one slot")
        self.batches = batches
        self.past: deque = deque(maxlen=batches - 1)

    def __len__(self):
        return len(self.past)

    def augmented(self, current: torch.Tensor) -> torch.Tensor:
        if not self.past:
            return current
        stored = [p.to(current.dtype) for p in self.past]
        return torch.cat(stored + [current], dim=0)

    def push(self, batch: torch.Tensor) -> None:
        if self.batches > 1:
            self.past.append(batch.detach().clone())

    def state_dict(self) -> dict:
        return {"batches": self.batches, "past": list(self.past)}

    def load_state_dict(self, state: dict) -> None:
        self.batches = state["batches"]
        self.past = deque(state["past"], maxlen=self.batches - 1)


def subspace_supervision(w_hat: torch.Tensor, heads, labels: dict, layout: SubspaceLayout, ring: RingBuffer,
                         lambda_c: float, lambda_dc: float):
    """lambda_C * L_CE + lambda_DC * L_DC on encoded real images.

    ``w_hat`` is the latent head's output for the real batch.  The heads see
    only the cross-entropy term; the dCor term acts on ``w_hat`` alone.
    The current batch is pushed to ``ring`` afterwards, whatever the weights.
    Returns (loss, {"ce", "dc", "n_dcor"}).
    """
    parts = layout.as_dict(w_hat)
    if lambda_c > 0 and layout.supervised:
        ce_terms = []
        for name in layout.supervised:
            y = torch.as_tensor(labels[name], dtype=torch.long, device=w_hat.device)
            ce_terms.append(F.cross_entropy(heads[name](parts[name]), y))
        ce = torch.stack(ce_terms).mean()
    else:
        ce = w_hat.new_zeros(())
    n_dcor = len(w_hat) + sum(len(p) for p in ring.past)
    if lambda_dc > 0 and layout.k >= 2:
        dc = dependence.disentanglement_loss(layout.split(ring.augmented(w_hat))).to(w_hat.dtype)
    else:
        dc = w_hat.new_zeros(())
    ring.push(w_hat)
    loss = lambda_c * ce + lambda_dc * dc
    return loss, {"ce": ce.item(), "dc": dc.item(), "n_dcor": n_dcor}
