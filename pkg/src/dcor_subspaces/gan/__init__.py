"""Miniature style-based GAN with per-subspace latents and discriminator-side inversion."""

from .latent import (LatentCode, encode_image, generate, generate_batched, reconstruct, rotate_codes,
                     rotate_labels, rotate_swap_protocol, sample_latent, swap_grid, swap_subspace)
from .losses import (RingBuffer, adversarial_losses, latent_loss, path_length_penalty, pixel_feature_loss,
                     r1_penalty, subspace_supervision)
from .networks import Discriminator, Generator, MappingNetwork, SynthesisNetwork
from .training import (GanBundle, GanTrainConfig, build_gan, inversion_fraction, load_gan, save_gan,
                       to_model_range, to_unit_range, train_gan, train_step)

__all__ = [
    "Discriminator", "GanBundle", "GanTrainConfig", "Generator", "LatentCode", "MappingNetwork", "RingBuffer",
    "SynthesisNetwork", "adversarial_losses", "build_gan", "encode_image", "generate", "generate_batched",
    "inversion_fraction", "latent_loss", "load_gan", "path_length_penalty", "pixel_feature_loss", "r1_penalty",
    "reconstruct", "rotate_codes", "rotate_labels", "rotate_swap_protocol", "sample_latent", "save_gan",
    "subspace_supervision", "swap_grid", "swap_subspace", "to_model_range", "to_unit_range", "train_gan",
    "train_step",
]
