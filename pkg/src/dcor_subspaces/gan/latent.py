"""Latent codes, generation, encoding and subspace swaps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError, ProtocolError, ShapeError
from ..layout import SubspaceLayout
from .networks import Discriminator, Generator
from .training import GanBundle, to_model_range


@dataclass(frozen=True)
class LatentCode:
    """A batch of latent codes; ``w`` is (n, d) in layout order, ``z`` the matching noise if known."""

    layout: SubspaceLayout
    w: torch.Tensor
    z: torch.Tensor | None = None

    def __post_init__(self):
        if self.w.ndim != 2 or self.w.shape[1] != self.layout.total:
            raise ShapeError(f"expected w of shape (n, {self.layout.total}), got {tuple(self.w.shape)}")
        if self.z is not None and self.z.shape != self.w.shape:
            raise ShapeError("z and w must have the same shape")

    def __len__(self):
        return self.w.shape[0]

    def part(self, name: str) -> torch.Tensor:
        return self.w[:, self.layout.slice(name)]

    def parts(self) -> dict[str, torch.Tensor]:
        return self.layout.as_dict(self.w)

    def equal(self, other: "LatentCode") -> bool:
        return self.layout == other.layout and torch.equal(self.w, other.w)


def sample_latent(generator: Generator, n: int = 1, seed: int = 0) -> LatentCode:
    """Draw z_k ~ N(0, I) per subspace and map each through its mapping network."""
    z = torch.randn(n, generator.layout.total, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        w = generator.map(z)
    return LatentCode(generator.layout, w, z)


def generate(generator: Generator, code: LatentCode | torch.Tensor, noise_seed: int = 0) -> torch.Tensor:
    """Images in [-1, 1]; deterministic given w and ``noise_seed``."""
    w = code.w if isinstance(code, LatentCode) else code
    noise = generator.synthesis.make_noise(w.shape[0] if w.ndim == 2 else 1,
                                           generator=torch.Generator().manual_seed(noise_seed))
    with torch.no_grad():
        return generator.synthesize(w, noise).clamp(-1.0, 1.0)


def generate_batched(generator: Generator, w: torch.Tensor, noise_seed: int = 0, batch_size: int = 256) -> torch.Tensor:
    return torch.cat([generate(generator, w[i:i + batch_size], noise_seed + i)
                      for i in range(0, len(w), batch_size)])


def encode_image(discriminator: Discriminator, layout: SubspaceLayout, images, batch_size: int = 256) -> LatentCode:
    """Latent estimate w_hat for [0, 1] images, sliced by ``layout``."""
    x = to_model_range(images)
    with torch.no_grad():
        w_hat = torch.cat([discriminator(x[i:i + batch_size])[1] for i in range(0, len(x), batch_size)])
    return LatentCode(layout, w_hat)


def swap_subspace(code_a: LatentCode, code_b: LatentCode, name: str) -> LatentCode:
    """``code_a`` with its ``name`` part replaced by ``code_b``'s."""
    if code_a.layout != code_b.layout:
        raise ConfigError("codes must share a layout to be swapped")
    sl = code_a.layout.slice(name)
    if code_a.w.shape != code_b.w.shape:
        raise ShapeError("codes must have the same batch size to be swapped")
    w = code_a.w.clone()
    w[:, sl] = code_b.w[:, sl]
    z = None
    if code_a.z is not None and code_b.z is not None:
        z = code_a.z.clone()
        z[:, sl] = code_b.z[:, sl]
    return LatentCode(code_a.layout, w, z)


def rotate_codes(code: LatentCode, name: str, shift: int = 1) -> LatentCode:
    """Element i receives element (i - shift)'s ``name`` part; the other parts stay."""
    if len(code) < 2:
        raise ProtocolError("rotation needs a batch of at least 2 codes")
    rolled = LatentCode(code.layout, torch.roll(code.w, shift, dims=0),
                        None if code.z is None else torch.roll(code.z, shift, dims=0))
    return swap_subspace(code, rolled, name)


def rotate_labels(labels: dict, factor: str, shift: int = 1) -> dict:
    out = {k: np.asarray(v).copy() for k, v in labels.items()}
    out[factor] = np.roll(out[factor], shift)
    return out


def _require_trained(bundle: GanBundle):
    if not bundle.trained:
        raise ProtocolError("the GAN bundle has not been trained")


def reconstruct(bundle: GanBundle, images, noise_seed: int = 0) -> np.ndarray:
    """g(d1(x)) for [0, 1] images, returned in [0, 1]."""
    code = encode_image(bundle.discriminator, bundle.layout, images)
    return ((generate_batched(bundle.generator, code.w, noise_seed) + 1.0) / 2.0).numpy()


def rotate_swap_protocol(bundle: GanBundle, images, labels: dict, subspace: str, noise_seed: int = 0):
    """Rotate the ``subspace`` part by one within the batch and regenerate.

    Returns (images in [0, 1], reassigned labels, swapped code).  The factor
    whose name matches ``subspace`` follows its subspace; other labels stay.
    """
    if len(images) < 2:
        raise ProtocolError("rotate-swap needs a batch of at least 2 images")
    code = rotate_codes(encode_image(bundle.discriminator, bundle.layout, images), subspace)
    new_labels = rotate_labels(labels, subspace) if subspace in labels else {k: np.asarray(v) for k, v in labels.items()}
    out = (generate_batched(bundle.generator, code.w, noise_seed) + 1.0) / 2.0
    return out.numpy(), new_labels, code


def swap_grid(bundle: GanBundle, images, subspace: str, noise_seed: int = 0):
    """All pairwise swaps of ``subspace`` among n images.

    Cell (i, j) keeps image i and takes the named part from image j, so the
    diagonal holds plain reconstructions.  Returns ((n, n, C, H, W) array in
    [0, 1], manifest rows).
    """
    code = encode_image(bundle.discriminator, bundle.layout, images)
    n = len(code)
    targets = LatentCode(code.layout, code.w.repeat_interleave(n, dim=0))
    donors = LatentCode(code.layout, code.w.repeat(n, 1))
    swapped = swap_subspace(targets, donors, subspace)
    # one noise draw per target row keeps the diagonal equal to the reconstruction
    noise = bundle.generator.synthesis.make_noise(n, generator=torch.Generator().manual_seed(noise_seed))
    noise = [t.repeat_interleave(n, dim=0) for t in noise]
    with torch.no_grad():
        out = bundle.generator.synthesize(swapped.w, noise).clamp(-1.0, 1.0)
    grid = ((out + 1.0) / 2.0).numpy().reshape(n, n, *out.shape[1:])
    manifest = [{"row": i, "column": j, "target": i, "donor": j, "subspace": subspace,
                 "sources": {name: (j if name == subspace else i) for name in code.layout.names}}
                for i in range(n) for j in range(n)]
    return grid, manifest
