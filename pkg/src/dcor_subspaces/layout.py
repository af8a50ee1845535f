"""Partitioning of a latent vector into named subspaces."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ConfigError


@dataclass(frozen=True)
class SubspaceLayout:
    """Names and widths of the K subspaces of a latent vector.

    ``classes`` maps the name of each supervised subspace to its number of
    classes; subspaces missing from it (e.g. a free identity subspace) get
    no classification head.
    """

    names: tuple[str, ...]
    dims: tuple[int, ...]
    classes: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "classes", {k: int(v) for k, v in dict(self.classes).items()})
        if not self.names:
            raise ConfigError("layout needs at least one subspace")
        if len(self.names) != len(self.dims):
            raise ConfigError("names and dims must have the same length")
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"duplicate subspace names in {self.names}")
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"subspace dims must be positive, got {self.dims}")
        unknown = set(self.classes) - set(self.names)
        if unknown:
            raise ConfigError(f"classes given for unknown subspaces {sorted(unknown)}")
        if any(c < 2 for c in self.classes.values()):
            raise ConfigError("supervised subspaces need at least 2 classes")

    @property
    def total(self) -> int:
        return sum(self.dims)

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def supervised(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n in self.classes)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown subspace {name!r}; layout has {self.names}") from None

    def slice(self, name: str) -> slice:
        i = self.index(name)
        start = sum(self.dims[:i])
        return slice(start, start + self.dims[i])

    def split(self, w) -> list:
        """Views of ``w[..., slice_k]`` for every subspace, in layout order."""
        if w.shape[-1] != self.total:
            raise ConfigError(f"latent width {w.shape[-1]} does not match layout total {self.total}")
        return [w[..., self.slice(n)] for n in self.names]

    def as_dict(self, w) -> dict:
        return dict(zip(self.names, self.split(w)))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "dims": list(self.dims), "classes": dict(self.classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "SubspaceLayout":
        return cls(tuple(d["names"]), tuple(d["dims"]), dict(d.get("classes", {})))


def concat(parts) -> torch.Tensor:
    return torch.cat(list(parts), dim=-1)
