"""Differentiable dependence measures between batches of latent vectors.

Everything here runs in float64 regardless of the dtype of the inputs; the
double-centering step cancels large terms and single precision loses several
digits on batches of a few hundred rows.  Inputs may be numpy arrays or torch
tensors.  Tensors keep their autograd graph, so the tensor-returning helpers
(:func:`dcor`, :func:`disentanglement_loss`, ...) can be used directly as
training losses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import (
    ConfigError,
    DegenerateDependenceError,
    InvalidBatchError,
    ShapeError,
    SingularCovarianceError,
)

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class DependenceValue:
    value: float
    degenerate: bool = False

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class CenteredDistanceMatrix:
    entries: np.ndarray
    source_dim: int


@dataclass(frozen=True)
class DependenceGradient:
    value: float
    grad_w1: np.ndarray
    grad_w2: np.ndarray
    degenerate: bool = False


def as_batch(values) -> torch.Tensor:
    """Convert ``values`` to a float64 ``(n, d)`` tensor and validate it."""
    if isinstance(values, torch.Tensor):
        x = values.to(torch.float64)
    else:
        x = torch.as_tensor(np.asarray(values, dtype=np.float64))
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {tuple(x.shape)}")
    if x.shape[0] < 2:
        raise InvalidBatchError(f"need at least 2 samples, got {x.shape[0]}")
    if not torch.isfinite(x.detach()).all():
        raise InvalidBatchError("batch contains non-finite entries")
    return x


def _check_pair(w1, w2):
    x, y = as_batch(w1), as_batch(w2)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    return x, y


def _safe_sqrt(v: torch.Tensor) -> torch.Tensor:
    # sqrt with a zero (sub)gradient wherever v <= 0
    pos = v > 0
    root = torch.sqrt(torch.where(pos, v, torch.ones_like(v)))
    return torch.where(pos, root, torch.zeros_like(v))


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    # direct differences, not the Gram expansion: keeps full float64 accuracy;
    # the backward pass of cdist returns zero for coincident rows
    return torch.cdist(x, x, compute_mode="donot_use_mm_for_euclid_dist")


def double_center(d: torch.Tensor) -> torch.Tensor:
    return d - d.mean(dim=1, keepdim=True) - d.mean(dim=0, keepdim=True) + d.mean()


def _centered(x: torch.Tensor) -> torch.Tensor:
    return double_center(pairwise_distances(x))


def centered_distance_matrix(batch) -> CenteredDistanceMatrix:
    """Double-centered Euclidean distance matrix of a batch.

    >>> centered_distance_matrix([[0.0], [2.0]]).entries
    array([[-1.,  1.],
           [ 1., -1.]])
    """
    x = as_batch(batch)
    with torch.no_grad():
        a = _centered(x)
    return CenteredDistanceMatrix(a.numpy(), int(x.shape[1]))


def _dcov_from_centered(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _safe_sqrt((a * b).mean())


def dcov(w1, w2) -> torch.Tensor:
    """Differentiable distance covariance (V-statistic), as a 0-d tensor."""
    x, y = _check_pair(w1, w2)
    return _dcov_from_centered(_centered(x), _centered(y))


def _distance_gradient(x, dist, weights):
    # d/dx_i of sum_ij weights_ij * ||x_i - x_j|| for symmetric weights
    ratio = torch.where(dist > 0, weights / torch.where(dist > 0, dist, torch.ones_like(dist)),
                        torch.zeros_like(dist))
    return 2.0 * (x * ratio.sum(dim=1, keepdim=True) - ratio @ x)


class _DistanceCorrelation(torch.autograd.Function):
    """Distance correlation with a closed-form backward pass.

    With c = mean(A*B), s_a = mean(A*A), s_b = mean(B*B) the value is
    c^(1/2) (s_a s_b)^(-1/4).  Because B is already double centered,
    d c / d a_ij = B_ij / n^2, which gives an O(n^2 d) gradient without
    differentiating through the centering.
    """

    @staticmethod
    def forward(ctx, x, y, flags=None):
        n = x.shape[0]
        a, b = pairwise_distances(x), pairwise_distances(y)
        big_a, big_b = double_center(a), double_center(b)
        cross = (big_a * big_b).sum() / (n * n)
        s_a = (big_a * big_a).sum() / (n * n)
        s_b = (big_b * big_b).sum() / (n * n)
        degenerate = bool(s_a.sqrt() < DEGENERATE_TOL or s_b.sqrt() < DEGENERATE_TOL)
        if degenerate or cross <= 0:
            value = torch.zeros((), dtype=x.dtype)
        else:
            value = (cross.sqrt() / (s_a * s_b).pow(0.25)).clamp(max=1.0)
        ctx.degenerate = degenerate
        if flags is not None:
            flags.append(degenerate)
        ctx.save_for_backward(x, y, a, b, big_a, big_b, cross, s_a, s_b, value)
        return value

    @staticmethod
    def backward(ctx, grad_out):
        x, y, a, b, big_a, big_b, cross, s_a, s_b, value = ctx.saved_tensors
        if ctx.degenerate or cross <= 0:
            return torch.zeros_like(x), torch.zeros_like(y), None
        n2 = x.shape[0] ** 2
        scale = grad_out * value / (2.0 * n2)
        grad_x = grad_y = None
        if ctx.needs_input_grad[0]:
            grad_x = _distance_gradient(x, a, scale * (big_b / cross - big_a / s_a))
        if ctx.needs_input_grad[1]:
            grad_y = _distance_gradient(y, b, scale * (big_a / cross - big_b / s_b))
        return grad_x, grad_y, None


def dcor_with_flag(w1, w2) -> tuple[torch.Tensor, bool]:
    x, y = _check_pair(w1, w2)
    flags: list[bool] = []
    value = _DistanceCorrelation.apply(x, y, flags)
    return value, flags[0]


def dcor(w1, w2) -> torch.Tensor:
    """Differentiable distance correlation; 0 for a constant batch."""
    x, y = _check_pair(w1, w2)
    return _DistanceCorrelation.apply(x, y)


def distance_covariance(w1, w2) -> DependenceValue:
    x, y = _check_pair(w1, w2)
    with torch.no_grad():
        a, b = _centered(x), _centered(y)
        value = _dcov_from_centered(a, b).item()
        degenerate = (_dcov_from_centered(a, a).item() < DEGENERATE_TOL
                      or _dcov_from_centered(b, b).item() < DEGENERATE_TOL)
    return DependenceValue(0.0 if degenerate else value, degenerate)


def distance_correlation(w1, w2) -> DependenceValue:
    with torch.no_grad():
        value, degenerate = dcor_with_flag(w1, w2)
    return DependenceValue(float(value), degenerate)


def disentanglement_loss(subspaces: Sequence) -> torch.Tensor:
    """Mean distance correlation over all unordered pairs of subspaces."""
    if len(subspaces) < 2:
        raise ConfigError(f"need at least 2 subspaces, got {len(subspaces)}")
    batches = [as_batch(s) for s in subspaces]
    n = batches[0].shape[0]
    if any(b.shape[0] != n for b in batches):
        raise ShapeError("all subspaces must share the sample count")
    terms = [_DistanceCorrelation.apply(batches[i], batches[j])
             for i, j in itertools.combinations(range(len(batches)), 2)]
    return torch.stack(terms).mean()


def pairwise_dcor_matrix(subspaces: Sequence) -> np.ndarray:
    """Symmetric K x K matrix of distance correlations, unit diagonal."""
    k = len(subspaces)
    out = np.eye(k)
    for i, j in itertools.combinations(range(k), 2):
        out[i, j] = out[j, i] = distance_correlation(subspaces[i], subspaces[j]).value
    return out


def _joint_covariance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    joint = torch.cat([x, y], dim=1)
    centered = joint - joint.mean(dim=0, keepdim=True)
    return centered.T @ centered / (joint.shape[0] - 1)


def gmi(w1, w2) -> torch.Tensor:
    """Differentiable Gaussian mutual information in nats."""
    x, y = _check_pair(w1, w2)
    d1, d2 = x.shape[1], y.shape[1]
    if x.shape[0] <= d1 + d2:
        raise InvalidBatchError(f"need n > d1 + d2 = {d1 + d2} samples, got {x.shape[0]}")
    cov = _joint_covariance(x, y)
    with torch.no_grad():
        std = torch.sqrt(torch.diagonal(cov))
        if (std <= 0).any():
            raise SingularCovarianceError("a feature has zero variance")
        corr = cov / (std[:, None] * std[None, :])
        min_eig = torch.linalg.eigvalsh(corr)[0].item()
    if min_eig < 1e-10:
        raise SingularCovarianceError(
            f"joint covariance is singular (smallest correlation eigenvalue {min_eig:.3g})")
    logdet_x = torch.linalg.slogdet(cov[:d1, :d1])[1]
    logdet_y = torch.linalg.slogdet(cov[d1:, d1:])[1]
    logdet_joint = torch.linalg.slogdet(cov)[1]
    return (0.5 * (logdet_x + logdet_y - logdet_joint)).clamp(min=0.0)


def cgmi(w1, w2) -> torch.Tensor:
    """Differentiable collapsed Gaussian MI of the per-sample feature sums.

    Raises DegenerateDependenceError when either sum has zero variance or
    the two sums are perfectly collinear (the estimate would be infinite).
    """
    x, y = _check_pair(w1, w2)
    if x.shape[0] < 3:
        raise InvalidBatchError(f"need at least 3 samples, got {x.shape[0]}")
    cov = _joint_covariance(x.sum(dim=1, keepdim=True), y.sum(dim=1, keepdim=True))
    var_x, var_y, cross = cov[0, 0], cov[1, 1], cov[0, 1]
    if var_x.item() <= DEGENERATE_TOL or var_y.item() <= DEGENERATE_TOL:
        raise DegenerateDependenceError("collapsed variable has zero variance")
    product = var_x * var_y
    if 1.0 - (cross * cross / product).item() < DEGENERATE_TOL:
        raise DegenerateDependenceError("collapsed variables are perfectly collinear")
    return (0.5 * torch.log(product / (product - cross * cross))).clamp(min=0.0)


def gaussian_mi(w1, w2) -> float:
    with torch.no_grad():
        return float(gmi(w1, w2))


def collapsed_gaussian_mi(w1, w2) -> float:
    with torch.no_grad():
        return float(cgmi(w1, w2))


MEASURES: dict[str, Callable[..., torch.Tensor]] = {"dcor": dcor, "gmi": gmi, "cgmi": cgmi}


def get_measure(measure) -> Callable[..., torch.Tensor]:
    if callable(measure):
        return measure
    try:
        return MEASURES[measure]
    except KeyError:
        raise ConfigError(f"unknown measure {measure!r}; choose from {sorted(MEASURES)}") from None


def dependence_gradient(measure, w1, w2) -> DependenceGradient:
    """Gradient of a dependence measure with respect to both batches.

    Coincident sample pairs contribute a zero subgradient.  A degenerate
    distance correlation yields zero gradients with ``degenerate=True``.
    """
    x = as_batch(w1).detach().clone().requires_grad_(True)
    y = as_batch(w2).detach().clone().requires_grad_(True)
    if measure == "dcor" or measure is dcor:
        value, degenerate = dcor_with_flag(x, y)
        if degenerate:
            return DependenceGradient(0.0, np.zeros(tuple(x.shape)), np.zeros(tuple(y.shape)), True)
    else:
        value, degenerate = get_measure(measure)(x, y), False
    gx, gy = torch.autograd.grad(value, (x, y), allow_unused=True)
    gx = torch.zeros_like(x) if gx is None else gx
    gy = torch.zeros_like(y) if gy is None else gy
    return DependenceGradient(float(value.detach()), gx.numpy(), gy.numpy(), degenerate)
