"""Diagonal Gaussian experts and latent-fusion mechanisms.

Each modality encoder produces a diagonal Gaussian over the latent space
(an "expert"). This module fuses experts into a joint Gaussian three ways:

* product fusion (PoE): the joint precision is the sum of expert
  precisions, T = sum_i T_i, and the joint mean is the precision-weighted
  mean, mu = (sum_i mu_i T_i) / T;
* weighted product fusion (gPoE): each expert's precision is scaled by a
  per-expert, per-dimension credibility weight alpha before summing,
  var = (sum_i alpha_i T_i)^-1 and mu = (sum_i mu_i alpha_i T_i) * var;
* mixture fusion (MoE): a component is picked uniformly and sampled.

All fusion arithmetic runs on autodiff tensors, so gradients flow through
means, variances and weights. Variances are carried internally as
log-variances, which keeps them positive under gradient updates. The
normalization constant of the product densities is never materialized:
training only needs the fused moments.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .exceptions import ContractError, DomainError, NumericError

#: Lower bound applied to fused variances, guarding precision-space overflow.
#: Pass ``variance_floor=None`` to the fusion functions to disable.
DEFAULT_VARIANCE_FLOOR = 1e-8


class DiagonalGaussian:
    """Independent Gaussian over latent coordinates.

    Parameterized by mean and log-variance tensors of identical shape; the
    last axis indexes latent dimensions, leading axes (if any) index batch
    rows. Constructing from a raw variance validates positivity.
    """

    __slots__ = ("mean", "log_var")

    def __init__(self, mean, log_var):
        self.mean = as_tensor(mean)
        self.log_var = as_tensor(log_var)
        if self.mean.shape != self.log_var.shape:
            raise ContractError(
                f"mean and log-variance shapes differ: "
                f"{self.mean.shape} vs {self.log_var.shape}"
            )

    @classmethod
    def from_variance(cls, mean, variance) -> "DiagonalGaussian":
        variance = as_tensor(variance)
        v = variance.value
        if not np.all(np.isfinite(v)):
            raise DomainError("variance contains non-finite values")
        if np.any(v <= 0.0):
            raise DomainError(f"variance must be strictly positive, min was {v.min()}")
        return cls(mean, ad.log(variance))

    @classmethod
    def standard(cls, dim: int) -> "DiagonalGaussian":
        """The unit prior: zero mean, unit variance."""
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def variance(self) -> Tensor:
        return ad.exp(self.log_var)

    @property
    def precision(self) -> Tensor:
        return ad.exp(ad.negative(self.log_var))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def dim(self) -> int:
        return self.mean.shape[-1] if self.mean.ndim else 1

    def __repr__(self) -> str:
        return f"DiagonalGaussian(shape={self.mean.shape})"


class FusionWeights:
    """Per-expert, per-latent-dimension credibility weights.

    ``alphas`` carries the expert axis first; entries lie in [0, 1] and sum
    to one across experts for every latent dimension (within 1e-6).
    """

    __slots__ = ("alphas",)

    def __init__(self, alphas):
        t = as_tensor(alphas)
        v = t.value
        if v.ndim < 1:
            raise ContractError("fusion weights need at least an expert axis")
        if not np.all(np.isfinite(v)):
            raise NumericError("fusion weights contain non-finite values")
        if v.min() < -1e-9 or v.max() > 1.0 + 1e-9:
            raise ContractError(
                f"fusion weights must lie in [0, 1], range was [{v.min()}, {v.max()}]"
            )
        column_sums = v.sum(axis=0)
        worst = float(np.max(np.abs(column_sums - 1.0)))
        if worst > 1e-6:
            raise ContractError(
                f"fusion weights must sum to 1 across experts per latent "
                f"dimension; worst deviation was {worst:.3e}"
            )
        self.alphas = t

    @classmethod
    def uniform(cls, n_experts: int, dim: int = 1) -> "FusionWeights":
        return cls(np.full((n_experts, dim), 1.0 / n_experts))

    @property
    def n_experts(self) -> int:
        return self.alphas.shape[0]

    def __repr__(self) -> str:
        return f"FusionWeights(shape={self.alphas.shape})"


def _check_experts(experts: Sequence[DiagonalGaussian], op: str) -> None:
    if len(experts) == 0:
        raise ContractError(f"{op} requires at least one expert")
    shape = experts[0].shape
    for e in experts[1:]:
        if e.shape != shape:
            raise ContractError(
                f"{op}: experts disagree in shape: {shape} vs {e.shape}"
            )


def _floored_variance(precision_sum: Tensor, variance_floor: float | None) -> Tensor:
    var = ad.reciprocal(precision_sum)
    if variance_floor is not None and variance_floor > 0:
        var = ad.maximum(var, variance_floor)
    return var


def poe_fuse(
    experts: Sequence[DiagonalGaussian],
    variance_floor: float | None = DEFAULT_VARIANCE_FLOOR,
) -> DiagonalGaussian:
    """Fuse experts by multiplying their densities (all weights equal to 1).

    Per dimension the fused precision is the sum of expert precisions and
    the fused mean is the precision-weighted average of expert means.
    """
    _check_experts(experts, "poe_fuse")
    precisions = ad.stack([e.precision for e in experts], axis=0)
    means = ad.stack([e.mean for e in experts], axis=0)
    total_precision = precisions.sum(axis=0)
    mean = (means * precisions).sum(axis=0) * ad.reciprocal(total_precision)
    var = _floored_variance(total_precision, variance_floor)
    return DiagonalGaussian(mean, ad.log(var))


def gpoe_fuse(
    experts: Sequence[DiagonalGaussian],
    weights: FusionWeights,
    variance_floor: float | None = DEFAULT_VARIANCE_FLOOR,
) -> DiagonalGaussian:
    """Fuse experts by a weighted product, scaling down overconfident ones.

    Each expert's precision enters the sum scaled by its credibility weight:
    var = (sum_i alpha_i T_i)^-1, mu = (sum_i mu_i alpha_i T_i) * var. With
    weights summing to 1 per dimension, the fused variance is a generalized
    harmonic interpolation bounded by the expert variances.
    """
    _check_experts(experts, "gpoe_fuse")
    if weights.n_experts != len(experts):
        raise ContractError(
            f"gpoe_fuse: {len(experts)} experts but weights for "
            f"{weights.n_experts}"
        )
    target_shape = (len(experts),) + experts[0].shape
    alpha_shape = weights.alphas.shape
    if len(alpha_shape) != len(target_shape):
        raise ContractError(
            f"gpoe_fuse: weights rank {len(alpha_shape)} does not match "
            f"stacked expert rank {len(target_shape)}"
        )
    try:
        if np.broadcast_shapes(alpha_shape, target_shape) != target_shape:
            raise ValueError
    except ValueError:
        raise ContractError(
            f"gpoe_fuse: weights shape {alpha_shape} is not broadcastable "
            f"to stacked expert shape {target_shape}"
        ) from None

    precisions = ad.stack([e.precision for e in experts], axis=0)
    means = ad.stack([e.mean for e in experts], axis=0)
    weighted = weights.alphas * precisions
    total_precision = weighted.sum(axis=0)
    mean = (means * weighted).sum(axis=0) * ad.reciprocal(total_precision)
    var = _floored_variance(total_precision, variance_floor)
    return DiagonalGaussian(mean, ad.log(var))


def moe_component_sample(
    experts: Sequence[DiagonalGaussian], rng: np.random.Generator
) -> tuple[Tensor, int]:
    """Sample the mixture fusion: pick a component uniformly, then sample it.

    Components get equal weight (the mixture-of-experts convention that
    avoids a dominant modality). Returns the reparameterized sample and the
    chosen component index; with one expert the index is always 0.
    """
    _check_experts(experts, "moe_component_sample")
    index = int(rng.integers(len(experts)))
    eps = rng.standard_normal(experts[index].shape)
    return sample_reparam(experts[index], eps), index


def kl_std_normal(g: DiagonalGaussian) -> Tensor:
    """KL divergence from ``g`` to the unit Gaussian prior, in closed form.

    Reduces over the latent axis: sum_d 0.5 * (mu_d^2 + var_d - 1 - log var_d).
    Batched inputs reduce to one value per row.
    """
    if not np.all(np.isfinite(g.log_var.value)):
        raise DomainError("log-variance contains non-finite values")
    term = ad.square(g.mean) + g.variance - 1.0 - g.log_var
    return (0.5 * term).sum(axis=-1)


def sample_reparam(g: DiagonalGaussian, noise) -> Tensor:
    """Reparameterized sample z = mu + sqrt(var) * eps, differentiable in g."""
    noise = as_tensor(noise)
    if noise.shape != g.shape:
        raise ContractError(
            f"noise shape {noise.shape} does not match Gaussian shape {g.shape}"
        )
    sigma = ad.exp(0.5 * g.log_var)
    return g.mean + sigma * noise


def log_density(g: DiagonalGaussian, z) -> Tensor:
    """Log density of ``z`` under ``g``, reduced over the latent axis."""
    z = as_tensor(z)
    if z.shape != g.shape:
        raise ContractError(
            f"point shape {z.shape} does not match Gaussian shape {g.shape}"
        )
    centered = z - g.mean
    quad = ad.square(centered) * g.precision
    per_dim = -0.5 * (quad + g.log_var + math.log(2.0 * math.pi))
    return per_dim.sum(axis=-1)


def density_curve(g: DiagonalGaussian, points) -> np.ndarray:
    """Normalized pdf of a 1-d Gaussian evaluated at each point."""
    if g.mean.value.size != 1:
        raise ContractError(
            f"density_curve requires a 1-dimensional Gaussian, got shape {g.shape}"
        )
    mu = float(g.mean.value.reshape(()))
    var = float(np.exp(g.log_var.value.reshape(())))
    x = np.asarray(points, dtype=np.float64)
    return np.exp(-0.5 * (x - mu) ** 2 / var) / math.sqrt(2.0 * math.pi * var)
