"""Crossmodal VAE networks and training objectives.

One perceptron encoder per observed modality emits a diagonal Gaussian
posterior over a shared latent space; one perceptron decoder per generated
modality maps latents back to data. A separate feed-forward network reads
the encoders' penultimate features and emits softmax-normalized credibility
weights (one per expert and latent dimension) used by weighted product
fusion.

The training objective sums three groups, all written as minimized losses:

* target reconstruction from the fused joint latent, from the primary
  input's latent, and from each auxiliary's latent;
* auxiliary reconstruction of every auxiliary modality from each of those
  same latents (self-reconstruction included);
* KL of every unimodal posterior against the unit prior, scaled by beta.

Point-valued modalities use squared-error reconstruction (unit-scale
Gaussian likelihood); grid/mask-valued modalities use binary cross-entropy
through a sigmoid output. The mixture objective averages per-modality
terms instead of fusing, reusing the same encoders and decoders so that
only the fusion mechanism differs between runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .exceptions import ContractError, NumericError
from .gaussians import (
    DEFAULT_VARIANCE_FLOOR,
    DiagonalGaussian,
    FusionWeights,
    gpoe_fuse,
    kl_std_normal,
    poe_fuse,
    sample_reparam,
)

MODALITY_KINDS = ("point", "grid")
MECHANISMS = ("poe", "gpoe", "moe")

JOINT_LATENT = "joint"


@dataclass(frozen=True)
class ModalitySpec:
    """Name, flat dimension and output family of one modality."""

    name: str
    dim: int
    kind: str = "point"

    def __post_init__(self):
        if self.dim < 1:
            raise ContractError(f"modality {self.name}: dim must be >= 1")
        if self.kind not in MODALITY_KINDS:
            raise ContractError(
                f"modality {self.name}: kind must be one of {MODALITY_KINDS}, "
                f"got {self.kind!r}"
            )


@dataclass(frozen=True)
class ModalityConfig:
    """Modality layout plus network widths for one model.

    The primary input is encoded but never decoded; the target is decoded
    but never encoded; auxiliaries are both. The experts fused into the
    joint posterior are the input plus the auxiliaries, in that order.
    """

    input: ModalitySpec
    target: ModalitySpec
    auxiliaries: tuple[ModalitySpec, ...] = ()
    latent_dim: int = 8
    hidden_dim: int = 64
    alpha_hidden_dim: int = 32
    alpha_from_features: bool = True

    def __post_init__(self):
        object.__setattr__(self, "auxiliaries", tuple(self.auxiliaries))
        if self.latent_dim < 1:
            raise ContractError("latent_dim must be >= 1")
        if self.hidden_dim < 1 or self.alpha_hidden_dim < 1:
            raise ContractError("hidden widths must be >= 1")
        names = [self.input.name, self.target.name] + [
            a.name for a in self.auxiliaries
        ]
        if len(set(names)) != len(names):
            raise ContractError(f"modality names must be unique, got {names}")

    @property
    def encoded(self) -> tuple[ModalitySpec, ...]:
        return (self.input,) + self.auxiliaries

    @property
    def decoded(self) -> tuple[ModalitySpec, ...]:
        return (self.target,) + self.auxiliaries

    @property
    def n_experts(self) -> int:
        return 1 + len(self.auxiliaries)

    def spec(self, name: str) -> ModalitySpec:
        for s in (self.input, self.target) + self.auxiliaries:
            if s.name == name:
                return s
        raise ContractError(f"unknown modality {name!r}")


@dataclass
class ModalityBatch:
    """Aligned minibatch: modality name -> (batch, dim) array, plus flags."""

    values: dict[str, np.ndarray]
    corrupted: np.ndarray | None = None

    def __len__(self) -> int:
        return next(iter(self.values.values())).shape[0]

    def require(self, names) -> None:
        missing = [n for n in names if n not in self.values]
        if missing:
            raise ContractError(f"batch is missing modalities {missing}")


# ---------------------------------------------------------------------------
# parameters

Params = dict[str, np.ndarray]


def init_params(config: ModalityConfig, rng: np.random.Generator) -> Params:
    """Initialize all network parameters.

    Weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases start at
    zero, and the encoder log-variance heads start at exactly zero so every
    posterior begins near the unit prior.
    """
    params: Params = {}

    def dense(prefix: str, fan_in: int, fan_out: int, zero: bool = False):
        if zero:
            params[f"{prefix}.w"] = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{prefix}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.b"] = np.zeros(fan_out)

    h, latent = config.hidden_dim, config.latent_dim
    for spec in config.encoded:
        dense(f"encoder.{spec.name}.hidden", spec.dim, h)
        dense(f"encoder.{spec.name}.mean", h, latent)
        dense(f"encoder.{spec.name}.log_var", h, latent, zero=True)
    for spec in config.decoded:
        dense(f"decoder.{spec.name}.hidden", latent, h)
        dense(f"decoder.{spec.name}.out", h, spec.dim)
    alpha_in = (
        config.n_experts * h
        if config.alpha_from_features
        else sum(s.dim for s in config.encoded)
    )
    dense("alpha.hidden", alpha_in, config.alpha_hidden_dim)
    dense("alpha.out", config.alpha_hidden_dim, config.n_experts * latent)
    return params


def params_as_tensors(params: Params) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}


def flatten_params(params: Params) -> np.ndarray:
    """Concatenate all parameter arrays into one vector (insertion order)."""
    if not params:
        return np.zeros(0)
    return np.concatenate([arr.ravel() for arr in params.values()])


def unflatten_params(vector: np.ndarray, like: Params) -> Params:
    """Inverse of ``flatten_params`` against a reference parameter layout."""
    vector = np.asarray(vector, dtype=np.float64)
    total = sum(arr.size for arr in like.values())
    if vector.shape != (total,):
        raise ContractError(
            f"flat vector has shape {vector.shape}, expected ({total},)"
        )
    out: Params = {}
    offset = 0
    for name, arr in like.items():
        out[name] = vector[offset : offset + arr.size].reshape(arr.shape).copy()
        offset += arr.size
    return out


def check_params_finite(params: Params) -> None:
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {name!r} contains non-finite values")


def _dense(x: Tensor, tensors: Mapping[str, Tensor], prefix: str) -> Tensor:
    return ad.matmul(x, tensors[f"{prefix}.w"]) + tensors[f"{prefix}.b"]


# ---------------------------------------------------------------------------
# network forward passes


def _check_batch_2d(values, spec: ModalitySpec) -> Tensor:
    t = as_tensor(values)
    if t.ndim != 2 or t.shape[1] != spec.dim:
        raise ContractError(
            f"modality {spec.name!r} expects a (batch, {spec.dim}) array, "
            f"got shape {t.shape}"
        )
    return t


def encode(
    values, name: str, params: Params | Mapping[str, Tensor], config: ModalityConfig
) -> tuple[DiagonalGaussian, Tensor]:
    """Run one modality encoder; returns the posterior and its hidden features."""
    spec = config.spec(name)
    if spec not in config.encoded:
        raise ContractError(f"modality {name!r} has no encoder")
    tensors = params if _is_tensor_map(params) else params_as_tensors(params)
    x = _check_batch_2d(values, spec)
    hidden = ad.relu(_dense(x, tensors, f"encoder.{name}.hidden"))
    mean = _dense(hidden, tensors, f"encoder.{name}.mean")
    log_var = _dense(hidden, tensors, f"encoder.{name}.log_var")
    return DiagonalGaussian(mean, log_var), hidden


def decode(
    z,
    name: str,
    params: Params | Mapping[str, Tensor],
    config: ModalityConfig,
    logits: bool = False,
) -> Tensor:
    """Run one modality decoder on latent rows.

    Point modalities use an identity output; grid modalities pass through a
    sigmoid so values land strictly inside (0, 1). ``logits=True`` skips the
    sigmoid (used by the cross-entropy loss, which is computed in logit
    space for stability).
    """
    spec = config.spec(name)
    if spec not in config.decoded:
        raise ContractError(f"modality {name!r} has no decoder")
    tensors = params if _is_tensor_map(params) else params_as_tensors(params)
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != config.latent_dim:
        raise ContractError(
            f"latent rows must have shape (batch, {config.latent_dim}), "
            f"got {z.shape}"
        )
    hidden = ad.relu(_dense(z, tensors, f"decoder.{name}.hidden"))
    out = _dense(hidden, tensors, f"decoder.{name}.out")
    if spec.kind == "grid" and not logits:
        out = ad.sigmoid(out)
    return out


def _is_tensor_map(params) -> bool:
    return bool(params) and isinstance(next(iter(params.values())), Tensor)


def _alpha_from_inputs(
    features: list[Tensor], tensors: Mapping[str, Tensor], config: ModalityConfig
) -> FusionWeights:
    batch = features[0].shape[0]
    joined = ad.concat(features, axis=1)
    hidden = ad.relu(_dense(joined, tensors, "alpha.hidden"))
    logits = _dense(hidden, tensors, "alpha.out")
    cube = ad.reshape(logits, (batch, config.n_experts, config.latent_dim))
    stacked = ad.moveaxis(cube, 1, 0)  # (experts, batch, latent)
    return FusionWeights(ad.softmax(stacked, axis=0))


def alpha_weights(
    values: Mapping[str, np.ndarray],
    params: Params | Mapping[str, Tensor],
    config: ModalityConfig,
) -> FusionWeights:
    """Estimate per-expert credibility weights from all encoded modalities.

    Encoder penultimate features (or raw inputs, per config) are
    concatenated and passed through feed-forward layers; a softmax across
    the expert axis normalizes each latent dimension's weights to 1.
    Requires every encoded modality to be present.
    """
    names = [s.name for s in config.encoded]
    missing = [n for n in names if n not in values]
    if missing:
        raise ContractError(f"alpha_weights is missing modalities {missing}")
    tensors = params if _is_tensor_map(params) else params_as_tensors(params)
    if config.alpha_from_features:
        features = [encode(values[n], n, tensors, config)[1] for n in names]
    else:
        features = [
            _check_batch_2d(values[n], config.spec(n)) for n in names
        ]
    return _alpha_from_inputs(features, tensors, config)


def infer_unimodal(
    x_values, params: Params, config: ModalityConfig
) -> np.ndarray:
    """Predict the target from the primary modality alone.

    Decodes the posterior mean of the input encoder (no sampling), so the
    prediction is deterministic.
    """
    check_params_finite(params)
    tensors = params_as_tensors(params)
    posterior, _ = encode(x_values, config.input.name, tensors, config)
    return decode(posterior.mean, config.target.name, tensors, config).value


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss terms for one batch: total = target + aux + beta * kl."""

    target_recon: float
    aux_recon: float
    kl: float
    total: float
    beta: float

    def to_dict(self) -> dict:
        return {
            "target_recon": self.target_recon,
            "aux_recon": self.aux_recon,
            "kl": self.kl,
            "total": self.total,
            "beta": self.beta,
        }


@dataclass(frozen=True)
class LossGraph:
    """Tensor-valued loss terms, kept alive for backpropagation."""

    target_recon: Tensor
    aux_recon: Tensor
    kl: Tensor
    total: Tensor
    beta: float

    def breakdown(self) -> LossBreakdown:
        values = {
            "target_recon": self.target_recon.item(),
            "aux_recon": self.aux_recon.item(),
            "kl": self.kl.item(),
            "total": self.total.item(),
        }
        for name, v in values.items():
            if not np.isfinite(v):
                raise NumericError(f"loss term {name!r} is not finite")
        return LossBreakdown(beta=self.beta, **values)


def draw_latent_noise(
    config: ModalityConfig,
    batch_size: int,
    rng: np.random.Generator,
    mechanism: str = "gpoe",
) -> dict[str, np.ndarray]:
    """Draw one standard-normal noise slab per latent used by the objective."""
    names = [s.name for s in config.encoded]
    if mechanism != "moe":
        names = [JOINT_LATENT] + names
    return {
        name: rng.standard_normal((batch_size, config.latent_dim)) for name in names
    }


def _recon_loss(pred_raw: Tensor, target_values: np.ndarray, kind: str) -> Tensor:
    """Per-batch-mean reconstruction loss, summed over feature dimensions."""
    target = as_tensor(target_values)
    n = target.shape[0]
    if kind == "grid":
        per_elem = ad.binary_cross_entropy_with_logits(pred_raw, target)
    else:
        per_elem = ad.square(pred_raw - target)
    return per_elem.sum() / float(n)


def _validated_losses(
    batch: ModalityBatch, config: ModalityConfig, beta: float
) -> None:
    if beta < 0:
        raise ContractError(f"beta must be >= 0, got {beta}")
    batch.require([s.name for s in config.encoded] + [config.target.name])


def fuse_joint_posterior(
    posteriors: dict[str, DiagonalGaussian],
    alpha_inputs: dict[str, Tensor],
    tensors: Mapping[str, Tensor],
    config: ModalityConfig,
    mechanism: str,
    variance_floor: float | None,
) -> DiagonalGaussian:
    """Fuse the per-modality posteriors into the joint posterior.

    ``alpha_inputs`` feeds the credibility network (encoder features or raw
    modality values, per the config); unused for plain product fusion.
    """
    experts = [posteriors[s.name] for s in config.encoded]
    if mechanism == "poe":
        return poe_fuse(experts, variance_floor=variance_floor)
    weights = _alpha_from_inputs(
        [alpha_inputs[s.name] for s in config.encoded], tensors, config
    )
    return gpoe_fuse(experts, weights, variance_floor=variance_floor)


def loss_graph(
    batch: ModalityBatch,
    params: Params | Mapping[str, Tensor],
    config: ModalityConfig,
    beta: float,
    mechanism: str = "gpoe",
    rng: np.random.Generator | None = None,
    noise: Mapping[str, np.ndarray] | None = None,
    variance_floor: float | None = DEFAULT_VARIANCE_FLOOR,
) -> LossGraph:
    """Build the differentiable product-fusion objective for one batch.

    The joint latent comes from the selected fusion of all unimodal
    posteriors; one reparameterized sample is drawn per latent (joint, the
    input's, and each auxiliary's). The target is reconstructed from every
    latent, every auxiliary from every latent, and each unimodal posterior
    pays a KL to the prior. Pass ``noise`` to freeze the reparameterization
    draws (gradient checking); otherwise they come from ``rng``.
    """
    if mechanism not in ("poe", "gpoe"):
        raise ContractError(f"mechanism must be 'poe' or 'gpoe', got {mechanism!r}")
    _validated_losses(batch, config, beta)
    if noise is None:
        if rng is None:
            raise ContractError("either rng or frozen noise is required")
        noise = draw_latent_noise(config, len(batch), rng, mechanism)

    tensors = params if _is_tensor_map(params) else params_as_tensors(params)
    posteriors: dict[str, DiagonalGaussian] = {}
    alpha_inputs: dict[str, Tensor] = {}
    for spec in config.encoded:
        posteriors[spec.name], features = encode(
            batch.values[spec.name], spec.name, tensors, config
        )
        if config.alpha_from_features:
            alpha_inputs[spec.name] = features
        else:
            alpha_inputs[spec.name] = _check_batch_2d(batch.values[spec.name], spec)

    joint = fuse_joint_posterior(
        posteriors, alpha_inputs, tensors, config, mechanism, variance_floor
    )
    latents = {JOINT_LATENT: sample_reparam(joint, noise[JOINT_LATENT])}
    for spec in config.encoded:
        latents[spec.name] = sample_reparam(posteriors[spec.name], noise[spec.name])

    target = config.target
    target_terms = [
        _recon_loss(
            decode(z, target.name, tensors, config, logits=True),
            batch.values[target.name],
            target.kind,
        )
        for z in latents.values()
    ]
    target_recon = _tensor_sum(target_terms)

    aux_terms = []
    for aux in config.auxiliaries:
        for z in latents.values():
            aux_terms.append(
                _recon_loss(
                    decode(z, aux.name, tensors, config, logits=True),
                    batch.values[aux.name],
                    aux.kind,
                )
            )
    aux_recon = _tensor_sum(aux_terms)

    kl_terms = [
        kl_std_normal(posteriors[s.name]).sum() / float(len(batch))
        for s in config.encoded
    ]
    kl = _tensor_sum(kl_terms)

    total = target_recon + aux_recon + beta * kl
    return LossGraph(target_recon, aux_recon, kl, total, float(beta))


def moe_graph(
    batch: ModalityBatch,
    params: Params | Mapping[str, Tensor],
    config: ModalityConfig,
    beta: float = 1.0,
    rng: np.random.Generator | None = None,
    noise: Mapping[str, np.ndarray] | None = None,
) -> LossGraph:
    """Build the mixture objective: average per-modality terms, no fusion.

    For each encoded modality, one reparameterized sample of its posterior
    reconstructs every decodable modality and pays a KL to the prior; the
    terms are averaged over modalities. With a single encoded modality this
    reduces to the plain crossmodal objective.
    """
    _validated_losses(batch, config, beta)
    if noise is None:
        if rng is None:
            raise ContractError("either rng or frozen noise is required")
        noise = draw_latent_noise(config, len(batch), rng, mechanism="moe")

    tensors = params if _is_tensor_map(params) else params_as_tensors(params)
    m = float(config.n_experts)
    target_terms, aux_terms, kl_terms = [], [], []
    for spec in config.encoded:
        posterior, _ = encode(batch.values[spec.name], spec.name, tensors, config)
        z = sample_reparam(posterior, noise[spec.name])
        target_terms.append(
            _recon_loss(
                decode(z, config.target.name, tensors, config, logits=True),
                batch.values[config.target.name],
                config.target.kind,
            )
        )
        for aux in config.auxiliaries:
            aux_terms.append(
                _recon_loss(
                    decode(z, aux.name, tensors, config, logits=True),
                    batch.values[aux.name],
                    aux.kind,
                )
            )
        kl_terms.append(kl_std_normal(posterior).sum() / float(len(batch)))

    target_recon = _tensor_sum(target_terms) / m
    aux_recon = _tensor_sum(aux_terms) / m
    kl = _tensor_sum(kl_terms) / m
    total = target_recon + aux_recon + beta * kl
    return LossGraph(target_recon, aux_recon, kl, total, float(beta))


def build_loss_graph(
    batch: ModalityBatch,
    params,
    config: ModalityConfig,
    beta: float,
    mechanism: str,
    rng: np.random.Generator | None = None,
    noise: Mapping[str, np.ndarray] | None = None,
    variance_floor: float | None = DEFAULT_VARIANCE_FLOOR,
) -> LossGraph:
    """Dispatch on the fusion mechanism."""
    if mechanism not in MECHANISMS:
        raise ContractError(f"mechanism must be one of {MECHANISMS}, got {mechanism!r}")
    if mechanism == "moe":
        return moe_graph(batch, params, config, beta=beta, rng=rng, noise=noise)
    return loss_graph(
        batch,
        params,
        config,
        beta,
        mechanism=mechanism,
        rng=rng,
        noise=noise,
        variance_floor=variance_floor,
    )


def loss_total(
    batch: ModalityBatch,
    params: Params,
    config: ModalityConfig,
    beta: float,
    mechanism: str = "gpoe",
    rng: np.random.Generator | None = None,
    noise: Mapping[str, np.ndarray] | None = None,
    variance_floor: float | None = DEFAULT_VARIANCE_FLOOR,
) -> LossBreakdown:
    """Scalar loss terms of the product-fusion objective for one batch."""
    return loss_graph(
        batch, params, config, beta, mechanism, rng, noise, variance_floor
    ).breakdown()


def moe_elbo(
    batch: ModalityBatch,
    params: Params,
    config: ModalityConfig,
    rng: np.random.Generator | None = None,
    beta: float = 1.0,
    noise: Mapping[str, np.ndarray] | None = None,
) -> LossBreakdown:
    """Scalar loss terms of the mixture objective for one batch."""
    return moe_graph(batch, params, config, beta=beta, rng=rng, noise=noise).breakdown()


def _tensor_sum(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc
