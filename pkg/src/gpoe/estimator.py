"""Scikit-learn style estimator wrapping crossmodal VAE training.

``CrossmodalVAE.fit`` trains the encoders, decoders and the credibility
network with Adam under the configured fusion mechanism; ``predict`` runs
deterministic unimodal inference (decode the posterior mean of the primary
modality). Training is bit-reproducible from the data and the constructor
arguments when ``random_state`` is an int.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import networks
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NoiseSpec, ToyDataset, apply_noise, corrupt_columns, render_grid
from .exceptions import ContractError, NumericError, TrainingDivergedError
from .gaussians import DEFAULT_VARIANCE_FLOOR
from .metrics import (
    MetricReport,
    StratumMetrics,
    auc,
    default_pck_thresholds,
    f1,
    iou,
    mean_epe,
    pck_curve,
)
from .networks import (
    LossBreakdown,
    ModalityBatch,
    ModalityConfig,
    ModalitySpec,
    Params,
    build_loss_graph,
    check_params_finite,
    infer_unimodal,
    init_params,
    params_as_tensors,
)
from .validation import as_float_array, check_finite

# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptState:
    """Adam accumulators (first/second moments per parameter) plus step count."""

    m: Params
    v: Params
    step: int = 0

    @classmethod
    def init(cls, params: Params) -> "OptState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
        )


def adam_step(
    params: Params,
    grads: Params,
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Params, OptState]:
    """One bias-corrected Adam update; returns new params and state."""
    if state.step < 0:
        raise ContractError("optimizer step count must be >= 0")
    t = state.step + 1
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(
                f"gradient for {name!r} has shape {g.shape}, expected {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"gradient for parameter {name!r} is not finite")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptState(m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------------------
# estimator


class CrossmodalVAE(RegressorMixin, BaseEstimator):
    """Crossmodal VAE regressor with selectable latent-fusion mechanism.

    Parameters
    ----------
    mechanism : {"gpoe", "poe", "moe"}, default="gpoe"
        How unimodal posteriors combine into the joint latent during
        training: credibility-weighted product, plain product, or mixture
        averaging. Inference always decodes the primary posterior mean, so
        the mechanism affects only what the networks learn.
    beta : float, default=0.01
        Weight on the KL terms of the objective.
    latent_dim, hidden_dim, alpha_hidden_dim : int
        Latent width and perceptron hidden widths.
    learning_rate, batch_size, epochs :
        Adam step size and minibatch schedule. The last partial batch is
        kept; losses are averaged per sample.
    train_noise : NoiseSpec or None, default=None
        Corruption applied once to the training inputs before optimization
        (grid-kind modalities get pixel corruption, point-kind modalities
        get Gaussian noise). Targets are never corrupted.
    input_kind, target_kind : {"point", "grid"}
        Output family of the primary input and the target. Grid-kind
        targets decode through a sigmoid and train with cross-entropy;
        point-kind targets are linear with squared error.
    aux_kinds : tuple of str or None
        Kinds of the auxiliary modalities passed to ``fit`` (default: all
        "point").
    alpha_from_features : bool, default=True
        Feed the credibility network with encoder penultimate features
        rather than raw modality values.
    variance_floor : float, default=1e-8
        Lower bound on fused variances.
    random_state : int, default=0
        Seed for initialization, corruption, shuffling and latent noise.

    Attributes
    ----------
    params_ : dict of str to ndarray
        Trained parameter registry.
    config_ : ModalityConfig
        Modality layout inferred from the fitted data.
    history_ : list of LossBreakdown
        Per-epoch loss decomposition.
    """

    def __init__(
        self,
        mechanism: str = "gpoe",
        beta: float = 0.01,
        latent_dim: int = 8,
        hidden_dim: int = 64,
        alpha_hidden_dim: int = 32,
        learning_rate: float = 1e-3,
        batch_size: int = 64,
        epochs: int = 50,
        train_noise: NoiseSpec | None = None,
        input_kind: str = "grid",
        target_kind: str = "point",
        aux_kinds: tuple[str, ...] | None = None,
        alpha_from_features: bool = True,
        variance_floor: float = DEFAULT_VARIANCE_FLOOR,
        random_state: int = 0,
    ):
        self.mechanism = mechanism
        self.beta = beta
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.alpha_hidden_dim = alpha_hidden_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.train_noise = train_noise
        self.input_kind = input_kind
        self.target_kind = target_kind
        self.aux_kinds = aux_kinds
        self.alpha_from_features = alpha_from_features
        self.variance_floor = variance_floor
        self.random_state = random_state

    # -- fitting -------------------------------------------------------

    def _validate_hyperparams(self) -> None:
        if self.mechanism not in networks.MECHANISMS:
            raise ContractError(
                f"mechanism must be one of {networks.MECHANISMS}, "
                f"got {self.mechanism!r}"
            )
        if self.beta < 0:
            raise ContractError(f"beta must be >= 0, got {self.beta}")
        for name in ("latent_dim", "hidden_dim", "alpha_hidden_dim", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")

    def _build_config(
        self, x_dim: int, y_dim: int, aux_dims: list[int], names
    ) -> ModalityConfig:
        input_name, target_name, aux_names = names
        aux_kinds = self.aux_kinds or tuple("point" for _ in aux_dims)
        if len(aux_kinds) != len(aux_dims):
            raise ContractError(
                f"aux_kinds has {len(aux_kinds)} entries for "
                f"{len(aux_dims)} auxiliary modalities"
            )
        return ModalityConfig(
            input=ModalitySpec(input_name, x_dim, self.input_kind),
            target=ModalitySpec(target_name, y_dim, self.target_kind),
            auxiliaries=tuple(
                ModalitySpec(name, dim, kind)
                for name, dim, kind in zip(aux_names, aux_dims, aux_kinds)
            ),
            latent_dim=int(self.latent_dim),
            hidden_dim=int(self.hidden_dim),
            alpha_hidden_dim=int(self.alpha_hidden_dim),
            alpha_from_features=self.alpha_from_features,
        )

    def fit(self, X, y, aux=None, modality_names=None):
        """Train on aligned modalities.

        ``X`` is the primary input (n, d_x), ``y`` the target (n, d_y),
        ``aux`` an optional array or sequence of arrays for auxiliary
        modalities. ``modality_names`` optionally renames them as
        ``(input_name, target_name, (aux_name, ...))``.
        """
        self._validate_hyperparams()
        X = check_finite(as_float_array(X, "X", ndim=2), "X")
        y = check_finite(as_float_array(y, "y", ndim=2), "y")
        if aux is None:
            aux_arrays: list[np.ndarray] = []
        elif isinstance(aux, (list, tuple)):
            aux_arrays = [
                check_finite(as_float_array(a, f"aux[{i}]", ndim=2), f"aux[{i}]")
                for i, a in enumerate(aux)
            ]
        else:
            aux_arrays = [check_finite(as_float_array(aux, "aux", ndim=2), "aux")]
        n = X.shape[0]
        for name, arr in [("y", y)] + [(f"aux[{i}]", a) for i, a in enumerate(aux_arrays)]:
            if arr.shape[0] != n:
                raise ContractError(
                    f"{name} has {arr.shape[0]} rows but X has {n}"
                )
        if n == 0:
            raise ContractError("training data must be non-empty")

        if modality_names is None:
            modality_names = (
                "x",
                "y",
                tuple(f"m{i + 1}" for i in range(len(aux_arrays))),
            )
        config = self._build_config(
            X.shape[1], y.shape[1], [a.shape[1] for a in aux_arrays], modality_names
        )
        rng = np.random.default_rng(self.random_state)
        params = init_params(config, rng)

        values = {config.input.name: X, config.target.name: y}
        for spec, arr in zip(config.auxiliaries, aux_arrays):
            values[spec.name] = arr
        if self.train_noise is not None and not self.train_noise.is_noop:
            encoded = {s.name: values[s.name] for s in config.encoded}
            kinds = {s.name: s.kind for s in config.encoded}
            corrupted, _ = corrupt_columns(encoded, kinds, self.train_noise, rng)
            values.update(corrupted)

        params, history = self._optimize(values, params, config, rng)
        self.params_ = params
        self.config_ = config
        self.history_ = history
        self.n_features_in_ = X.shape[1]
        return self

    def _optimize(self, values, params, config, rng):
        n = next(iter(values.values())).shape[0]
        batch_size = int(self.batch_size)
        state = OptState.init(params)
        history: list[LossBreakdown] = []
        for epoch in range(int(self.epochs)):
            order = rng.permutation(n)
            sums = {"target_recon": 0.0, "aux_recon": 0.0, "kl": 0.0, "total": 0.0}
            for step, start in enumerate(range(0, n, batch_size)):
                idx = order[start : start + batch_size]
                batch = ModalityBatch(
                    {name: arr[idx] for name, arr in values.items()}
                )
                tensors = params_as_tensors(params)
                graph = build_loss_graph(
                    batch,
                    tensors,
                    config,
                    beta=self.beta,
                    mechanism=self.mechanism,
                    rng=rng,
                    variance_floor=self.variance_floor,
                )
                try:
                    breakdown = graph.breakdown()
                except NumericError as exc:
                    raise TrainingDivergedError(str(exc), epoch, step) from exc
                graph.total.backward()
                grads = {name: tensors[name].grad for name in params}
                try:
                    params, state = adam_step(
                        params, grads, state, lr=self.learning_rate
                    )
                except NumericError as exc:
                    raise TrainingDivergedError(str(exc), epoch, step) from exc
                weight = len(idx) / n
                for key in sums:
                    sums[key] += weight * getattr(breakdown, key)
            history.append(LossBreakdown(beta=self.beta, **sums))
        check_params_finite(params)
        return params, history

    # -- inference -----------------------------------------------------

    def predict(self, X) -> np.ndarray:
        """Deterministic target prediction from the primary modality alone."""
        check_is_fitted(self)
        X = as_float_array(X, "X", ndim=2)
        if X.shape[1] != self.config_.input.dim:
            raise ContractError(
                f"X has {X.shape[1]} features, model expects "
                f"{self.config_.input.dim}"
            )
        return infer_unimodal(X, self.params_, self.config_)

    def evaluate(
        self,
        dataset: ToyDataset,
        noise: NoiseSpec | None = None,
        noise_seed: int = 0,
    ) -> MetricReport:
        check_is_fitted(self)
        return evaluate_params(
            self.params_,
            self.config_,
            dataset,
            noise=noise,
            noise_seed=noise_seed,
            mechanism=self.mechanism,
            beta=self.beta,
        )

    # -- persistence ---------------------------------------------------

    def save(self, path) -> None:
        """Write a ``GPV1`` checkpoint with the hyperparameters as metadata."""
        check_is_fitted(self)
        noise = self.train_noise or NoiseSpec()
        meta = {
            "mechanism": self.mechanism,
            "beta": repr(float(self.beta)),
            "learning_rate": repr(float(self.learning_rate)),
            "batch_size": int(self.batch_size),
            "epochs": int(self.epochs),
            "random_state": int(self.random_state),
            "variance_floor": repr(float(self.variance_floor)),
            "train_data_fraction": repr(noise.data_fraction),
            "train_pixel_fraction": repr(noise.pixel_fraction),
            "train_gaussian_sigma": repr(noise.gaussian_sigma),
        }
        save_checkpoint(path, self.params_, self.config_, meta)

    @classmethod
    def load(cls, path) -> "CrossmodalVAE":
        """Rebuild a fitted estimator from a ``GPV1`` checkpoint."""
        params, config, meta = load_checkpoint(path)
        noise = NoiseSpec(
            data_fraction=float(meta.get("train_data_fraction", "0")),
            pixel_fraction=float(meta.get("train_pixel_fraction", "0")),
            gaussian_sigma=float(meta.get("train_gaussian_sigma", "0")),
        )
        model = cls(
            mechanism=meta.get("mechanism", "gpoe"),
            beta=float(meta.get("beta", "0.01")),
            latent_dim=config.latent_dim,
            hidden_dim=config.hidden_dim,
            alpha_hidden_dim=config.alpha_hidden_dim,
            learning_rate=float(meta.get("learning_rate", "0.001")),
            batch_size=int(meta.get("batch_size", "64")),
            epochs=int(meta.get("epochs", "50")),
            train_noise=None if noise.is_noop else noise,
            input_kind=config.input.kind,
            target_kind=config.target.kind,
            aux_kinds=tuple(a.kind for a in config.auxiliaries) or None,
            alpha_from_features=config.alpha_from_features,
            variance_floor=float(meta.get("variance_floor", repr(DEFAULT_VARIANCE_FLOOR))),
            random_state=int(meta.get("random_state", "0")),
        )
        model.params_ = params
        model.config_ = config
        model.history_ = []
        model.n_features_in_ = config.input.dim
        return model


# ---------------------------------------------------------------------------
# evaluation harness


def _mask_counts(
    pred_xy: np.ndarray, gt_xy: np.ndarray, grid_size: int
) -> tuple[int, int, int]:
    """Aggregate binarized-mask overlap counts over a batch of scenes.

    Predicted keypoints are clipped into the unit square before rendering;
    both renderings binarize at 0.5.
    """
    inter = p_total = t_total = 0
    for pred, gt in zip(pred_xy, gt_xy):
        pred_mask = render_grid(np.clip(pred, 0.0, 1.0), grid_size) >= 0.5
        gt_mask = render_grid(gt, grid_size) >= 0.5
        inter += int(np.count_nonzero(pred_mask & gt_mask))
        p_total += int(np.count_nonzero(pred_mask))
        t_total += int(np.count_nonzero(gt_mask))
    return inter, p_total, t_total


def _stratum(pred_xy, gt_xy, grid_size, thresholds) -> StratumMetrics:
    curve = pck_curve(pred_xy, gt_xy, thresholds)
    inter, p_total, t_total = _mask_counts(pred_xy, gt_xy, grid_size)
    union = p_total + t_total - inter
    return StratumMetrics(
        count=pred_xy.shape[0],
        mean_epe=mean_epe(pred_xy, gt_xy),
        auc=auc(curve),
        iou=1.0 if union == 0 else inter / union,
        f1=1.0 if p_total + t_total == 0 else 2.0 * inter / (p_total + t_total),
    )


def evaluate_params(
    params: Params,
    config: ModalityConfig,
    dataset: ToyDataset,
    noise: NoiseSpec | None = None,
    noise_seed: int = 0,
    mechanism: str | None = None,
    beta: float | None = None,
    pck_thresholds: np.ndarray | None = None,
) -> MetricReport:
    """Apply test noise, run unimodal inference, and compute all metrics.

    Metrics are reported overall and stratified into clean/corrupted
    samples. Mask metrics compare the rendering of the (clipped) predicted
    keypoints against the rendering of the true keypoints, both binarized
    at 0.5 and aggregated over the stratum. When ``mechanism`` and ``beta``
    are given, the loss decomposition over the (noised) set is included.
    """
    if len(dataset) == 0:
        raise ContractError("evaluation dataset must be non-empty")
    if noise is not None:
        dataset = apply_noise(dataset, noise, np.random.default_rng(noise_seed))
    thresholds = (
        default_pck_thresholds() if pck_thresholds is None else pck_thresholds
    )

    pred = infer_unimodal(dataset.grids, params, config)
    pred_xy = pred.reshape(len(dataset), dataset.n_keypoints, 2)
    gt_xy = dataset.keypoints_xy

    overall = _stratum(pred_xy, gt_xy, dataset.grid_size, thresholds)
    strata: dict[str, StratumMetrics] = {}
    for name, mask in (
        ("clean", ~dataset.corrupted),
        ("corrupted", dataset.corrupted),
    ):
        if np.any(mask):
            strata[name] = _stratum(
                pred_xy[mask], gt_xy[mask], dataset.grid_size, thresholds
            )

    loss = None
    if mechanism is not None and beta is not None:
        batch = ModalityBatch(
            {
                config.input.name: dataset.grids,
                config.target.name: dataset.keypoints,
                **{a.name: dataset.points for a in config.auxiliaries[:1]},
            },
            corrupted=dataset.corrupted,
        )
        graph = build_loss_graph(
            batch,
            params,
            config,
            beta=beta,
            mechanism=mechanism,
            rng=np.random.default_rng([noise_seed, 1]),
        )
        loss = graph.breakdown().to_dict()

    return MetricReport(
        mean_epe=overall.mean_epe,
        auc=overall.auc,
        iou=overall.iou,
        f1=overall.f1,
        pck=pck_curve(pred_xy, gt_xy, thresholds),
        count=len(dataset),
        strata=strata,
        loss=loss,
    )
