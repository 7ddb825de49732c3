"""Plain-numpy re-evaluation of the training objectives, used as a test oracle.

Recomputes every loss step outside the gradient engine: encoder/decoder
forward passes, fusion moments, reparameterized samples from frozen noise,
reconstruction terms, and KL terms.
"""

import numpy as np

JOINT = "joint"


def _encode(values, name, params):
    h = np.maximum(
        values @ params[f"encoder.{name}.hidden.w"]
        + params[f"encoder.{name}.hidden.b"],
        0.0,
    )
    mu = h @ params[f"encoder.{name}.mean.w"] + params[f"encoder.{name}.mean.b"]
    lv = h @ params[f"encoder.{name}.log_var.w"] + params[f"encoder.{name}.log_var.b"]
    return mu, lv, h


def _decode_logits(z, name, params):
    h = np.maximum(
        z @ params[f"decoder.{name}.hidden.w"] + params[f"decoder.{name}.hidden.b"],
        0.0,
    )
    return h @ params[f"decoder.{name}.out.w"] + params[f"decoder.{name}.out.b"]


def _recon(logits, target, kind):
    if kind == "grid":
        per = (
            np.maximum(logits, 0.0)
            - logits * target
            + np.log1p(np.exp(-np.abs(logits)))
        )
    else:
        per = (logits - target) ** 2
    return per.sum() / target.shape[0]


def _kl(mu, lv):
    return (0.5 * (mu**2 + np.exp(lv) - 1.0 - lv)).sum() / mu.shape[0]


def _alpha(features, params, n_experts, latent_dim):
    joined = np.concatenate(features, axis=1)
    h = np.maximum(joined @ params["alpha.hidden.w"] + params["alpha.hidden.b"], 0.0)
    logits = h @ params["alpha.out.w"] + params["alpha.out.b"]
    cube = logits.reshape(logits.shape[0], n_experts, latent_dim)
    stacked = np.moveaxis(cube, 1, 0)
    shifted = stacked - stacked.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def product_fusion_loss(batch_values, params, config, beta, mechanism, noise):
    """Reference value of the product-fusion objective (poe or gpoe)."""
    encoded = [s.name for s in config.encoded]
    mus, lvs, features = {}, {}, {}
    for name in encoded:
        mus[name], lvs[name], features[name] = _encode(
            batch_values[name], name, params
        )

    precisions = np.stack([np.exp(-lvs[n]) for n in encoded])
    means = np.stack([mus[n] for n in encoded])
    if mechanism == "gpoe":
        alphas = _alpha(
            [features[n] for n in encoded],
            params,
            len(encoded),
            config.latent_dim,
        )
        precisions = alphas * precisions
    total_prec = precisions.sum(axis=0)
    joint_mu = (means * precisions).sum(axis=0) / total_prec
    joint_var = np.maximum(1.0 / total_prec, 1e-8)

    latents = {JOINT: joint_mu + np.sqrt(joint_var) * noise[JOINT]}
    for name in encoded:
        latents[name] = mus[name] + np.exp(0.5 * lvs[name]) * noise[name]

    target = config.target
    target_recon = sum(
        _recon(_decode_logits(z, target.name, params), batch_values[target.name], target.kind)
        for z in latents.values()
    )
    aux_recon = 0.0
    for aux in config.auxiliaries:
        aux_recon += sum(
            _recon(_decode_logits(z, aux.name, params), batch_values[aux.name], aux.kind)
            for z in latents.values()
        )
    kl = sum(_kl(mus[n], lvs[n]) for n in encoded)
    return {
        "target_recon": target_recon,
        "aux_recon": aux_recon,
        "kl": kl,
        "total": target_recon + aux_recon + beta * kl,
    }


def mixture_loss(batch_values, params, config, beta, noise):
    """Reference value of the mixture objective."""
    encoded = [s.name for s in config.encoded]
    m = len(encoded)
    target_recon = aux_recon = kl = 0.0
    for name in encoded:
        mu, lv, _ = _encode(batch_values[name], name, params)
        z = mu + np.exp(0.5 * lv) * noise[name]
        target_recon += _recon(
            _decode_logits(z, config.target.name, params),
            batch_values[config.target.name],
            config.target.kind,
        )
        for aux in config.auxiliaries:
            aux_recon += _recon(
                _decode_logits(z, aux.name, params), batch_values[aux.name], aux.kind
            )
        kl += _kl(mu, lv)
    target_recon /= m
    aux_recon /= m
    kl /= m
    return {
        "target_recon": target_recon,
        "aux_recon": aux_recon,
        "kl": kl,
        "total": target_recon + aux_recon + beta * kl,
    }
