"""Scalar training objectives.

Stage 1 minimizes reconstruction error through the dummy decoder plus a
beta-weighted latent divergence (diagonal-Gaussian part against the mixture
components, categorical part against the fixed mixture weights) and an L2
parameter penalty. Stage 2 drops the divergence and fits each routed decoder
on its own sub-batch. All reductions are sums over the batch, not means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, DomainError
from .model import decode_batch, encode_batch
from .tensor import Tensor, resolve_dtype

KL_FORM_STANDARD = "standard"
# Sign-flipped Gaussian term without the additive -1/2 constant; equals
# -(KL + dz/2). Kept selectable for comparisons against that formulation.
KL_FORM_NEGATED = "negated"

KL_MODE_SOFT = "soft"  # weight each component's divergence by y_hat
KL_MODE_HARD = "hard"  # use only the argmax component


@dataclass
class LossConfig:
    beta: float = 0.1
    lambda_y: float = 1.0
    lambda_reg: float = 1e-5
    tau: float = 0.5
    kl_mode: str = KL_MODE_SOFT
    gauss_kl_form: str = KL_FORM_STANDARD

    def __post_init__(self):
        if self.beta < 0 or self.lambda_y < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.kl_mode not in (KL_MODE_SOFT, KL_MODE_HARD):
            raise ConfigError(f"kl_mode must be 'soft' or 'hard', got {self.kl_mode!r}")
        if self.gauss_kl_form not in (KL_FORM_STANDARD, KL_FORM_NEGATED):
            raise ConfigError(f"unknown gauss_kl_form {self.gauss_kl_form!r}")


def _batch_arrays(batch, dtype):
    """Normalize a dataset batch to (noisy, target) arrays of one dtype."""
    if isinstance(batch, tuple) and len(batch) == 2 and not isinstance(batch[0], tuple):
        noisy, target = batch
    else:
        noisy = np.stack([np.asarray(n) for n, _ in batch])
        target = np.stack([np.asarray(t) for _, t in batch])
    noisy = np.asarray(noisy, dtype=dtype)
    target = np.asarray(target, dtype=dtype)
    if noisy.shape != target.shape:
        raise DimensionError(
            f"noisy batch {noisy.shape} and target batch {target.shape} differ"
        )
    if noisy.ndim != 4:
        raise DimensionError(f"expected [N,D,D,C] batches, got rank {noisy.ndim}")
    if noisy.shape[0] == 0:
        raise ContractError("empty batch")
    return noisy, target


def mse_loss(recon, target):
    """Sum of squared differences over a batch (or list) of patches."""
    if isinstance(recon, Tensor) and isinstance(target, Tensor):
        if recon.shape != target.shape:
            raise DimensionError(f"shape mismatch: {recon.shape} vs {target.shape}")
        diff = T.sub(recon, target)
        return T.tensor_sum(T.mul(diff, diff))
    if len(recon) != len(target):
        raise DimensionError(
            f"reconstruction list length {len(recon)} != target length {len(target)}"
        )
    total = None
    for r, t in zip(recon, target):
        r = r if isinstance(r, Tensor) else Tensor(np.asarray(r))
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=r.dtype))
        if r.shape != t.shape:
            raise DimensionError(f"shape mismatch: {r.shape} vs {t.shape}")
        diff = T.sub(r, t)
        term = T.tensor_sum(T.mul(diff, diff))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ContractError("empty batch")
    return total


def _kl_elements(mu_q, sigma_q, mu_p, sigma_p, form):
    """Per-dimension Gaussian divergence terms, summed over the last axis."""
    log_ratio = T.sub(T.log(sigma_p), T.log(sigma_q))
    var_q = T.mul(sigma_q, sigma_q)
    delta = T.sub(mu_q, mu_p)
    quad = T.div(
        T.add(var_q, T.mul(delta, delta)),
        T.mul(T.mul(sigma_p, sigma_p), 2.0),
    )
    if form == KL_FORM_STANDARD:
        per_dim = T.add(T.add(log_ratio, quad), -0.5)
    else:
        per_dim = T.neg(T.add(log_ratio, quad))
    return T.tensor_sum(per_dim, axis=-1)


def _check_positive_scales(*tensors):
    for t in tensors:
        if np.any(t.data <= 0):
            raise DomainError("scale parameters must be strictly positive")


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p, form=KL_FORM_STANDARD):
    """Divergence between diagonal Gaussians N(mu_q, sigma_q^2) and N(mu_p, sigma_p^2).

    The standard form is the non-negative closed-form KL. The negated form
    flips the sign and drops the -1/2 constant.
    """
    _check_positive_scales(sigma_q, sigma_p)
    if mu_q.shape != sigma_q.shape or mu_p.shape != sigma_p.shape or mu_q.shape != mu_p.shape:
        raise DimensionError("all four Gaussian parameter vectors must share a shape")
    return _kl_elements(mu_q, sigma_q, mu_p, sigma_p, form)


def categorical_kl(y_hat, y_prior):
    """KL(y_hat || y_prior) over the last axis, summed over any batch axes."""
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(np.asarray(y_hat))
    prior = np.asarray(
        y_prior.data if isinstance(y_prior, Tensor) else y_prior, dtype=np.float64
    )
    if np.any(prior <= 0):
        raise DomainError("prior mixture weights must be strictly positive")
    if y_hat.shape[-1] != prior.shape[-1]:
        raise DimensionError(
            f"assignment width {y_hat.shape[-1]} != prior width {prior.shape[-1]}"
        )
    prior_t = Tensor(prior.astype(y_hat.dtype))
    # 0 * log(0) resolves to 0 through the clamped logarithm.
    ratio = T.sub(T.log(y_hat), T.log(prior_t))
    return T.tensor_sum(T.mul(y_hat, ratio))


def _kl_matrix(mu_hat, sigma_hat, prior, form):
    """[N,S] Gaussian divergence of each patch posterior to each component."""
    n, dz = mu_hat.shape
    s = prior.component_count
    mu_q = T.reshape(mu_hat, (n, 1, dz))
    sg_q = T.reshape(sigma_hat, (n, 1, dz))
    mu_p = T.reshape(prior.means, (1, s, dz))
    sg_p = T.reshape(prior.scales(), (1, s, dz))
    return _kl_elements(mu_q, sg_q, mu_p, sg_p, form)


def _sum_squares(params):
    total = None
    for p in params.values():
        term = T.tensor_sum(T.mul(p, p))
        total = term if total is None else T.add(total, term)
    return total


def encoder_loss_parts(batch, model, prior, config, rng=None):
    """Stage-1 terms: reconstruction, Gaussian KL, categorical KL, penalty."""
    dtype = resolve_dtype(model.precision)
    noisy, target = _batch_arrays(batch, dtype)
    lat = encode_batch(noisy, model, rng=rng)
    recon = decode_batch(lat.z, model, "dummy")
    mse = mse_loss(recon, Tensor(target))

    kl_mat = _kl_matrix(lat.mu_hat, lat.sigma_hat, prior, config.gauss_kl_form)
    if config.kl_mode == KL_MODE_SOFT:
        gauss = T.tensor_sum(T.mul(lat.y_hat, kl_mat))
    else:
        one_hot = np.zeros(kl_mat.shape, dtype=dtype)
        one_hot[np.arange(len(lat.routes)), lat.routes] = 1.0
        gauss = T.tensor_sum(T.mul(kl_mat, Tensor(one_hot)))
    cat = categorical_kl(lat.y_hat, prior.mix)

    reg_pool = dict(model.encoder_params())
    reg_pool.update(model.dummy_params())
    reg = T.mul(_sum_squares(reg_pool), config.lambda_reg)

    kl_total = T.add(gauss, T.mul(cat, config.lambda_y))
    total = T.add(T.add(mse, T.mul(kl_total, config.beta)), reg)
    return {
        "mse": mse,
        "gauss_kl": gauss,
        "cat_kl": cat,
        "reg": reg,
        "total": total,
    }, lat


def encoder_loss(batch, model, prior, config, rng=None):
    parts, _ = encoder_loss_parts(batch, model, prior, config, rng=rng)
    return parts["total"]


def decoder_routes(routes, num_decoders):
    """Map argmax cluster labels to decoder indices (bypass when k == 1)."""
    routes = np.asarray(routes)
    if num_decoders == 1:
        return np.zeros_like(routes)
    if routes.size and routes.max() >= num_decoders:
        raise ContractError(
            f"route index {int(routes.max())} exceeds decoder count {num_decoders}"
        )
    return routes


def decoder_loss_parts(batch, model, config, rng=None):
    """Stage-2 terms. The latent codes are treated as constants, so no
    gradient reaches the encoder; only decoders that received patches in
    this batch contribute (and take gradients from) the penalty term."""
    dtype = resolve_dtype(model.precision)
    noisy, target = _batch_arrays(batch, dtype)
    lat = encode_batch(noisy, model, rng=rng)
    routes = decoder_routes(lat.routes, model.num_decoders)
    z_const = lat.z.data

    mse_total = None
    reg_total = None
    for d in sorted(set(int(r) for r in routes)):
        idx = np.flatnonzero(routes == d)
        recon = decode_batch(Tensor(z_const[idx]), model, d)
        term = mse_loss(recon, Tensor(target[idx]))
        mse_total = term if mse_total is None else T.add(mse_total, term)
        reg_d = _sum_squares(model.decoder_params(d))
        reg_total = reg_d if reg_total is None else T.add(reg_total, reg_d)
    reg = T.mul(reg_total, config.lambda_reg)
    total = T.add(mse_total, reg)
    return {"mse": mse_total, "reg": reg, "total": total}, routes


def decoder_loss(batch, model, config, rng=None):
    parts, _ = decoder_loss_parts(batch, model, config, rng=rng)
    return parts["total"]


# -- contrastive objective ------------------------------------------------------


def cosine_similarity(a, b):
    """Cosine similarity of two embedding vectors as a graph scalar."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"expected matching vectors, got {a.shape} and {b.shape}")
    if np.linalg.norm(a.data) == 0.0 or np.linalg.norm(b.data) == 0.0:
        raise DomainError("cosine similarity of a zero-norm embedding")
    num = T.tensor_sum(T.mul(a, b))
    den = T.mul(
        T.sqrt(T.tensor_sum(T.mul(a, a))),
        T.sqrt(T.tensor_sum(T.mul(b, b))),
    )
    return T.div(num, den)


def nt_xent_loss(embeddings, tau, pairs=None):
    """Normalized temperature-scaled cross entropy over positive pairs.

    ``embeddings`` holds 2N vectors; consecutive entries (0,1), (2,3), ...
    are the positive pairs unless explicit index pairs are given. Each side
    of a pair is contrasted against every other embedding in the batch.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    m = len(embeddings)
    if m < 2 or m % 2 != 0:
        raise ContractError(f"need an even number (>= 2) of embeddings, got {m}")
    if pairs is None:
        pairs = [(2 * k, 2 * k + 1) for k in range(m // 2)]
    emb = [e if isinstance(e, Tensor) else Tensor(np.asarray(e)) for e in embeddings]

    inv_tau = 1.0 / tau
    scores = {}
    for i in range(m):
        for j in range(i + 1, m):
            s = T.exp(T.mul(cosine_similarity(emb[i], emb[j]), inv_tau))
            scores[(i, j)] = s
            scores[(j, i)] = s

    def log_denom(i):
        total = None
        for k in range(m):
            if k == i:
                continue
            total = scores[(i, k)] if total is None else T.add(total, scores[(i, k)])
        return T.log(total)

    loss = None
    for i, j in pairs:
        for a, b in ((i, j), (j, i)):
            term = T.sub(log_denom(a), T.log(scores[(a, b)]))
            loss = term if loss is None else T.add(loss, term)
    return T.mul(loss, 1.0 / m)
