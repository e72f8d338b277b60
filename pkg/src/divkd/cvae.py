"""Latent diversity prior: Gaussian posterior/prior heads, sampling, KL, variational loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model
from .autodiff import ParamStore, Tensor

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


@dataclass
class GaussianParams:
    """Diagonal Gaussian(s); one row per problem."""
    mu: Tensor
    log_var: Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


@dataclass
class LatentSample:
    z: Tensor
    h_z: Tensor
    eps: np.ndarray


def init_cvae_params(cfg: model.ModelConfig, seed: int, store: ParamStore, zero: bool = False) -> ParamStore:
    """Add cvae.* parameters from their own random stream.

    ``zero=True`` gives an all-zero CVAE: posterior and prior both equal
    N(0, I) and the latent projection contributes nothing to the root.
    """
    rng = np.random.default_rng([seed, 2])
    H, E, L, d = cfg.hidden_dim, cfg.embed_dim, cfg.latent_dim, cfg.hidden_dim // 2
    V = cfg.n_fixed + cfg.max_quantities

    def init(name, shape, fan_in, normal=False):
        if zero:
            value = np.zeros(shape)
        elif normal:
            value = rng.normal(0.0, 1.0, size=shape)
        else:
            k = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-k, k, size=shape)
        store.add(name, value)

    init("cvae.posterior.embedding", (V, E), E, normal=True)
    for direction in ("fwd", "bwd"):
        p = f"cvae.posterior.{direction}"
        init(p + ".W_ih", (E, 3 * d), d)
        init(p + ".W_hh", (d, 3 * d), d)
        init(p + ".b_ih", (1, 3 * d), d)
        init(p + ".b_hh", (1, 3 * d), d)
    for head in ("mu", "log_var"):
        init(f"cvae.posterior.{head}.W", (2 * H, L), 2 * H)
        init(f"cvae.posterior.{head}.b", (1, L), 2 * H)
        init(f"cvae.prior.{head}.W", (H, L), H)
        init(f"cvae.prior.{head}.b", (1, L), H)
    init("cvae.proj.W", (L, H), L)
    init("cvae.proj.b", (1, H), L)
    return store


def _heads(x: Tensor, params: ParamStore, prefix: str) -> GaussianParams:
    mu = ad.linear(x, params[prefix + ".mu.W"], params[prefix + ".mu.b"])
    lv = ad.linear(x, params[prefix + ".log_var.W"], params[prefix + ".log_var.b"])
    return GaussianParams(mu, ad.clip(lv, LOG_VAR_MIN, LOG_VAR_MAX))


def encode_equations(params: ParamStore, cfg: model.ModelConfig, targets: Sequence) -> Tensor:
    """Final BiGRU state (B, H) over the embedded target equations."""
    ids = [[cfg.token_id(t) for t in eq] for eq in targets]
    B = len(ids)
    lengths = np.array([len(x) for x in ids])
    n = int(lengths.max())
    flat = np.zeros(n * B, dtype=np.int64)
    for b, row in enumerate(ids):
        for t, i in enumerate(row):
            flat[t * B + b] = i
    X = ad.gather_rows(params["cvae.posterior.embedding"], flat)
    _, _, hf, hb = model.bigru(params, "cvae.posterior", X, lengths, n)
    return ad.concat_cols([hf, hb])


def posterior_batch(params, cfg, enc: model.EncoderOutput, targets: Sequence) -> GaussianParams:
    h_y = encode_equations(params, cfg, targets)
    return _heads(ad.concat_cols([enc.root, h_y]), params, "cvae.posterior")


def prior_batch(params, enc: model.EncoderOutput) -> GaussianParams:
    return _heads(enc.root, params, "cvae.prior")


def posterior(enc: model.EncoderOutput, target, params: ParamStore, cfg: model.ModelConfig) -> GaussianParams:
    return posterior_batch(params, cfg, enc, [tuple(target)])


def prior(enc: model.EncoderOutput, params: ParamStore) -> GaussianParams:
    return prior_batch(params, enc)


def project(z: Tensor, params: ParamStore) -> Tensor:
    return ad.linear(z, params["cvae.proj.W"], params["cvae.proj.b"])


def sample(g: GaussianParams, rng, params: ParamStore, eps: np.ndarray | None = None) -> LatentSample:
    """Reparameterised draw z = mu + exp(log_var / 2) * eps, projected to hidden size."""
    if eps is None:
        eps = rng.standard_normal(g.mu.shape)
    eps = np.asarray(eps, dtype=np.float64).reshape(g.mu.shape)
    z = g.mu + ad.exp(g.log_var * 0.5) * eps
    return LatentSample(z, project(z, params), eps)


def mean_latent(g: GaussianParams, params: ParamStore) -> LatentSample:
    return LatentSample(g.mu, project(g.mu, params), np.zeros(g.mu.shape))


def kl_rows(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) per row, shape (B, 1)."""
    if q.mu.shape != p.mu.shape:
        raise ad.ShapeError(f"kl_divergence: shapes {q.mu.shape} and {p.mu.shape}")
    diff = q.mu - p.mu
    inv_p = ad.exp(-p.log_var)
    terms = (p.log_var - q.log_var) * 0.5 + (ad.exp(q.log_var) + diff * diff) * inv_p * 0.5 - 0.5
    return ad.sum(terms, axis=1)


def kl_divergence(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Summed KL over all rows (a 1x1 tensor)."""
    return ad.sum(kl_rows(q, p))


@dataclass
class CvaeTerms:
    loss: Tensor          # kl_weight * mean KL + mean NLL
    nll: Tensor           # mean NLL (1x1)
    kl: Tensor            # mean KL (1x1)
    q: GaussianParams
    p: GaussianParams
    latent: LatentSample
    decode: model.TeacherForced


def cvae_batch_loss(params: ParamStore, cfg: model.ModelConfig, enc: model.EncoderOutput,
                    ctx: model.DecoderContext, targets: Sequence, rng, kl_weight: float,
                    eps: np.ndarray | None = None) -> CvaeTerms:
    """Negative variational bound, averaged over the batch.

    One posterior sample per problem; the decoder root is shifted by the
    projected sample.
    """
    q = posterior_batch(params, cfg, enc, targets)
    p = prior_batch(params, enc)
    lat = sample(q, rng, params, eps)
    tf = model.teacher_forced(params, cfg, ctx, targets, lat.h_z)
    nll = ad.mean(tf.nll)
    kl = ad.mean(kl_rows(q, p))
    loss = nll + kl * float(kl_weight)
    return CvaeTerms(loss, nll, kl, q, p, lat, tf)


def cvae_loss(enc: model.EncoderOutput, target, params: ParamStore, rng, kl_weight: float,
              cfg: model.ModelConfig, eps=None):
    """Single-problem loss: (loss, q, p)."""
    ctx = model.decoder_context(params, cfg, enc)
    terms = cvae_batch_loss(params, cfg, enc, ctx, [tuple(target)], rng, kl_weight, eps)
    return terms.loss, terms.q, terms.p
