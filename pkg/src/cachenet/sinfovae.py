"""Stacked InfoVAE: x <-> z (high-dimensional) and z <-> zbar (2-D).

The second stage is trained on samples of ``z`` with the gradient stopped,
so its loss never moves the first-stage parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from ._nn import check_finite, dense, init_dense

# Parameter layout. ``enc``/``dec`` form stage one, ``enc2``/``dec2`` stage two.
STAGE1_NAMES = (
    "enc.W", "enc.b", "enc.mu.W", "enc.mu.b", "enc.lv.W", "enc.lv.b",
    "dec.W", "dec.b", "dec.out.W", "dec.out.b",
)
STAGE2_NAMES = (
    "enc2.W", "enc2.b", "enc2.mu.W", "enc2.mu.b", "enc2.lv.W", "enc2.lv.b",
    "dec2.W", "dec2.b", "dec2.out.W", "dec2.out.b",
)
PARAM_NAMES = STAGE1_NAMES + STAGE2_NAMES
ENCODER_NAMES = STAGE1_NAMES[:6] + STAGE2_NAMES[:6]


@dataclass(frozen=True)
class SInfoVAEConfig:
    input_dim: int
    z_dim: int = 16
    zbar_dim: int = 2
    hidden: int = 64
    hidden2: int = 32
    alpha_info: float = 0.9
    lambda_scale: float = 1.5
    recon_variance: float = 1.0
    logvar_bound: float = 10.0
    bandwidth_floor: float = 1e-6

    def __post_init__(self):
        if self.zbar_dim != 2:
            raise ValueError("zbar_dim is fixed at 2")
        if self.input_dim < 1 or self.z_dim < 1:
            raise ValueError("input_dim and z_dim must be positive")
        if self.kl_weight < 0:
            raise ValueError("alpha_info must be <= 1 (KL coefficient 1 - alpha)")
        if self.mmd_weight < 0:
            raise ValueError("alpha_info + lambda_scale must be >= 1 (MMD coefficient)")
        if self.recon_variance <= 0:
            raise ValueError("recon_variance must be positive")

    @property
    def kl_weight(self):
        return 1.0 - self.alpha_info

    @property
    def mmd_weight(self):
        return self.alpha_info + self.lambda_scale - 1.0


def init_params(cfg: SInfoVAEConfig, rng) -> dict:
    rng = ad.make_rng(rng)
    shapes = {
        "enc": (cfg.input_dim, cfg.hidden), "enc.mu": (cfg.hidden, cfg.z_dim),
        "enc.lv": (cfg.hidden, cfg.z_dim), "dec": (cfg.z_dim, cfg.hidden),
        "dec.out": (cfg.hidden, cfg.input_dim),
        "enc2": (cfg.z_dim, cfg.hidden2), "enc2.mu": (cfg.hidden2, cfg.zbar_dim),
        "enc2.lv": (cfg.hidden2, cfg.zbar_dim), "dec2": (cfg.zbar_dim, cfg.hidden2),
        "dec2.out": (cfg.hidden2, cfg.z_dim),
    }
    params = {}
    for name, (fi, fo) in shapes.items():
        # log-variance heads start at zero: unit posterior variance
        W, b = init_dense(rng, fi, fo, zero=name.endswith(".lv"))
        params[name + ".W"], params[name + ".b"] = W, b
    return {k: params[k] for k in PARAM_NAMES}


def _encode(p, x, prefix, bound, rng):
    h = ad.tanh(dense(x, p[prefix + ".W"], p[prefix + ".b"]))
    mu = dense(h, p[prefix + ".mu.W"], p[prefix + ".mu.b"])
    logvar = ad.clip(dense(h, p[prefix + ".lv.W"], p[prefix + ".lv.b"]), -bound, bound)
    z = mu if rng is None else ad.gaussian_sample(mu, logvar, rng)
    return mu, logvar, z


def _decode(p, z, prefix):
    h = ad.tanh(dense(z, p[prefix + ".W"], p[prefix + ".b"]))
    return dense(h, p[prefix + ".out.W"], p[prefix + ".out.b"])


def encode(p, x, rng=None, bound=10.0):
    """Stage-one posterior moments and a sample of z (the mean when ``rng`` is None)."""
    return _encode(p, x, "enc", bound, rng)


def encode2(p, z, rng=None, bound=10.0):
    return _encode(p, z, "enc2", bound, rng)


def decode(p, z):
    return _decode(p, z, "dec")


def decode2(p, zbar):
    return _decode(p, zbar, "dec2")


def kl_to_standard_normal(mu, logvar):
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I)) for diagonal Gaussians."""
    per_dim = ad.square(mu) + ad.exp(logvar) - 1.0 - logvar
    return ad.mean(ad.sum(per_dim, axis=1)) * 0.5


def mmd(samples_q, samples_p, bandwidth_floor=1e-6):
    """Unbiased RBF-kernel MMD^2 estimate, clamped at zero.

    The squared bandwidth is the median squared distance over all distinct
    pairs of the pooled sample, so the estimate is symmetric in its
    arguments.
    """
    q, p = ad.constant(samples_q), ad.constant(samples_p)
    n, m = q.shape[0], p.shape[0]
    if n < 2 or m < 2:
        raise ValueError("MMD needs at least two samples on each side")
    pooled = ad.concat([q, p], axis=0)
    d2 = ad.pairwise_sq_dists(pooled, pooled)
    h2 = ad.clip(ad.masked_median(d2, np.triu(np.ones((n + m, n + m), bool), 1)),
                 bandwidth_floor ** 2, np.inf)
    kernel = ad.exp(ad.neg(d2 / (h2 * 2.0)))
    w = np.empty((n + m, n + m))
    w[:n, :n] = 1.0 / (n * (n - 1))
    w[n:, n:] = 1.0 / (m * (m - 1))
    w[:n, n:] = w[n:, :n] = -1.0 / (n * m)
    np.fill_diagonal(w, 0.0)
    return ad.relu(ad.sum(kernel * w))


def reconstruction_nll(x, x_hat, variance=1.0):
    """Fixed-variance Gaussian negative log-likelihood without its constant."""
    return ad.mean(ad.sum(ad.square(x - x_hat), axis=1)) * (0.5 / variance)


def infovae_objective(x, x_hat, mu, logvar, z, prior, cfg: SInfoVAEConfig):
    """Negated InfoVAE bound: recon + (1-alpha) KL + (alpha+lambda-1) MMD.

    Returns the total and the three unweighted terms.
    """
    rec = reconstruction_nll(x, x_hat, cfg.recon_variance)
    kl = kl_to_standard_normal(mu, logvar)
    dist = mmd(z, prior, cfg.bandwidth_floor)
    total = rec + kl * cfg.kl_weight + dist * cfg.mmd_weight
    return total, (rec, kl, dist)


def _prior(rng, shape):
    return ad.constant(rng.standard_normal(shape))


def loss_infovae(p, X, cfg: SInfoVAEConfig, rng):
    """Stage-one loss on a batch. Returns ``(loss, z_samples)``."""
    x = ad.constant(X)
    if x.shape[0] < 2:
        raise ValueError("batch size must be at least 2")
    rng = ad.make_rng(rng)
    mu, logvar, z = encode(p, x, rng, cfg.logvar_bound)
    total, _ = infovae_objective(x, decode(p, z), mu, logvar, z,
                                 _prior(rng, z.shape), cfg)
    return total, z


def loss_stage2(p, Z, cfg: SInfoVAEConfig, rng):
    """Stage-two loss on z samples; gradients stop at ``Z``."""
    z = ad.stop_gradient(ad.constant(Z))
    if z.shape[0] < 2:
        raise ValueError("batch size must be at least 2")
    rng = ad.make_rng(rng)
    mu, logvar, zbar = encode2(p, z, rng, cfg.logvar_bound)
    total, _ = infovae_objective(z, decode2(p, zbar), mu, logvar, zbar,
                                 _prior(rng, zbar.shape), cfg)
    return total


def latent_means(p, X):
    """Mean-mode inference: ``(z, zbar)`` as float32 arrays, no sampling."""
    X = check_finite(X)
    x = ad.Tensor(np.atleast_2d(X))
    _, _, z = encode(p, x)
    _, _, zbar = encode2(p, z)
    return z.data, zbar.data


class SInfoVAE(TransformerMixin, BaseEstimator):
    """Stand-alone stacked InfoVAE that maps inputs to 2-D codes.

    ``transform`` returns the posterior mean of ``zbar``.
    """

    def __init__(self, z_dim=16, hidden=64, hidden2=32, alpha_info=0.9,
                 lambda_scale=1.5, learning_rate=0.01, momentum=0.9,
                 epochs=30, batch_size=64, random_state=0):
        self.z_dim = z_dim
        self.hidden = hidden
        self.hidden2 = hidden2
        self.alpha_info = alpha_info
        self.lambda_scale = lambda_scale
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self, input_dim):
        return SInfoVAEConfig(input_dim=input_dim, z_dim=self.z_dim, hidden=self.hidden,
                              hidden2=self.hidden2, alpha_info=self.alpha_info,
                              lambda_scale=self.lambda_scale)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        self.n_features_in_ = X.shape[1]
        self.config_ = cfg = self._config(X.shape[1])
        rng = ad.make_rng(self.random_state)
        names = list(PARAM_NAMES)
        leaves = [ad.parameter(v) for v in init_params(cfg, rng).values()]
        velocity, self.loss_curve_ = {}, []
        bs = max(2, min(self.batch_size, len(X)))
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            losses = []
            for start in range(0, len(X) - 1, bs):
                idx = order[start:start + bs]
                if len(idx) < 2:
                    continue
                p = dict(zip(names, leaves))
                l1, z = loss_infovae(p, X[idx], cfg, rng)
                l2 = loss_stage2(p, z.data, cfg, rng)
                total = l1 + l2
                grads = ad.backward(total)
                leaves = ad.sgd_step(leaves, grads, self.learning_rate, velocity, self.momentum)
                losses.append(total.item())
            self.loss_curve_.append(float(np.mean(losses)))
        self.params_ = {k: t.data for k, t in zip(names, leaves)}
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float32)
        return latent_means(self.params_, X)[1]
