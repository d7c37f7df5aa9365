"""Generated submodels, predictive entropy and the joint training loop.

The generator owns a shared trunk and one head branch per partition. A
one-hot index switches exactly one branch on, so the generated head for
partition ``k`` is ``sum_i onehot_k[i] * branch_i``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from . import partitioner as pt
from . import sinfovae as sv
from ._nn import check_finite, dense, init_dense

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SubmodelParams:
    """Dense layers ``(W, b)`` of one submodel; the last pair is the head."""

    layers: tuple

    @property
    def trunk(self):
        return self.layers[:-1]

    @property
    def head(self):
        return self.layers[-1]

    def tensors(self):
        return [a for pair in self.layers for a in pair]

    @classmethod
    def from_tensors(cls, arrays):
        arrays = list(arrays)
        if len(arrays) % 2 or not arrays:
            raise ValueError("submodel tensors must come in (W, b) pairs")
        layers = []
        for W, b in zip(arrays[::2], arrays[1::2]):
            W, b = np.asarray(W, np.float32), np.asarray(b, np.float32)
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"bad layer shapes {W.shape}, {b.shape}")
            layers.append((W, b))
        for (W0, _), (W1, _) in zip(layers, layers[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise ValueError("consecutive layer widths do not chain")
        return cls(tuple(layers))

    @property
    def n_classes(self):
        return self.head[0].shape[1]


@dataclass
class GeneratorParams:
    """Shared trunk layers plus ``K`` head branches."""

    trunk: list
    branches: list

    @property
    def K(self):
        return len(self.branches)

    def leaves(self):
        out = [a for pair in self.trunk for a in pair]
        out += [a for pair in self.branches for a in pair]
        return out

    @classmethod
    def from_leaves(cls, leaves, n_trunk, K):
        leaves = list(leaves)
        trunk = [tuple(leaves[2 * i:2 * i + 2]) for i in range(n_trunk)]
        rest = leaves[2 * n_trunk:]
        branches = [tuple(rest[2 * i:2 * i + 2]) for i in range(K)]
        return cls(trunk, branches)


def init_generator(rng, input_dim, n_classes, K, trunk_widths=(32,), zero_heads=False):
    rng = ad.make_rng(rng)
    widths = [input_dim, *trunk_widths]
    trunk = [init_dense(rng, a, b) for a, b in zip(widths, widths[1:])]
    branches = [init_dense(rng, widths[-1], n_classes, zero=zero_heads) for _ in range(K)]
    return GeneratorParams(trunk, branches)


def one_hot(k, K):
    if not 1 <= k <= K:
        raise ValueError(f"partition index {k} outside 1..{K}")
    d = np.zeros(K, np.float32)
    d[k - 1] = 1.0
    return d


def generate_head(gen: GeneratorParams, k):
    """Head ``(W, b)`` for partition ``k`` (1-based) as graph nodes."""
    delta = one_hot(k, gen.K)
    W = b = None
    for i, (Wi, bi) in enumerate(gen.branches):
        gate = float(delta[i])
        W = ad.mul(gate, Wi) if W is None else W + ad.mul(gate, Wi)
        b = ad.mul(gate, bi) if b is None else b + ad.mul(gate, bi)
    return W, b


def generate_params(gen: GeneratorParams, k) -> SubmodelParams:
    """Materialise submodel ``k``: the shared trunk plus its generated head."""
    W, b = generate_head(gen, k)
    trunk = tuple((np.asarray(_data(Wt), np.float32), np.asarray(_data(bt), np.float32))
                  for Wt, bt in gen.trunk)
    return SubmodelParams(trunk + ((np.asarray(W.data, np.float32), np.asarray(b.data, np.float32)),))


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else x


def submodel_logits(x, trunk, head):
    h = x
    for W, b in trunk:
        h = ad.tanh(dense(h, W, b))
    return dense(h, *head)


def submodel_forward(x, params: SubmodelParams):
    """Class probabilities for one frame ``(D,)`` or a batch ``(N, D)``."""
    x = check_finite(x)
    single = x.ndim == 1
    xt = ad.Tensor(np.atleast_2d(x))
    probs = ad.softmax(submodel_logits(xt, params.trunk, params.head)).data
    return probs[0] if single else probs


def predictive_entropy(probs):
    """Shannon entropy in nats along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ad.DomainError("probabilities must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    H = -np.sum(terms, axis=-1)
    return np.maximum(H, 0.0) if np.ndim(H) else max(float(H), 0.0)


def loss_jf(logits_per_k, y_onehot, mask):
    """Batch mean of the summed cross-entropy over each sample's partitions."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("every sample needs a non-empty partition set")
    total = None
    for k, logits in enumerate(logits_per_k):
        if not mask[:, k].any():
            continue
        ce = ad.neg(ad.sum(ad.log_softmax(logits) * y_onehot, axis=1))
        term = ad.sum(ce * mask[:, k].astype(np.float64))
        total = term if total is None else total + term
    return total / float(mask.shape[0])


@dataclass
class TrainConfig:
    eta: float = 0.02
    epochs: int = 40
    nu: int | None = None
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    patience: int = 3

    def __post_init__(self):
        if self.nu is None:
            self.nu = max(1, math.ceil(0.6 * self.epochs))
        if not 0 < self.nu <= self.epochs:
            raise ValueError("nu must satisfy 0 < nu <= epochs")
        if self.eta < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")


@dataclass
class TrainResult:
    vae: dict
    generator: GeneratorParams
    log: list = field(default_factory=list)


def batch_objective(vae, gen, Xb, Yb, vae_cfg, part_cfg, rng, stage2_input=None):
    """Total objective ``J`` for one batch and its parts.

    Partition membership combines the jittered angular soft code of the
    mean-mode 2-D latent with the lowest-entropy indicator of the current
    submodels; both are treated as constants. The second stage sees the
    sampled ``z`` as data; ``stage2_input`` overrides it, which lets a
    finite-difference probe hold that input fixed.
    """
    l1, z = sv.loss_infovae(vae, Xb, vae_cfg, rng)
    l2 = sv.loss_stage2(vae, z.data if stage2_input is None else stage2_input, vae_cfg, rng)

    _, zbar = sv.latent_means({k: _data(v) for k, v in vae.items()}, Xb)
    cbar = pt.soft_codes_from_latent(zbar, part_cfg, rng)

    x = ad.constant(Xb)
    logits = [submodel_logits(x, gen.trunk, generate_head(gen, k + 1)) for k in range(gen.K)]
    probs = np.stack([ad.softmax(ad.stop_gradient(lg)).data for lg in logits], axis=1)
    cbarbar = pt.uncertainty_code(predictive_entropy(probs), part_cfg.tau)
    mask = pt.partition_mask(pt.combine(cbar, cbarbar, part_cfg.alpha_mix), part_cfg.tau)

    jf = ad.select_branch(loss_jf(logits, Yb, mask), mask)
    return jf + l1 + l2, (jf, l1, l2)


def train(X, Y, n_classes, vae_cfg, part_cfg, train_cfg: TrainConfig, trunk_widths=(32,),
          on_epoch=None):
    """Joint training of autoencoder and generator.

    Epochs are numbered from 1. Epochs before ``nu`` update every
    parameter; from ``nu`` on only the generator (trunk and branches) moves.
    Stops early once the epoch-mean objective has not improved for
    ``patience`` epochs. ``on_epoch(epoch, vae_arrays, generator)`` is
    called after every epoch.
    """
    X = np.asarray(X, np.float32)
    Y = np.asarray(Y)
    if len(X) == 0:
        raise ValueError("empty dataset")
    rng = ad.make_rng(train_cfg.seed)
    vae_names = list(sv.PARAM_NAMES)
    vae_leaves = [ad.parameter(a) for a in sv.init_params(vae_cfg, rng).values()]
    gen0 = init_generator(rng, X.shape[1], n_classes, part_cfg.K, trunk_widths)
    n_trunk = len(gen0.trunk)
    gen_leaves = [ad.parameter(a) for a in gen0.leaves()]
    onehots = np.eye(n_classes, dtype=np.float32)[Y]

    vel_vae, vel_gen = {}, {}
    bs = max(2, min(train_cfg.batch_size, len(X)))
    best, stale, log = math.inf, 0, []
    for epoch in range(1, train_cfg.epochs + 1):
        joint = epoch < train_cfg.nu
        order = rng.permutation(len(X))
        sums = np.zeros(4)
        batches = 0
        for start in range(0, len(X), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            vae = dict(zip(vae_names, vae_leaves))
            gen = GeneratorParams.from_leaves(gen_leaves, n_trunk, part_cfg.K)
            J, (jf, l1, l2) = batch_objective(vae, gen, X[idx], onehots[idx],
                                              vae_cfg, part_cfg, rng)
            vals = np.array([J.item(), jf.item(), l1.item(), l2.item()])
            if not np.all(np.isfinite(vals)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batches}: "
                    f"J={vals[0]}, JF={vals[1]}, LVAE={vals[2]}, LVAE2={vals[3]}")
            grads = ad.backward(J)
            if joint:
                vae_leaves = ad.sgd_step(vae_leaves, grads, train_cfg.eta, vel_vae, train_cfg.momentum)
            gen_leaves = ad.sgd_step(gen_leaves, grads, train_cfg.eta, vel_gen, train_cfg.momentum)
            sums += vals
            batches += 1
        means = sums / max(batches, 1)
        log.append({"epoch": epoch, "J": means[0], "JF": means[1],
                    "LVAE": means[2], "LVAE2": means[3]})
        logger.info("epoch %d J=%.4f JF=%.4f LVAE=%.4f LVAE2=%.4f", epoch, *means)
        if on_epoch is not None:
            on_epoch(epoch, {k: t.data for k, t in zip(vae_names, vae_leaves)},
                     GeneratorParams.from_leaves([t.data for t in gen_leaves], n_trunk, part_cfg.K))
        if means[0] < best - 1e-12:
            best, stale = means[0], 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break

    vae = {k: t.data for k, t in zip(vae_names, vae_leaves)}
    gen = GeneratorParams.from_leaves([t.data for t in gen_leaves], n_trunk, part_cfg.K)
    return TrainResult(vae, gen, log)


class CacheNet(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Knowledge-partitioned classifier with a latent-code submodel selector.

    ``fit`` trains the stacked autoencoder and the submodel generator
    jointly. ``predict`` follows the edge path: encode, pick the submodel
    whose sector is nearest, and let it classify. ``transform`` returns the
    2-D latent codes.
    """

    def __init__(self, n_partitions=4, z_dim=16, vae_hidden=64, vae_hidden2=32,
                 trunk_widths=(32,), tau=0.3, gamma=0.3, alpha_mix=0.5,
                 epsilon_std=0.05, alpha_info=0.9, lambda_scale=1.5,
                 learning_rate=0.02, momentum=0.9, epochs=40, nu=None,
                 batch_size=64, patience=3, random_state=0):
        self.n_partitions = n_partitions
        self.z_dim = z_dim
        self.vae_hidden = vae_hidden
        self.vae_hidden2 = vae_hidden2
        self.trunk_widths = trunk_widths
        self.tau = tau
        self.gamma = gamma
        self.alpha_mix = alpha_mix
        self.epsilon_std = epsilon_std
        self.alpha_info = alpha_info
        self.lambda_scale = lambda_scale
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.nu = nu
        self.batch_size = batch_size
        self.patience = patience
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.vae_config_ = sv.SInfoVAEConfig(
            input_dim=X.shape[1], z_dim=self.z_dim, hidden=self.vae_hidden,
            hidden2=self.vae_hidden2, alpha_info=self.alpha_info,
            lambda_scale=self.lambda_scale)
        self.partition_config_ = pt.PartitionConfig(
            K=self.n_partitions, tau=self.tau, gamma=self.gamma,
            alpha_mix=self.alpha_mix, epsilon_std=self.epsilon_std)
        self.train_config_ = TrainConfig(
            eta=self.learning_rate, epochs=self.epochs, nu=self.nu,
            batch_size=self.batch_size, seed=self.random_state,
            momentum=self.momentum, patience=self.patience)
        result = train(X, y_idx, len(self.classes_), self.vae_config_,
                       self.partition_config_, self.train_config_, tuple(self.trunk_widths))
        self.vae_params_ = result.vae
        self.generator_ = result.generator
        self.loss_log_ = result.log
        self.submodels_ = [generate_params(result.generator, k)
                           for k in range(1, self.n_partitions + 1)]
        return self

    def _check(self, X):
        check_is_fitted(self, "submodels_")
        return check_array(X, dtype=np.float32)

    def transform(self, X):
        X = self._check(X)
        return sv.latent_means(self.vae_params_, X)[1]

    def soft_code(self, X):
        return pt.soft_codes_from_latent(self.transform(X), self.partition_config_)

    def select(self, X):
        """1-based index of the submodel the edge would pick for each row."""
        return pt.select_submodel(self.soft_code(X))

    def submodel(self, k) -> SubmodelParams:
        check_is_fitted(self, "submodels_")
        if not 1 <= k <= self.n_partitions:
            raise ValueError(f"partition index {k} outside 1..{self.n_partitions}")
        return self.submodels_[k - 1]

    def submodel_proba(self, X, k):
        return submodel_forward(self._check(X), self.submodel(k))

    def predict_proba(self, X):
        X = self._check(X)
        sel = self.select(X)
        out = np.empty((len(X), len(self.classes_)), np.float32)
        for k in np.unique(sel):
            rows = sel == k
            out[rows] = submodel_forward(X[rows], self.submodels_[k - 1])
        return out

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def entropies(self, X):
        """``(N, K)`` predictive entropy of every submodel on every row."""
        X = self._check(X)
        return np.stack([predictive_entropy(submodel_forward(X, m)) for m in self.submodels_], axis=1)

    def to_bundle(self):
        from .bundle import Bundle
        check_is_fitted(self, "submodels_")
        return Bundle(
            encoder={k: self.vae_params_[k] for k in sv.ENCODER_NAMES},
            submodels=list(self.submodels_),
            partition=self.partition_config_,
            classes=np.asarray(self.classes_),
        )
