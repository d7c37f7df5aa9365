"""Finite-difference checks of every training loss on small random instances.

All checks run in float64; each loss is probed through several of its
parameter tensors, one leaf at a time, with every other input held fixed
and all sampling re-seeded per evaluation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import partitioner as pt
from . import sinfovae as sv
from .submodels import (GeneratorParams, batch_objective, generate_head, init_generator, loss_jf,
                        submodel_logits)

DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckCase:
    loss: str
    leaf: str
    max_error: float
    excluded: int
    coords: int


def _with_leaf(params: dict, name, leaf):
    out = {k: ad.constant(v) for k, v in params.items()}
    out[name] = leaf
    return out


def _vae_instance(rng, n=6, d=5):
    cfg = sv.SInfoVAEConfig(input_dim=d, z_dim=3, hidden=6, hidden2=4)
    p = {k: v.astype(np.float64) for k, v in sv.init_params(cfg, rng).items()}
    X = rng.normal(size=(n, d))
    return cfg, p, X


def _check(fn, value, step):
    r = ad.finite_diff_check(fn, value, step)
    return float(r.max_error), len(r.excluded), np.size(value)


def check_infovae(rng, step=1e-3):
    cfg, p, X = _vae_instance(rng)
    seed = int(rng.integers(2**31))
    out = []
    for name in ("enc.W", "enc.lv.W", "dec.out.W", "enc.mu.b"):
        def fn(leaf, name=name):
            return sv.loss_infovae(_with_leaf(p, name, leaf), X, cfg, seed)[0]
        out.append(GradCheckCase("infovae", name, *_check(fn, p[name], step)))
    return out


def check_stage2(rng, step=1e-3):
    cfg, p, _ = _vae_instance(rng)
    Z = rng.normal(size=(6, cfg.z_dim))
    seed = int(rng.integers(2**31))
    out = []
    for name in ("enc2.W", "enc2.mu.W", "enc2.lv.b", "dec2.out.W"):
        def fn(leaf, name=name):
            return sv.loss_stage2(_with_leaf(p, name, leaf), Z, cfg, seed)
        out.append(GradCheckCase("stage2", name, *_check(fn, p[name], step)))
    return out


def _gen_instance(rng, d=5, C=3, K=4):
    gen = init_generator(rng, d, C, K, trunk_widths=(4,))
    leaves = [a.astype(np.float64) for a in gen.leaves()]
    return GeneratorParams.from_leaves(leaves, 1, K), leaves


def check_jf(rng, step=1e-3):
    n, d, C, K = 7, 5, 3, 4
    gen, leaves = _gen_instance(rng, d, C, K)
    X = rng.normal(size=(n, d))
    Y = np.eye(C)[rng.integers(C, size=n)]
    mask = rng.random((n, K)) < 0.4
    mask[np.arange(n), rng.integers(K, size=n)] = True
    out = []
    for idx, label in ((0, "trunk.W"), (2, "branch1.W"), (5, "branch2.b")):
        def fn(leaf, idx=idx):
            ls = [ad.constant(a) for a in leaves]
            ls[idx] = leaf
            g = GeneratorParams.from_leaves(ls, 1, K)
            x = ad.constant(X)
            logits = [submodel_logits(x, g.trunk, generate_head(g, k + 1)) for k in range(K)]
            return loss_jf(logits, Y, mask)
        out.append(GradCheckCase("jf", label, *_check(fn, leaves[idx], step)))
    return out


def check_total(rng, step=1e-3):
    cfg, p, X = _vae_instance(rng, n=8)
    C, K = 3, 4
    gen, leaves = _gen_instance(rng, X.shape[1], C, K)
    Y = np.eye(C)[rng.integers(C, size=len(X))]
    part = pt.PartitionConfig(K=K)
    seed = int(rng.integers(2**31))
    # stage two treats z as data, so the probe keeps it at its base value
    with_base = {k: ad.constant(v) for k, v in p.items()}
    z_base = sv.loss_infovae(with_base, X, cfg, ad.make_rng(seed))[1].data
    out = []
    for kind, name in (("vae", "enc.W"), ("vae", "enc.lv.W"), ("vae", "enc2.mu.W"),
                       ("gen", 0), ("gen", 4)):
        def fn(leaf, kind=kind, name=name):
            vae = _with_leaf(p, name, leaf) if kind == "vae" else {k: ad.constant(v) for k, v in p.items()}
            ls = [ad.constant(a) for a in leaves]
            if kind == "gen":
                ls[name] = leaf
            g = GeneratorParams.from_leaves(ls, 1, K)
            return batch_objective(vae, g, X, Y, cfg, part, ad.make_rng(seed), z_base)[0]
        value = p[name] if kind == "vae" else leaves[name]
        label = name if kind == "vae" else f"generator[{name}]"
        out.append(GradCheckCase("total", label, *_check(fn, value, step)))
    return out


CHECKS = {"infovae": check_infovae, "stage2": check_stage2, "jf": check_jf, "total": check_total}


def gradient_suite(seed=0, trials=2, names=None):
    """Run every loss check ``trials`` times; returns ``(cases, seconds)``."""
    start = time.perf_counter()
    cases = []
    rng = ad.make_rng(seed)
    with ad.precision(np.float64):
        for _ in range(trials):
            for name in names or CHECKS:
                cases.extend(CHECKS[name](rng))
    return cases, time.perf_counter() - start
