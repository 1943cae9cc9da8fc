"""Analytic-versus-finite-difference checks over every parameter group."""
from __future__ import annotations

import numpy as np

from . import hierarchy as H
from . import model as M
from .nn import finite_diff_grad, relative_error

TOLERANCE = 1e-4
CHECK_VARIANTS = ("HCRL1", "HCRL2", "VaDE")


def check_model(variant, D=8, J=2, L=2, K=3, hidden=(6,), observation="gaussian", seed=0):
    """Small seeded model with a branched tree / spread mixture so every term is active."""
    cfg = M.ModelConfig(D=D, J=J, L=L, K=K, hidden=hidden, variant=variant,
                        observation=observation, R=2, seed=seed)
    model = M.HcrlModel(cfg)
    rng = np.random.default_rng(seed + 1)
    if cfg.hierarchical:
        for _ in range(3):
            H.grow(model.tree, {p: 1.0 for p in model.tree.inner_paths()}, rng)
        for _, node in model.tree.iter_nodes():
            node.mu = rng.normal(size=J)
            node.sigma2 = rng.uniform(0.5, 2.0, size=J)
            node.a, node.b = (float(x) for x in rng.uniform(0.5, 2.0, size=2))
        if variant == "HCRL1":
            model.alpha_global = rng.uniform(1.0, 3.0, size=L)
    if variant == "VaDE":
        model.mix_logits[...] = rng.normal(size=K)
        model.mix_mu[...] = rng.normal(size=(K, J))
        model.mix_log_sigma2[...] = 0.3 * rng.normal(size=(K, J))
    return model


def check_data(model, N, seed=0):
    rng = np.random.default_rng(seed + 2)
    c = model.config
    X = rng.normal(size=(N, c.D))
    if c.observation == "bernoulli":
        X = (X > 0).astype(np.float64)
    noise = rng.standard_normal((c.R, N, c.J))
    return X, noise


def gradient_check(model, X, noise, eps=1e-5, scale=1.0, corrupt=None):
    """Worst relative error per parameter group.

    Path / level posteriors (or responsibilities) are computed once and held
    fixed, matching how gradients are taken during training.  ``corrupt``
    names a group whose analytic gradient is deliberately perturbed (a
    negative control for the checker itself).
    """
    base = M.batch_objective(model, X, noise, scale=scale)
    report = {}
    for group in M.param_groups(model):
        theta = M.get_group(model, group)
        analytic = M.flat_grad(base, group).copy()
        if corrupt == group:
            analytic[0] += 1.0 + abs(analytic[0])

        def f(t):
            M.set_group(model, group, t)
            return M.batch_objective(model, X, noise, state=base.state, scale=scale, need_grad=False).elbo

        numeric = finite_diff_grad(f, theta, eps)
        M.set_group(model, group, theta)
        report[group] = relative_error(analytic, numeric)
    return report


def run_suite(variants=CHECK_VARIANTS, D=8, J=2, L=2, K=3, N=32, seed=0, observation="gaussian",
              corrupt=None):
    """``{variant: {group: worst relative error}}`` for seeded desk-scale models."""
    if D > 8 or J > 8:
        raise ValueError("gradient checks are limited to D, J <= 8")
    out = {}
    for variant in variants:
        model = check_model(variant, D, J, L, K, observation=observation, seed=seed)
        X, noise = check_data(model, N, seed)
        out[variant] = gradient_check(model, X, noise, corrupt=corrupt)
    return out
