"""Closed-form variational quantities for the hierarchical mixture prior.

Arrays are batched over instances along axis 0: ``mu_z`` is ``(B, J)``,
``omega`` is ``(B, L)`` and the path posterior ``S`` is ``(B, K)`` with
columns in ``tree.full_paths()`` order.  Analytic gradients hold ``S``,
``omega`` and the flat-mixture responsibilities fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, logsumexp, polygamma

from .hierarchy import Hierarchy, TreeArrays, path_log_prior

LOG2PI = float(np.log(2.0 * np.pi))
ALPHA_FLOOR = 1e-4

HCRL_TERMS = (
    "recon",
    "path_prior",
    "eta_prior",
    "level_prior",
    "latent",
    "path_entropy",
    "eta_entropy",
    "level_entropy",
    "latent_entropy",
    "beta",
)
VADE_TERMS = ("recon", "cluster_prior", "latent", "cluster_entropy", "latent_entropy")


def trigamma(x):
    return polygamma(1, x)


def _arrays(tree):
    if isinstance(tree, TreeArrays):
        return tree
    if isinstance(tree, Hierarchy):
        return tree.arrays()
    raise TypeError("expected a Hierarchy or TreeArrays")


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite input")


def _xlogx(p):
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


@dataclass
class VariationalState:
    """Per-instance posteriors for one batch."""

    mu_z: np.ndarray
    sigma2_z: np.ndarray
    alpha_tilde: np.ndarray  # (B, L), or (L,) when shared globally
    omega: np.ndarray
    S: np.ndarray
    mu_eta: np.ndarray | None = None
    sigma2_eta: np.ndarray | None = None

    @property
    def global_eta(self):
        return self.alpha_tilde.ndim == 1


# -- level-proportion bridge ------------------------------------------------------

def laplace_alpha(mu_eta, sigma2_eta, floor=ALPHA_FLOOR):
    """Dirichlet parameters matched to a logistic-normal (mean, variance) pair."""
    mu = np.asarray(mu_eta, dtype=np.float64)
    s2 = np.asarray(sigma2_eta, dtype=np.float64)
    _finite(mu, s2)
    if np.any(s2 <= 0):
        raise ValueError("sigma2_eta must be positive")
    L = mu.shape[-1]
    e = np.exp(-mu)
    raw = (1.0 - 2.0 / L + e * e.sum(axis=-1, keepdims=True) / L**2) / s2
    return np.maximum(raw, floor)


def laplace_alpha_grad(mu_eta, log_sigma2_eta, upstream, floor=ALPHA_FLOOR):
    """Pull ``d/d alpha_tilde`` back to the encoder heads ``(mu, log sigma2)``."""
    mu = np.asarray(mu_eta, dtype=np.float64)
    ls2 = np.asarray(log_sigma2_eta, dtype=np.float64)
    L = mu.shape[-1]
    e = np.exp(-mu)
    E = e.sum(axis=-1, keepdims=True)
    inv_s2 = np.exp(-ls2)
    raw = (1.0 - 2.0 / L + e * E / L**2) * inv_s2
    g = np.where(raw > floor, upstream, 0.0)
    ge = g * inv_s2 * e
    d_mu = -(ge * E + e * ge.sum(axis=-1, keepdims=True)) / L**2
    d_ls2 = -g * raw
    return d_mu, d_ls2


# -- Gaussian expectations ---------------------------------------------------------

def gaussian_cross(mu_z, sigma2_z, node):
    """E_{N(mu_z, sigma2_z)}[log N(z | node.mu, node.sigma2)] for diagonal Gaussians."""
    mu_z = np.asarray(mu_z, dtype=np.float64)
    sigma2_z = np.asarray(sigma2_z, dtype=np.float64)
    if np.any(np.asarray(node.sigma2) <= 0):
        raise ValueError("node variance must be positive")
    if mu_z.shape[-1] != node.mu.shape[-1]:
        raise ValueError("latent dimensions disagree")
    return np.sum(
        -0.5 * np.log(2 * np.pi * node.sigma2) - ((mu_z - node.mu) ** 2 + sigma2_z) / (2 * node.sigma2),
        axis=-1,
    )


def gaussian_cross_table(mu_z, sigma2_z, mu, sigma2):
    """(B, M) table of expected log densities of each instance under each component."""
    inv = 1.0 / sigma2
    const = -0.5 * (mu_z.shape[1] * LOG2PI + np.log(sigma2).sum(axis=1))
    quad = (mu_z**2 + sigma2_z) @ inv.T - 2.0 * mu_z @ (mu * inv).T + (mu**2 * inv).sum(axis=1)
    return const[None, :] - 0.5 * quad


def _path_level_table(arr, mu_z, sigma2_z):
    G_node = gaussian_cross_table(mu_z, sigma2_z, arr.mu, arr.sigma2)
    return G_node[:, arr.path_nodes]  # (B, K, L)


def _softmax_rows(logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def _level_bias(alpha_tilde, B):
    at = np.asarray(alpha_tilde, dtype=np.float64)
    bias = digamma(at) - digamma(at.sum(axis=-1, keepdims=True))
    return np.broadcast_to(bias, (B, bias.shape[-1])) if bias.ndim == 1 else bias


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def level_posterior(S, alpha_tilde, mu_z, sigma2_z, tree):
    """omega_l proportional to exp{sum_k S_k G(node_{k,l}) + psi(at_l) - psi(at_0)}."""
    arr = _arrays(tree)
    mu_z, single = _batched(mu_z)
    sigma2_z, _ = _batched(sigma2_z)
    S, _ = _batched(S)
    G = _path_level_table(arr, mu_z, sigma2_z)
    logits = np.einsum("nk,nkl->nl", S, G) + _level_bias(alpha_tilde, mu_z.shape[0])
    if not np.all(np.isfinite(logits.max(axis=1))):
        raise FloatingPointError("all level log-weights are -inf (degenerate tree)")
    omega = _softmax_rows(logits)
    return omega[0] if single else omega


def path_posterior(tree, omega, alpha_tilde, mu_z, sigma2_z):
    """Mean-field update S_k proportional to exp{E log p(path_k|v) + sum_l omega_l G(node_{k,l})}.

    ``alpha_tilde`` does not enter the update; it is accepted so the two
    coordinate maps share a signature.
    """
    arr = _arrays(tree)
    mu_z, single = _batched(mu_z)
    sigma2_z, _ = _batched(sigma2_z)
    omega, _ = _batched(omega)
    G = _path_level_table(arr, mu_z, sigma2_z)
    logits = path_log_prior(arr)[None, :] + np.einsum("nl,nkl->nk", omega, G)
    S = _softmax_rows(logits)
    return S[0] if single else S


def inner_path_weights(tree, S):
    """Map every path (inner and full) to its weight; inner = sum of descendants."""
    full = tree.full_paths()
    S = np.asarray(S, dtype=np.float64)
    out = {p: 0.0 for p in tree.all_paths()}
    for p, s in zip(full, S):
        for l in range(1, len(p) + 1):
            out[p[:l]] += float(s)
    return out


# -- tree and Dirichlet terms --------------------------------------------------------

def _beta_kl_neg(a, b, gamma):
    dab = digamma(a + b)
    return (
        np.log(gamma)
        + (gamma - 1.0) * (digamma(b) - dab)
        - (gammaln(a + b) - gammaln(a) - gammaln(b) + (a - 1.0) * (digamma(a) - dab) + (b - 1.0) * (digamma(b) - dab))
    )


def beta_term(tree, gamma=None):
    """Sum over nodes of -KL(Beta(a, b) || Beta(1, gamma))."""
    arr = _arrays(tree)
    if gamma is None:
        gamma = arr.gamma
    if np.any(arr.a <= 0) or np.any(arr.b <= 0):
        raise ValueError("Beta parameters must be positive")
    return float(np.sum(_beta_kl_neg(arr.a, arr.b, gamma)))


def beta_term_grad(a, b, gamma):
    tab = trigamma(a + b)
    c = a + b - gamma - 1.0
    return -(a - 1.0) * trigamma(a) + c * tab, (gamma - b) * trigamma(b) + c * tab


def _dirichlet_parts(alpha, alpha_tilde, omega):
    alpha = np.asarray(alpha, dtype=np.float64)
    at = np.asarray(alpha_tilde, dtype=np.float64)
    if np.any(alpha <= 0) or np.any(at <= 0):
        raise ValueError("Dirichlet parameters must be positive")
    at0 = at.sum(axis=-1, keepdims=True)
    elog = digamma(at) - digamma(at0)
    prior = ((alpha - 1.0) * elog).sum(axis=-1) + gammaln(alpha.sum()) - gammaln(alpha).sum()
    level = (np.asarray(omega) * elog).sum(axis=-1)
    entropy = -(gammaln(at0[..., 0]) - gammaln(at).sum(axis=-1) + ((at - 1.0) * elog).sum(axis=-1))
    return prior, level, entropy


def dirichlet_terms(alpha, alpha_tilde, omega):
    """E log p(eta) + E log p(l | eta) - E log q(eta), per instance."""
    prior, level, entropy = _dirichlet_parts(alpha, alpha_tilde, omega)
    return prior + level + entropy


def dirichlet_alpha_grad(alpha, alpha_tilde, omega_sum):
    """d/d alpha_tilde of prior + level + entropy; ``omega_sum`` weights the level term."""
    at = np.asarray(alpha_tilde, dtype=np.float64)
    c = alpha + omega_sum - at
    return c * trigamma(at) - trigamma(at.sum(axis=-1, keepdims=True)) * c.sum(axis=-1, keepdims=True)


# -- full objectives --------------------------------------------------------------

def _node_weights(arr, S, omega):
    """W[n, m] = omega[n, level(m)] * (posterior path mass through node m)."""
    K, M = arr.path_nodes.shape[0], arr.n_nodes
    through = np.zeros((K, M))
    through[np.arange(K)[:, None], arr.path_nodes] = 1.0
    return (S @ through) * omega[:, arr.level]


def hcrl_instance_terms(tree, state, recon, alpha):
    """Per-instance ELBO terms (each an array of shape (B,)) excluding tree-level and global terms."""
    arr = _arrays(tree)
    mu_z, s2z = state.mu_z, state.sigma2_z
    B, J = mu_z.shape
    S, omega = state.S, state.omega
    if S.shape != (B, arr.n_paths) or omega.shape != (B, arr.path_nodes.shape[1]):
        raise ValueError("incomplete variational state for this tree")
    G_node = gaussian_cross_table(mu_z, s2z, arr.mu, arr.sigma2)
    Sn = S / S.sum(axis=1, keepdims=True)
    W = _node_weights(arr, Sn, omega)
    terms = {
        "recon": np.asarray(recon, dtype=np.float64),
        "path_prior": Sn @ path_log_prior(arr),
        "latent": (W * G_node).sum(axis=1),
        "path_entropy": -_xlogx(Sn).sum(axis=1),
        "level_entropy": -_xlogx(omega).sum(axis=1),
        "latent_entropy": 0.5 * J * LOG2PI + 0.5 * (1.0 + np.log(s2z)).sum(axis=1),
    }
    prior, level, entropy = _dirichlet_parts(alpha, state.alpha_tilde, omega)
    terms["level_prior"] = level
    if not state.global_eta:
        terms["eta_prior"] = prior
        terms["eta_entropy"] = entropy
    return terms


def elbo_hcrl(tree, state, recon, alpha, gamma=None, scale=1.0):
    """Batch ELBO of the hierarchical model and its per-term breakdown.

    ``recon`` is the per-instance reconstruction log-likelihood averaged over
    MC samples.  Tree-level terms (and the global level-proportion terms when
    ``state.alpha_tilde`` is shared) enter multiplied by ``scale``, normally
    batch size / dataset size.
    """
    arr = _arrays(tree)
    if gamma is None:
        gamma = arr.gamma
    per = hcrl_instance_terms(arr, state, recon, alpha)
    breakdown = {name: float(np.sum(per[name])) if name in per else 0.0 for name in HCRL_TERMS}
    breakdown["beta"] = scale * beta_term(arr, gamma)
    if state.global_eta:
        prior, _, entropy = _dirichlet_parts(alpha, state.alpha_tilde, state.omega[:1])
        breakdown["eta_prior"] = scale * float(prior)
        breakdown["eta_entropy"] = scale * float(entropy)
    total = 0.0
    for name in HCRL_TERMS:
        total += breakdown[name]
    return total, breakdown


def elbo_hcrl_per_instance(tree, state, recon, alpha, n_total, gamma=None):
    """Per-instance ELBO with dataset-level terms spread evenly over ``n_total`` instances."""
    arr = _arrays(tree)
    per = hcrl_instance_terms(arr, state, recon, alpha)
    out = np.zeros(state.mu_z.shape[0])
    for v in per.values():
        out = out + v
    shared = beta_term(arr, gamma)
    if state.global_eta:
        prior, _, entropy = _dirichlet_parts(alpha, state.alpha_tilde, state.omega[:1])
        shared += float(prior) + float(entropy)
    return out + shared / n_total


def elbo_hcrl_grad(tree, state, alpha, gamma=None, scale=1.0):
    """Gradients of :func:`elbo_hcrl` (minus the reconstruction term).

    Returns a dict with ``mu_z``, ``log_sigma2_z`` (B, J), ``alpha_tilde``
    (B, L; per-instance bridge only) and node parameters ``node_mu``,
    ``node_log_sigma2`` (M, J), ``node_log_a``, ``node_log_b`` (M,) in
    preorder node order.
    """
    arr = _arrays(tree)
    if gamma is None:
        gamma = arr.gamma
    mu_z, s2z, S, omega = state.mu_z, state.sigma2_z, state.S, state.omega
    Sn = S / S.sum(axis=1, keepdims=True)
    W = _node_weights(arr, Sn, omega)
    inv = 1.0 / arr.sigma2
    Winv = W @ inv
    g = {
        "mu_z": W @ (arr.mu * inv) - mu_z * Winv,
        "log_sigma2_z": -0.5 * s2z * Winv + 0.5,
    }
    wsum = W.sum(axis=0)[:, None]
    wmu = W.T @ mu_z
    g["node_mu"] = (wmu - wsum * arr.mu) * inv
    sq = W.T @ (mu_z**2 + s2z) - 2.0 * arr.mu * wmu + wsum * arr.mu**2
    g["node_log_sigma2"] = -0.5 * wsum + 0.5 * sq * inv
    n_v = Sn.sum(axis=0) @ arr.on_path
    n_1mv = Sn.sum(axis=0) @ arr.left_of
    tab = trigamma(arr.a + arr.b)
    ga = n_v * trigamma(arr.a) - (n_v + n_1mv) * tab
    gb = n_1mv * trigamma(arr.b) - (n_v + n_1mv) * tab
    ka, kb = beta_term_grad(arr.a, arr.b, gamma)
    g["node_log_a"] = arr.a * (ga + scale * ka)
    g["node_log_b"] = arr.b * (gb + scale * kb)
    if not state.global_eta:
        g["alpha_tilde"] = dirichlet_alpha_grad(np.asarray(alpha, dtype=np.float64), state.alpha_tilde, omega)
    return g


def e_step_sweeps(tree, mu_z, sigma2_z, alpha_tilde, sweeps=2):
    """Alternate path and level updates from a uniform level posterior."""
    arr = _arrays(tree)
    B = mu_z.shape[0]
    L = arr.path_nodes.shape[1]
    omega = np.full((B, L), 1.0 / L)
    S = None
    for _ in range(sweeps):
        S = path_posterior(arr, omega, alpha_tilde, mu_z, sigma2_z)
        omega = level_posterior(S, alpha_tilde, mu_z, sigma2_z, arr)
    return S, omega


# -- flat baselines -------------------------------------------------------------

@dataclass
class FlatMixture:
    kappa: np.ndarray  # (K,)
    mu: np.ndarray  # (K, J)
    sigma2: np.ndarray  # (K, J)

    def check(self):
        k = np.asarray(self.kappa)
        if np.any(k <= 0) or abs(k.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be a strictly positive simplex")
        if np.any(self.sigma2 <= 0):
            raise ValueError("component variances must be positive")


def mixture_log_joint(mix, z):
    """(B, K) table of log kappa_c + log N(z | mu_c, sigma2_c)."""
    mix.check()
    return np.log(mix.kappa)[None, :] + gaussian_cross_table(z, np.zeros_like(z), mix.mu, mix.sigma2)


def vade_responsibilities(mix, z):
    """p(c | z) for each row of z."""
    return _softmax_rows(mixture_log_joint(mix, z))


def vade_instance_terms(mix, mu_z, sigma2_z, resp, recon):
    mix.check()
    J = mu_z.shape[1]
    G = gaussian_cross_table(mu_z, sigma2_z, mix.mu, mix.sigma2)
    return {
        "recon": np.asarray(recon, dtype=np.float64),
        "cluster_prior": resp @ np.log(mix.kappa),
        "latent": (resp * G).sum(axis=1),
        "cluster_entropy": -_xlogx(resp).sum(axis=1),
        "latent_entropy": 0.5 * J * LOG2PI + 0.5 * (1.0 + np.log(sigma2_z)).sum(axis=1),
    }


def elbo_vade(mix, mu_z, sigma2_z, resp, recon):
    """Flat Gaussian-mixture ELBO with q(c | x) given by ``resp``."""
    per = vade_instance_terms(mix, mu_z, sigma2_z, resp, recon)
    breakdown = {name: float(np.sum(per[name])) for name in VADE_TERMS}
    total = 0.0
    for name in VADE_TERMS:
        total += breakdown[name]
    return total, breakdown


def elbo_vade_grad(mix, mu_z, sigma2_z, resp):
    """Gradients w.r.t. encoder heads, mixture logits, means and log-variances."""
    inv = 1.0 / mix.sigma2
    Rinv = resp @ inv
    rsum = resp.sum(axis=0)[:, None]
    rmu = resp.T @ mu_z
    sq = resp.T @ (mu_z**2 + sigma2_z) - 2.0 * mix.mu * rmu + rsum * mix.mu**2
    return {
        "mu_z": resp @ (mix.mu * inv) - mu_z * Rinv,
        "log_sigma2_z": -0.5 * sigma2_z * Rinv + 0.5,
        "logits": resp.sum(axis=0) - resp.shape[0] * mix.kappa,
        "mix_mu": (rmu - rsum * mix.mu) * inv,
        "mix_log_sigma2": -0.5 * rsum + 0.5 * sq * inv,
    }


def elbo_vae(mu_z, sigma2_z, recon):
    """Plain VAE ELBO: reconstruction minus closed-form KL to N(0, I)."""
    kl = 0.5 * np.sum(mu_z**2 + sigma2_z - 1.0 - np.log(sigma2_z), axis=1)
    return float(np.sum(recon) - np.sum(kl)), {"recon": float(np.sum(recon)), "kl": float(np.sum(kl))}


def log_mixture_density(z, log_weights, mu, sigma2):
    """log sum_c w_c N(z | mu_c, sigma2_c) for rows of z; used by likelihood estimation."""
    table = gaussian_cross_table(z, np.zeros_like(z), mu, sigma2)
    return logsumexp(table + log_weights[None, :], axis=1)
