"""HCRL1 / HCRL2 hierarchical models, the flat VaDE baseline and plain VAE.

A model owns its networks, its hierarchy (or flat mixture), optimiser
state and RNG.  :func:`train` runs the tree-structured training loop with
GROW / PRUNE / MERGE checks; :func:`train_vade` trains the flat variants.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.cluster.vq import kmeans2

from . import hierarchy as H
from . import variational as V
from .nn import AdamState, DenseNet, adam_step, backward, forward, load_arrays, net_arrays, net_from_arrays, save_arrays

log = logging.getLogger(__name__)

VARIANTS = ("HCRL1", "HCRL2", "VaDE", "VAE")
OBSERVATIONS = ("gaussian", "bernoulli")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    D: int
    J: int = 2
    L: int = 2
    gamma: float = 1.0
    alpha: tuple | None = None
    delta: float = 0.01
    t_grow: int = 5
    t_lock: int = 3
    R: int = 1
    variant: str = "HCRL2"
    observation: str = "gaussian"
    hidden: tuple = (64,)
    K: int = 10
    lr: float = 1e-3
    node_lr: float = 1e-2
    batch_size: int = 256
    epochs: int = 50
    pretrain_epochs: int = 10
    sweeps: int = 2
    merge_threshold: float = 0.95
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.alpha is None:
            self.alpha = (1.0,) * self.L
        self.alpha = tuple(float(a) for a in self.alpha)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.observation not in OBSERVATIONS:
            raise ValueError(f"observation must be one of {OBSERVATIONS}")
        if self.L < 1 or self.D < 1 or self.J < 1 or self.R < 1 or self.K < 1:
            raise ValueError("L, D, J, R and K must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if len(self.alpha) != self.L or min(self.alpha) <= 0:
            raise ValueError("alpha needs L positive entries")
        if self.t_grow < 1 or self.t_lock < 0 or self.sweeps < 1 or self.batch_size < 1:
            raise ValueError("schedule constants out of range")

    @property
    def hierarchical(self):
        return self.variant in ("HCRL1", "HCRL2")

    def to_dict(self):
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentPosterior:
    mu: np.ndarray
    sigma2: np.ndarray


@dataclass
class LevelProportionPosterior:
    mu_eta: np.ndarray | None
    sigma2_eta: np.ndarray | None
    alpha_tilde: np.ndarray


class DivergenceError(FloatingPointError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class BatchResult:
    elbo: float
    breakdown: dict
    grads: dict = field(default_factory=dict)
    state: object = None


class HcrlModel:
    def __init__(self, config):
        self.config = config
        c = config
        streams = np.random.SeedSequence(c.seed).spawn(4)
        rng_z, rng_dec, rng_eta, rng_train = (np.random.default_rng(s) for s in streams)
        out_dim = 2 * c.D if c.observation == "gaussian" else c.D
        self.encoder_z = DenseNet.init([c.D, *c.hidden, 2 * c.J], rng_z)
        self.decoder = DenseNet.init([c.J, *c.hidden, out_dim], rng_dec)
        self.encoder_eta = DenseNet.init([c.D, *c.hidden, 2 * c.L], rng_eta) if c.variant == "HCRL2" else None
        self.tree = H.Hierarchy.chain(c.L, c.J, c.gamma) if c.hierarchical else None
        self.alpha = np.array(c.alpha, dtype=np.float64)
        self.alpha_global = self.alpha.copy() if c.variant == "HCRL1" else None
        self.mix_logits = np.zeros(c.K) if c.variant == "VaDE" else None
        self.mix_mu = np.zeros((c.K, c.J)) if c.variant == "VaDE" else None
        self.mix_log_sigma2 = np.zeros((c.K, c.J)) if c.variant == "VaDE" else None
        self.rng = rng_train
        self.opt = {name: AdamState.for_params(self._net(name).params(), lr=c.lr) for name in self.net_names()}
        self.node_opt = {}
        self.mix_opt = None
        self.epoch = 0
        self.lock = 0
        self.pretrained = False

    # -- parameter bookkeeping ----------------------------------------------------
    def net_names(self):
        names = ["encoder_z", "decoder"]
        if self.encoder_eta is not None:
            names.insert(1, "encoder_eta")
        return names

    def _net(self, name):
        return getattr(self, name)

    @property
    def mixture(self):
        logits = self.mix_logits - self.mix_logits.max()
        kappa = np.exp(logits) / np.exp(logits).sum()
        return V.FlatMixture(kappa, self.mix_mu, np.exp(self.mix_log_sigma2))

    @property
    def mixture_frozen(self):
        # a single component adds nothing a plain N(0, I) prior does not already give
        return self.config.K == 1


# -- encode / decode ----------------------------------------------------------------

def reparameterize(mu, sigma2, noise):
    """z = mu + sqrt(sigma2) * noise."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise ValueError("negative variance")
    return mu + np.sqrt(sigma2) * np.asarray(noise, dtype=np.float64)


def _split_heads(out, m):
    return out[..., :m], out[..., m:]


def encode(model, X):
    """Latent posterior and level-proportion posterior for each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    c = model.config
    out, _ = forward(model.encoder_z, X)
    mu_z, ls2z = _split_heads(out, c.J)
    latent = LatentPosterior(mu_z, np.exp(ls2z))
    if c.variant == "HCRL2":
        out_eta, _ = forward(model.encoder_eta, X)
        mu_eta, ls2eta = _split_heads(out_eta, c.L)
        s2eta = np.exp(ls2eta)
        level = LevelProportionPosterior(mu_eta, s2eta, V.laplace_alpha(mu_eta, s2eta))
    elif c.variant == "HCRL1":
        level = LevelProportionPosterior(None, None, model.alpha_global)
    else:
        level = None
    return latent, level


def decode(model, z):
    """Observation parameters: (mean, variance) for gaussian, probabilities for bernoulli."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    out, _ = forward(model.decoder, z)
    if model.config.observation == "gaussian":
        m, lv = _split_heads(out, model.config.D)
        return m, np.exp(lv)
    return 1.0 / (1.0 + np.exp(-out))


def _log_lik_and_grad(observation, X, out):
    """Per-row log p(x | decoder output) and its gradient w.r.t. the output."""
    if observation == "gaussian":
        D = X.shape[1]
        m, lv = out[:, :D], out[:, D:]
        r = X - m
        inv = np.exp(-lv)
        ll = -0.5 * np.sum(V.LOG2PI + lv + r * r * inv, axis=1)
        return ll, np.concatenate([r * inv, -0.5 + 0.5 * r * r * inv], axis=1)
    sp = np.logaddexp(0.0, out)
    ll = np.sum(X * out - sp, axis=1)
    return ll, X - 1.0 / (1.0 + np.exp(-out))


def recon_log_lik(model, X, z):
    out, _ = forward(model.decoder, z)
    return _log_lik_and_grad(model.config.observation, X, out)[0]


# -- E-step ------------------------------------------------------------------------

def e_step(model, X, latent=None, level=None):
    """Per-instance path and level posteriors for the rows of X."""
    c = model.config
    if latent is None or (level is None and c.variant == "HCRL2"):
        latent, level = encode(model, X)
    if c.variant == "HCRL1":
        level = LevelProportionPosterior(None, None, model.alpha_global)
    arr = model.tree.arrays()
    S, omega = V.e_step_sweeps(arr, latent.mu, latent.sigma2, level.alpha_tilde, c.sweeps)
    return V.VariationalState(latent.mu, latent.sigma2, level.alpha_tilde, omega, S, level.mu_eta, level.sigma2_eta)


# -- objective + gradients ------------------------------------------------------------

def batch_objective(model, X, noise, state=None, scale=1.0, need_grad=True, prior="model"):
    """Batch ELBO, its breakdown and gradients for every parameter group.

    ``noise`` is a standard-normal array (R, B, J).  Path / level posteriors
    (or flat responsibilities) come from ``state`` when given, else from a
    fresh E-step; either way they are held fixed for the gradients.
    ``prior="vae"`` swaps the model prior for N(0, I) (used in warm-up).
    """
    c = model.config
    X = np.asarray(X, dtype=np.float64)
    B = X.shape[0]
    out_z, tape_z = forward(model.encoder_z, X)
    mu_z, ls2z = _split_heads(out_z, c.J)
    s2z = np.exp(ls2z)
    sd = np.exp(0.5 * ls2z)
    noise = np.asarray(noise, dtype=np.float64)
    R = noise.shape[0]
    Z = (mu_z[None] + sd[None] * noise).reshape(R * B, c.J)
    out_x, tape_x = forward(model.decoder, Z)
    ll, g_out = _log_lik_and_grad(c.observation, np.tile(X, (R, 1)), out_x)
    recon = ll.reshape(R, B).mean(axis=0)
    grads = {}
    variant = "VAE" if prior == "vae" else c.variant

    if variant in ("HCRL1", "HCRL2"):
        tape_eta = None
        if variant == "HCRL2":
            out_eta, tape_eta = forward(model.encoder_eta, X)
            mu_eta, ls2eta = _split_heads(out_eta, c.L)
            at = V.laplace_alpha(mu_eta, np.exp(ls2eta))
        else:
            mu_eta = ls2eta = None
            at = model.alpha_global
        if state is None:
            arr = model.tree.arrays()
            S, omega = V.e_step_sweeps(arr, mu_z, s2z, at, c.sweeps)
            state = V.VariationalState(mu_z, s2z, at, omega, S,
                                       mu_eta, None if ls2eta is None else np.exp(ls2eta))
        else:
            state = V.VariationalState(mu_z, s2z, at, state.omega, state.S,
                                       mu_eta, None if ls2eta is None else np.exp(ls2eta))
        arr = model.tree.arrays()
        elbo, breakdown = V.elbo_hcrl(arr, state, recon, model.alpha, c.gamma, scale)
        if need_grad:
            g = V.elbo_hcrl_grad(arr, state, model.alpha, c.gamma, scale)
            d_mu, d_ls2 = g["mu_z"], g["log_sigma2_z"]
            grads["node_mu"] = g["node_mu"]
            grads["node_log_sigma2"] = g["node_log_sigma2"]
            grads["node_log_a"] = g["node_log_a"]
            grads["node_log_b"] = g["node_log_b"]
            if variant == "HCRL2":
                dm, dl = V.laplace_alpha_grad(mu_eta, ls2eta, g["alpha_tilde"])
                grads["encoder_eta"], _ = backward(model.encoder_eta, tape_eta, np.concatenate([dm, dl], axis=1))
    elif variant == "VaDE":
        mix = model.mixture
        if state is None:
            resp = V.vade_responsibilities(mix, Z[:B])
        else:
            resp = state
        state = resp
        elbo, breakdown = V.elbo_vade(mix, mu_z, s2z, resp, recon)
        if need_grad:
            g = V.elbo_vade_grad(mix, mu_z, s2z, resp)
            d_mu, d_ls2 = g["mu_z"], g["log_sigma2_z"]
            if not model.mixture_frozen:
                grads["mix_logits"] = g["logits"]
                grads["mix_mu"] = g["mix_mu"]
                grads["mix_log_sigma2"] = g["mix_log_sigma2"]
    else:
        elbo, breakdown = V.elbo_vae(mu_z, s2z, recon)
        if need_grad:
            d_mu = -mu_z
            d_ls2 = 0.5 * (1.0 - s2z)

    if need_grad:
        grads["decoder"], gZ = backward(model.decoder, tape_x, g_out / R)
        gZ = gZ.reshape(R, B, c.J)
        d_mu = d_mu + gZ.sum(axis=0)
        d_ls2 = d_ls2 + (gZ * noise).sum(axis=0) * 0.5 * sd
        grads["encoder_z"], _ = backward(model.encoder_z, tape_z, np.concatenate([d_mu, d_ls2], axis=1))
    return BatchResult(elbo, breakdown, grads, state)


def elbo_per_instance(model, X, noise):
    """Per-instance ELBO for the rows of X (dataset-level terms spread over the rows)."""
    c = model.config
    X = np.asarray(X, dtype=np.float64)
    res = batch_objective(model, X, noise, need_grad=False)
    latent, level = encode(model, X)
    R = noise.shape[0]
    Z = (latent.mu[None] + np.sqrt(latent.sigma2)[None] * noise).reshape(R * len(X), c.J)
    recon = recon_log_lik(model, np.tile(X, (R, 1)), Z).reshape(R, len(X)).mean(axis=0)
    if c.hierarchical:
        return V.elbo_hcrl_per_instance(model.tree.arrays(), res.state, recon, model.alpha, len(X), c.gamma)
    if c.variant == "VaDE":
        terms = V.vade_instance_terms(model.mixture, latent.mu, latent.sigma2, res.state, recon)
        return sum(terms.values())
    kl = 0.5 * np.sum(latent.mu**2 + latent.sigma2 - 1.0 - np.log(latent.sigma2), axis=1)
    return recon - kl


# -- flat parameter views (gradient checks, tests) -------------------------------------

def param_groups(model):
    """Names of the parameter groups that receive gradients."""
    c = model.config
    groups = list(model.net_names())
    if c.hierarchical:
        groups += ["node_mu", "node_log_sigma2", "node_log_a", "node_log_b"]
    if c.variant == "VaDE" and not model.mixture_frozen:
        groups += ["mix_logits", "mix_mu", "mix_log_sigma2"]
    return groups


def get_group(model, name):
    if name in ("encoder_z", "encoder_eta", "decoder"):
        return np.concatenate([p.ravel() for p in model._net(name).params()])
    if name.startswith("node_"):
        arr = model.tree.arrays()
        return {
            "node_mu": arr.mu,
            "node_log_sigma2": np.log(arr.sigma2),
            "node_log_a": np.log(arr.a),
            "node_log_b": np.log(arr.b),
        }[name].ravel().copy()
    return {"mix_logits": model.mix_logits, "mix_mu": model.mix_mu,
            "mix_log_sigma2": model.mix_log_sigma2}[name].ravel().copy()


def set_group(model, name, flat):
    flat = np.asarray(flat, dtype=np.float64)
    if name in ("encoder_z", "encoder_eta", "decoder"):
        pos = 0
        for p in model._net(name).params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        return
    if name.startswith("node_"):
        nodes = model.tree.arrays().nodes
        J = model.config.J
        for i, node in enumerate(nodes):
            if name == "node_mu":
                node.mu = flat[i * J:(i + 1) * J].copy()
            elif name == "node_log_sigma2":
                node.sigma2 = np.exp(flat[i * J:(i + 1) * J])
            elif name == "node_log_a":
                node.a = float(np.exp(flat[i]))
            else:
                node.b = float(np.exp(flat[i]))
        return
    getattr(model, name)[...] = flat.reshape(getattr(model, name).shape)


def flat_grad(result, name):
    g = result.grads[name]
    if isinstance(g, list):
        return np.concatenate([x.ravel() for x in g])
    return np.asarray(g).ravel()


# -- updates ----------------------------------------------------------------------------

def apply_gradients(model, grads, groups=None):
    """One Adam ascent step on every group present in ``grads``."""
    c = model.config
    for name in model.net_names():
        if name in grads and (groups is None or name in groups):
            adam_step(model._net(name).params(), [-g for g in grads[name]], model.opt[name])
    if "node_mu" in grads and (groups is None or "node_mu" in groups):
        nodes = model.tree.arrays().nodes
        live = {n.uid for n in nodes}
        for uid in list(model.node_opt):
            if uid not in live:
                del model.node_opt[uid]
        for i, node in enumerate(nodes):
            ls2 = np.log(node.sigma2)
            lab = np.log([node.a, node.b])
            st = model.node_opt.get(node.uid)
            if st is None:
                st = model.node_opt[node.uid] = AdamState.for_params([node.mu, ls2, lab], lr=c.node_lr)
            g = [-grads["node_mu"][i], -grads["node_log_sigma2"][i],
                 -np.array([grads["node_log_a"][i], grads["node_log_b"][i]])]
            adam_step([node.mu, ls2, lab], g, st)
            node.sigma2 = np.exp(np.clip(ls2, -18.0, 18.0))
            node.a, node.b = (float(x) for x in np.exp(np.clip(lab, -18.0, 18.0)))
    if "mix_logits" in grads and (groups is None or "mix_logits" in groups):
        params = [model.mix_logits, model.mix_mu, model.mix_log_sigma2]
        if model.mix_opt is None:
            model.mix_opt = AdamState.for_params(params, lr=c.node_lr)
        adam_step(params, [-grads["mix_logits"], -grads["mix_mu"], -grads["mix_log_sigma2"]], model.mix_opt)
        np.clip(model.mix_log_sigma2, -18.0, 18.0, out=model.mix_log_sigma2)


# -- training -----------------------------------------------------------------------

def _as_matrix(data):
    X = getattr(data, "X", data)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (N, D) matrix")
    return X


def _batches(model, N):
    perm = model.rng.permutation(N)
    bs = model.config.batch_size
    return [perm[i:i + bs] for i in range(0, N, bs)]


def _noise(model, B):
    return model.rng.standard_normal((model.config.R, B, model.config.J))


def _check_finite(model, value, breakdown, where):
    if not np.isfinite(value):
        raise DivergenceError(
            f"non-finite ELBO during {where} at epoch {model.epoch}",
            {"epoch": model.epoch, "where": where, "breakdown": breakdown},
        )


def pretrain(model, X):
    """Plain-VAE warm-up epochs on the encoder_z / decoder pair."""
    N = X.shape[0]
    for _ in range(model.config.pretrain_epochs):
        for idx in _batches(model, N):
            res = batch_objective(model, X[idx], _noise(model, len(idx)), prior="vae")
            _check_finite(model, res.elbo, res.breakdown, "pretraining")
            apply_gradients(model, res.grads, groups=("encoder_z", "decoder"))
    model.pretrained = True


def reconstruction_error(model, X):
    """Deterministic reconstruction error at the posterior mean.

    Gaussian: squared error summed over features; bernoulli: summed
    cross-entropy.  Averaged over instances.
    """
    X = _as_matrix(X)
    latent, _ = encode(model, X)
    out, _ = forward(model.decoder, latent.mu)
    if model.config.observation == "gaussian":
        m = out[:, :model.config.D]
        return float(np.mean(np.sum((X - m) ** 2, axis=1)))
    return float(np.mean(np.sum(np.logaddexp(0.0, out) - X * out, axis=1)))


def _lloyd(points, weights, centers, iters):
    """Weighted k-means refinement from the given starting centres."""
    centers = centers.copy()
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
        near = d2.argmin(axis=1)
        for k in range(len(centers)):
            w = weights * (near == k)
            if w.sum() > 0:
                centers[k] = w @ points / w.sum()
    return centers


def _grow_proposal(model, X, S_all, lloyd_iters=5):
    """Mean for a new branch: a poorly explained instance on the grown path, then refined.

    An instance is drawn with probability proportional to its mass on the
    path times its misfit at the levels the new chain will occupy (expected
    negative log density under its assigned nodes there, shifted to be
    nonnegative).  Its embedding, together with the means of the grown
    node's existing children, seeds a short weighted k-means over the
    path's embeddings; the new branch takes the refined seed centre.
    """
    full = model.tree.full_paths()
    arr = model.tree.arrays()
    latent, _ = encode(model, X)
    G = V.gaussian_cross_table(latent.mu, latent.sigma2, arr.mu, arr.sigma2)  # (N, M)

    def propose(path):
        cols = [k for k, p in enumerate(full) if p[:len(path)] == path]
        mass = S_all[:, cols].sum(axis=1)
        levels = arr.path_nodes[:, len(path):]  # (K, levels below the path)
        fit = np.einsum("nk,nkl->n", S_all, G[:, levels])
        w = mass * (fit.max() - fit)
        if w.sum() <= 0:
            w = mass
        n = int(model.rng.choice(len(w), p=w / w.sum()))
        seeds = [c.mu for c in model.tree.node(path).children] + [latent.mu[n]]
        return _lloyd(latent.mu, mass, np.array(seeds), lloyd_iters)[-1]

    return propose


def _structure_step(model, S_all, X):
    """GROW / PRUNE / MERGE checks for one epoch; returns the name of the fired op."""
    c = model.config
    tree = model.tree
    full_mass = S_all.sum(axis=0)
    op = ""
    if model.epoch % c.t_grow == 0:
        _, changed = H.grow(tree, H.path_mass_map(tree, full_mass), model.rng, _grow_proposal(model, X, S_all))
        op = "grow" if changed else ""
    if not op and model.lock >= c.t_lock:
        _, changed = H.prune(tree, H.path_mass_map(tree, full_mass), c.delta, model.rng)
        if changed:
            op = "prune"
        else:
            _, changed = H.merge(tree, S_all, c.merge_threshold)
            op = "merge" if changed else ""
    model.lock = 0 if op else model.lock + 1
    return op


def _history_row(model, elbo_sum, terms, N, op, X):
    row = {"epoch": model.epoch, "elbo": elbo_sum / N}
    for k, v in terms.items():
        row[k] = v / N
    if model.tree is not None:
        row["n_nodes"] = model.tree.n_nodes
        row["n_paths"] = len(model.tree.full_paths())
    else:
        row["n_nodes"] = model.config.K if model.config.variant == "VaDE" else 1
        row["n_paths"] = row["n_nodes"]
    row["op"] = op
    row["recon_error"] = reconstruction_error(model, X)
    return row


def train(model, data, epochs=None, callback=None):
    """Tree-structured training with periodic GROW and locked PRUNE / MERGE checks.

    Returns ``(model, history)``; history holds one dict per epoch.
    """
    c = model.config
    if not c.hierarchical:
        return train_vade(model, data, epochs, callback)
    X = _as_matrix(data)
    N = X.shape[0]
    epochs = c.epochs if epochs is None else epochs
    history = []
    if epochs <= 0:
        return model, history
    if not model.pretrained:
        pretrain(model, X)
    for _ in range(epochs):
        model.epoch += 1
        K = len(model.tree.full_paths())
        S_all = np.zeros((N, K))
        omega_all = np.zeros((N, c.L))
        elbo_sum, terms = 0.0, dict.fromkeys(V.HCRL_TERMS, 0.0)
        for idx in _batches(model, N):
            res = batch_objective(model, X[idx], _noise(model, len(idx)), scale=len(idx) / N)
            _check_finite(model, res.elbo, res.breakdown, "training")
            apply_gradients(model, res.grads)
            S_all[idx] = res.state.S
            omega_all[idx] = res.state.omega
            elbo_sum += res.elbo
            for k in terms:
                terms[k] += res.breakdown[k]
        if c.variant == "HCRL1":
            model.alpha_global = model.alpha + omega_all.sum(axis=0)
        op = _structure_step(model, S_all, X)
        row = _history_row(model, elbo_sum, terms, N, op, X)
        history.append(row)
        log.info("epoch %d elbo %.4f paths %d %s", model.epoch, row["elbo"], row["n_paths"], op)
        if callback is not None:
            callback(model, row)
    return model, history


def init_mixture(model, X):
    """k-means on the warm-started posterior means seeds the flat mixture."""
    c = model.config
    latent, _ = encode(model, X)
    seed = int(model.rng.integers(2**31 - 1))
    centers, labels = kmeans2(latent.mu, c.K, minit="++", seed=seed)
    counts = np.bincount(labels, minlength=c.K).astype(np.float64) + 1.0
    var = np.ones((c.K, c.J))
    for k in range(c.K):
        members = latent.mu[labels == k]
        if len(members) > 1:
            var[k] = np.maximum(members.var(axis=0), 1e-3)
    model.mix_logits[...] = np.log(counts / counts.sum())
    model.mix_mu[...] = centers
    model.mix_log_sigma2[...] = np.log(var)


def train_vade(model, data, epochs=None, callback=None):
    """Flat mixture (VaDE) or plain VAE training; no structure search."""
    c = model.config
    if c.hierarchical:
        raise ValueError("train_vade needs a flat variant")
    X = _as_matrix(data)
    N = X.shape[0]
    epochs = c.epochs if epochs is None else epochs
    history = []
    if epochs <= 0:
        return model, history
    if not model.pretrained:
        pretrain(model, X)
        if c.variant == "VaDE" and not model.mixture_frozen:
            init_mixture(model, X)
    names = V.VADE_TERMS if c.variant == "VaDE" else ("recon", "kl")
    for _ in range(epochs):
        model.epoch += 1
        elbo_sum, terms = 0.0, dict.fromkeys(names, 0.0)
        for idx in _batches(model, N):
            res = batch_objective(model, X[idx], _noise(model, len(idx)))
            _check_finite(model, res.elbo, res.breakdown, "training")
            apply_gradients(model, res.grads)
            elbo_sum += res.elbo
            for k in terms:
                terms[k] += res.breakdown[k]
        row = _history_row(model, elbo_sum, terms, N, "", X)
        history.append(row)
        log.info("epoch %d elbo %.4f", model.epoch, row["elbo"])
        if callback is not None:
            callback(model, row)
    return model, history


# -- checkpoints --------------------------------------------------------------------

def _adam_arrays(prefix, st, out, meta):
    for i, (m, v) in enumerate(zip(st.m, st.v)):
        out[f"{prefix}.m{i}"] = m
        out[f"{prefix}.v{i}"] = v
    meta[prefix] = {"t": st.t, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2,
                    "eps": st.eps, "n": len(st.m)}


def _adam_from(prefix, arrays, meta):
    h = meta[prefix]
    return AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"],
                     m=[arrays[f"{prefix}.m{i}"] for i in range(h["n"])],
                     v=[arrays[f"{prefix}.v{i}"] for i in range(h["n"])], t=h["t"])


def save_model(model, path):
    """Write networks, hierarchy, optimiser and RNG state to one container."""
    arrays, adam = {}, {}
    for name in model.net_names():
        arrays.update(net_arrays(model._net(name), name))
        _adam_arrays(f"opt.{name}", model.opt[name], arrays, adam)
    for uid in sorted(model.node_opt):
        _adam_arrays(f"nodeopt.{uid}", model.node_opt[uid], arrays, adam)
    if model.alpha_global is not None:
        arrays["alpha_global"] = model.alpha_global
    if model.mix_logits is not None:
        arrays["mix_logits"] = model.mix_logits
        arrays["mix_mu"] = model.mix_mu
        arrays["mix_log_sigma2"] = model.mix_log_sigma2
        if model.mix_opt is not None:
            _adam_arrays("mixopt", model.mix_opt, arrays, adam)
    meta = {
        "kind": "hcrl-model",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "activations": {n: [l.activation for l in model._net(n).layers] for n in model.net_names()},
        "tree": None if model.tree is None else H.tree_to_dict(model.tree),
        "epoch": model.epoch,
        "lock": model.lock,
        "pretrained": model.pretrained,
        "rng": model.rng.bit_generator.state,
        "adam": adam,
        "node_opt": sorted(model.node_opt),
    }
    save_arrays(path, arrays, meta)


def load_model(path):
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "hcrl-model" or meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a compatible model checkpoint")
    config = ModelConfig.from_dict(meta["config"])
    model = HcrlModel(config)
    for name in model.net_names():
        setattr(model, name, net_from_arrays(arrays, name, meta["activations"][name]))
        model.opt[name] = _adam_from(f"opt.{name}", arrays, meta["adam"])
    model.node_opt = {uid: _adam_from(f"nodeopt.{uid}", arrays, meta["adam"]) for uid in meta["node_opt"]}
    if meta["tree"] is not None:
        model.tree = H.tree_from_dict(meta["tree"])
    if "alpha_global" in arrays:
        model.alpha_global = arrays["alpha_global"]
    if "mix_logits" in arrays:
        model.mix_logits = arrays["mix_logits"]
        model.mix_mu = arrays["mix_mu"]
        model.mix_log_sigma2 = arrays["mix_log_sigma2"]
        if "mixopt" in meta["adam"]:
            model.mix_opt = _adam_from("mixopt", arrays, meta["adam"])
    model.epoch = meta["epoch"]
    model.lock = meta["lock"]
    model.pretrained = meta["pretrained"]
    model.rng.bit_generator.state = meta["rng"]
    return model


def config_json(config):
    return json.dumps(config.to_dict(), indent=1, sort_keys=True)
