"""Evaluation: importance-sampled NLL, reconstruction error, hierarchical F-score, exports."""
from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from . import hierarchy as H
from . import variational as V
from .model import e_step, encode, recon_log_lik, reconstruction_error

__all__ = [
    "nll_estimate", "prior_log_density", "reconstruction_error", "recon_nll",
    "predict_levels", "hierarchical_fscore", "pair_counts", "recursive_kmeans",
    "export_tree", "evaluate", "write_report",
]

NLL_SEED_OFFSET = 7919  # keeps evaluation noise apart from the training stream


def _hierarchy_mixture(model):
    """Node log-weights, means and variances of the hierarchical marginal over z.

    Stick weights use their expectations a / (a + b); full-path weights are
    renormalised over the represented paths; level weights are the expected
    level proportion (prior mean for HCRL2, global posterior mean for HCRL1).
    """
    arr = model.tree.arrays()
    ev = arr.a / (arr.a + arr.b)
    log_pi = arr.on_path @ np.log(ev) + arr.left_of @ np.log1p(-ev)
    pi = np.exp(log_pi - logsumexp(log_pi))
    level_w = model.alpha_global if model.config.variant == "HCRL1" else model.alpha
    level_w = level_w / level_w.sum()
    w = np.zeros(arr.n_nodes)
    for k in range(arr.n_paths):
        for l, m in enumerate(arr.path_nodes[k]):
            w[m] += pi[k] * level_w[l]
    with np.errstate(divide="ignore"):
        return np.log(w), arr.mu, arr.sigma2


def prior_log_density(model, z):
    """log p(z) under the model's prior (rows of z)."""
    z = np.atleast_2d(z)
    c = model.config
    if c.hierarchical:
        log_w, mu, s2 = _hierarchy_mixture(model)
        return V.log_mixture_density(z, log_w, mu, s2)
    if c.variant == "VaDE":
        mix = model.mixture
        return V.log_mixture_density(z, np.log(mix.kappa), mix.mu, mix.sigma2)
    return -0.5 * np.sum(V.LOG2PI + z * z, axis=1)


def nll_estimate(model, X, samples=100, rng=None, chunk=256):
    """Importance-sampled negative log-likelihood with the encoder as proposal.

    For tree models p(z) is the plug-in mixture from ``prior_log_density``
    (expected sticks, expected level weights), not the exact marginal.
    Returns ``(per_instance_nll, mean_nll)``.
    """
    if samples < 1:
        raise ValueError("need at least one importance sample")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if rng is None:
        rng = np.random.default_rng(model.config.seed + NLL_SEED_OFFSET)
    J = model.config.J
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        xb = X[start:start + chunk]
        B = xb.shape[0]
        latent, _ = encode(model, xb)
        eps = rng.standard_normal((samples, B, J))
        z = latent.mu[None] + np.sqrt(latent.sigma2)[None] * eps
        log_q = -0.5 * np.sum(V.LOG2PI + np.log(latent.sigma2)[None] + eps * eps, axis=2)
        flat = z.reshape(samples * B, J)
        log_px = recon_log_lik(model, np.tile(xb, (samples, 1)), flat).reshape(samples, B)
        log_pz = prior_log_density(model, flat).reshape(samples, B)
        log_w = log_px + log_pz - log_q
        out[start:start + B] = -(logsumexp(log_w, axis=0) - np.log(samples))
    return out, float(out.mean())


def recon_nll(model, X):
    """Negative reconstruction log-likelihood at the posterior mean, averaged over rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    latent, _ = encode(model, X)
    return float(-np.mean(recon_log_lik(model, X, latent.mu)))


# -- clustering ----------------------------------------------------------------------

def predict_levels(model, X):
    """Per-level cluster ids (node uids) for the rows of X, root level first.

    At level l the prediction is the level-l node receiving the most
    posterior mass, sum over full paths through it of S times omega_l.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    c = model.config
    if not c.hierarchical:
        latent, _ = encode(model, X)
        if c.variant == "VaDE":
            resp = V.vade_responsibilities(model.mixture, latent.mu)
            return np.stack([np.zeros(len(X), dtype=np.int64), resp.argmax(axis=1)], axis=1)
        return np.zeros((len(X), 1), dtype=np.int64)
    state = e_step(model, X)
    arr = model.tree.arrays()
    S = state.S / state.S.sum(axis=1, keepdims=True)
    uids = np.array([n.uid for n in arr.nodes])
    pred = np.zeros((len(X), c.L), dtype=np.int64)
    for l in range(c.L):
        cols = arr.path_nodes[:, l]
        nodes = np.unique(cols)
        onehot = (cols[:, None] == nodes[None, :]).astype(np.float64)  # (K, nodes at l)
        mass = (S @ onehot) * state.omega[:, l:l + 1]
        pred[:, l] = uids[nodes[mass.argmax(axis=1)]]
    return pred


def _pairs(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return int(np.sum(counts * (counts - 1) // 2))


def pair_counts(pred, truth):
    """(same-cluster-and-same-label, same-cluster, same-label) pair counts for one level."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("prediction and truth must be aligned 1-d vectors")
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return _pairs(table), _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))


def hierarchical_fscore(predicted, truth, levels=None):
    """Pairwise F-score with pair counts pooled over the chosen levels.

    ``predicted`` and ``truth`` are (N, levels) arrays (1-d means one level).
    Returns 0 with a warning when there are no positive pairs.
    """
    P = np.asarray(predicted)
    T = np.asarray(truth)
    if P.ndim == 1:
        P = P[:, None]
    if T.ndim == 1:
        T = T[:, None]
    if P.shape != T.shape:
        raise ValueError(f"prediction shape {P.shape} does not match truth shape {T.shape}")
    levels = range(P.shape[1]) if levels is None else levels
    tp = same_pred = same_truth = 0
    for l in levels:
        a, b, c = pair_counts(P[:, l], T[:, l])
        tp += a
        same_pred += b
        same_truth += c
    if tp == 0:
        warnings.warn("no positive pairs; F-score defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    precision = tp / same_pred
    recall = tp / same_truth
    return float(2 * precision * recall / (precision + recall))


def recursive_kmeans(Z, branching, seed=0):
    """Top-down k-means labels, root level first (the pipeline baseline)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    rng = np.random.default_rng(seed)
    labels = np.zeros((Z.shape[0], len(branching) + 1), dtype=np.int64)
    for l, b in enumerate(branching):
        nxt = 0
        for parent in np.unique(labels[:, l]):
            idx = np.flatnonzero(labels[:, l] == parent)
            if len(idx) <= b:
                sub = np.arange(len(idx))
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    _, sub = kmeans2(Z[idx], b, minit="++", seed=int(rng.integers(2**31 - 1)))
            labels[idx, l + 1] = nxt + sub
            nxt += b
    return labels


def align_levels(pred, truth):
    """Keep the deepest common levels of a prediction and a truth table."""
    pred = np.atleast_2d(np.asarray(pred).T).T
    truth = np.atleast_2d(np.asarray(truth).T).T
    k = min(pred.shape[1], truth.shape[1])
    return pred[:, -k:], truth[:, -k:]


# -- exports / reports -----------------------------------------------------------------

def _annotated_tree(model, X=None):
    tree = model.tree.copy()
    if X is not None:
        S = e_step(model, X).S
        S = S / S.sum(axis=1, keepdims=True)
        masses = H.node_masses(tree, S.sum(axis=0))
        for _, node in tree.iter_nodes():
            node.mass = masses[node.uid]
    return tree


def export_tree(model, fmt="json", X=None):
    """JSON or DOT document of the model's hierarchy, with node masses when X is given."""
    if model.tree is None:
        raise ValueError("flat models have no hierarchy to export")
    tree = _annotated_tree(model, X)
    if fmt == "json":
        return H.tree_to_json(tree)
    if fmt == "dot":
        return H.tree_to_dot(tree)
    raise ValueError(f"unknown export format {fmt!r}")


def evaluate(model, dataset, nll_samples=100):
    """Metrics dict: NLL (importance sampled), reconstruction error, F-score if labelled."""
    X = getattr(dataset, "X", dataset)
    if X.shape[1] != model.config.D:
        raise ValueError(f"dataset has D={X.shape[1]} but the model expects D={model.config.D}")
    per, mean = nll_estimate(model, X, nll_samples)
    report = {
        "variant": model.config.variant,
        "N": int(X.shape[0]),
        "nll": mean,
        "nll_stderr": float(per.std(ddof=1) / np.sqrt(len(per))) if len(per) > 1 else 0.0,
        "nll_samples": int(nll_samples),
        "reconstruction_error": reconstruction_error(model, X),
        "reconstruction_nll": recon_nll(model, X),
    }
    labels = getattr(dataset, "labels", None)
    if labels is not None:
        p, t = align_levels(predict_levels(model, X), labels)
        report["fscore"] = hierarchical_fscore(p, t)
        report["fscore_levels"] = int(p.shape[1])
    if model.tree is not None:
        report["n_paths"] = len(model.tree.full_paths())
        report["n_nodes"] = model.tree.n_nodes
    return report


def write_report(report, json_path, csv_path):
    Path(json_path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in sorted(report):
            w.writerow([k, repr(report[k]) if isinstance(report[k], float) else report[k]])
    return json_path, csv_path
