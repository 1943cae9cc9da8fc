"""Acceptance criteria 1-10, each run at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together in the
terminal summary (see conftest.py).  Nothing here is skipped: a criterion
that cannot be met in this environment fails with the reason attached.
"""
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hcrl import cli
from hcrl import data as Da
from hcrl import gradcheck as GC
from hcrl import metrics as Me
from hcrl import model as M
from hcrl import variational as V

from conftest import two_path_tree
from oracles import brute_force_elbo

RESULTS = []
HERE = Path(__file__).resolve().parent


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _trainer(model):
    return M.train if model.config.hierarchical else M.train_vade


# 1 -------------------------------------------------------------------------------

def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    report = GC.run_suite(("HCRL1", "HCRL2", "VaDE"), D=8, J=2, L=2, N=32, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(max(g.values()) for g in report.values())
    n_groups = sum(len(g) for g in report.values())
    record(1, worst <= 1e-4 and elapsed < 60,
           f"worst relative error {worst:.2e} over {n_groups} groups (tol 1e-4), {elapsed:.1f}s (limit 60s)")


# 2 -------------------------------------------------------------------------------

def test_c02_elbo_oracle():
    model = M.HcrlModel(M.ModelConfig(D=2, J=2, L=2, hidden=(4,), gamma=1.4, alpha=(1.3, 0.6), seed=2))
    model.tree = two_path_tree(J=2, seed=5, gamma=1.4)
    X = np.random.default_rng(1).normal(size=(3, 2))
    noise = np.random.default_rng(2).standard_normal((1, 3, 2))
    res = M.batch_objective(model, X, noise, need_grad=False)
    st = res.state
    assert st.S.shape == (3, 2) and st.omega.shape == (3, 2)
    latent, _ = M.encode(model, X)
    recon = M.recon_log_lik(model, X, latent.mu + np.sqrt(latent.sigma2) * noise[0])
    oracle = brute_force_elbo(model.tree, st.mu_z, st.sigma2_z, st.S, st.omega, st.alpha_tilde,
                              model.alpha, recon, 1.4)
    err = abs(res.elbo - oracle)
    record(2, err <= 1e-8, f"|elbo_hcrl - enumeration| = {err:.2e} (tol 1e-8)")


# 3 -------------------------------------------------------------------------------

def test_c03_trivial_reductions():
    X = np.random.default_rng(3).normal(size=(16, 5))
    noise = np.random.default_rng(4).standard_normal((1, 16, 2))
    kw = dict(D=5, J=2, hidden=(6,), seed=7)
    vae = M.batch_objective(M.HcrlModel(M.ModelConfig(variant="VAE", **kw)), X, noise).elbo
    errs = {}
    for variant in ("HCRL1", "HCRL2"):
        m = M.HcrlModel(M.ModelConfig(variant=variant, L=1, **kw))
        errs[f"{variant} depth 1"] = abs(M.batch_objective(m, X, noise).elbo - vae)
    m = M.HcrlModel(M.ModelConfig(variant="VaDE", K=1, **kw))
    errs["VaDE K=1"] = abs(M.batch_objective(m, X, noise).elbo - vae)
    worst = max(errs.values())
    record(3, worst <= 1e-10, ", ".join(f"{k}: {v:.1e}" for k, v in errs.items()) + " (tol 1e-10)")


# 4 -------------------------------------------------------------------------------

def test_c04_laplace_bridge():
    e2 = np.max(np.abs(V.laplace_alpha(np.zeros(2), np.ones(2)) - 0.5))
    e3 = np.max(np.abs(V.laplace_alpha(np.zeros(3), np.ones(3)) - 2.0 / 3.0))
    record(4, max(e2, e3) <= 1e-12, f"L=2 error {e2:.1e}, L=3 error {e3:.1e} (tol 1e-12)")


# 5 -------------------------------------------------------------------------------

def test_c05_bound_ordering():
    ds = Da.gen_synthetic(Da.SyntheticSpec(depth=2, branching=3, separation=6.0, N=600, J_ambient=8, seed=3))
    X = Da.standardize(ds.X)
    lines, ok = [], True
    for variant in ("HCRL1", "HCRL2", "VaDE", "VAE"):
        m = M.HcrlModel(M.ModelConfig(D=8, J=2, L=2, K=3, hidden=(32,), variant=variant, batch_size=64,
                                      epochs=30, pretrain_epochs=10, seed=0))
        _trainer(m)(m, X)
        elbo = M.elbo_per_instance(m, X, np.random.default_rng(5).standard_normal((1, len(X), 2)))
        per, _ = Me.nll_estimate(m, X, 100)
        gap = -per - elbo
        se = gap.std(ddof=1) / math.sqrt(len(gap))
        good = gap.mean() >= -3.0 * se
        ok &= good
        lines.append(f"{variant} logp-elbo {gap.mean():.3f} (3SE {3 * se:.3f})")
    record(5, ok, "; ".join(lines))


# 6 -------------------------------------------------------------------------------

C6_SPEC = dict(depth=2, branching=3, separation=6.0, N=3000, J_ambient=8)
C6_CONFIG = dict(D=8, J=2, L=2, variant="HCRL2", hidden=(32,), t_grow=5, t_lock=3, delta=0.01, epochs=99)


def test_c06_synthetic_recovery():
    passed, details, slowest = 0, [], 0.0
    for seed in range(10):
        ds = Da.gen_synthetic(Da.SyntheticSpec(seed=seed, **C6_SPEC))
        X = Da.standardize(ds.X)
        t0 = time.perf_counter()
        m = M.HcrlModel(M.ModelConfig(seed=seed, **C6_CONFIG))
        M.train(m, X)
        slowest = max(slowest, time.perf_counter() - t0)
        leaf = Me.predict_levels(m, X)[:, 1]
        f = Me.hierarchical_fscore(leaf, ds.labels[:, 1])
        k = len(m.tree.full_paths())
        passed += abs(k - 3) <= 1 and f >= 0.9
        details.append(f"{k}/{f:.2f}")
    record(6, passed >= 8 and slowest < 600,
           f"{passed}/10 seeds with 3+-1 paths and leaf F >= 0.9 (need 8); paths/F per seed "
           f"{' '.join(details)}; slowest seed {slowest:.0f}s (limit 600s)")


# 7 -------------------------------------------------------------------------------

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte")


def _mnist_dir():
    root = os.environ.get("HCRL_MNIST_DIR")
    if not root:
        return None
    root = Path(root)
    return root if all((root / f).exists() for f in MNIST_FILES) else None


def test_c07_mnist_nll_ordering():
    root = _mnist_dir()
    if root is None:
        record(7, False, "MNIST IDX files unavailable (set HCRL_MNIST_DIR to a directory holding "
                         f"{', '.join(MNIST_FILES)}); the protocol cannot run offline")
    train = Da.load_idx(root / MNIST_FILES[0], root / MNIST_FILES[1])
    test = Da.load_idx(root / MNIST_FILES[2])
    passed, details, slowest = 0, [], 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        Xtr = train.X[rng.choice(train.N, 10_000, replace=False)]
        Xte = test.X[rng.choice(test.N, 2_000, replace=False)]
        t0 = time.perf_counter()
        nll = {}
        for variant, extra in (("HCRL2", dict(L=3)), ("VaDE", dict(K=10)), ("VAE", {})):
            m = M.HcrlModel(M.ModelConfig(D=784, J=10, hidden=(128,), observation="bernoulli", variant=variant,
                                          batch_size=128, epochs=20, pretrain_epochs=5, seed=seed, **extra))
            _trainer(m)(m, Xtr)
            nll[variant] = Me.nll_estimate(m, Xte, 100)[1]
        slowest = max(slowest, time.perf_counter() - t0)
        passed += nll["HCRL2"] <= nll["VaDE"] <= nll["VAE"]
        details.append("/".join(f"{nll[v]:.1f}" for v in ("HCRL2", "VaDE", "VAE")))
    record(7, passed >= 7 and slowest < 1800,
           f"{passed}/10 seeds with NLL HCRL2 <= VaDE <= VAE (need 7); {' '.join(details)}; "
           f"slowest seed {slowest:.0f}s (limit 1800s)")


# 8 -------------------------------------------------------------------------------

C8_SPEC = dict(depth=3, branching=(2, 2), separation=4.0, N=3000, J_ambient=8)


def test_c08_joint_beats_pipeline():
    passed, details = 0, []
    for seed in range(10):
        ds = Da.gen_synthetic(Da.SyntheticSpec(seed=seed, **C8_SPEC))
        X = Da.standardize(ds.X)
        base = dict(D=8, J=2, hidden=(32,), epochs=99, seed=seed)
        hcrl = M.HcrlModel(M.ModelConfig(L=3, variant="HCRL2", **base))
        M.train(hcrl, X)
        # the root level is one cluster for every method, so only levels 2 and 3 are scored
        f_joint = Me.hierarchical_fscore(Me.predict_levels(hcrl, X), ds.labels, levels=[1, 2])
        vade = M.HcrlModel(M.ModelConfig(variant="VaDE", K=4, **base))
        M.train_vade(vade, X)
        latent, _ = M.encode(vade, X)
        f_pipe = Me.hierarchical_fscore(Me.recursive_kmeans(latent.mu, (2, 2), seed), ds.labels, levels=[1, 2])
        passed += f_joint >= f_pipe
        details.append(f"{f_joint:.2f}/{f_pipe:.2f}")
    record(8, passed >= 7, f"{passed}/10 seeds with HCRL2 F >= VaDE+recursive-k-means F (need 7); "
                           f"joint/pipeline per seed {' '.join(details)}")


# 9 -------------------------------------------------------------------------------

def test_c09_structure_property_suite():
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(HERE / "test_hierarchy.py"),
         "-k", "grow or prune or merge or similarity"],
        capture_output=True, text=True, cwd=HERE.parent,
    )
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(9, proc.returncode == 0 and "failed" not in summary, f"GROW/PRUNE/MERGE suite: {summary}")


# 10 ------------------------------------------------------------------------------

def test_c10_reproducibility(tmp_path, capsys):
    assert cli.main(["synth", "--n", "400", "--separation", "6", "--standardize", "--seed", "2",
                     "--out", str(tmp_path / "syn")]) == 0
    (tmp_path / "run.cfg").write_text(
        f"data = {tmp_path / 'syn' / 'data.csv'}\nvariant = HCRL2\nepochs = 12\npretrain_epochs = 2\n"
        "hidden = 16\nbatch_size = 64\nt_grow = 3\nt_lock = 2\nseed = 11\n")
    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(tmp_path / "run.cfg"), "--out", str(tmp_path / run)]) == 0
    capsys.readouterr()
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("history.csv", "checkpoint.hcrl", "tree.json")}
    record(10, all(same.values()), ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in same.items()))
