import numpy as np
import pytest

from hcrl import gradcheck as GC
from hcrl import model as M
from hcrl import variational as V
from hcrl.data import SyntheticSpec, gen_synthetic, standardize
from hcrl.nn import forward


def small(variant="HCRL2", **kw):
    base = dict(D=4, J=2, L=2, hidden=(8,), K=3, batch_size=16, epochs=3, pretrain_epochs=1, seed=0)
    base.update(kw)
    return M.HcrlModel(M.ModelConfig(variant=variant, **base))


def data(N=40, D=4, seed=0):
    return np.random.default_rng(seed).normal(size=(N, D))


def zero_net(net):
    for p in net.params():
        p[...] = 0.0


# -- config -----------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(D=4, delta=1.5)
    with pytest.raises(ValueError):
        M.ModelConfig(D=4, L=0)
    with pytest.raises(ValueError):
        M.ModelConfig(D=4, variant="GMM")
    with pytest.raises(ValueError):
        M.ModelConfig.from_dict({"D": 3, "bogus": 1})
    cfg = M.ModelConfig(D=4, L=3)
    assert cfg.alpha == (1.0, 1.0, 1.0)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_network_shapes():
    m = small("HCRL2")
    assert m.encoder_z.n_out == 4 and m.encoder_eta.n_out == 4 and m.decoder.n_out == 8
    assert small("HCRL1").encoder_eta is None
    assert small("HCRL2", observation="bernoulli").decoder.n_out == 4


# -- encode / decode ------------------------------------------------------------------

def test_zero_encoder_gives_standard_posterior():
    m = small()
    zero_net(m.encoder_z)
    latent, _ = M.encode(m, data(3))
    assert np.array_equal(latent.mu, np.zeros((3, 2))) and np.array_equal(latent.sigma2, np.ones((3, 2)))


def test_hcrl1_shares_level_posterior():
    m = small("HCRL1")
    _, a = M.encode(m, data(1, seed=1))
    _, b = M.encode(m, data(1, seed=2))
    assert a.alpha_tilde is b.alpha_tilde


def test_encoder_matches_forward():
    m = small()
    X = data(5)
    out, _ = forward(m.encoder_z, X)
    latent, level = M.encode(m, X)
    assert np.array_equal(latent.mu, out[:, :2]) and np.array_equal(latent.sigma2, np.exp(out[:, 2:]))
    eta, _ = forward(m.encoder_eta, X)
    assert np.array_equal(level.alpha_tilde, V.laplace_alpha(eta[:, :2], np.exp(eta[:, 2:])))


def test_encode_dimension_mismatch():
    with pytest.raises(ValueError):
        M.encode(small(), np.zeros((2, 5)))


def test_reparameterize():
    mu, s2 = np.array([1.0, -2.0]), np.array([4.0, 0.25])
    assert np.array_equal(M.reparameterize(mu, s2, np.zeros(2)), mu)
    assert np.array_equal(M.reparameterize(mu, np.zeros(2), np.ones(2)), mu)
    e = np.array([0.5, -1.0])
    assert np.allclose(M.reparameterize(mu, s2, 2 * e) - mu, 2 * (M.reparameterize(mu, s2, e) - mu))
    with pytest.raises(ValueError):
        M.reparameterize(mu, -s2, e)


def test_zero_decoder_outputs():
    m = small()
    zero_net(m.decoder)
    mean, var = M.decode(m, np.zeros((2, 2)))
    assert not np.any(mean) and np.array_equal(var, np.ones((2, 4)))
    mb = small(observation="bernoulli")
    zero_net(mb.decoder)
    assert np.array_equal(M.decode(mb, np.zeros((1, 2))), np.full((1, 4), 0.5))
    ll = M.recon_log_lik(mb, np.ones((1, 4)), np.zeros((1, 2)))
    assert ll[0] == pytest.approx(4 * np.log(0.5), abs=1e-14)


def test_gaussian_zero_residual_log_lik():
    m = small()
    zero_net(m.decoder)
    ll = M.recon_log_lik(m, np.zeros((1, 4)), np.zeros((1, 2)))
    assert ll[0] == pytest.approx(-2.0 * np.log(2 * np.pi), abs=1e-14)


def test_decode_dimension_mismatch():
    with pytest.raises(ValueError):
        M.decode(small(), np.zeros((1, 3)))


# -- E-step ----------------------------------------------------------------------

def test_single_path_e_step():
    st = M.e_step(small(), data(6))
    assert np.array_equal(st.S, np.ones((6, 1)))


def test_symmetric_two_path_e_step():
    from hcrl.hierarchy import TreeNode
    m = small()
    root = m.tree.root
    twin = TreeNode(root.children[0].mu.copy(), root.children[0].sigma2.copy(), 1.0, 1.0, uid=9)
    root.children[0].a = root.children[0].b = 1.0
    root.children.append(twin)
    m.tree.next_uid = 10
    # identical Gaussians: S follows the stick prior, exp(-1) : exp(-2) under (1, 1) sticks
    st = M.e_step(m, data(3))
    assert np.allclose(st.S[:, 0] / st.S[:, 1], np.e, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_e_step_sweeps_non_decreasing(seed):
    m = GC.check_model("HCRL2", D=4, seed=seed)
    X = data(8, seed=seed)
    latent, level = M.encode(m, X)
    arr = m.tree.arrays()
    recon = np.zeros(8)
    prev = -np.inf
    for sweeps in (1, 2, 3, 4):
        S, om = V.e_step_sweeps(arr, latent.mu, latent.sigma2, level.alpha_tilde, sweeps)
        st = V.VariationalState(latent.mu, latent.sigma2, level.alpha_tilde, om, S)
        val = V.elbo_hcrl(arr, st, recon, m.alpha)[0]
        assert val >= prev - 1e-9
        prev = val


# -- gradients ----------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_gradients_all_groups_ten_seeds(seed):
    report = GC.run_suite(seed=seed, N=8)
    assert max(max(g.values()) for g in report.values()) <= GC.TOLERANCE


@pytest.mark.parametrize("variant", ["HCRL2", "VaDE", "VAE"])
def test_bernoulli_gradients(variant):
    m = GC.check_model(variant, D=6, observation="bernoulli", seed=3) if variant != "VAE" else \
        M.HcrlModel(M.ModelConfig(D=6, hidden=(6,), variant="VAE", observation="bernoulli", R=2))
    X, noise = GC.check_data(m, 10, 3)
    assert max(GC.gradient_check(m, X, noise).values()) <= GC.TOLERANCE


def test_corrupted_gradient_detected():
    m = GC.check_model("HCRL2", seed=0)
    X, noise = GC.check_data(m, 8)
    assert GC.gradient_check(m, X, noise, corrupt="node_mu")["node_mu"] > GC.TOLERANCE


def test_gradcheck_rejects_large_dims():
    with pytest.raises(ValueError):
        GC.run_suite(D=9)


@pytest.mark.parametrize("variant", ["HCRL1", "HCRL2", "VaDE"])
def test_small_ascent_step_increases_elbo(variant):
    m = GC.check_model(variant, D=4, seed=1)
    X, noise = GC.check_data(m, 16, 1)
    res = M.batch_objective(m, X, noise)
    before = res.elbo
    for group in M.param_groups(m):
        M.set_group(m, group, M.get_group(m, group) + 1e-4 * M.flat_grad(res, group))
    after = M.batch_objective(m, X, noise, state=res.state, need_grad=False).elbo
    assert after > before


def test_mc_standard_error_shrinks():
    m = GC.check_model("HCRL2", D=4, seed=2)
    X = data(1, seed=5)
    rng = np.random.default_rng(0)
    sd = {}
    for R in (1, 16, 256):
        vals = [M.batch_objective(m, X, rng.standard_normal((R, 1, 2)), need_grad=False).elbo for _ in range(200)]
        sd[R] = np.std(vals)
    assert 2.0 < sd[1] / sd[16] < 8.0 and 2.0 < sd[16] / sd[256] < 8.0


# -- training ----------------------------------------------------------------------

def test_zero_epochs_returns_initial_model():
    m = small()
    _, hist = M.train(m, data(), epochs=0)
    assert hist == [] and len(m.tree.full_paths()) == 1 and not m.pretrained


def test_tree_never_grows_when_t_grow_exceeds_epochs():
    m = small(t_grow=10, t_lock=100)
    _, hist = M.train(m, data(), epochs=4)
    assert len(hist) == 4 and m.tree.n_nodes == 2
    assert all(np.isfinite(r["elbo"]) for r in hist)


def test_training_grows_and_records_history():
    m = small(t_grow=2)
    _, hist = M.train(m, data(60), epochs=4)
    assert [r["epoch"] for r in hist] == [1, 2, 3, 4]
    assert "grow" in [r["op"] for r in hist]
    for r in hist:
        assert set(V.HCRL_TERMS) <= set(r)


def test_hcrl1_global_alpha_update():
    m = small("HCRL1", t_grow=100)
    X = data()
    M.train(m, X, epochs=1)
    assert m.alpha_global.sum() == pytest.approx(m.alpha.sum() + len(X))


def test_hcrl1_equals_hcrl2_at_depth_one():
    a, b = small("HCRL1", L=1), small("HCRL2", L=1)
    X = data(20)
    noise = np.random.default_rng(0).standard_normal((1, 20, 2))
    assert M.batch_objective(a, X, noise).elbo == M.batch_objective(b, X, noise).elbo
    _, ha = M.train(a, X, epochs=3)
    _, hb = M.train(b, X, epochs=3)
    assert [r["elbo"] for r in ha] == [r["elbo"] for r in hb]


def test_vade_k1_matches_vae_per_batch():
    X = data(30)
    a, b = small("VaDE", K=1), small("VAE")
    noise = np.random.default_rng(1).standard_normal((1, 30, 2))
    assert M.batch_objective(a, X, noise).elbo == pytest.approx(M.batch_objective(b, X, noise).elbo, abs=1e-10)
    _, ha = M.train_vade(a, X, epochs=2)
    _, hb = M.train_vade(b, X, epochs=2)
    for ra, rb in zip(ha, hb):
        assert ra["elbo"] == pytest.approx(rb["elbo"], abs=1e-10)


def test_vade_two_clusters():
    ds = gen_synthetic(SyntheticSpec(depth=2, branching=2, separation=8.0, N=600, J_ambient=4, seed=1,
                                     level_weights=(0.0, 1.0)))
    X = standardize(ds.X)
    m = M.HcrlModel(M.ModelConfig(D=4, variant="VaDE", K=2, hidden=(16,), batch_size=32, epochs=10,
                                  pretrain_epochs=10, lr=1e-2, seed=0))
    kappas = []
    M.train_vade(m, X, callback=lambda mm, row: kappas.append(mm.mixture.kappa.copy()))
    for k in kappas:
        assert np.all(k > 0) and k.sum() == pytest.approx(1.0, abs=1e-12)
    from hcrl.metrics import predict_levels
    pred = predict_levels(m, X)[:, 1]
    truth = ds.labels[:, 1]
    acc = max(np.mean(pred == truth), np.mean(pred != truth))
    assert acc >= 0.95


def test_train_vade_rejects_hierarchical():
    with pytest.raises(ValueError):
        M.train_vade(small(), data())


def test_divergence_raises_with_diagnostics():
    m = small()
    X = data()
    X[0, 0] = 1e200
    with pytest.raises(M.DivergenceError) as info, np.errstate(all="ignore"):
        M.train(m, X, epochs=1)
    assert "where" in info.value.diagnostics


# -- checkpoints ---------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["HCRL1", "HCRL2", "VaDE", "VAE"])
def test_checkpoint_round_trip(tmp_path, variant):
    m = small(variant, t_grow=1)
    X = data(50)
    M.train(m, X, epochs=2)
    M.save_model(m, tmp_path / "a.ckpt")
    m2 = M.load_model(tmp_path / "a.ckpt")
    noise = np.random.default_rng(0).standard_normal((1, 50, 2))
    assert M.batch_objective(m, X, noise).elbo == M.batch_objective(m2, X, noise).elbo
    M.save_model(m2, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    # continuing from the checkpoint matches continuing in memory
    _, h1 = M.train(m, X, epochs=2)
    _, h2 = M.train(m2, X, epochs=2)
    assert [r["elbo"] for r in h1] == [r["elbo"] for r in h2]


def test_load_rejects_foreign_container(tmp_path):
    from hcrl.nn import save_arrays
    save_arrays(tmp_path / "x.bin", {"a": np.zeros(1)}, {"kind": "other"})
    with pytest.raises(ValueError):
        M.load_model(tmp_path / "x.bin")
