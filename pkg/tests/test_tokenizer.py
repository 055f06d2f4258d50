import numpy as np
import pytest
import torch
from sklearn.base import clone

from _gradcheck import TOL, check, seeded
from ctrec.exceptions import CalibrationError, ShapeError
from ctrec.synthetic import make_low_rank_embeddings
from ctrec.tokenizer import SigmaVAE, SigmaVAETokenizer, bernoulli_mask, calibrate_gamma, vae_loss


def test_mask_extremes():
    x = torch.arange(1.0, 11.0)
    assert torch.equal(bernoulli_mask(x, 0.0, 3), x)
    assert torch.equal(bernoulli_mask(x, 1.0, 3), torch.zeros(10))


def test_mask_fraction_and_determinism():
    x = torch.ones(100_000, dtype=torch.float64)
    out = bernoulli_mask(x, 0.2, 11)
    frac = float((out == 0).double().mean())
    assert abs(frac - 0.2) <= 0.01
    assert torch.equal(out, bernoulli_mask(x, 0.2, 11))
    with pytest.raises(ValueError):
        bernoulli_mask(x, 1.5)


def test_gamma_calibration_examples():
    assert calibrate_gamma(np.array([[1.0, -1.0], [1.0, -1.0]])) == 1.0
    assert calibrate_gamma(np.full((4, 3), 2.5)) == 1e-3
    rng = np.random.default_rng(0)
    assert 0.95 <= calibrate_gamma(rng.standard_normal((1024, 64))) <= 1.05
    with pytest.raises(CalibrationError):
        calibrate_gamma(np.array([[np.nan, 1.0]]))


def test_vae_loss_examples():
    x = torch.tensor([0.0, 0.0])
    assert float(vae_loss(x, x, torch.zeros(2, 2), 0.5)) == 0.0
    means = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    assert float(vae_loss(x, torch.tensor([1.0, 1.0]), means, beta=0.5, K=2)) == pytest.approx(2.25, abs=1e-12)
    assert float(vae_loss(x, torch.tensor([1.0, 1.0]), means, beta=0.0)) == 2.0


def test_vae_loss_is_batch_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    x, xh, mu = torch.randn(6, 5, generator=g), torch.randn(6, 5, generator=g), torch.randn(6, 3, 2, generator=g)
    perm = torch.randperm(6, generator=g)
    assert float(vae_loss(x, xh, mu, 0.3)) == pytest.approx(float(vae_loss(x[perm], xh[perm], mu[perm], 0.3)),
                                                             rel=1e-12)


@pytest.fixture
def small_vae():
    torch.manual_seed(0)
    m = SigmaVAE(6, K=2, token_dim=3, hidden=5).double()
    m.gamma.fill_(0.7)
    return m


def test_inference_tokens_are_means(small_vae):
    x = torch.randn(4, 6, dtype=torch.float64)
    ts = small_vae.tokenize(x, rho=0.2, training=False)
    assert torch.equal(ts.tokens, ts.means)
    assert torch.equal(ts.tokens, small_vae.tokenize(x, rho=0.2, training=False).tokens)


def test_zero_sigma_leaves_means(small_vae):
    small_vae.gamma.fill_(0.0)
    ts = small_vae.tokenize(torch.randn(3, 6, dtype=torch.float64), 0.0, True, torch.Generator().manual_seed(1))
    assert torch.equal(ts.tokens, ts.means)


def test_uncalibrated_gamma_rejected():
    m = SigmaVAE(4, K=1, token_dim=2, hidden=3)
    with pytest.raises(CalibrationError):
        m.tokenize(torch.zeros(1, 4), training=True)


def test_token_perturbation_variance_matches_gamma_squared():
    torch.manual_seed(0)
    m = SigmaVAE(64, K=3, token_dim=16, hidden=32).double()
    m.gamma.fill_(0.8)
    x = torch.randn(1, 64, dtype=torch.float64).expand(10_000, 64)
    ts = m.tokenize(x, rho=0.0, training=True, generator=torch.Generator().manual_seed(5))
    diff = ts.tokens - ts.means
    for k in range(3):
        var = float(diff[:, k].detach().var())
        assert var == pytest.approx(0.8 ** 2, rel=0.05)


def test_decode_zero_tokens_gives_final_bias():
    m = SigmaVAE(5, K=2, token_dim=3, hidden=4)
    with torch.no_grad():
        last = m.decoder[-1]
        last.weight.zero_()
        last.bias.copy_(torch.arange(5.0))
    assert torch.equal(m.decode(torch.zeros(2, 3)), torch.arange(5.0))


def test_decode_shape_and_mismatch(small_vae):
    ts = small_vae.tokenize(torch.randn(6, dtype=torch.float64))
    assert small_vae.decode(ts.tokens).shape == (6,)
    with pytest.raises(ShapeError):
        small_vae.decode(torch.zeros(3, 3, dtype=torch.float64))


def test_vae_loss_gradient_matches_finite_differences(small_vae):
    x = torch.randn(4, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

    def loss(g):
        ts = small_vae.tokenize(x, rho=0.2, training=True, generator=g)
        return vae_loss(x, small_vae.decode(ts.tokens), ts.means, beta=0.25)

    assert check(seeded(loss), small_vae.parameters()) <= TOL


def test_fit_calibrates_gamma_and_reduces_loss():
    X = make_low_rank_embeddings(256, 16, 3, seed=1)
    tok = SigmaVAETokenizer(K=2, token_dim=4, hidden=32, lr=3e-3, epochs=15, batch_size=32).fit(X)
    rng = np.random.default_rng(0)
    first = X[rng.permutation(len(X))[:32]]
    assert tok.gamma_ == pytest.approx(float(np.std(first)), rel=1e-6)
    assert np.mean(tok.loss_curve_[-10:]) < np.mean(tok.loss_curve_[:10])
    Z = tok.transform(X)
    assert Z.shape == (256, 8)
    assert tok.inverse_transform(Z).shape == X.shape


def test_anti_collapse_on_rank_three_data():
    X = make_low_rank_embeddings(512, 16, 3, seed=4)
    tok = SigmaVAETokenizer(K=3, token_dim=4, hidden=32, lr=3e-3, epochs=20, batch_size=32).fit(X)
    means = tok.token_means(X)
    assert means.var(axis=0).min() >= 1e-4


def test_rank_one_convergence():
    # noise-free path: with sigma perturbation on, the optimum sits near 1e-2 (see ledger)
    rng = np.random.default_rng(0)
    X = np.outer(rng.uniform(-2, 2, 8), rng.standard_normal(6))
    tok = SigmaVAETokenizer(K=2, token_dim=2, hidden=32, rho=0.0, beta=1e-4, sigma=False, lr=3e-3,
                            batch_size=8, max_steps=3000, dtype="float64").fit(X)
    err = np.sum((tok.inverse_transform(tok.transform(X)) - X) ** 2, axis=1)
    assert err.max() <= 1e-3


def test_zero_epochs_keeps_initialisation_and_seeds_are_deterministic(tmp_path):
    X = make_low_rank_embeddings(64, 8, 2, seed=0)
    a = SigmaVAETokenizer(K=2, token_dim=3, hidden=8, epochs=0).fit(X)
    torch.manual_seed(0)
    init = SigmaVAE(8, 2, 3, 8)
    for (k, v), (k2, v2) in zip(a.module_.state_dict().items(), init.state_dict().items()):
        if k != "gamma":
            assert torch.equal(v, v2), k
    p = dict(K=2, token_dim=3, hidden=8, epochs=2, batch_size=16, random_state=3)
    b1 = SigmaVAETokenizer(**p).fit(X).save(tmp_path / "b1.ckpt")
    b2 = SigmaVAETokenizer(**p).fit(X).save(tmp_path / "b2.ckpt")
    s1, s2 = torch.load(b1, weights_only=False), torch.load(b2, weights_only=False)
    for k in s1["tensors"]:
        assert torch.equal(s1["tensors"][k], s2["tensors"][k])


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    X = make_low_rank_embeddings(64, 8, 2, seed=0)
    tok = SigmaVAETokenizer(K=2, token_dim=3, hidden=8, epochs=2, batch_size=16).fit(X)
    again = SigmaVAETokenizer.load(tok.save(tmp_path / "t.ckpt"))
    assert again.get_params() == tok.get_params()
    assert again.gamma_ == tok.gamma_
    np.testing.assert_array_equal(again.transform(X), tok.transform(X))
    for (k, v), (_, w) in zip(tok.module_.state_dict().items(), again.module_.state_dict().items()):
        assert torch.equal(v, w), k


def test_estimator_api():
    tok = SigmaVAETokenizer(K=4, rho=0.4)
    assert clone(tok).get_params()["K"] == 4
    tok.set_params(K=2)
    assert tok.K == 2
