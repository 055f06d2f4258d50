import numpy as np
import pytest
import torch
from torch import nn

from _gradcheck import TOL, check
from ctrec.exceptions import CheckpointError
from ctrec.quantized import (RQVAE, VQVAE, Codebook, PlainVAE, ResidualStack, VQAutoencoder,
                             kmeans_pp_codebook, rq_quantize, vq_loss, vq_quantize)
from ctrec.synthetic import make_low_rank_embeddings

CB = Codebook(torch.tensor([[0.0, 0.0], [1.0, 1.0]]))


def test_vq_nearest_exact_and_tie():
    assert vq_quantize(torch.tensor([0.9, 0.8]), CB)[0] == 1
    idx, code = vq_quantize(torch.tensor([1.0, 1.0]), CB)
    assert idx == 1 and torch.equal(code, torch.tensor([1.0, 1.0]))
    assert vq_quantize(torch.tensor([0.5, 0.5]), CB)[0] == 0
    assert vq_quantize(torch.tensor([1.0, 0.0]), CB)[0] == 0


def test_vq_errors():
    with pytest.raises(ValueError):
        vq_quantize(torch.zeros(2), torch.zeros(0, 2))
    with pytest.raises(ValueError):
        vq_quantize(torch.zeros(3), CB)


def test_vq_batch_matches_bruteforce():
    g = torch.Generator().manual_seed(0)
    C = torch.randn(16, 4, generator=g, dtype=torch.float64)
    mu = torch.randn(50, 4, generator=g, dtype=torch.float64)
    idx, code = vq_quantize(mu, C)
    for i in range(50):
        d = [float(((mu[i] - c) ** 2).sum()) for c in C]
        assert int(idx[i]) == int(np.argmin(d))
    assert torch.equal(code, C[idx])


def test_quantization_is_idempotent():
    C = torch.randn(8, 3, generator=torch.Generator().manual_seed(1))
    for c in C:
        assert torch.equal(vq_quantize(c, C)[1], c)


def test_rq_examples():
    stack = ResidualStack([Codebook(torch.tensor([[1.0, 0.0]])), Codebook(torch.tensor([[0.0, 1.0]]))])
    idx, approx, residuals = rq_quantize(torch.tensor([1.0, 1.0]), stack)
    assert idx == [0, 0]
    assert torch.equal(approx, torch.tensor([1.0, 1.0]))
    assert torch.equal(residuals[-1], torch.zeros(2))
    mu = torch.tensor([0.9, 0.8])
    one = rq_quantize(mu, ResidualStack([CB]))
    assert one[0] == [vq_quantize(mu, CB)[0]] and torch.equal(one[1], vq_quantize(mu, CB)[1])


def test_rq_residuals_telescope_exactly():
    g = torch.Generator().manual_seed(3)
    stack = [torch.randn(5, 4, generator=g, dtype=torch.float64) for _ in range(3)]
    mu = torch.randn(7, 4, generator=g, dtype=torch.float64)
    idx, approx, res = rq_quantize(mu, stack)
    prev = mu
    for r, C in enumerate(stack):
        assert torch.equal(res[r], prev - C[idx[:, r]])
        prev = res[r]
    assert torch.allclose(approx + res[-1], mu, atol=1e-12)


def test_kmeanspp_fills_shortfall():
    X = np.random.default_rng(0).standard_normal((5, 3))
    C = kmeans_pp_codebook(X, 8, seed=0)
    assert C.shape == (8, 3) and np.all(np.isfinite(C))


def test_straight_through_copies_decoder_input_gradient():
    torch.manual_seed(0)
    m = VQAutoencoder(5, latent_dim=3, hidden=8, codebook_size=4).double()
    x = torch.randn(6, 5, dtype=torch.float64)
    mu = m.encoder(x)
    mu.retain_grad()
    z_q, _, _, _ = m.quantize(mu)
    z_q.retain_grad()
    ((m.decoder(z_q) - x) ** 2).sum().backward()
    assert torch.equal(mu.grad, z_q.grad)


def test_identity_quantizer_matches_plain_autoencoder():
    torch.manual_seed(0)
    m = VQAutoencoder(5, latent_dim=3, hidden=8, codebook_size=4).double()
    x = torch.randn(6, 5, dtype=torch.float64)
    ((m(x, quantize=False)[0] - x) ** 2).sum().backward()
    st = [p.grad.clone() for p in m.encoder.parameters()]
    m.zero_grad()
    ((m.decoder(m.encoder(x)) - x) ** 2).sum().backward()
    for a, b in zip(st, (p.grad for p in m.encoder.parameters())):
        assert torch.equal(a, b)


def test_decoder_gradient_matches_finite_differences():
    torch.manual_seed(0)
    m = VQAutoencoder(4, latent_dim=2, hidden=4, codebook_size=3).double()
    x = torch.randn(5, 4, dtype=torch.float64)

    def loss():
        x_hat, cb, commit, _ = m(x)
        return vq_loss(x, x_hat, cb, commit)

    assert check(loss, m.decoder.parameters()) <= TOL


def test_perfect_autoencoder_on_codebook_points_has_zero_loss():
    m = VQAutoencoder(2, latent_dim=2, hidden=2, codebook_size=2).double()
    m.encoder, m.decoder = nn.Identity(), nn.Identity()
    with torch.no_grad():
        m.codebooks[0].copy_(torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
    x = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
    x_hat, cb, commit, _ = m(x)
    assert float(vq_loss(x, x_hat, cb, commit).detach()) == 0.0


def test_vqvae_loss_decreases_over_100_steps():
    rng = np.random.default_rng(2)
    centers = rng.standard_normal((8, 16))
    X = centers[rng.integers(0, 8, 512)] + 0.05 * rng.standard_normal((512, 16))
    est = VQVAE(latent_dim=8, hidden=32, codebook_size=16, init_rows=64, lr=1e-3, batch_size=32,
                max_steps=100).fit(X)
    assert est.commitment == 0.25
    assert np.mean(est.loss_curve_[-10:]) < np.mean(est.loss_curve_[:10])
    assert est.codes(X).shape == (512, 1)


def test_dead_codes_are_reseeded(caplog):
    X = make_low_rank_embeddings(64, 8, 2, seed=0)
    with caplog.at_level("INFO"):
        est = VQVAE(latent_dim=4, hidden=8, codebook_size=64, init_rows=4, batch_size=16, epochs=2).fit(X)
    assert est.n_reseeded_ > 0


def test_rq_reconstruction_non_increasing_in_depth():
    X = make_low_rank_embeddings(512, 16, 6, seed=5)
    errs = [RQVAE(depth=d, latent_dim=8, hidden=32, codebook_size=16, init_rows=256, lr=1e-3,
                  batch_size=32, epochs=15, random_state=0).fit(X).reconstruction_error(X)
            for d in (1, 2, 3)]
    assert errs[0] >= errs[1] >= errs[2], errs


def test_quantized_checkpoint_roundtrip(tmp_path):
    X = make_low_rank_embeddings(64, 8, 2, seed=0)
    est = RQVAE(depth=2, latent_dim=4, hidden=8, codebook_size=8, init_rows=32, batch_size=16, epochs=1).fit(X)
    again = RQVAE.load(est.save(tmp_path / "rq.ckpt"))
    np.testing.assert_array_equal(again.codes(X), est.codes(X))
    np.testing.assert_array_equal(again.inverse_transform(again.transform(X)),
                                  est.inverse_transform(est.transform(X)))
    with pytest.raises(CheckpointError):
        VQVAE.load(tmp_path / "rq.ckpt")


def test_plain_vae_fits():
    X = make_low_rank_embeddings(128, 8, 2, seed=0)
    est = PlainVAE(latent_dim=4, hidden=16, lr=1e-3, batch_size=32, epochs=5).fit(X)
    assert est.transform(X).shape == (128, 4)
    assert np.isfinite(est.reconstruction_error(X))
