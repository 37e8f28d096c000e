import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from torch import nn

from zsc.config import VAEConfig
from zsc.embedding import SemanticEmbedding
from zsc.prototype import (ClassPrototype, ConditionalVAE, gaussian_kl, generate_class_prototype,
                           generate_features, train_vae, vae_loss)


def small_vae(seed=0, act="relu"):
    torch.manual_seed(seed)
    return ConditionalVAE(6, 5, latent_dim=4, hidden=12, output_activation=act).double()


class FixedEncoder(ConditionalVAE):
    def __init__(self, mu, logvar):
        super().__init__(3, 2, latent_dim=len(mu), hidden=4)
        self.double()
        self._mu, self._lv = torch.tensor(mu).double(), torch.tensor(logvar).double()

    def encode(self, x, a):
        shape = x.shape[:-1] + (len(self._mu),)
        return self._mu.expand(shape), self._lv.expand(shape)


class LinearDecoder(nn.Module):
    def __init__(self, W, U, c):
        super().__init__()
        self.latent_dim = W.shape[1]
        self.W, self.U, self.c = (nn.Parameter(torch.as_tensor(t)) for t in (W, U, c))

    def decode(self, z, a):
        return z @ self.W.T + a @ self.U.T + self.c


def test_kl_prior_is_zero():
    kl, _, _ = vae_loss(FixedEncoder([0.0] * 4, [0.0] * 4), np.zeros(3), np.zeros(2))
    assert float(kl) == 0.0


def test_kl_unit_mean():
    kl, _, _ = vae_loss(FixedEncoder([1.0] * 4, [0.0] * 4), np.zeros(3), np.zeros(2))
    assert float(kl) == 2.0


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.data())
def test_kl_nonnegative(mu, data):
    lv = data.draw(st.lists(st.floats(-4, 4), min_size=len(mu), max_size=len(mu)))
    kl = float(gaussian_kl(torch.tensor(mu).double(), torch.tensor(lv).double()))
    assert kl >= 0
    if all(m == 0 for m in mu) and all(v == 0 for v in lv):
        assert kl == 0


def test_perfect_decoder_zero_recon():
    vae = small_vae(act="none")
    x = torch.randn(6, dtype=torch.float64)
    vae.decode = lambda z, a: x.expand(z.shape[:-1] + (6,))
    _, recon, total = vae_loss(vae, x, np.zeros(5))
    assert float(recon) == 0.0
    assert total.item() == pytest.approx(vae_loss(vae, x, np.zeros(5))[0].item())


def test_dim_mismatch():
    with pytest.raises(ValueError):
        vae_loss(small_vae(), np.zeros(7), np.zeros(5))


def test_vae_gradient_finite_difference(rng):
    vae = small_vae(seed=3, act="none")
    x = torch.from_numpy(rng.normal(size=(4, 6)))
    a = torch.from_numpy(rng.normal(size=(4, 5)))
    eps = torch.from_numpy(rng.normal(size=(4, 4)))
    probes = [(vae.enc1.weight, (2, 3)), (vae.enc2.weight, (5, 1)), (vae.dec1.weight, (0, 7)),
              (vae.dec2.bias, (4,))]
    total = vae_loss(vae, x, a, eps=eps)[2]
    grads = torch.autograd.grad(total, [p for p, _ in probes])
    h = 1e-6
    for (p, idx), g in zip(probes, grads):
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            up = float(vae_loss(vae, x, a, eps=eps)[2])
            p[idx] = old - h
            down = float(vae_loss(vae, x, a, eps=eps)[2])
            p[idx] = old
        fd = (up - down) / (2 * h)
        assert abs(fd - g[idx].item()) <= 1e-4 * max(abs(fd), 1e-8)


def _toy_pairs(rng, n=200):
    a = np.eye(4)[rng.integers(0, 4, n)]
    x = np.maximum(a @ rng.normal(size=(4, 6)) + 0.1 * rng.normal(size=(n, 6)), 0)
    return x, a


def test_train_vae_descends_and_is_deterministic(rng):
    x, a = _toy_pairs(rng)
    cfg = VAEConfig(latent_dim=4, hidden=16, epochs=15, batch_size=32, lr=3e-3)
    v1, log1 = train_vae(x, a, cfg)
    v2, _ = train_vae(x, a, cfg)
    assert log1.epoch_losses[-1] < log1.epoch_losses[0]
    for (k, p), (_, q) in zip(v1.state_dict().items(), v2.state_dict().items()):
        assert torch.equal(p, q), k
    assert v1.dec2.out_features == x.shape[1]


def test_train_vae_empty():
    with pytest.raises(ValueError):
        train_vae(np.zeros((0, 3)), np.zeros((0, 2)), VAEConfig())


def test_conditioning_enters_both_sides():
    vae = small_vae()
    assert vae.enc1.in_features == 6 + 5
    assert vae.dec1.in_features == 4 + 5


def _sem(dim=5, seed=0):
    return SemanticEmbedding("c", np.random.default_rng(seed).normal(size=dim))


def test_prototype_constant_decoder():
    c = np.arange(6, dtype=np.float64)
    dec = LinearDecoder(np.zeros((6, 4)), np.zeros((6, 5)), c)
    for n in (1, 7, 64):
        assert np.array_equal(generate_class_prototype(dec, _sem(), n, seed=2).vector, c)


def test_prototype_single_sample():
    vae = small_vae()
    one = generate_features(vae, _sem(), 1, seed=9)[0]
    assert np.array_equal(generate_class_prototype(vae, _sem(), 1, seed=9).vector, one)


def test_prototype_matches_loop_average():
    vae = small_vae()
    a = _sem()
    proto = generate_class_prototype(vae, a, 256, seed=4).vector
    gen = torch.Generator().manual_seed(4)
    z = torch.randn((256, 4), generator=gen, dtype=torch.float64)
    vae64 = vae.double().eval()
    acc = np.zeros(6)
    with torch.no_grad():
        for i in range(256):
            acc += vae64.decode(z[i:i + 1], torch.from_numpy(a.vector)[None])[0].numpy()
    np.testing.assert_allclose(proto, acc / 256, atol=1e-9, rtol=0)


def test_prototype_deterministic_and_permutation_invariant():
    vae = small_vae()
    feats = generate_features(vae, _sem(), 50, seed=1)
    p = generate_class_prototype(vae, _sem(), 50, seed=1)
    assert np.array_equal(p.vector, generate_class_prototype(vae, _sem(), 50, seed=1).vector)
    perm = np.random.default_rng(0).permutation(50)
    np.testing.assert_allclose(feats[perm].mean(0), p.vector, atol=1e-12)
    assert (p.n_samples, p.seed) == (50, 1)


def test_linear_decoder_expectation(rng):
    W, U, c = rng.normal(size=(6, 4)), rng.normal(size=(6, 5)), rng.normal(size=6)
    dec = LinearDecoder(W, U, c)
    a = _sem()
    p = generate_class_prototype(dec, a, 4096, seed=11).vector
    expected = U @ a.vector + c
    # each output coordinate is a sum of N(0, 1) draws weighted by a row of W
    sigma_mc = np.linalg.norm(W, axis=1) / np.sqrt(4096)
    assert np.all(np.abs(p - expected) < 5 * sigma_mc)


def test_prototype_errors_and_json():
    with pytest.raises(ValueError):
        generate_class_prototype(small_vae(), _sem(), 0)
    p = generate_class_prototype(small_vae(), _sem(), 8, seed=3)
    q = ClassPrototype.from_json(p.to_json())
    assert q.class_name == p.class_name and np.array_equal(q.vector, p.vector)
    assert set(json.loads(p.to_json())) == {"class_name", "vector", "n_samples", "seed"}
