import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.func import functional_call

from ddfp.prompt import PromptGenerator, prompt_image
from ddfp.spectral import SpectralError, decompose
from oracles import central_fd, rel_err


def _randomize(gen, seed=0):
    """Random weights everywhere (including the zero-scale last norm) for gradient tests."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in gen.parameters():
            p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return gen


def _identity_norms(gen):
    for m in gen.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.eps = 0.0
            m.eval()
            with torch.no_grad():
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                m.weight.fill_(1.0)
                m.bias.zero_()


def test_fresh_generator_is_identity():
    x = torch.rand(3, 1, 16, 16)
    gen = PromptGenerator(16, 16)
    assert (gen(x) - x).abs().max() < 1e-5


def test_alpha_one_zero_domain_prompt_is_identity():
    x = torch.rand(2, 1, 8, 8)
    gen = _randomize(PromptGenerator(8, 8, alpha=1.0))
    with torch.no_grad():
        gen.domain_prompt.zero_()
    assert (gen(x) - x).abs().max() < 1e-5


def test_data_prompt_shape_and_channel():
    gen = PromptGenerator(8, 12)
    d = decompose(torch.rand(5, 1, 8, 12))
    assert gen.data_prompt(d).shape == (5, 1, 8, 12)
    assert gen.data_prompt(decompose(torch.rand(8, 12))).shape == (8, 12)


def test_data_prompt_matches_composition_oracle():
    torch.manual_seed(0)
    gen = PromptGenerator(4, 4, spectrum_hidden=4, fusion_hidden=8).double()
    _identity_norms(gen)
    rng = np.random.default_rng(0)
    convs = [m for m in gen.modules() if isinstance(m, torch.nn.Conv2d)]
    with torch.no_grad():
        for conv in convs:
            conv.weight.copy_(torch.from_numpy(rng.standard_normal(conv.weight.shape)))
            conv.bias.copy_(torch.from_numpy(rng.standard_normal(conv.bias.shape)))
        gen.domain_prompt.copy_(torch.from_numpy(0.3 * rng.standard_normal((4, 4))))
    x = torch.rand(4, 4, dtype=torch.float64)
    got = gen.data_prompt(decompose(x)).detach().numpy()

    relu = lambda v: np.maximum(v, 0)  # noqa: E731

    def mlp(layers, feats):  # feats: C x (H*W)
        for conv in layers:
            w = conv.weight.detach().numpy()[:, :, 0, 0]
            feats = relu(w @ feats + conv.bias.detach().numpy()[:, None])
        return feats

    spec = np.fft.fft2(x.numpy())
    amp, pha = np.abs(spec).reshape(1, -1), np.angle(spec).reshape(1, -1)
    s_a = mlp([blk[0] for blk in gen.s_a], np.log1p(amp))
    s_p = mlp([blk[0] for blk in gen.s_p], pha)
    dom = np.exp(gen.domain_prompt.detach().numpy()).reshape(1, -1)
    want = mlp([blk[0] for blk in gen.f_fre], np.concatenate([s_a, s_p, dom]))[2].reshape(4, 4)
    assert np.allclose(got, want, atol=1e-10)


def test_copy_channel_two_gives_rectified_domain_path():
    gen = PromptGenerator(4, 4).double()
    _identity_norms(gen)
    with torch.no_grad():
        for blk in gen.f_fre:
            conv = blk[0]
            conv.weight.zero_()
            conv.bias.zero_()
            for i in range(min(conv.in_channels, conv.out_channels)):
                conv.weight[i, i] = 1.0
        gen.domain_prompt.copy_(torch.randn(4, 4, dtype=torch.float64))
    out = gen.data_prompt(decompose(torch.rand(4, 4, dtype=torch.float64)))
    assert torch.allclose(out, gen.domain_prompt.exp().clamp_min(0), atol=1e-12)


def test_fuse_endpoints_and_example():
    gen = PromptGenerator(4, 4, alpha=1.0)
    with torch.no_grad():
        gen.domain_prompt.copy_(torch.randn(4, 4))
    data = torch.rand(4, 4)
    assert torch.equal(gen.fuse(data), gen.domain_prompt.exp())
    gen.alpha = 0.0
    assert torch.equal(gen.fuse(data), data)
    gen = PromptGenerator(4, 4, alpha=0.2)
    assert torch.allclose(gen.fuse(torch.full((4, 4), 0.5)), torch.full((4, 4), 0.6))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["data_freq", "domain_freq"]))
def test_frequency_prompt_is_non_negative(seed, mode):
    gen = _randomize(PromptGenerator(8, 8, mode=mode), seed)
    with torch.no_grad():
        gen.domain_prompt.mul_(5)
    fp = gen.frequency_prompt(torch.rand(2, 1, 8, 8))
    assert (fp >= 0).all()
    assert torch.isfinite(gen(torch.rand(2, 1, 8, 8))).all()


def test_single_image_shape():
    out = prompt_image(torch.rand(1, 16, 16), PromptGenerator(16, 16))
    assert out.shape == (1, 16, 16) and torch.isfinite(out).all()


def test_other_modes():
    x = torch.rand(2, 1, 8, 8)
    assert torch.equal(PromptGenerator(8, 8, mode="none")(x), x)
    sp = PromptGenerator(8, 8, mode="domain_spatial", init="ones")
    assert torch.allclose(sp(x), x + 1)
    fr = PromptGenerator(8, 8, mode="domain_freq")
    assert (fr(x) - x).abs().max() < 1e-5
    assert not hasattr(fr, "f_fre")
    with pytest.raises(RuntimeError):
        fr.data_prompt(decompose(x))


def test_bad_arguments():
    with pytest.raises(ValueError):
        PromptGenerator(8, 8, mode="nope")
    with pytest.raises(ValueError):
        PromptGenerator(8, 8, init="nope")
    with pytest.raises(ValueError):
        PromptGenerator(8, 8, alpha=1.5)
    with pytest.raises(SpectralError):
        PromptGenerator(8, 8)(torch.rand(1, 1, 8, 4))


def test_domain_prompt_gradient_of_data_prompt():
    gen = _randomize(PromptGenerator(8, 8).double(), seed=1)
    d = decompose(torch.rand(8, 8, dtype=torch.float64))
    gen.data_prompt(d).sum().backward()
    with torch.no_grad():
        fd = central_fd(lambda: gen.data_prompt(d).sum(), gen.domain_prompt)
    assert rel_err(gen.domain_prompt.grad, fd) < 1e-3


@pytest.mark.parametrize("mode", ["data_freq", "domain_freq", "domain_spatial"])
def test_gradcheck_all_prompt_parameters(mode):
    gen = _randomize(PromptGenerator(8, 8, mode=mode).double(), seed=2)
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    names = [n for n, _ in gen.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in gen.parameters())

    def fn(*ps):
        return functional_call(gen, dict(zip(names, ps)), (x,)).sum()

    assert torch.autograd.gradcheck(fn, params, eps=1e-6, atol=1e-6, rtol=1e-3)
