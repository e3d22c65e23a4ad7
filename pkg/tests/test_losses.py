import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddfp.bn_preadapt import BNStatVector
from ddfp.losses import (CALIBRATION_RATIO, LossConfig, bns_loss, calibrate_loss_weights, entropy_loss,
                         pseudo_label_loss, total_loss)
from ddfp.pseudo_label import FilterConfig, ReliableLabelBundle, select_reliable
from oracles import central_fd, pseudo_loss_scalar, rel_err


def _stats(seed, sizes=(3, 5, 2), requires_grad=False):
    g = torch.Generator().manual_seed(seed)
    mk = lambda s, off: (torch.randn(s, generator=g, dtype=torch.float64) + off).abs_().requires_grad_(requires_grad)  # noqa: E731
    return BNStatVector([mk(s, -2) for s in sizes], [mk(s, 2) for s in sizes])


def test_bns_zero_and_pythagoras():
    s = _stats(0)
    assert bns_loss(s, s).item() == 0.0
    a = BNStatVector([torch.zeros(2)], [torch.ones(2)])
    b = BNStatVector([torch.tensor([3.0, 4.0])], [torch.ones(2)])
    assert bns_loss(a, b).item() == pytest.approx(5.0)


def test_bns_matches_norm_sum_oracle():
    for seed in range(20):
        s, t = _stats(seed), _stats(seed + 100)
        want = sum(math.sqrt(float(((ms - mt) ** 2).sum())) + math.sqrt(float(((vs - vt) ** 2).sum()))
                   for ms, vs, mt, vt in zip(s.means, s.variances, t.means, t.variances))
        assert abs(bns_loss(s, t).item() - want) < 1e-10


def test_bns_gradient_fd():
    s = _stats(1)
    t = _stats(2, requires_grad=True)
    bns_loss(s, t).backward()
    for x in t.means + t.variances:
        with torch.no_grad():
            fd = central_fd(lambda: bns_loss(s, t), x)
        assert rel_err(x.grad, fd) < 1e-3


def test_bns_mismatch():
    with pytest.raises(ValueError):
        bns_loss(_stats(0), _stats(0, sizes=(3,)))
    with pytest.raises(ValueError):
        bns_loss(_stats(0, sizes=(3,)), _stats(0, sizes=(4,)))


def test_entropy_loss_examples_and_gradient():
    onehot = torch.zeros(2, 3, 4, 4)
    onehot[:, 1] = 1
    assert entropy_loss(onehot).item() == 0.0
    assert entropy_loss(torch.full((1, 2, 3, 3), 0.5)).item() == pytest.approx(math.log(2), abs=1e-7)
    logits = torch.randn(2, 2, 2, dtype=torch.float64, requires_grad=True)
    entropy_loss(logits.softmax(0)).backward()
    with torch.no_grad():
        fd = central_fd(lambda: entropy_loss(logits.softmax(0)), logits)
    assert rel_err(logits.grad, fd) < 1e-3


def _bundle(onehot, reliable, confidence):
    onehot = torch.as_tensor(onehot, dtype=torch.float64)
    mask = onehot * torch.as_tensor(reliable, dtype=torch.float64)
    return ReliableLabelBundle(onehot, torch.zeros(onehot.shape[-2:]), mask,
                               torch.as_tensor(confidence, dtype=torch.float64))


def test_pseudo_hand_example():
    # 2x2 image, one reliable pixel labelled class 1, p1 = 0.8, confidence 0.9
    onehot = np.zeros((2, 2, 2))
    onehot[0] = 1
    onehot[:, 0, 0] = [0, 1]
    reliable = np.zeros((2, 2), dtype=bool)
    reliable[0, 0] = True
    conf = np.full((2, 2), 0.5)
    conf[0, 0] = 0.9
    probs = np.full((2, 2, 2), 0.5)
    probs[:, 0, 0] = [0.2, 0.8]
    got = pseudo_label_loss(torch.from_numpy(probs), _bundle(onehot, reliable, conf), LossConfig()).item()
    want = 0.2 * (1 / 4) * 0.9 * (-math.log(0.8) - math.log(0.8))
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(pseudo_loss_scalar(probs, onehot, reliable, conf, 0.2), abs=1e-12)


def test_pseudo_random_oracle_and_batch_mean():
    rng = np.random.default_rng(0)
    vals = []
    probs_all, bundles = [], []
    for _ in range(4):
        logits = rng.standard_normal((3, 5, 5)) * 2
        probs = np.exp(logits) / np.exp(logits).sum(0)
        pseudo = rng.dirichlet(np.ones(3), size=(5, 5)).transpose(2, 0, 1)
        b = select_reliable(torch.from_numpy(pseudo), FilterConfig(0.5, 0.9))
        want = pseudo_loss_scalar(probs, b.hard_labels.numpy(), b.reliable_pixels.numpy(),
                                  b.confidence.numpy(), 0.2)
        got = pseudo_label_loss(torch.from_numpy(probs), b, LossConfig()).item()
        assert got == pytest.approx(want, abs=1e-10)
        vals.append(want)
        probs_all.append(torch.from_numpy(probs))
        bundles.append(b)
    batch = ReliableLabelBundle(*[torch.stack([getattr(b, f) for b in bundles])
                                  for f in ("hard_labels", "entropy", "reliable_mask", "confidence")])
    got = pseudo_label_loss(torch.stack(probs_all), batch, LossConfig()).item()
    assert got == pytest.approx(np.mean(vals), abs=1e-10)


def test_pseudo_zero_cases():
    onehot = np.zeros((2, 3, 3))
    onehot[1] = 1
    probs = torch.from_numpy(onehot.copy())
    assert pseudo_label_loss(probs, _bundle(onehot, np.zeros((3, 3)), np.ones((3, 3))), LossConfig()).item() == 0.0
    perfect = pseudo_label_loss(probs, _bundle(onehot, np.ones((3, 3)), np.ones((3, 3))), LossConfig()).item()
    assert perfect < 1e-6


def test_pseudo_gradient_fd_and_confidence_source():
    rng = np.random.default_rng(4)
    logits = torch.from_numpy(rng.standard_normal((3, 4, 4))).requires_grad_(True)
    pseudo = torch.from_numpy(rng.dirichlet(np.ones(3) * 0.3, size=(4, 4)).transpose(2, 0, 1))
    b = select_reliable(pseudo, FilterConfig(0.6, 1.0))
    assert b.reliable_pixels.sum() > 0
    f = lambda: pseudo_label_loss(logits.softmax(0), b, LossConfig())  # noqa: E731
    f().backward()
    with torch.no_grad():
        fd = central_fd(f, logits)
    assert rel_err(logits.grad, fd) < 1e-3
    tcfg = LossConfig(confidence_source="target_model")
    probs = logits.detach().softmax(0)
    want = pseudo_loss_scalar(probs.numpy(), b.hard_labels.numpy(), b.reliable_pixels.numpy(),
                              probs.max(0).values.numpy(), 0.2)
    assert pseudo_label_loss(probs, b, tcfg).item() == pytest.approx(want, abs=1e-10)


def test_total_loss_examples():
    assert total_loss(0.1, 0.2, 0.03, LossConfig(1, 1, 10)) == pytest.approx(0.6)
    assert total_loss(0.1, 0.2, 0.03, LossConfig(0, 1, 0)) == pytest.approx(0.2)
    assert total_loss(0.0, 0.0, 0.0, LossConfig()) == 0.0


@settings(max_examples=50, deadline=None)
@given(*[st.floats(0, 100) for _ in range(3)], *[st.floats(0, 10) for _ in range(6)], st.floats(-3, 3))
def test_total_loss_linearity(w1, w2, w3, a1, a2, a3, b1, b2, b3, k):
    if w1 + w2 + w3 == 0:
        w1 = 1.0
    cfg = LossConfig(w1, w2, w3)
    lhs = total_loss(a1 + k * b1, a2 + k * b2, a3 + k * b3, cfg)
    rhs = total_loss(a1, a2, a3, cfg) + k * total_loss(b1, b2, b3, cfg)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def test_calibration_examples():
    assert calibrate_loss_weights(1, 0.001, 0.1) == {"w_ent": 1.0, "w_bns": 1.0, "w_pseu": 10.0}
    assert calibrate_loss_weights(1, 0.01, 0.1) == {"w_ent": 1.0, "w_bns": 1.0, "w_pseu": 1.0}
    assert calibrate_loss_weights(1, 0.01, 0.0)["w_ent"] == 1.0
    assert calibrate_loss_weights(0, 0.01, 0.1, defaults=(1, 7, 10))["w_bns"] == 7.0
    assert calibrate_loss_weights(1, float("nan"), 0.1)["w_pseu"] == 10.0


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1e4), st.floats(1e-6, 1e3), st.floats(1e-5, 1e3))
def test_calibration_reproduces_ratio_within_rounding(l_bns, l_pseu, l_ent):
    w = calibrate_loss_weights(l_bns, l_pseu, l_ent)
    for weight, loss, target in ((w["w_bns"], l_bns, CALIBRATION_RATIO[0]),
                                 (w["w_pseu"], l_pseu, CALIBRATION_RATIO[1]),
                                 (w["w_ent"], l_ent, CALIBRATION_RATIO[2])):
        # rounding to one significant figure moves a value by at most a factor of 1.5 / 1 ... 0.95
        ratio = weight * loss / target
        assert 0.66 < ratio < 1.34


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(w_ent=-1)
    with pytest.raises(ValueError):
        LossConfig(0, 0, 0)
    with pytest.raises(ValueError):
        LossConfig(vartheta=0)
    with pytest.raises(ValueError):
        LossConfig(confidence_source="x")
