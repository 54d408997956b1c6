import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from dfdg.losses import (
    GenLossWeights,
    compute_weights,
    cross_divergence_loss,
    distillation_loss,
    diversity_loss,
    ensemble_logits,
    fidelity_loss,
    generator_objective,
    kl_from_logits,
    transfer_gate,
    transferability_loss,
)
from dfdg.models import build_generator


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


class Const(nn.Module):
    """Classifier that ignores its input and returns fixed logits."""

    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float64)

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1).clone()


class Linear(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = torch.as_tensor(w, dtype=torch.float64)

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.w


def np_kl(p_logits, q_logits):
    p = np.exp(p_logits - p_logits.max()) / np.exp(p_logits - p_logits.max()).sum()
    q = np.exp(q_logits - q_logits.max()) / np.exp(q_logits - q_logits.max()).sum()
    return float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0))


# ---------------------------------------------------------------- weights

def test_weights_two_by_two():
    t = compute_weights([[3, 0], [1, 2]])
    np.testing.assert_allclose(t.tau, [[0.75, 0.0], [0.25, 1.0]], atol=1e-12)
    np.testing.assert_allclose(t.label_probs, [2 / 3, 1 / 3], atol=1e-12)


def test_weights_single_client_and_zero_class():
    t = compute_weights([[5, 0, 2]])
    np.testing.assert_allclose(t.tau, [[1.0, 0.0, 1.0]])
    np.testing.assert_allclose(t.label_probs, [5 / 7, 0.0, 2 / 7])


def test_weights_uniform():
    t = compute_weights(np.full((4, 10), 7))
    np.testing.assert_allclose(t.tau, 0.25)
    np.testing.assert_allclose(t.label_probs, 0.1)


def test_weights_all_zero_rejected():
    with pytest.raises(ValueError):
        compute_weights(np.zeros((3, 4)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_weight_table_invariants(n, c, seed):
    rng = np.random.default_rng(seed)
    lc = rng.integers(0, 5, size=(n, c)) * rng.integers(0, 2, size=(n, c))
    if lc.sum() == 0:
        lc[0, 0] = 1
    t = compute_weights(lc)
    seen = lc.sum(0) > 0
    np.testing.assert_allclose(t.tau[:, seen].sum(0), 1.0, atol=1e-12)
    assert (t.tau >= 0).all()
    assert np.all(t.tau[:, ~seen] == 0) and np.all(t.label_probs[~seen] == 0)
    assert abs(t.label_probs.sum() - 1) < 1e-12


# ---------------------------------------------------------------- ensemble

def test_ensemble_single_teacher_is_identity():
    x = torch.randn(5, 3)
    f = Linear(torch.randn(3, 4))
    y = torch.tensor([0, 1, 2, 3, 0])
    out = ensemble_logits(x, y, [f], torch.ones(1, 4))
    torch.testing.assert_close(out, f(x), rtol=0, atol=1e-12)


def test_ensemble_two_identical_teachers():
    x = torch.randn(4, 3)
    f = Linear(torch.randn(3, 2))
    out = ensemble_logits(x, torch.tensor([0, 1, 1, 0]), [f, f], torch.full((2, 2), 0.5))
    torch.testing.assert_close(out, f(x), rtol=0, atol=1e-12)


def test_ensemble_linear_combination_of_constants():
    a, b = torch.tensor([1.0, -2.0, 0.5]), torch.tensor([3.0, 1.0, -1.0])
    tau = torch.tensor([[0.25, 0.25, 0.25], [0.75, 0.75, 0.75]])
    out = ensemble_logits(torch.zeros(2, 1), torch.tensor([0, 2]), [Const(a), Const(b)], tau)
    torch.testing.assert_close(out, (0.25 * a + 0.75 * b).expand(2, -1), rtol=0, atol=1e-12)


def test_ensemble_weights_rows_by_label():
    tau = torch.tensor([[1.0, 0.2], [0.0, 0.8]])
    a, b = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    out = ensemble_logits(torch.zeros(2, 1), torch.tensor([0, 1]), [Const(a), Const(b)], tau)
    torch.testing.assert_close(out, torch.tensor([[1.0, 0.0], [0.2, 0.8]]), rtol=0, atol=1e-12)


def test_ensemble_unseen_label_errors():
    tau = torch.tensor([[1.0, 0.0]])
    with pytest.raises(ValueError, match="label"):
        ensemble_logits(torch.zeros(1, 1), torch.tensor([1]), [Const([0.0, 0.0])], tau)


# ---------------------------------------------------------------- KL

def test_kl_identical_is_zero():
    a = torch.randn(6, 5)
    torch.testing.assert_close(kl_from_logits(a, a), torch.zeros(6), rtol=0, atol=1e-12)


def test_kl_matches_numpy():
    rng = np.random.default_rng(0)
    p, q = rng.normal(size=(7, 4)) * 3, rng.normal(size=(7, 4)) * 3
    got = kl_from_logits(torch.tensor(p), torch.tensor(q)).numpy()
    np.testing.assert_allclose(got, [np_kl(a, b) for a, b in zip(p, q)], rtol=1e-10, atol=1e-12)


def test_kl_to_uniform_approaches_log_c():
    c = 10
    sharp = torch.zeros(1, c)
    sharp[0, 3] = 60.0
    kl = kl_from_logits(sharp, torch.zeros(1, c)).item()
    assert abs(kl - math.log(c)) < 1e-6


def test_kl_asymmetry():
    a, b = torch.tensor([[2.0, 0.0]]), torch.tensor([[0.0, 2.0]])
    # symmetric pair: the two orders coincide, so use a skewed third
    c = torch.tensor([[0.0, 0.5]])
    assert abs(kl_from_logits(a, c).item() - kl_from_logits(c, a).item()) > 1e-3
    assert kl_from_logits(a, b).item() > 0


def test_kl_saturated_logits_are_finite():
    p = torch.tensor([[1000.0, -1000.0]])
    q = torch.tensor([[-1000.0, 1000.0]])
    assert torch.isfinite(kl_from_logits(p, q)).all()


# ---------------------------------------------------------------- fidelity

def test_fidelity_confident_and_uniform():
    y = torch.tensor([0, 2])
    confident = torch.full((2, 3), -50.0)
    confident[0, 0] = confident[1, 2] = 50.0
    assert fidelity_loss(confident, y).item() < 1e-6
    assert abs(fidelity_loss(torch.zeros(2, 3), y).item() - math.log(3)) < 1e-12


def test_fidelity_single_teacher_reduces_to_cross_entropy():
    x, y = torch.randn(8, 3), torch.randint(0, 4, (8,))
    f = Linear(torch.randn(3, 4))
    ens = ensemble_logits(x, y, [f], torch.ones(1, 4))
    logits = f(x).numpy()
    ce = np.mean([-(l[t] - np.log(np.exp(l).sum())) for l, t in zip(logits, y.numpy())])
    assert abs(fidelity_loss(ens, y).item() - ce) < 1e-10


# ---------------------------------------------------------------- gates

def _onehot_logits(idx, c=3):
    out = torch.zeros(len(idx), c)
    out[torch.arange(len(idx)), torch.tensor(idx)] = 5.0
    return out


def test_gate_truth_table_exhaustive():
    combos = list(itertools.product(range(3), repeat=3))  # (student argmax, ensemble argmax, y)
    s = _onehot_logits([c[0] for c in combos])
    e = _onehot_logits([c[1] for c in combos])
    y = torch.tensor([c[2] for c in combos])
    diamond = transfer_gate(s, e, y, "DIAMOND")
    down = transfer_gate(s, e, y, "TRIANGLE_DOWN")
    up = transfer_gate(s, e, y, "TRIANGLE_UP")
    for k, (sa, ea, lab) in enumerate(combos):
        assert diamond[k] == float(sa != lab and ea == lab)
        assert down[k] == float(sa != ea)
        assert up[k] == 1.0
        assert diamond[k] <= down[k] <= up[k]
        if sa == lab:
            assert diamond[k] == 0


def test_gate_does_not_carry_gradient():
    s = torch.randn(4, 3, requires_grad=True)
    e = torch.randn(4, 3, requires_grad=True)
    g = transfer_gate(s, e, torch.tensor([0, 1, 2, 0]), "TRIANGLE_UP")
    assert not g.requires_grad


# ---------------------------------------------------------------- transferability

def test_transferability_zero_when_gate_closed():
    # student already predicts y everywhere -> diamond gate closed
    y = torch.tensor([0, 1])
    s = _onehot_logits([0, 1])
    e = torch.randn(2, 3)
    assert transferability_loss(e, s, y, "DIAMOND").item() == 0.0


def test_transferability_zero_for_identical_logits():
    e = torch.randn(5, 4)
    assert transferability_loss(e, e.clone(), torch.randint(0, 4, (5,)), "TRIANGLE_UP").item() == pytest.approx(0, abs=1e-12)


def test_transferability_is_negated_mean_kl():
    # choose logits so every sample has KL(ens || student) = 0.5 exactly: solve for a 2-class gap
    from scipy.optimize import brentq

    def kl_gap(g):
        return np_kl(np.array([g, 0.0]), np.array([0.0, 0.0])) - 0.5

    g = brentq(kl_gap, 0.0, 50.0)
    e = torch.tensor([[g, 0.0]] * 3)
    s = torch.zeros(3, 2)
    s[:, 1] = 1e-9  # student argmax = 1, ensemble argmax = 0 = y
    y = torch.zeros(3, dtype=torch.long)
    loss = transferability_loss(e, s, y, "DIAMOND").item()
    assert loss == pytest.approx(-0.5, abs=1e-6)


# ---------------------------------------------------------------- diversity

def np_diversity(s, h):
    b = len(s)
    s = s.reshape(b, -1)
    h = h.reshape(b, -1)
    tot = 0.0
    for j in range(b):
        for l in range(b):
            tot += np.linalg.norm(s[j] - s[l]) * np.linalg.norm(h[j] - h[l])
    return math.exp(-tot / b**2)


def test_diversity_identical_samples():
    s = torch.ones(4, 1, 2, 2)
    h = torch.randn(1, 3).expand(4, -1)
    assert diversity_loss(s, h).item() == 1.0


def test_diversity_two_sample_arithmetic():
    s = torch.tensor([[0.0, 0.0], [2.0, 0.0]])
    h = torch.tensor([[0.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    assert diversity_loss(s, h).item() == pytest.approx(math.exp(-3.0), abs=1e-12)
    assert diversity_loss(s, h).item() == pytest.approx(0.0498, abs=1e-4)


def test_diversity_matches_bruteforce():
    rng = np.random.default_rng(3)
    s, h = rng.normal(size=(6, 1, 3, 3)) * 0.1, rng.normal(size=(6, 4)) * 0.3
    assert diversity_loss(torch.tensor(s), torch.tensor(h)).item() == pytest.approx(np_diversity(s, h), rel=1e-10)


def test_diversity_decreases_when_spread():
    rng = np.random.default_rng(4)
    s, h = torch.tensor(rng.normal(size=(5, 4)) * 0.1), torch.tensor(rng.normal(size=(5, 2)) * 0.1)
    assert diversity_loss(2 * s, h).item() < diversity_loss(s, h).item()
    v = diversity_loss(s, h).item()
    assert 0 < v <= 1


def test_diversity_mean_sq_arithmetic():
    # pair distances: images 4/2 = 2, codes 9/3 = 3; two off-diagonal pairs out of four
    s = torch.tensor([[0.0, 0.0], [2.0, 0.0]])
    h = torch.tensor([[0.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    assert diversity_loss(s, h, "mean_sq").item() == pytest.approx(math.exp(-3.0), abs=1e-12)
    rng = np.random.default_rng(5)
    s, h = rng.normal(size=(4, 1, 2, 2)), rng.normal(size=(4, 3))
    sf, hf = s.reshape(4, -1), h
    tot = sum(((sf[j] - sf[l]) ** 2).mean() * ((hf[j] - hf[l]) ** 2).mean() for j in range(4) for l in range(4))
    assert diversity_loss(torch.tensor(s), torch.tensor(h), "mean_sq").item() == pytest.approx(math.exp(-tot / 16), rel=1e-10)
    with pytest.raises(ValueError):
        diversity_loss(torch.tensor(s), torch.tensor(h), "l1")


def test_diversity_gradient_finite_with_duplicates():
    s = torch.zeros(3, 4, requires_grad=True)
    h = torch.randn(3, 2)
    diversity_loss(s, h).backward()
    assert torch.isfinite(s.grad).all()


# ---------------------------------------------------------------- cross-divergence

def test_cross_divergence_same_batch_is_zero():
    f = Linear(torch.randn(4, 3))
    s = torch.randn(5, 4)
    y = torch.randint(0, 3, (5,))
    tau = torch.ones(1, 3)
    e = ensemble_logits(s, y, [f], tau)
    assert cross_divergence_loss(e, ensemble_logits(s.clone(), y, [f], tau)).item() == pytest.approx(0, abs=1e-12)


def test_cross_divergence_value():
    from scipy.optimize import brentq

    g = brentq(lambda g: np_kl(np.array([g, 0.0]), np.array([0.0, 0.0])) - 0.6, 0.0, 60.0)
    e1 = torch.tensor([[g, 0.0]] * 4)
    e2 = torch.zeros(4, 2)
    assert cross_divergence_loss(e1, e2).item() == pytest.approx(-0.6, abs=1e-6)


def test_cross_divergence_constant_teacher():
    f = Const([0.3, -1.0, 2.0])
    y = torch.tensor([0, 1])
    tau = torch.ones(1, 3)
    e1 = ensemble_logits(torch.randn(2, 5), y, [f], tau)
    e2 = ensemble_logits(torch.randn(2, 5), y, [f], tau)
    assert cross_divergence_loss(e1, e2).item() == pytest.approx(0, abs=1e-12)


def test_cross_divergence_no_gradient_to_other():
    e1 = torch.randn(3, 4, requires_grad=True)
    e2 = torch.randn(3, 4, requires_grad=True)
    cross_divergence_loss(e1, e2).backward()
    assert e2.grad is None and e1.grad is not None


# ---------------------------------------------------------------- distillation

def test_distillation_zero_when_student_matches():
    e = torch.randn(4, 3)
    assert distillation_loss([e.clone()], [e]).item() == pytest.approx(0, abs=1e-12)


def test_distillation_additivity_and_order():
    rng = np.random.default_rng(5)
    st_, en = torch.tensor(rng.normal(size=(4, 3))), torch.tensor(rng.normal(size=(4, 3)))
    one = distillation_loss([st_], [en]).item()
    assert distillation_loss([st_, st_], [en, en]).item() == pytest.approx(2 * one, rel=1e-12)
    want = np.mean([np_kl(a, b) for a, b in zip(st_.numpy(), en.numpy())])
    assert one == pytest.approx(want, rel=1e-10)
    swapped = distillation_loss([st_], [en], kl_order="teacher_first").item()
    assert swapped == pytest.approx(np.mean([np_kl(b, a) for a, b in zip(st_.numpy(), en.numpy())]), rel=1e-10)


def test_distillation_teacher_side_constant():
    s = torch.randn(3, 4, requires_grad=True)
    e = torch.randn(3, 4, requires_grad=True)
    distillation_loss([s], [e]).backward()
    assert e.grad is None


# ---------------------------------------------------------------- combined objective

def _tiny_setup(merge="MUL"):
    gen = build_generator((1, 16, 16), 3, 4, merge, seed=0, widths=(4,)).double()
    teachers = [Linear(torch.randn(256, 3, generator=torch.Generator().manual_seed(i)) * 0.1) for i in range(2)]
    student = Linear(torch.randn(256, 3, generator=torch.Generator().manual_seed(7)) * 0.1)
    z = torch.randn(6, 4, generator=torch.Generator().manual_seed(1))
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    tau = torch.tensor([[0.3, 0.5, 0.9], [0.7, 0.5, 0.1]])
    return gen, teachers, student, z, y, tau


def test_objective_zero_weights_is_fidelity():
    gen, teachers, student, z, y, tau = _tiny_setup()
    total, parts = generator_objective(gen, z, y, student, teachers, tau, GenLossWeights(0, 0, 0))
    assert total.item() == pytest.approx(parts["fid"], abs=1e-12)
    assert set(parts) == {"fid"}


def test_objective_unit_weights_is_sum_of_terms():
    gen, teachers, student, z, y, tau = _tiny_setup()
    torch.manual_seed(0)
    with torch.no_grad():
        s_other = gen(z, y) + 0.1
    gen.eval()  # freeze batch-norm so the independent recomputation sees the same samples
    total, parts = generator_objective(gen, z, y, student, teachers, tau, GenLossWeights(1, 1, 1), "TRIANGLE_UP", s_other)
    with torch.no_grad():
        h = gen.merge(z, y)
        s = gen.decode(h)
        e = ensemble_logits(s, y, teachers, tau)
        fid = fidelity_loss(e, y).item()
        tran = transferability_loss(e, student(s), y, "TRIANGLE_UP").item()
        div = diversity_loss(s, h).item()
        cd = cross_divergence_loss(e, ensemble_logits(s_other, y, teachers, tau)).item()
    assert total.item() == pytest.approx(fid + tran + div + cd, abs=1e-12)
    assert parts == pytest.approx({"fid": fid, "tran": tran, "div": div, "cd": cd}, abs=1e-12)


def test_objective_without_partner_has_no_cd_term():
    gen, teachers, student, z, y, tau = _tiny_setup()
    _, parts = generator_objective(gen, z, y, student, teachers, tau, GenLossWeights(1, 1, 0))
    assert "cd" not in parts


def test_loss_signs():
    gen, teachers, student, z, y, tau = _tiny_setup()
    with torch.no_grad():
        s_other = gen(z, y) * 0.5
    _, parts = generator_objective(gen, z, y, student, teachers, tau, GenLossWeights(1, 1, 1), "TRIANGLE_UP", s_other)
    assert parts["fid"] >= 0
    assert parts["tran"] <= 0
    assert parts["cd"] <= 0
    assert 0 < parts["div"] <= 1
