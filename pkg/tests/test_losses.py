import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from encofa.losses import (
    CLEAN, CLOSED, OPEN, classification_loss, classification_loss_branches, dynamic_label,
    dynamic_labels, ensc_loss, pseudo_label, pseudo_weights, refine_labels, total_loss,
)
from encofa.noise_identifier import Partition


def simplex(rng, k):
    return rng.dirichlet(np.ones(k))


def test_pseudo_label_examples():
    e = np.eye(3)[1]
    assert np.allclose(pseudo_label(e, e), e)
    assert np.allclose(pseudo_label([0.6, 0.4], [0.4, 0.6]), [0.5, 0.5])
    assert np.allclose(pseudo_label([0.8, 0.2], [0.8, 0.2]), [16 / 17, 1 / 17], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8))
def test_pseudo_label_sharpens(seed, k):
    rng = np.random.default_rng(seed)
    p1, p2 = simplex(rng, k), simplex(rng, k)
    out = pseudo_label(p1, p2)
    assert abs(out.sum() - 1) < 1e-9
    m = (p1 + p2) / 2
    ent = lambda p: -(p * np.log(np.maximum(p, 1e-300))).sum()
    assert ent(out) <= ent(m) + 1e-9
    assert np.allclose(out, oracles.pseudo_label(p1, p2), rtol=1e-9, atol=0)


def test_pseudo_weights_bimodal():
    rng = np.random.default_rng(0)
    low, high = rng.normal(0.0, 0.1, 100), rng.normal(1.0, 0.1, 100)
    w = pseudo_weights(np.concatenate([low, high]))
    assert np.all(w[:100] > 0.99) and np.all(w[100:] < 0.01)


def test_pseudo_weights_degenerate_and_permutation():
    assert np.all(pseudo_weights(np.full(10, 0.3)) == 0.5)
    x = np.random.default_rng(1).gamma(1.0, 1.0, 50)
    perm = np.random.default_rng(2).permutation(50)
    assert np.allclose(pseudo_weights(x)[perm], pseudo_weights(x[perm]))


def test_dynamic_labels():
    assert dynamic_label(1, 3, 9, 0) == 0
    assert dynamic_label(5, 3, 9, 0) == dynamic_label(5, 3, 9, 0)
    d = dynamic_labels(5, 0, np.arange(100_000), seed=4)
    freq = np.bincount(d, minlength=5) / len(d)
    sigma = math.sqrt(0.2 * 0.8 / len(d))
    assert np.all(np.abs(freq - 0.2) < 3 * sigma)
    # resampled across epochs
    assert (dynamic_labels(5, 1, np.arange(1000), 4) != d[:1000]).mean() > 0.5


def test_classification_loss_examples():
    probs = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    one = lambda v, **kw: torch.tensor(v, **kw)
    assert classification_loss(probs, one([CLEAN]), one([1]), torch.zeros(1, 2, dtype=torch.float64),
                               torch.ones(1, dtype=torch.float64)).item() == 0.0
    half = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    val = classification_loss(half, one([CLEAN]), one([1]), torch.zeros(1, 2, dtype=torch.float64),
                              torch.ones(1, dtype=torch.float64)).item()
    assert val == pytest.approx(math.log(2), abs=1e-12)


def _random_batch(seed, n=9, k=4):
    rng = np.random.default_rng(seed)
    probs = torch.as_tensor(rng.dirichlet(np.ones(k), n))
    kind = torch.as_tensor(rng.integers(0, 3, n))
    hard = torch.as_tensor(np.where(kind.numpy() == CLOSED, -1, rng.integers(0, k, n)))
    soft = torch.as_tensor(rng.dirichlet(np.ones(k), n))
    weight = torch.as_tensor(rng.uniform(0, 1, n))
    return probs, kind, hard, soft, weight


def test_classification_loss_additive_over_branches():
    probs, kind, hard, soft, weight = _random_batch(0)
    joint = classification_loss(probs, kind, hard, soft, weight).item()
    cl, cn, on, _ = classification_loss_branches(probs, kind, hard, soft, weight)
    assert joint == pytest.approx(cl.item() + cn.item() + on.item(), abs=1e-12)


def test_zero_closed_weights_annihilate_branch():
    probs, kind, hard, soft, weight = _random_batch(1)
    weight[kind == CLOSED] = 0
    cl, cn, on, _ = classification_loss_branches(probs, kind, hard, soft, weight)
    assert cn.item() == 0.0
    assert classification_loss(probs, kind, hard, soft, weight).item() == pytest.approx(cl.item() + on.item())


def test_zero_probability_is_clamped():
    probs = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    _, _, _, clamped = classification_loss_branches(probs, torch.tensor([CLEAN]), torch.tensor([1]),
                                                    torch.zeros(1, 2, dtype=torch.float64),
                                                    torch.ones(1, dtype=torch.float64))
    assert clamped


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def ensc_np(z, y, w, tau=0.2):
    return ensc_loss(torch.as_tensor(z), torch.as_tensor(y), torch.as_tensor(w, dtype=torch.float64), tau).item()


def test_ensc_examples():
    z = unit([[1.0, 0.0], [0.6, 0.8]])
    assert ensc_np(z, [0, 0], [1.0, 1.0]) == pytest.approx(0.0, abs=1e-12)
    z3 = unit(np.random.default_rng(0).normal(size=(3, 4)))
    assert ensc_np(z3, [0, 1, 2], [1.0, 1.0, 1.0]) == 0.0
    ang = np.deg2rad([0.0, 10.0, 180.0])
    z = np.stack([np.cos(ang), np.sin(ang)], 1)
    assert ensc_np(z, [1, 1, 2], [1.0, 1.0, 1.0]) == pytest.approx(
        oracles.ensc(z.tolist(), [1, 1, 2], [1.0, 1.0, 1.0], 0.2), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_ensc_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    z = unit(rng.normal(size=(n, 3)))
    y = rng.integers(0, 3, n)
    w = rng.uniform(0.05, 1.0, n)
    expected = oracles.ensc(z.tolist(), y.tolist(), w.tolist(), 0.2)
    assert ensc_np(z, y, w) == pytest.approx(expected, rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100.0))
def test_ensc_invariant_to_weight_scale(seed, c):
    rng = np.random.default_rng(seed)
    z = unit(rng.normal(size=(8, 4)))
    y = rng.integers(0, 3, 8)
    w = rng.uniform(0.1, 1.0, 8)
    assert ensc_np(z, y, w * c) == pytest.approx(ensc_np(z, y, w), rel=1e-9, abs=1e-12)


def test_ensc_monotone_in_positive_similarity():
    z = unit([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]])
    y, w = [0, 0, 1], [1.0, 1.0, 1.0]
    prev = ensc_np(z, y, w)
    for a in np.linspace(80, 5, 8):
        z2 = z.copy()
        z2[1] = [np.cos(np.deg2rad(a)), np.sin(np.deg2rad(a))]
        cur = ensc_np(z2, y, w)
        assert cur < prev
        prev = cur


def test_ensc_zero_weight_members_dropped():
    z = unit(np.random.default_rng(3).normal(size=(4, 3)))
    y = [0, 0, 1, 1]
    full = ensc_np(z[:3], y[:3], [1.0, 1.0, 1.0])
    assert ensc_np(z, y, [1.0, 1.0, 1.0, 0.0]) == pytest.approx(full, rel=1e-12)
    assert math.isfinite(ensc_np(z, y, [0.0, 0.0, 0.0, 0.0]))


def test_refine_labels_rules():
    observed = np.array([0, 1, 2, 3, 4, 1])
    pseudo = np.zeros((6, 5))
    pseudo[2] = [0.1, 0.7, 0.2, 0, 0]
    part = Partition(np.array([0, 1, 5]), np.array([2]), np.array([3, 4]))
    sup = refine_labels(part, observed, pseudo, 5, closed_weights=np.array([0.4]),
                        dynamic=np.array([9, 9, 9, 1, 2, 9]))
    assert list(sup.refined) == [0, 1, 1, 5, 5, 1]
    assert list(sup.kind) == [CLEAN, CLEAN, CLOSED, OPEN, OPEN, CLEAN]
    assert sup.weight[2] == 0.4 and np.all(sup.weight[[0, 1, 3, 4, 5]] == 1.0)
    assert sup[3].target == 1 and sup[4].target == 2
    assert abs(sum(sup[2].target) - 1) < 1e-9


def test_refine_all_clean():
    obs = np.array([3, 1, 0])
    sup = refine_labels(Partition.all_clean(3), obs, None, 4)
    assert np.array_equal(sup.refined, obs)


def test_total_loss():
    assert total_loss(1.0, 2.0, 1.5) == 4.0
    assert total_loss(0.7, 123.0, 0.0) == 0.7
