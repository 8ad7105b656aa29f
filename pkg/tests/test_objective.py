import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcformer import numerics as nx
from dfcformer.exceptions import ConfigError, ContractError
from dfcformer.gradcheck import check_tensors
from dfcformer.numerics import Tensor
from dfcformer.objective import (BatchEmbeddings, LossWeights, anchors_without_positive, contrastive_loss,
                                 cosine_sim, cross_entropy, pair_mask, pair_terms, total_loss)


def mp_contrastive(z, labels, tau):
    """Enumerate every (anchor, positive, k) term at 50 digits."""
    with mpmath.workdps(50):
        rows = [[mpmath.mpf(float(v)) for v in r] for r in z]
        norm = [mpmath.sqrt(sum(v * v for v in r)) for r in rows]
        b = len(rows)

        def d(i, j):
            return sum(x * y for x, y in zip(rows[i], rows[j])) / (norm[i] * norm[j])

        terms = []
        for i in range(b):
            for p in range(b):
                if p == i or labels[p] != labels[i]:
                    continue
                denom = sum(mpmath.exp(d(i, k) / tau) for k in range(b) if k != i)
                terms.append(-mpmath.log(mpmath.exp(d(i, p) / tau) / denom))
        return float(sum(terms) / len(terms))


def mp_cross_entropy(logits, labels):
    with mpmath.workdps(50):
        total = 0
        for z, y in zip(logits, labels):
            s = 1 / (1 + mpmath.exp(-mpmath.mpf(z)))
            total += -(y * mpmath.log(s) + (1 - y) * mpmath.log(1 - s))
        return float(total / len(logits))


def batch(z, labels, logits=None):
    lg = None if logits is None else Tensor(np.asarray(logits, dtype=np.float64).reshape(-1, 1))
    return BatchEmbeddings(Tensor(np.asarray(z, dtype=np.float64)), labels, lg)


# --- similarity and pairs ------------------------------------------------------------------


def test_cosine_examples():
    v = Tensor([[0.3, -1.2, 2.0]])
    assert abs(cosine_sim(v, v).item() - 1.0) < 1e-15
    assert cosine_sim(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item() == 0.0
    assert abs(cosine_sim(v, v * 2.0).item() - 1.0) < 1e-15
    with pytest.raises(ContractError):
        cosine_sim(v, Tensor([[0.0, 0.0, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_cosine_is_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    u, v = Tensor(rng.uniform(-1, 1, (1, 5))), Tensor(rng.uniform(-1, 1, (1, 5)))
    assert abs(cosine_sim(u, v * c).item() - cosine_sim(u, v).item()) < 1e-12
    assert -1.0 <= cosine_sim(u, v).item() <= 1.0


def test_pair_mask_examples():
    assert {tuple(p) for p in np.argwhere(pair_mask([0, 0, 1]))} == {(0, 1), (1, 0)}
    np.testing.assert_array_equal(pair_mask([1, 1, 1]), 1.0 - np.eye(3))
    assert {tuple(p) for p in np.argwhere(pair_mask([0, 1, 0, 1]))} == {(0, 2), (2, 0), (1, 3), (3, 1)}
    assert anchors_without_positive([0, 0, 1]) == 1


# --- contrastive loss ------------------------------------------------------------------------


def test_equal_similarities_give_log_b_minus_one():
    z = np.tile([[0.2, -0.4, 0.9]], (3, 1))
    assert abs(contrastive_loss(batch(z, [0, 0, 1]), 0.5).item() - np.log(2.0)) < 1e-12
    for b in range(2, 9):
        z = np.eye(b)
        labels = [i % 2 for i in range(b)] if b > 2 else [0, 0]
        assert abs(contrastive_loss(batch(z, labels), 0.3).item() - np.log(b - 1)) < 1e-12


def test_large_temperature_washes_out_similarities():
    z = np.random.default_rng(0).uniform(-1, 1, (5, 4))
    assert abs(contrastive_loss(batch(z, [0, 1, 0, 1, 1]), 1e9).item() - np.log(4.0)) < 1e-8


def test_matches_enumeration_oracle():
    rng = np.random.default_rng(1)
    z = rng.uniform(-1, 1, (4, 3))
    labels = [0, 1, 1, 0]
    assert abs(contrastive_loss(batch(z, labels), 0.5).item() - mp_contrastive(z, labels, 0.5)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.floats(0.05, 5.0))
def test_contrastive_oracle_property(seed, b, tau):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, b)
    if pair_mask(labels).sum() == 0:
        labels[1] = labels[0]
    z = rng.uniform(-1, 1, (b, int(rng.integers(2, 6))))
    data = batch(z, labels)
    assert abs(contrastive_loss(data, tau).item() - mp_contrastive(z, labels, tau)) < 1e-10
    for value in pair_terms(data, tau).values():
        assert value >= 0.0


def test_contrastive_errors():
    z = np.random.default_rng(2).uniform(-1, 1, (3, 2))
    with pytest.raises(ConfigError):
        contrastive_loss(batch(z, [0, 0, 1]), 0.0)
    with pytest.raises(ContractError):
        contrastive_loss(batch(z, [0, 1, 2]), 0.5)


def test_raising_positive_similarity_lowers_its_term():
    base = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.3]])
    labels = [0, 0, 1]
    previous = np.inf
    # rotating the positive towards anchor 0 leaves every other similarity of anchor 0 unchanged
    for angle in np.linspace(np.pi / 2, 0.05, 6):
        z = base.copy()
        z[1] = [np.cos(angle), np.sin(angle)]
        value = pair_terms(batch(z, labels), 0.5)[(0, 1)]
        assert value < previous
        previous = value


# --- cross-entropy and total loss ---------------------------------------------------------------


def test_cross_entropy_examples():
    assert abs(cross_entropy(Tensor([[0.0]]), [1]).item() - np.log(2.0)) < 1e-15
    assert cross_entropy(Tensor([[50.0]]), [1]).item() < 1e-20
    expected = mp_cross_entropy([1.0, -0.5], [1, 0])
    assert abs(expected - (np.log1p(np.exp(-1.0)) + np.log1p(np.exp(-0.5))) / 2) < 1e-15
    assert abs(cross_entropy(Tensor([[1.0], [-0.5]]), [1, 0]).item() - expected) < 1e-15
    assert abs(cross_entropy(Tensor([[1.0, -0.5]]), [1, 0]).item() - expected) < 1e-15
    assert np.isfinite(cross_entropy(Tensor([[-800.0]]), [1]).item())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_entropy_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-5, 5, 6)
    y = rng.integers(0, 2, 6)
    perm = rng.permutation(6)
    a = cross_entropy(Tensor(z[:, None]), y).item()
    b = cross_entropy(Tensor(z[perm][:, None]), y[perm]).item()
    assert abs(a - b) <= 1e-15 * max(1.0, abs(a))


def derived_batch():
    z = np.random.default_rng(3).uniform(-1, 1, (4, 3))
    return z, [0, 1, 1, 0], [1.0, -0.5, 0.25, -2.0]


def test_total_loss_compositions():
    z, labels, logits = derived_batch()
    data = batch(z, labels, logits)
    lc = mp_contrastive(z, labels, 0.5)
    lce = mp_cross_entropy(logits, labels)
    only_ce = total_loss(data, LossWeights(alpha=0.0, beta=1.7)).total.item()
    assert only_ce == cross_entropy(data.logits, labels).item() * 1.7
    assert abs(total_loss(data, LossWeights()).total.item() - (lc + lce)) < 1e-12
    assert abs(total_loss(data, LossWeights(alpha=0.5, beta=2.0)).total.item() - (0.5 * lc + 2.0 * lce)) < 1e-12


def test_learnable_weights_are_positive_and_receive_gradients():
    z, labels, logits = derived_batch()
    w = LossWeights(alpha=0.8, beta=1.2, mode="learnable")
    assert np.allclose(w.current(), (0.8, 1.2), atol=1e-12)
    parts = total_loss(batch(z, labels, logits), w)
    nx.backward(parts.total)
    assert abs(w.alpha_raw.grad[0, 0] - parts.contrastive.item() / (1 + np.exp(-w.alpha_raw.values[0, 0]))) < 1e-12
    assert w.beta_raw.grad is not None
    with pytest.raises(ConfigError):
        LossWeights(mode="adaptive")
    with pytest.raises(ConfigError):
        LossWeights(alpha=-1.0)


def test_objective_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    emb = Tensor(rng.uniform(-1, 1, (6, 4)), requires_grad=True)
    logits = Tensor(rng.uniform(-2, 2, (6, 1)), requires_grad=True)
    labels = [0, 1, 1, 0, 1, 0]
    weights = LossWeights(alpha=0.7, beta=1.3, tau=0.4)
    results = check_tensors(lambda: total_loss(BatchEmbeddings(emb, labels, logits), weights).total,
                            {"embeddings": emb, "logits": logits})
    assert max(err for _, err in results) < 1e-5
