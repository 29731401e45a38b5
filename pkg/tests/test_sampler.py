import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgclr.positive_sampler import (
    Sampler,
    build_positive_embeddings,
    random_mask_embeddings,
    sample_token_probs,
    token_label_scores,
)
from hgclr.tensor_autodiff import RngStream, Tensor


def identity_sampler(d):
    s = Sampler(d, RngStream(0, "init"), np.float64)
    s.w_q.data[:] = np.eye(d)
    s.w_k.data[:] = np.eye(d)
    return s


class TestScores:
    def test_identity_projection(self):
        u = np.array([1.0, 2.0, 2.0, 0.0])
        s = token_label_scores(Tensor(u[None, None, :]), Tensor(u[None, :]), identity_sampler(4))
        assert s.data[0, 0, 0] == pytest.approx(9.0 / 2.0)

    def test_zero_token_scores_zero(self):
        sampler = Sampler(4, RngStream(0, "init"), np.float64)
        labels = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        s = token_label_scores(Tensor(np.zeros((1, 2, 4))), labels, sampler)
        assert not s.data.any()

    def test_scaling_labels_scales_scores(self):
        sampler = Sampler(4, RngStream(0, "init"), np.float64)
        rng = np.random.default_rng(1)
        e, labels = Tensor(rng.normal(size=(1, 3, 4))), rng.normal(size=(5, 4))
        a = token_label_scores(e, Tensor(labels), sampler).data
        b = token_label_scores(e, Tensor(2 * labels), sampler).data
        assert np.allclose(b, 2 * a)
        assert np.array_equal(a.argmax(-1), b.argmax(-1))

    def test_counts_calls(self):
        sampler = Sampler(4, RngStream(0, "init"), np.float64)
        token_label_scores(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((2, 4))), sampler)
        assert sampler.forward_calls == 1


class TestProbs:
    def test_all_labels_gives_one(self):
        scores = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
        p = sample_token_probs(scores, np.ones((2, 4)), 1.0, RngStream(0, "gumbel"))
        assert np.allclose(p.data, 1.0)

    def test_uniform_slice(self):
        y = np.array([[1, 0, 1, 0, 0]])
        p = sample_token_probs(Tensor(np.zeros((1, 4, 5))), y, 1.0, None)
        assert np.allclose(p.data, 2 / 5)

    def test_empty_label_set(self):
        with pytest.raises(ValueError):
            sample_token_probs(Tensor(np.zeros((2, 1, 3))), np.array([[1, 0, 0], [0, 0, 0]]), 1.0, None)


def random_gate_case(rng):
    N, n, d = rng.integers(1, 4), rng.integers(2, 9), rng.integers(1, 6)
    e = Tensor(rng.normal(size=(N, n, d)), requires_grad=True)
    probs = Tensor(rng.uniform(size=(N, n)), requires_grad=True)
    gamma = float(rng.uniform(0.05, 0.95))
    return e, probs, gamma


class TestGate:
    def test_kept_position_is_bit_exact(self):
        e = Tensor(np.array([[[0.3, -1.7, 2.2]]]), requires_grad=True)
        g = build_positive_embeddings(e, Tensor(np.array([[0.9]]), requires_grad=True), 0.02)
        assert np.array_equal(g.gated.data, e.data)

    def test_closed_gate(self):
        e = Tensor(np.array([[[0.3, -1.7]]]), requires_grad=True)
        p = Tensor(np.array([[0.001]]), requires_grad=True)
        g = build_positive_embeddings(e, p, 0.02)
        assert not g.gated.data.any()
        g.gated.sum().backward()
        assert p.grad is None or not p.grad.any()

    def test_backward_matches_formula(self):
        rng = np.random.default_rng(0)
        e, p, gamma = random_gate_case(rng)
        g = build_positive_embeddings(e, p, gamma)
        upstream = rng.normal(size=e.shape)
        (g.gated * upstream).sum().backward()
        expected = (upstream * e.data).sum(-1) * (p.data > gamma)
        assert np.allclose(p.grad, expected, rtol=0, atol=1e-12)

    def test_forced_positions(self):
        e = Tensor(np.ones((1, 3, 2)), requires_grad=True)
        p = Tensor(np.array([[0.0, 0.9, 0.9]]), requires_grad=True)
        g = build_positive_embeddings(e, p, 0.5, force_keep=np.array([[True, False, False]]),
                                      force_drop=np.array([[False, False, True]]))
        assert g.keep.tolist() == [[True, True, False]]
        g.gated.sum().backward()
        assert p.grad.tolist() == [[0.0, 2.0, 0.0]]

    def test_gamma_bounds(self):
        e, p, _ = random_gate_case(np.random.default_rng(0))
        for bad in (0.0, 1.0, -0.1):
            with pytest.raises(ValueError):
                build_positive_embeddings(e, p, bad)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
    def test_monotone_in_gamma(self, seed, gamma, step):
        e, p, _ = random_gate_case(np.random.default_rng(seed))
        lo = build_positive_embeddings(e, p, gamma).keep.sum()
        hi = build_positive_embeddings(e, p, min(gamma + step, 0.99)).keep.sum()
        assert hi <= lo


def test_random_mask_respects_forced_positions():
    e = Tensor(np.ones((2, 6, 3)))
    fk = np.zeros((2, 6), bool)
    fk[:, 0] = True
    fd = np.zeros((2, 6), bool)
    fd[1, 4:] = True
    g = random_mask_embeddings(e, 0.0, RngStream(0, "mask"), fk, fd)
    assert g.keep[:, 0].all()
    assert not g.keep[:, 1:].any()
    g = random_mask_embeddings(e, 1.0, RngStream(0, "mask"), fk, fd)
    assert not g.keep[1, 4:].any() and g.keep[0].all()
