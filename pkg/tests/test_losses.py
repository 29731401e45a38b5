import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hgclr.checks import check_full_loss
from hgclr.losses import (
    ProjectionHead,
    bce_multilabel_loss,
    classification_loss,
    ntxent_batch_loss,
    project,
    total_loss,
)
from hgclr.pipeline.training import TrainConfig
from hgclr.tensor_autodiff import RngStream, Tensor


def ntxent_oracle(c: np.ndarray, cp: np.ndarray, tau: float) -> float:
    z = np.concatenate([c, cp])
    m, n = len(z), len(c)
    total = 0.0
    for a in range(m):
        sim = [float(z[a] @ z[b] / (np.linalg.norm(z[a]) * np.linalg.norm(z[b]))) / tau for b in range(m)]
        partner = (a + n) % m
        denom = sum(math.exp(sim[b]) for b in range(m) if b != a)
        total += -math.log(math.exp(sim[partner]) / denom)
    return total / m


class TestProjection:
    def test_zero_input(self):
        head = ProjectionHead(4, RngStream(0, "init"), np.float64)
        assert not project(Tensor(np.zeros((2, 4))), head).data.any()

    def test_identity_passes_positive(self):
        head = ProjectionHead(3, RngStream(0, "init"), np.float64)
        head.w_1.data[:] = np.eye(3)
        head.w_2.data[:] = np.eye(3)
        h = np.array([[0.5, 1.0, 2.0]])
        assert np.array_equal(project(Tensor(h), head).data, h)


class TestNTXent:
    def test_single_pair_is_exactly_zero(self):
        rng = np.random.default_rng(0)
        c, cp = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))
        assert ntxent_batch_loss(c, cp, 0.7).item() == 0.0

    def test_hand_value(self):
        c = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert ntxent_batch_loss(c, c, 1.0).item() == pytest.approx(math.log(1 + 2 / math.e), abs=1e-12)
        assert math.log(1 + 2 / math.e) == pytest.approx(0.55144, abs=1e-5)

    @pytest.mark.parametrize("n", range(1, 9))
    def test_brute_force(self, n):
        rng = np.random.default_rng(n)
        c, cp = rng.normal(size=(n, 5)), rng.normal(size=(n, 5))
        tau = float(rng.uniform(0.2, 2.0))
        assert ntxent_batch_loss(Tensor(c), Tensor(cp), tau).item() == pytest.approx(ntxent_oracle(c, cp, tau), abs=1e-6)

    def test_zero_norm_row(self):
        with pytest.raises(ValueError):
            ntxent_batch_loss(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))

    def test_tau_positive(self):
        with pytest.raises(ValueError):
            ntxent_batch_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), 0.0)


class TestBCE:
    def test_half(self):
        assert bce_multilabel_loss([0.5], [1]) == pytest.approx(0.69315, abs=1e-5)

    def test_perfect_fit(self):
        assert bce_multilabel_loss([1.0, 0.0], [1, 0]) == pytest.approx(0.0, abs=1e-6)

    def test_two_labels(self):
        assert bce_multilabel_loss([[0.9, 0.2]], [[1, 0]]) == pytest.approx(0.32850, abs=1e-5)

    @settings(max_examples=100, deadline=None)
    # beyond |z| ~ 15 the naive 1 - p itself loses digits, so it stops being an oracle
    @given(arrays(np.float64, (3, 4), elements=st.floats(-15, 15)), st.integers(0, 2**32 - 1))
    def test_stable_matches_naive(self, z, seed):
        y = np.random.default_rng(seed).integers(0, 2, size=z.shape).astype(float)
        p = 1 / (1 + np.exp(-z))
        with np.errstate(divide="ignore"):
            naive = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum()
        if np.isfinite(naive):
            stable = classification_loss(Tensor(z), y).item()
            assert stable == pytest.approx(naive, abs=1e-6, rel=1e-9)

    def test_mean_reduction_averages_documents(self):
        z, y = np.zeros((2, 3)), np.ones((2, 3))
        assert classification_loss(Tensor(z), y, "mean").item() == pytest.approx(3 * math.log(2))
        assert classification_loss(Tensor(z), y, "sum").item() == pytest.approx(6 * math.log(2))


class TestTotal:
    def test_presets(self):
        assert TrainConfig().lam == 0.1
        a, b, c = (Tensor(np.array(v)) for v in (1.0, 2.0, 4.0))
        assert total_loss(a, b, c, 0.3).item() == pytest.approx(1.0 + 2.0 + 0.3 * 4.0)

    def test_lambda_zero_is_plain_classifier(self):
        a = Tensor(np.array(1.5))
        assert total_loss(a, None, Tensor(np.array(9.0)), 0.0).item() == 1.5

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_loss(Tensor(np.array(1.0)), None, None, -0.1)


@pytest.mark.parametrize("seed", [0, 1])
def test_full_objective_gradcheck(seed):
    assert check_full_loss(seed) < 1e-4
