import numpy as np
import pytest

from app.compression import (
    cls_scores,
    distortion,
    grad_scatter,
    pad_server_grad,
    reconstruct,
    refine,
    top_k_select,
)
from app.exceptions import CompressionError, DimensionError
from app.numeric.rng import Rng


def test_top_k_prefers_larger_scores_and_sorts_indices():
    alpha = np.array([[0.1, 0.4, 0.2, 0.3]])
    assert top_k_select(alpha, 2).tolist() == [[2, 4]]


def test_top_k_breaks_ties_toward_smaller_index():
    alpha = np.full((1, 5), 0.2)
    assert top_k_select(alpha, 3).tolist() == [[1, 2, 3]]


@pytest.mark.parametrize("k", [0, 5])
def test_top_k_rejects_out_of_range_budget(k):
    with pytest.raises(CompressionError):
        top_k_select(np.full((1, 4), 0.25), k)


def test_cls_scores_are_a_distribution():
    alpha = cls_scores(Rng(1).normal(3.0, (3, 6)))
    assert np.allclose(alpha.sum(axis=1), 1.0)


def test_refine_layout():
    rng = Rng(2)
    acts = rng.normal(1.0, (2, 6, 3))
    alpha = cls_scores(rng.normal(1.0, (2, 5)))
    ref = refine(acts, alpha, 2)
    assert ref.tokens.shape == (2, 4, 3)
    assert ref.merged_present
    assert np.array_equal(ref.tokens[:, 0], acts[:, 0])
    for b in range(2):
        assert np.array_equal(ref.tokens[b, 1:3], acts[b, ref.indices[b]])
        dropped = [i for i in range(1, 6) if i not in ref.indices[b]]
        w = alpha[b, [i - 1 for i in dropped]]
        expected = (w[:, None] * acts[b, dropped]).sum(axis=0) / w.sum()
        assert np.allclose(ref.tokens[b, 3], expected)
        assert ref.merge_weights[b].sum() == pytest.approx(1.0)
        assert np.all(ref.merge_weights[b, ref.indices[b] - 1] == 0.0)


def test_full_budget_drops_nothing():
    acts = Rng(3).normal(1.0, (2, 5, 3))
    ref = refine(acts, np.full((2, 4), 0.25), 4)
    assert not ref.merged_present
    assert not ref.tokens[:, -1].any()
    assert np.array_equal(ref.server_tokens(), acts)
    assert np.array_equal(reconstruct(ref, 4), acts)


def test_refine_checks_score_shape():
    with pytest.raises(DimensionError):
        refine(np.zeros((1, 5, 2)), np.full((1, 3), 1 / 3), 1)


def test_underflowed_scores_fall_back_to_plain_mean():
    acts = Rng(4).normal(1.0, (1, 4, 2))
    alpha = np.array([[1.0, 0.0, 0.0]])
    ref = refine(acts, alpha, 1)
    assert ref.indices.tolist() == [[1]]
    assert np.allclose(ref.tokens[0, 2], acts[0, 2:].mean(axis=0))


def test_reconstruct_fills_dropped_slots_with_merged_token():
    acts = Rng(5).normal(1.0, (1, 5, 2))
    ref = refine(acts, np.array([[0.1, 0.6, 0.2, 0.1]]), 1)
    out = reconstruct(ref, 4)
    assert np.array_equal(out[0, 2], acts[0, 2])
    for i in (1, 3, 4):
        assert np.array_equal(out[0, i], ref.tokens[0, 2])


def test_grad_scatter_is_adjoint_of_refine():
    """<refine(A), G> == <A, scatter(G)> with the merge weights held fixed."""
    rng = Rng(6)
    for _ in range(100):
        b = int(rng.integers(1, 5))
        m = int(rng.integers(1, 17))
        k = int(rng.integers(1, m + 1))
        d = int(rng.integers(1, 6))
        acts = rng.normal(1.0, (b, m + 1, d))
        ref = refine(acts, cls_scores(rng.normal(1.0, (b, m))), k)
        g = rng.normal(1.0, ref.tokens.shape)
        lhs = float(np.sum(ref.tokens * g))
        rhs = float(np.sum(acts * grad_scatter(g, ref, m)))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs)), (b, m, k, d)


def test_grad_scatter_ignores_absent_merged_slot():
    acts = Rng(7).normal(1.0, (1, 4, 2))
    ref = refine(acts, np.full((1, 3), 1 / 3), 3)
    g = np.ones((1, 5, 2))
    out = grad_scatter(g, ref, 3)
    assert np.array_equal(out, np.ones((1, 4, 2)))


def test_pad_server_grad_restores_merged_slot():
    acts = Rng(8).normal(1.0, (2, 4, 2))
    full = refine(acts, np.full((2, 3), 1 / 3), 3)
    g = np.ones((2, 4, 2))
    padded = pad_server_grad(g, full)
    assert padded.shape == (2, 5, 2)
    assert not padded[:, -1].any()
    partial = refine(acts, np.full((2, 3), 1 / 3), 1)
    assert pad_server_grad(np.ones(partial.tokens.shape), partial).shape == partial.tokens.shape


def test_distortion_is_bounded_by_selection_error():
    """||A - reconstruct(refine(A))||^2 <= 4 Psi (M - K) B on random instances."""
    rng = Rng(9)
    violations = 0
    for trial in range(100):
        b = int(rng.integers(1, 5))
        m = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        k = int(rng.integers(1, m + 1))
        acts = rng.normal(float(rng.uniform()) * 3.0 + 0.1, (b, m + 1, d))
        ref = refine(acts, cls_scores(rng.normal(2.0, (b, m))), k)
        psi = float(np.max(np.sum(acts * acts, axis=-1)))
        if distortion(acts, ref) > 4.0 * psi * (m - k) * b * (1.0 + 1e-12):
            violations += 1
    assert violations == 0


def test_distortion_shrinks_with_budget_under_uniform_scores():
    acts = Rng(10).normal(1.0, (2, 9, 4))
    alpha = np.full((2, 8), 1 / 8)
    errors = [distortion(acts, refine(acts, alpha, k)) for k in range(1, 9)]
    assert all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))
    assert errors[-1] == 0.0
