import numpy as np
import pytest

from app.analysis import BoundConstants, activation_constants, measure_constants, r_term
from app.compression import cls_scores, refine
from app.config import BoundSettings, TrainConfig
from app.exceptions import BoundError
from app.model import device_forward
from app.numeric.rng import Rng


@pytest.fixture
def consts():
    return BoundConstants(
        sigma2=[1.0, 2.0],
        gamma=1.0,
        kappa=1.0,
        S=0.5,
        epsilon2=1.0,
        Psi=0.5,
        Lambda=2.0,
        participation=[1.0, 0.5],
        weights=[0.5, 0.5],
        V=2,
        I=2,
        T=4,
        eta=0.1,
    )


def test_hand_evaluated_residual(consts):
    # scale 8*2*0.5*2/4 * 4*0.01 = 0.16
    # client terms 1.25 * (2 + 16/3 + 48) and 2.5 * (4 + 16/3 + 48)
    assert r_term(2, 2, consts, M=4, B=3, d=5) == pytest.approx(34.0, rel=1e-12)


def test_no_compression_leaves_variance_term(consts):
    sigma_only = 0.16 * (1.25 * 2.0 + 2.5 * 4.0)
    assert r_term(200, 4, consts, M=4, B=3, d=5) == pytest.approx(sigma_only, rel=1e-12)


def test_selection_term_is_linear_in_dropped_tokens(consts):
    r = [r_term(8, k, consts, M=6, B=2, d=10) for k in range(7)]
    step = r[5] - r[6]
    for k in range(6):
        assert r[k] - r[6] == pytest.approx((6 - k) * step, rel=1e-9)


def test_residual_decreases_in_budget_and_bits(consts):
    by_k = [r_term(8, k, consts, M=6, B=2, d=10) for k in range(1, 7)]
    assert all(a > b for a, b in zip(by_k, by_k[1:]))
    by_q = [r_term(q, 3, consts, M=6, B=2, d=10) for q in (2, 4, 8, 16, 32)]
    assert all(a > b for a, b in zip(by_q, by_q[1:]))


def test_residual_is_bit_identical_on_repeat(consts):
    assert r_term(4, 2, consts, 6, 2, 10) == r_term(4, 2, consts, 6, 2, 10)


def test_eta_schedule(consts):
    schedule = consts.model_copy(update={"eta": [0.1, 0.1, 0.1, 0.1]})
    assert r_term(4, 2, schedule, 6, 2, 10) == pytest.approx(r_term(4, 2, consts, 6, 2, 10))


@pytest.mark.parametrize("kappa", [0.0, -1.0])
def test_rejects_nonpositive_kappa(consts, kappa):
    with pytest.raises(BoundError):
        r_term(8, 2, consts.model_copy(update={"kappa": kappa}), 4, 2, 10)


def test_rejects_budget_beyond_tokens(consts):
    with pytest.raises(BoundError):
        r_term(8, 5, consts, 4, 2, 10)


def test_constants_validate_lengths():
    with pytest.raises(ValueError):
        BoundConstants(
            sigma2=[1.0], gamma=1, kappa=1, S=1, Psi=0, Lambda=0,
            participation=[1.0, 1.0], weights=[0.5, 0.5], V=2, I=1, T=1, eta=0.1,
        )


def test_from_settings_fills_defaults():
    train = TrainConfig(T=5, I=2, eta=0.05, clients=4, clients_per_round=2)
    c = BoundConstants.from_settings(BoundSettings(sigma2=0.5), train, Psi=3.0, Lambda=7.0)
    assert c.sigma2 == [0.5] * 4
    assert c.weights == [0.25] * 4
    assert c.participation == [1.0] * 4
    assert (c.Psi, c.Lambda, c.V, c.I, c.T) == (3.0, 7.0, 4, 2, 5)


def test_from_settings_prefers_configured_constants():
    train = TrainConfig(clients=2, clients_per_round=1)
    c = BoundConstants.from_settings(BoundSettings(Psi=1.5, Lambda=2.5), train, Psi=9.0, Lambda=9.0)
    assert (c.Psi, c.Lambda) == (1.5, 2.5)


def test_from_settings_reports_bad_lists():
    train = TrainConfig(clients=3, clients_per_round=1)
    with pytest.raises(BoundError):
        BoundConstants.from_settings(BoundSettings(sigma2=[1.0, 1.0]), train, 0.0, 0.0)


def test_zero_activations():
    acts = [np.zeros((2, 4, 3))]
    assert activation_constants(acts, acts) == (0.0, 0.0)


def test_single_token_norm():
    acts = np.zeros((1, 3, 2))
    acts[0, 1] = [0.0, 2.0]
    psi, lam = activation_constants([acts], [acts])
    assert psi == 4.0 and lam == 4.0


def test_psi_matches_double_loop():
    rng = Rng(1)
    batches = [rng.normal(1.0, (3, 5, 4)) for _ in range(3)]
    brute = 0.0
    for acts in batches:
        for b in range(acts.shape[0]):
            for i in range(acts.shape[1]):
                brute = max(brute, float(sum(v * v for v in acts[b, i])))
    psi, _ = activation_constants(batches, batches)
    assert psi == pytest.approx(brute, rel=1e-12)


def test_empty_input_is_rejected(tiny_model):
    with pytest.raises(BoundError):
        activation_constants([], [])
    with pytest.raises(BoundError):
        measure_constants(tiny_model, [])


def test_measure_constants_on_model(tiny_model, tiny_batch):
    x, _ = tiny_batch
    out = device_forward(tiny_model, x)
    psi, lam = measure_constants(tiny_model, [x], K=2)
    assert psi == pytest.approx(float(np.max(np.sum(out.activations**2, axis=-1))))
    ref = refine(out.activations, cls_scores(out.cls_patch_logits), 2)
    assert lam == pytest.approx(float(np.sum(ref.tokens**2)))
