import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margin_engine.cpnr import (
    CpnrGrid,
    LoanQuery,
    call_threshold_index,
    cpnr,
    cpnr_exact_enumeration,
    loss_threshold_index,
    prob_first_call,
    prob_loss_and_call,
    thresholds,
)
from margin_engine.errors import EnumerationSizeError

from oracles import dense_cpnr, model, random_chain, random_space, space_from_reps

Q3 = space_from_reps([10.05, 10.25, 10.5])


def test_call_threshold_example():
    # w*P0 - Q0 = 1.3*10 - 2.7 = 10.3: states 1 and 2 lie below
    q = LoanQuery(p0=10.0, q0=2.7, w=1.3, r=0.0, horizon=3, h=3)
    assert call_threshold_index(Q3, q, 1) == 2
    assert call_threshold_index(Q3, q, 3) == 2


def test_loss_threshold_example():
    # P0 - Q0 = 10.1: only 10.05 lies below
    q = LoanQuery(p0=10.5, q0=0.4, w=1.2, r=0.0, horizon=2, h=3)
    assert loss_threshold_index(Q3, q, 1) == 1


def test_threshold_is_strict():
    q = LoanQuery(p0=10.25, q0=0.0, w=1.0, r=0.0, horizon=1, h=2)
    assert call_threshold_index(Q3, q, 1) == 1  # 10.25 is not below 10.25


def test_no_call_region_when_margin_covers_loan():
    q = LoanQuery(p0=10.0, q0=13.0, w=1.3, r=0.0, horizon=5, h=2)
    k, a = thresholds(Q3, q)
    assert k.tolist() == [0] * 5 and a.tolist() == [0] * 5
    res = cpnr(model(np.full((3, 3), 1 / 3)), Q3, q)
    assert res.prob_B == 0.0 and res.prob_AB == 0.0 and res.cpnr == 0.0


def test_thresholds_grow_with_rate():
    q = LoanQuery(p0=10.0, q0=0.0, w=1.0, r=0.01, horizon=5, h=1)
    k, _ = thresholds(Q3, q)
    # 10 * 1.01^t: 10.1, 10.201, 10.303, 10.406, 10.510
    assert k.tolist() == [1, 1, 2, 2, 3]
    assert [call_threshold_index(Q3, q, t) for t in range(1, 6)] == k.tolist()


def test_threshold_day_range():
    q = LoanQuery(p0=10.0, q0=1.0, w=1.3, r=0.0, horizon=3, h=1)
    with pytest.raises(ValueError):
        call_threshold_index(Q3, q, 0)
    with pytest.raises(ValueError):
        loss_threshold_index(Q3, q, 4)


def uniform_case():
    q = space_from_reps([1.0, 2.0, 3.0])
    # w*P0 - Q0 = P0 - Q0 = 1.5, so k = a = 1 on both days
    query = LoanQuery(p0=3.0, q0=1.5, w=1.0, r=0.0, horizon=2, h=3)
    return model(np.full((3, 3), 1 / 3)), q, query


def test_uniform_chain_hand_values():
    m, q, query = uniform_case()
    res = cpnr(m, q, query)
    # B_1 = 1/3, B_2 = 2/3 * 1/3; loss | D_1 = 1/3, loss | D_2 = 1
    assert res.per_day_call_probs == pytest.approx((1 / 3, 2 / 9), abs=1e-15)
    assert res.prob_B == pytest.approx(5 / 9, abs=1e-15)
    assert res.prob_AB == pytest.approx(1 / 3, abs=1e-15)
    assert res.cpnr == pytest.approx(3 / 5, abs=1e-15)
    assert res.survival_product == pytest.approx(4 / 9, abs=1e-15)


def test_uniform_chain_enumeration_agrees():
    # a memoryless chain has no gap between pairwise and full conditioning
    m, q, query = uniform_case()
    ex = cpnr_exact_enumeration(m, q, query)
    assert ex.prob_B == pytest.approx(5 / 9, abs=1e-15)
    assert ex.prob_AB == pytest.approx(1 / 3, abs=1e-15)


def test_identity_chain_never_moves():
    q = space_from_reps([1.0, 2.0, 3.0])
    eye = model(np.eye(3))
    safe = LoanQuery(p0=3.0, q0=1.5, w=1.0, r=0.0, horizon=10, h=3)
    assert cpnr(eye, q, safe).prob_B == 0.0
    # start inside the call region but above the loss region
    called = LoanQuery(p0=3.0, q0=0.5, w=1.0, r=0.0, horizon=10, h=2)  # levels 2.5
    res = cpnr(eye, q, called)
    assert res.prob_B == 1.0
    assert res.per_day_call_probs[0] == 1.0 and sum(res.per_day_call_probs[1:]) == 0.0
    assert res.prob_AB == 1.0  # state 2 < 2.5, so the loss region holds it too


def test_survival_short_circuit():
    # state 1 is absorbing and certain to be hit on day 1
    p = model([[1.0, 0.0], [1.0, 0.0]])
    q = space_from_reps([1.0, 2.0])
    query = LoanQuery(p0=2.0, q0=0.5, w=1.0, r=0.0, horizon=6, h=2)
    b, per_day, survival = prob_first_call(p, q, query)
    assert per_day == (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    assert b == 1.0 and survival == 0.0


def test_zero_denominator_means_certain_call():
    # by day 1 every path sits below k_1, so the day-2 conditional has no mass outside
    p = model([[1.0, 0.0], [1.0, 0.0]])
    q = space_from_reps([1.0, 2.0])
    query = LoanQuery(p0=2.0, q0=0.0, w=1.0, r=0.0, horizon=3, h=2)
    res = cpnr(p, q, query)
    assert res.prob_B == 1.0
    assert res.per_day_call_probs == (1.0, 0.0, 0.0)


def test_entry_points_agree(rng):
    n = 6
    m = model(random_chain(rng, n))
    q = random_space(rng, n)
    query = LoanQuery(p0=float(q.representatives[3]), q0=3.0, w=1.3, r=0.0002, horizon=12, h=4)
    full = cpnr(m, q, query)
    b, per_day, survival = prob_first_call(m, q, query)
    assert b == full.prob_B and per_day == full.per_day_call_probs and survival == full.survival_product
    assert prob_loss_and_call(m, q, query) == full.prob_AB


def test_query_validation():
    with pytest.raises(ValueError):
        LoanQuery(p0=10.0, q0=1.0, w=0.9, r=0.0, horizon=3, h=1)
    with pytest.raises(ValueError):
        LoanQuery(p0=10.0, q0=1.0, w=1.3, r=0.0, horizon=0, h=1)
    with pytest.raises(ValueError):
        LoanQuery(p0=10.0, q0=1.0, w=1.3, r=0.0, horizon=3, h=0)
    with pytest.raises(ValueError):
        cpnr(model(np.eye(3)), Q3, LoanQuery(p0=10.0, q0=1.0, w=1.3, r=0.0, horizon=3, h=4))


@st.composite
def chain_case(draw):
    n = draw(st.integers(1, 9))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    p = random_chain(rng, n, sparse=draw(st.booleans()))
    q = random_space(rng, n)
    h = draw(st.integers(1, n))
    p0 = float(q.representatives[h - 1])
    q0 = draw(st.floats(0.0, 1.0)) * p0
    w = draw(st.floats(1.0, 1.5))
    r = draw(st.sampled_from([0.0, 0.0001, 0.002]))
    T = draw(st.integers(1, 25))
    return p, q, LoanQuery(p0=p0, q0=q0, w=w, r=r, horizon=T, h=h)


@settings(max_examples=150, deadline=None)
@given(chain_case())
def test_recursion_matches_dense_oracle(case):
    p, q, query = case
    res = cpnr(model(p), q, query)
    b, ab, per_day, survival = dense_cpnr(p, q.representatives, query.h, query.p0, query.q0, query.w, query.r,
                                          query.horizon)
    assert res.prob_B == pytest.approx(b, abs=1e-12)
    assert res.prob_AB == pytest.approx(ab, abs=1e-12)
    assert np.allclose(res.per_day_call_probs, per_day, atol=1e-12, rtol=0)
    assert res.survival_product == pytest.approx(survival, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(chain_case())
def test_invariants(case):
    p, q, query = case
    res = cpnr(model(p), q, query)
    assert 0.0 <= res.prob_AB <= res.prob_B + 1e-12
    assert res.prob_B <= 1.0 + 1e-12
    assert 0.0 <= res.cpnr <= 1.0
    assert all(x >= 0 for x in res.per_day_call_probs)
    # first-call days are disjoint and the survivor mass makes up the rest
    assert res.prob_B + res.survival_product == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(chain_case(), st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(1.0, 1.5)), min_size=1, max_size=6))
def test_grid_matches_single_engine(case, pairs):
    p, q, query = case
    m = model(p)
    grid = CpnrGrid(m, q, query.p0, query.h, query.r, query.horizon)
    q0 = np.array([f * query.p0 for f, _ in pairs])
    w = np.array([x for _, x in pairs])
    b, ab, ratio = grid.evaluate(q0, w)
    for i in range(len(pairs)):
        single = cpnr(m, q, LoanQuery(query.p0, float(q0[i]), float(w[i]), query.r, query.horizon, query.h))
        assert b[i] == pytest.approx(single.prob_B, abs=1e-12)
        assert ab[i] == pytest.approx(single.prob_AB, abs=1e-12)
        assert ratio[i] == pytest.approx(single.cpnr, abs=1e-10)


def test_grid_broadcasts():
    rng = np.random.default_rng(3)
    q = random_space(rng, 5)
    grid = CpnrGrid(model(random_chain(rng, 5)), q, float(q.representatives[2]), 3, 0.0, 8)
    b, ab, ratio = grid.evaluate(np.array([[1.0], [2.0]]), np.array([[1.1, 1.2, 1.3]]))
    assert b.shape == ab.shape == ratio.shape == (2, 3)


def test_loss_monotone_in_margin():
    # more margin lowers both thresholds; on an identity chain nothing else moves
    q = space_from_reps(np.arange(1.0, 9.0))
    eye = model(np.eye(8))
    prev = None
    for q0 in np.linspace(0.0, 4.0, 9):
        res = cpnr(eye, q, LoanQuery(p0=5.0, q0=float(q0), w=1.3, r=0.0, horizon=5, h=5))
        if prev is not None:
            assert res.prob_B <= prev
        prev = res.prob_B


def test_enumeration_size_guard():
    rng = np.random.default_rng(0)
    q = random_space(rng, 9)
    query = LoanQuery(p0=10.0, q0=2.0, w=1.3, r=0.0, horizon=3, h=1)
    with pytest.raises(EnumerationSizeError):
        cpnr_exact_enumeration(model(random_chain(rng, 9)), q, query)
    q4 = random_space(rng, 4)
    with pytest.raises(EnumerationSizeError):
        cpnr_exact_enumeration(model(random_chain(rng, 4)), q4,
                               LoanQuery(p0=10.0, q0=2.0, w=1.3, r=0.0, horizon=9, h=1))


def test_enumeration_total_probability():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(2, 6))
        p = random_chain(rng, n, sparse=True)
        q = random_space(rng, n)
        h = int(rng.integers(1, n + 1))
        query = LoanQuery(p0=float(q.representatives[h - 1]), q0=float(rng.uniform(0, 3)),
                          w=float(rng.uniform(1.0, 1.5)), r=0.0, horizon=int(rng.integers(1, 7)), h=h)
        ex = cpnr_exact_enumeration(model(p), q, query)
        assert sum(ex.per_day_call_probs) <= 1.0 + 1e-12
        assert 0.0 <= ex.prob_AB <= ex.prob_B + 1e-12
        # day 1 is the same event under both approaches
        assert ex.per_day_call_probs[0] == pytest.approx(cpnr(model(p), q, query).per_day_call_probs[0], abs=1e-12)


def test_enumeration_exposes_pairwise_gap():
    # a called path bounces to state 2, which never falls; survivors sit in state 3,
    # which falls half the time.  Pairwise conditioning mixes the two groups on day 3.
    p = np.array([
        [0.0, 1.0, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
    ])
    q = space_from_reps([1.0, 2.0, 3.0])
    query = LoanQuery(p0=3.0, q0=1.5, w=1.0, r=0.0, horizon=3, h=3)  # call below 1.5
    rec = cpnr(model(p), q, query)
    ex = cpnr_exact_enumeration(model(p), q, query)
    # exact: 1/2, 1/4, 1/8.  recursion, day 3: (0.5*0 + 0.25*0.5) / 0.75 = 1/6 of the 1/4 survivors
    assert ex.per_day_call_probs == pytest.approx((0.5, 0.25, 0.125), abs=1e-15)
    assert rec.per_day_call_probs == pytest.approx((0.5, 0.25, 1 / 24), abs=1e-15)
    assert ex.prob_B - rec.prob_B == pytest.approx(1 / 12, abs=1e-15)
