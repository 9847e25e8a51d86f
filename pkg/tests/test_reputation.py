import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from blockprop.errors import (
    ConfigError,
    DegenerateWeightsError,
    DomainError,
    FusionSingularityError,
    NoInteractionError,
    NoRecommendationError,
)
from blockprop.reputation import (
    InteractionLog,
    InteractionWindow,
    LogProfile,
    OpinionTuple,
    Recommender,
    ReputationParams,
    dishonest_count,
    final_reputation,
    fuse_arrays,
    fuse_final_opinion,
    fuse_or_average,
    local_opinion,
    local_reputation,
    local_window_opinion,
    miner_reputations,
    recommended_opinion,
    reputation_matrix,
    simulate_interaction_logs,
    weighted_average,
    write_reputation_csv,
)


def _approx(o, t, f, u, tol=1e-9):
    assert (o.trust, o.distrust, o.uncertainty) == pytest.approx((t, f, u), abs=tol)


# -- per-window opinions ----------------------------------------------------------

def test_window_opinion_examples():
    _approx(local_window_opinion(InteractionWindow(1, 2, 1, 0.8), 2.0), 0.4, 0.4, 0.2)
    _approx(local_window_opinion(InteractionWindow(1, 3, 3, 1.0), 1.0), 0.5, 0.5, 0.0)
    for xi in (1.5, 2.0, 7.0):
        _approx(local_window_opinion(InteractionWindow(1, 5, 0, 0.9), xi), 0.9, 0.0, 0.1)


def test_window_without_interactions():
    with pytest.raises(NoInteractionError):
        local_window_opinion(InteractionWindow(1, 0, 0, 0.9), 2.0)


def test_bad_window_inputs():
    with pytest.raises(DomainError):
        InteractionWindow(1, -1, 0, 0.5)
    with pytest.raises(DomainError):
        InteractionWindow(1, 1, 0, 1.5)
    with pytest.raises(DomainError):
        OpinionTuple(0.5, 0.5, 0.5)


@pytest.mark.parametrize("kwargs", [{"eta": 1.5}, {"xi": 1.0}, {"lambda_fresh": 0.0}, {"gamma_rec": 0.5},
                                    {"delta_rec": 0.0}, {"sigma": 1.0}, {"windows": 0}])
def test_params_validated(kwargs):
    with pytest.raises(ConfigError):
        ReputationParams(**kwargs)


# -- temporal aggregation --------------------------------------------------------

def test_single_window_identity():
    w = InteractionWindow(1, 4, 2, 0.7)
    p = ReputationParams(windows=1)
    assert local_opinion([w], p) == local_window_opinion(w, p.xi)


def test_identical_windows():
    ws = [InteractionWindow(k, 4, 2, 0.7) for k in range(1, 6)]
    want = local_window_opinion(ws[0], 2.0)
    got = local_opinion(ws, ReputationParams())
    _approx(got, want.trust, want.distrust, want.uncertainty)


def test_freshness_example():
    # window times t = k + 1, so indices 1 and 7 sit at t = 2 and t = 8
    good = InteractionWindow(1, 5, 0, 1.0)
    bad = InteractionWindow(7, 0, 5, 1.0)
    o = local_opinion([good, bad], ReputationParams(lambda_fresh=0.5))
    assert o.trust == pytest.approx(math.log(2) / (math.log(2) + math.log(8)))
    assert o.trust == pytest.approx(0.25)


def test_degenerate_weights():
    with pytest.raises(DegenerateWeightsError):
        weighted_average([OpinionTuple.vacuous()], [0.0])


def test_local_reputation_examples():
    assert local_reputation(OpinionTuple(0.4, 0.4, 0.2), 0.5) == pytest.approx(0.5)
    assert local_reputation(OpinionTuple(0.3, 0.3, 0.4), 0.0) == pytest.approx(0.3)
    assert local_reputation(OpinionTuple.vacuous(), 1.0) == 1.0


# -- recommendation and fusion ----------------------------------------------------

def test_single_recommender_passthrough():
    op = OpinionTuple(0.3, 0.5, 0.2)
    out = recommended_opinion([Recommender(op, 3, 1, 2.0)], ReputationParams())
    _approx(out, 0.3, 0.5, 0.2)


def test_two_recommender_midpoint():
    recs = [Recommender(OpinionTuple(1, 0, 0), 2, 1, 3.0), Recommender(OpinionTuple(0, 0, 1), 2, 1, 3.0)]
    _approx(recommended_opinion(recs, ReputationParams()), 0.5, 0.0, 0.5)


def test_recommendation_scale_invariant():
    ops = [OpinionTuple(0.6, 0.1, 0.3), OpinionTuple(0.2, 0.5, 0.3), OpinionTuple(0.0, 0.2, 0.8)]
    counts = [(5, 1, 2.0), (1, 4, 3.0), (2, 2, 1.5)]
    p = ReputationParams()
    one = recommended_opinion([Recommender(o, *c, delta=1.0) for o, c in zip(ops, counts)], p)
    two = recommended_opinion([Recommender(o, *c, delta=2.0) for o, c in zip(ops, counts)], p)
    np.testing.assert_allclose(one.as_array(), two.as_array(), atol=1e-12)


def test_no_recommenders():
    with pytest.raises(NoRecommendationError):
        recommended_opinion([], ReputationParams())
    with pytest.raises(NoRecommendationError):
        recommended_opinion([Recommender(OpinionTuple(1, 0, 0), 0, 0, 1.0)], ReputationParams())


def test_fusion_examples():
    rec = OpinionTuple(0.3, 0.3, 0.4)
    _approx(fuse_final_opinion(OpinionTuple.vacuous(), rec), 0.3, 0.3, 0.4)
    local = OpinionTuple(0.6, 0.2, 0.2)
    _approx(fuse_final_opinion(local, OpinionTuple.vacuous()), 0.6, 0.2, 0.2)
    out = fuse_final_opinion(local, rec)
    assert out.trust == pytest.approx(0.30 / 0.52)
    assert out.trust == pytest.approx(0.5769, abs=1e-4)
    assert out.distrust == pytest.approx((0.2 * 0.4 + 0.3 * 0.2) / 0.52)
    assert out.uncertainty == pytest.approx(0.08 / 0.52)
    assert out.trust + out.distrust + out.uncertainty == pytest.approx(1.0, abs=1e-12)
    assert final_reputation(out, 0.5) == pytest.approx(0.6538, abs=1e-4)


def test_fusion_of_dogmatic_opinions():
    a, b = OpinionTuple(1, 0, 0), OpinionTuple(0, 1, 0)
    with pytest.raises(FusionSingularityError):
        fuse_final_opinion(a, b)
    _approx(fuse_or_average(a, b), 0.5, 0.5, 0.0)


def test_final_reputation_boundaries():
    assert final_reputation(OpinionTuple(1, 0, 0), 0.0) == 1.0
    assert final_reputation(OpinionTuple(0.3, 0.2, 0.5), 0.5) > final_reputation(OpinionTuple(0.2, 0.3, 0.5), 0.5)
    assert final_reputation(OpinionTuple(0.3, 0.1, 0.6), 0.5) > final_reputation(OpinionTuple(0.3, 0.2, 0.5), 0.5)


# -- properties -----------------------------------------------------------------

opinions = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)).filter(lambda v: sum(v) > 1e-3).map(
    lambda v: OpinionTuple(*(np.array(v) / sum(v))))


@settings(max_examples=300, deadline=None)
@given(a=opinions, b=opinions)
def test_fusion_symmetric(a, b):
    assume(a.uncertainty + b.uncertainty > 1e-6)
    np.testing.assert_allclose(fuse_final_opinion(a, b).as_array(), fuse_final_opinion(b, a).as_array(), atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(alpha=st.integers(0, 50), beta=st.integers(0, 50), extra=st.integers(1, 20), q=st.floats(0, 1),
       rec=opinions, eta=st.floats(0, 1))
def test_more_negatives_never_help(alpha, beta, extra, q, rec, eta):
    assume(alpha + beta > 0)
    lo = local_window_opinion(InteractionWindow(1, alpha, beta, q), 2.0)
    hi = local_window_opinion(InteractionWindow(1, alpha, beta + extra, q), 2.0)
    assert local_reputation(hi, eta) <= local_reputation(lo, eta) + 1e-12
    if lo.uncertainty + rec.uncertainty > 0:
        assert (final_reputation(fuse_final_opinion(hi, rec), eta)
                <= final_reputation(fuse_final_opinion(lo, rec), eta) + 1e-12)


@settings(max_examples=300, deadline=None)
@given(alpha=st.integers(0, 50), beta=st.integers(0, 50), q=st.floats(0, 1),
       xi=st.floats(1.01, 10), bump=st.floats(0.01, 10))
def test_larger_xi_never_raises_trust(alpha, beta, q, xi, bump):
    assume(alpha + beta > 0)
    w = InteractionWindow(1, alpha, beta, q)
    assert local_window_opinion(w, xi + bump).trust <= local_window_opinion(w, xi).trust + 1e-12


@settings(max_examples=200, deadline=None)
@given(k_bad=st.integers(1, 9), shift=st.integers(1, 9), lam=st.floats(0.05, 0.95))
def test_later_bad_window_never_helps(k_bad, shift, lam):
    k_late = min(k_bad + shift, 10)
    assume(k_late > k_bad)
    p = ReputationParams(lambda_fresh=lam)

    def rep(k):
        ws = [InteractionWindow(i, 6, 0, 0.95) for i in range(1, 11) if i != k]
        ws.append(InteractionWindow(k, 0, 6, 0.95))
        return local_reputation(local_opinion(ws, p), p.eta)

    assert rep(k_late) <= rep(k_bad) + 1e-12


# -- logs and the vectorised engine ---------------------------------------------

def _scalar_engine(log, p):
    """Pair-by-pair evaluation through the scalar functions."""
    M = log.miner_count
    loc = {(i, j): local_opinion(log.pair_windows(i, j), p) for i in range(M) for j in range(M) if i != j}
    H = p.gamma_rec * log.positives.sum(axis=2) + log.negatives.sum(axis=2)
    np.fill_diagonal(H, 0)
    H = H.astype(float)
    Hbar = H.sum(axis=1) / M
    R = np.full((M, M), np.nan)
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            recs = [Recommender(loc[s, j], log.positives[s, j].sum(), log.negatives[s, j].sum(), Hbar[s], p.delta_rec)
                    for s in range(M) if s not in (i, j) and H[s, j] > 0]
            try:
                final = fuse_or_average(loc[i, j], recommended_opinion(recs, p))
            except NoRecommendationError:
                final = loc[i, j]
            R[i, j] = final_reputation(final, p.eta)
    return R


@pytest.mark.parametrize("seed,activity", [(0, 0.8), (1, 0.3), (2, 0.05)])
def test_vectorised_matches_scalar(seed, activity):
    p = ReputationParams()
    log = simulate_interaction_logs(7, LogProfile(activity=activity), seed=seed)
    res = reputation_matrix(log, p)
    np.testing.assert_allclose(res.pairwise, _scalar_engine(log, p), atol=1e-10)
    np.testing.assert_allclose(res.per_miner, np.nanmean(_scalar_engine(log, p), axis=0), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(M=st.integers(2, 8), seed=st.integers(0, 2**31), activity=st.floats(0, 1), K=st.integers(1, 6))
def test_engine_opinions_valid(M, seed, activity, K):
    log = simulate_interaction_logs(M, LogProfile(activity=activity), seed=seed, windows=K)
    res = reputation_matrix(log, ReputationParams(windows=K))
    for arr in (res.local, res.recommended, res.final):
        assert np.all(arr >= -1e-9) and np.all(arr <= 1 + 1e-9)
        np.testing.assert_allclose(arr.sum(axis=-1), 1.0, atol=1e-9)
    off = ~np.eye(M, dtype=bool)
    assert np.all((res.pairwise[off] >= 0) & (res.pairwise[off] <= 1))
    assert np.isnan(np.diag(res.pairwise)).all()


def test_fuse_arrays_fallback():
    a = np.array([[1.0, 0, 0], [0.6, 0.2, 0.2]])
    b = np.array([[0.0, 1, 0], [0.3, 0.3, 0.4]])
    out = fuse_arrays(a, b)
    np.testing.assert_allclose(out[0], [0.5, 0.5, 0.0])
    np.testing.assert_allclose(out[1], fuse_final_opinion(OpinionTuple(*a[1]), OpinionTuple(*b[1])).as_array())


def test_honest_extremes():
    p = ReputationParams()
    good, _ = miner_reputations(19, LogProfile(honest_fraction=1.0), seed=3, p=p)
    bad, _ = miner_reputations(19, LogProfile(honest_fraction=0.0), seed=3, p=p)
    assert (good > p.sigma).all()
    assert (bad < p.sigma).all()


def test_log_generation():
    a = simulate_interaction_logs(10, seed=4)
    b = simulate_interaction_logs(10, seed=4)
    np.testing.assert_array_equal(a.positives, b.positives)
    np.testing.assert_array_equal(a.success_prob, b.success_prob)
    assert (~a.honest).sum() == dishonest_count(10, 0.8) == 2
    assert a.positives[np.arange(10), np.arange(10)].sum() == 0
    with pytest.raises(DomainError):
        simulate_interaction_logs(1)


def test_log_csv_roundtrip(tmp_path):
    log = simulate_interaction_logs(5, seed=2, windows=3)
    log.to_csv(tmp_path / "log.csv")
    back = InteractionLog.from_csv(tmp_path / "log.csv")
    np.testing.assert_array_equal(back.positives, log.positives)
    np.testing.assert_array_equal(back.negatives, log.negatives)
    np.testing.assert_allclose(back.success_prob, log.success_prob)
    res = reputation_matrix(log, ReputationParams(windows=3))
    write_reputation_csv(res, tmp_path / "rep.csv")
    assert len((tmp_path / "rep.csv").read_text().splitlines()) == 1 + 5 * 4


def test_batched_engine_matches_single_logs():
    from blockprop.reputation import reputation_arrays

    logs = [simulate_interaction_logs(5, LogProfile(activity=0.4), seed=s, windows=4) for s in range(6)]
    a = np.stack([l.positives for l in logs])
    b = np.stack([l.negatives for l in logs])
    q = np.stack([l.success_prob for l in logs])
    batch = reputation_arrays(a, b, q, ReputationParams(windows=4))
    for n, log in enumerate(logs):
        one = reputation_matrix(log, ReputationParams(windows=4))
        np.testing.assert_allclose(batch.final[n], one.final, atol=1e-12)
        np.testing.assert_allclose(batch.per_miner[n], one.per_miner, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(o=opinions)
def test_vacuous_fusion_exact(o):
    assume(o.uncertainty < 1.0)
    assert fuse_final_opinion(OpinionTuple.vacuous(), o) == o
    assert fuse_final_opinion(o, OpinionTuple.vacuous()) == o
    v = np.array([[0.0, 0.0, 1.0]])
    assert (fuse_arrays(v, o.as_array()[None]) == o.as_array()).all()
    assert (fuse_arrays(o.as_array()[None], v) == o.as_array()).all()
