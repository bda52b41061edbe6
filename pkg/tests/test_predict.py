import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_clip
from semx.data import DT, TrackPoint
from semx.errors import ConfigError, ShapeError
from semx.predict import (DUPLICATE_ID, HYPOTHESES, HYPOTHESIS_IDS, CandidateSet, PredictorConfig,
                          parse_llm_candidates, predict_cv, predict_fused, predict_llm, predict_prompt)
from semx.semantics import LlmClient, SemanticReport

TAU = DT * np.arange(1, 51)


def test_cv_extends_linear_history():
    c = make_clip(x0=1.0, y0=2.0, vx=0.5, vy=12.0)
    p = predict_cv(c)
    np.testing.assert_allclose(p.xy, c.fut_xy, atol=1e-9)
    np.testing.assert_allclose(p.t, c.fut_t, atol=1e-12)


def test_cv_stationary():
    c = make_clip(x0=3.0, y0=7.0, vy=0.0)
    np.testing.assert_allclose(predict_cv(c).xy, np.tile([3.0, 7.0], (50, 1)), atol=1e-12)


def test_cv_accepts_trackpoints_and_tuples():
    c = make_clip(vy=10.0)
    pts = [TrackPoint(5, float(t), float(x), float(y)) for t, (x, y) in zip(c.hist_t, c.hist_xy)]
    a, b = predict_cv(pts), predict_cv((c.hist_t, c.hist_xy))
    np.testing.assert_allclose(a.xy, b.xy)
    assert a.vehicle_id == 5
    with pytest.raises(ShapeError):
        predict_cv([])


def test_cv_bias_under_constant_acceleration():
    c = make_clip(vy=10.0, ay=1.0)
    err = np.hypot(*(predict_cv(c).xy - c.fut_xy).T)
    # the velocity estimate is exact, so the miss is the a*t^2/2 term
    np.testing.assert_allclose(err, 0.5 * 1.0 * TAU ** 2, rtol=1e-6)
    assert err[-1] == pytest.approx(12.5, rel=0.01)


def test_k1_without_context_is_cv():
    c = make_clip(vy=14.0)
    cs = predict_fused(c, cfg=PredictorConfig(K=1))
    np.testing.assert_allclose(cs.top(), predict_cv(c).xy, atol=1e-9)
    assert cs.hypothesis_ids == [HYPOTHESIS_IDS["cv"]]


def test_cv_kind_repeats():
    cs = predict_fused(make_clip(), cfg=PredictorConfig(kind="cv", K=3))
    assert cs.K == 3 and np.all(cs.candidates == cs.candidates[0])
    assert cs.weights.tolist() == pytest.approx([1 / 3] * 3)


@given(st.integers(1, 15), st.floats(0, 35), st.floats(-1.5, 1.5), st.floats(-1.0, 1.0))
def test_weights_on_simplex_and_shapes(K, vy, ay, vx):
    cs = predict_fused(make_clip(vy=vy, ay=ay, vx=vx), cfg=PredictorConfig(K=K), rng=np.random.default_rng(0))
    assert cs.candidates.shape == (K, 50, 2)
    assert np.all(cs.weights >= 0) and cs.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.isfinite(cs.candidates))


def test_smaller_k_is_prefix():
    c = make_clip(vy=20.0)
    big = predict_fused(c, cfg=PredictorConfig(K=14), rng=np.random.default_rng(3))
    for K in (1, 5, 10, 12):
        small = predict_fused(c, cfg=PredictorConfig(K=K), rng=np.random.default_rng(3))
        np.testing.assert_array_equal(small.candidates, big.candidates[:K])
    assert big.hypothesis_ids[10:] == [DUPLICATE_ID] * 4


def test_lateral_motion_promotes_lane_change():
    cs = predict_fused(make_clip(vx=0.6, vy=20.0), cfg=PredictorConfig(K=3))
    assert HYPOTHESIS_IDS["lc_right"] in cs.hypothesis_ids


def test_lane_change_reaches_next_lane_center():
    c = make_clip(x0=1.85, vx=0.6, vy=20.0)
    cs = predict_fused(c, cfg=PredictorConfig(K=10))
    path = cs.candidates[cs.hypothesis_ids.index(HYPOTHESIS_IDS["lc_right"])]
    # quintic finishes within the 4 s maneuver, ending on the next center
    assert path[-1, 0] == pytest.approx(1.85 + 3.7, abs=1e-9)


def test_left_edge_lane_prefers_right_change():
    ids = lambda cfg: predict_fused(make_clip(x0=1.85, vy=20.0), cfg=cfg).hypothesis_ids
    assert HYPOTHESIS_IDS["lc_right_slow"] in ids(PredictorConfig(K=5))
    assert HYPOTHESIS_IDS["lc_left_slow"] not in ids(PredictorConfig(K=5))
    # unknown edge: symmetric tie resolved by id order
    assert HYPOTHESIS_IDS["lc_left_slow"] in ids(PredictorConfig(K=5, road_left_edge=None))
    # a middle lane is unaffected
    assert predict_fused(make_clip(x0=5.55, vy=20.0), cfg=PredictorConfig(K=5)).hypothesis_ids == \
        ids(PredictorConfig(K=5, road_left_edge=None))


def full_congestion():
    return SemanticReport(congestion_level=1.0)


@given(st.floats(5, 35), st.floats(-1.0, 1.0))
def test_full_congestion_never_speeds_up(vy, ay):
    c = make_clip(vy=vy, ay=ay)
    hist_mean = float(np.mean(np.abs(np.diff(c.hist_xy[:, 1]))) / DT)
    cs = predict_fused(c, decoded_report=full_congestion(), cfg=PredictorConfig(K=10))
    for path, hid in zip(cs.candidates, cs.hypothesis_ids):
        along = np.abs(np.diff(np.vstack([c.hist_xy[-1], path])[:, 1])) / DT
        assert along.mean() <= hist_mean + 1e-6
        if not HYPOTHESES[hid][0].startswith("lc_"):
            full = np.hypot(*np.diff(np.vstack([c.hist_xy[-1], path]), axis=0).T) / DT
            assert full.mean() <= hist_mean + 1e-6


def test_congestion_report_changes_the_prediction():
    c = make_clip(vy=25.0)
    a = predict_fused(c, cfg=PredictorConfig(K=5))
    b = predict_fused(c, decoded_report=full_congestion(), cfg=PredictorConfig(K=5))
    assert not np.allclose(a.candidates, b.candidates)


def test_stopped_vehicle_ahead_prunes_collisions():
    c = make_clip(x0=1.85, vy=15.0)
    block = np.tile(c.hist_xy[-1] + [0.0, 60.0], (50, 1))
    cs = predict_fused(c, neighbor_preds={7: block}, cfg=PredictorConfig(K=10), rng=np.random.default_rng(0))
    kept = [h for h in cs.hypothesis_ids if h != DUPLICATE_ID]
    # brake stops at 37.5 m, decel covers 56.25 m in 5 s, lane changes leave the lane
    assert set(kept) == {HYPOTHESIS_IDS[n] for n in ("brake", "decel", "lc_left", "lc_right", "lc_left_slow",
                                                     "lc_right_slow")}
    for path, h in zip(cs.candidates, cs.hypothesis_ids):
        if h != DUPLICATE_ID:
            assert np.min(np.hypot(*(path - block).T)) >= 2.0


def test_all_pruned_keeps_largest_clearance():
    c = make_clip(vy=10.0)
    # a wall of neighbors sitting on the ego's last position and lanes on both sides
    walls = {i: np.tile(c.hist_xy[-1] + [dx, 0.0], (50, 1)) for i, dx in enumerate((-3.7, 0.0, 3.7))}
    cs = predict_fused(c, neighbor_preds=walls, cfg=PredictorConfig(K=1))
    assert cs.K == 1


def test_neighbor_shape_error():
    with pytest.raises(ShapeError):
        predict_fused(make_clip(), neighbor_preds={1: np.zeros((3, 2))}, cfg=PredictorConfig(K=2))


@pytest.mark.parametrize("kw", [{"K": 0}, {"kind": "oracle"}, {"maneuvers": ("cv", "teleport")},
                                {"congestion_deadzone": 1.0}, {"offroad_factor": 1.5}])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        PredictorConfig(**kw).validate()


def test_config_round_trip_and_hash():
    cfg = PredictorConfig(K=5, jitter_std=0.2)
    assert PredictorConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.hash() == PredictorConfig(K=5, jitter_std=0.2).hash()
    assert cfg.hash() != PredictorConfig(K=6, jitter_std=0.2).hash()


def test_candidate_set_round_trip():
    cs = predict_fused(make_clip(vy=9.0), cfg=PredictorConfig(K=4))
    back = CandidateSet.from_dict(json.loads(json.dumps(cs.to_dict())))
    np.testing.assert_array_equal(back.candidates, cs.candidates)
    assert back.hypothesis_ids == cs.hypothesis_ids


def llm_answer(paths):
    return "ok " + json.dumps({"candidates": [p.tolist() for p in paths]})


def test_llm_candidates_used():
    c = make_clip(vy=10.0)
    want = [c.fut_xy + 0.1 * i for i in range(3)]
    client = LlmClient(transport=lambda p: llm_answer(want))
    cs = predict_llm(c, cfg=PredictorConfig(kind="llm", K=3), client=client)
    np.testing.assert_allclose(cs.candidates, np.stack(want))
    assert cs.substitutions == 0 and cs.weights.tolist() == pytest.approx([1 / 3] * 3)


def test_llm_garbage_falls_back_per_rank():
    c = make_clip(vy=10.0)
    cfg = PredictorConfig(kind="llm", K=4)
    fused = predict_fused(c, cfg=PredictorConfig(K=4))
    cs = predict_llm(c, cfg=cfg, client=LlmClient(transport=lambda p: "I cannot help with that"))
    np.testing.assert_array_equal(cs.candidates, fused.candidates)
    assert cs.substitutions == 4
    good = [c.fut_xy, np.zeros((3, 2))]
    cs2 = predict_llm(c, cfg=cfg, client=LlmClient(transport=lambda p: llm_answer(good)))
    assert cs2.substitutions == 3
    np.testing.assert_array_equal(cs2.candidates[1], fused.candidates[1])


def test_llm_endpoint_failure_is_full_fallback():
    c = make_clip(vy=10.0)
    cs = predict_llm(c, cfg=PredictorConfig(kind="llm", K=2), client=LlmClient())
    assert cs.substitutions == 2 and cs.provenance["fallback"] == "endpoint"


def test_prompt_mentions_neighbors():
    c = make_clip(vid=3, vy=10.0)
    nb = {11: c.fut_xy + [3.7, 0.0], 12: c.fut_xy - [3.7, 0.0]}
    p = predict_prompt(c, neighbor_preds=nb, K=5)
    assert "vehicle 11:" in p and "vehicle 12:" in p and "5" in p


def test_parse_candidates_marks_bad_entries():
    good = np.zeros((50, 2)).tolist()
    out = parse_llm_candidates(json.dumps({"candidates": [good, [[1, 2]], "x"]}))
    assert out[0].shape == (50, 2) and out[1] is None and out[2] is None
    with pytest.raises(ValueError):
        parse_llm_candidates("nothing")
