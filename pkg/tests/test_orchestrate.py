import math

import numpy as np
import pytest

from conftest import make_scene, make_track
from semx.channel import ChannelConfig
from semx.codec import init_codec, save_checkpoint
from semx.data import SynthConfig, synth_scenes
from semx.errors import ConfigError, SchemaError, StateError
from semx.orchestrate import (ABLATIONS, HORIZON_HEADER, SUMMARY_HEADER, PredictionRecord, RunConfig,
                              codec_dataset, horizon_sweep, load_codecs, merge_reports, output_lock,
                              pack_trajectory, read_csv, read_records, required_codecs, run_v2i, run_v2v,
                              summary_rows, sweep, trajectory_bounds, unpack_trajectory, write_csv,
                              write_manifest, write_records)
from semx.predict import PredictorConfig


@pytest.fixture(scope="module")
def scenes():
    return synth_scenes(SynthConfig(n_scenes=3, n_vehicles=4, congestion_prob=0.5), seed=2)


@pytest.fixture(scope="module")
def codecs():
    rng = np.random.default_rng(0)
    return {k: init_codec(384, 32, 32, rng=rng) for k in ("fr", "sr", "pr")}


def cfg(**kw):
    kw.setdefault("predictor", PredictorConfig(K=3))
    return RunConfig(**kw)


def test_ablation_table():
    assert ABLATIONS["base"] == (False, False, False)
    assert ABLATIONS["full"] == (True, True, True)
    assert required_codecs(cfg(mode="v2i", ablation="FS")) == ("fr", "sr")
    assert required_codecs(cfg(mode="v2v", ablation="FS")) == ()
    assert required_codecs(cfg(mode="v2v", ablation="FP")) == ("pr",)


@pytest.mark.parametrize("kw", [{"mode": "v3x"}, {"ablation": "XYZ"}, {"mode": "v2i", "ablation": "P"},
                                {"v2v_rounds": 0}, {"checkpoints": {"zz": "a"}}])
def test_run_config_errors(kw):
    with pytest.raises(ConfigError):
        cfg(**kw).validate()


def test_run_config_round_trip_and_unknown_keys():
    c = cfg(mode="v2v", ablation="FP", channel=ChannelConfig(snr_db=math.inf), pr_bounds=(0.0, 1.0, 2.0, 3.0))
    back = RunConfig.from_dict(c.to_dict())
    assert back == c and back.hash() == c.hash()
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"mde": "v2i"})


def test_missing_codec_fails_before_work():
    with pytest.raises(ConfigError, match="'fr'"):
        load_codecs(cfg(mode="v2i", ablation="F"))


def test_wrong_dims_rejected(tmp_path):
    p = init_codec(384, 8, 16)
    save_checkpoint(p, tmp_path / "fr.bin", {"kind": "fr", "schema_version": "scene-v1"})
    with pytest.raises(SchemaError):
        load_codecs(cfg(mode="v2i", ablation="F", checkpoints={"fr": str(tmp_path / "fr.bin")}))


def test_checkpoint_kind_mismatch(tmp_path):
    p = init_codec(384, 8, 32)
    save_checkpoint(p, tmp_path / "x.bin", {"kind": "sr", "schema_version": "report-v1"})
    with pytest.raises(SchemaError, match="kind"):
        load_codecs(cfg(mode="v2i", ablation="F", checkpoints={"fr": str(tmp_path / "x.bin")}))


def test_train_mode_codec_rejected(codecs):
    bad = dict(codecs)
    bad["fr"] = codecs["fr"].copy()
    bad["fr"].mode = "train"
    with pytest.raises(StateError):
        load_codecs(cfg(mode="v2i", ablation="F"), bad)


def test_pack_round_trip(scenes):
    b = trajectory_bounds(scenes)
    c = scenes[0].clips[0]
    np.testing.assert_allclose(unpack_trajectory(pack_trajectory(c.fut_xy, b), b), c.fut_xy, atol=1e-9)
    v = pack_trajectory(c.fut_xy, b)
    assert v.shape == (384,) and np.all(v[100:] == 0.0)


def test_codec_datasets(scenes):
    assert codec_dataset(scenes, "fr").shape == (3, 384)
    assert codec_dataset(scenes, "sr").shape == (3, 384)
    assert codec_dataset(scenes, "pr").shape == (24, 384)
    with pytest.raises(ConfigError):
        codec_dataset(scenes, "xx")


def test_v2i_base_needs_no_codec(scenes):
    recs = run_v2i(scenes, cfg(mode="v2i", ablation="base"))
    assert len(recs) == 12 and all(r.metrics is not None for r in recs)
    assert recs[0].clip_id == f"{recs[0].scene_id}:{recs[0].vehicle_id}"


def test_v2i_deterministic(scenes, codecs):
    c = cfg(mode="v2i", channel=ChannelConfig(snr_db=5.0, fading="rayleigh_block"))
    a, b = run_v2i(scenes, c, codecs), run_v2i(scenes, c, codecs)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.candidates.candidates, y.candidates.candidates)
        assert x.extra == y.extra


def test_v2i_scene_inputs_shared_noise_per_vehicle(scenes, codecs):
    seen = []

    def spy(clip, f, r, n, rng):
        seen.append((clip.scene_id, f.values.copy(), n))
        from semx.predict import predict_fused
        return predict_fused(clip, f, r, n, PredictorConfig(K=1), rng)

    run_v2i(scenes[:1], cfg(mode="v2i", ablation="F", channel=ChannelConfig(snr_db=0.0)), codecs, predictor=spy)
    assert len(seen) == 4 and all(n is None for _, _, n in seen)
    # each vehicle gets its own channel draw of the same scene vector
    assert not np.array_equal(seen[0][1], seen[1][1])


def test_v2v_rounds_and_neighbors(scenes, codecs):
    recs = run_v2v(scenes, cfg(mode="v2v", ablation="full", v2v_rounds=2), codecs)
    assert all(r.extra["round"] == 2 for r in recs)
    assert all("mse_pr" in r.extra for r in recs if r.extra["neighbors"])
    recs1 = run_v2v(scenes, cfg(mode="v2v", ablation="FS", v2v_rounds=3), codecs)
    assert all(r.extra["round"] == 1 for r in recs1)


def test_record_round_trip(tmp_path, scenes):
    recs = run_v2i(scenes, cfg(mode="v2i", ablation="base", channel=ChannelConfig(snr_db=math.inf)))
    write_records(tmp_path / "r.jsonl", recs)
    back = read_records(tmp_path / "r.jsonl")
    assert back[0].snr_db == math.inf and back[0].metrics == recs[0].metrics
    with pytest.raises(StateError):
        recs[0].score()


def test_sweep_cells_and_k_monotone(scenes, codecs):
    res = sweep(scenes, cfg(mode="v2i", ablation="full"), (0.0, 20.0), (1, 5, 10), codecs)
    assert len(res.records) == 6
    for snr in (0.0, 20.0):
        assert res.value(snr, 10, "ade") <= res.value(snr, 5, "ade") <= res.value(snr, 1, "ade")
    cols, rows = res.table()
    assert cols == ["snr_db", "K1_fde", "K5_ade", "K5_rmse", "K10_ade", "K10_rmse"] and len(rows) == 2


def test_horizon_rows(scenes):
    rows = horizon_sweep(scenes, cfg(mode="v2i", ablation="base"))
    assert [r["step"] for r in rows if r["metric"] == "ade"] == [10, 20, 30, 40, 50]


def test_pooled_rows(scenes):
    recs = run_v2i(scenes, cfg(mode="v2i", ablation="base"))
    rows = summary_rows(recs, 20.0, 3, "both")
    names = [r["metric"] for r in rows]
    assert names == ["ade", "fde", "rmse", "ade_pooled", "fde_pooled", "rmse_pooled"]
    ade = {r["metric"]: r["value"] for r in rows}
    assert ade["ade"] == pytest.approx(ade["ade_pooled"])


def test_csv_and_manifest(tmp_path):
    rows = [{"snr_db": "20", "K": 1, "metric": "ade", "value": 0.1, "n_clips": 3}]
    p = write_csv(tmp_path / "summary.csv", SUMMARY_HEADER, rows)
    assert read_csv(p)[0]["value"] == "0.1"
    m = write_manifest(tmp_path, "semx sweep", {"run": {"mode": "v2i", "ablation": "F"}}, 0, [p])
    m2 = write_manifest(tmp_path, "semx sweep", {"run": {"mode": "v2i", "ablation": "F"}}, 0, [p], name="m2.json")
    assert m.read_text() == m2.read_text()
    ok_rows, missing = merge_reports([tmp_path, tmp_path / "nope"])
    assert missing == [str(tmp_path / "nope")]
    assert ok_rows[0]["model"] == "v2i-F" and ok_rows[0]["step"] == "50"


def test_output_lock(tmp_path):
    with output_lock(tmp_path):
        with pytest.raises(StateError):
            with output_lock(tmp_path):
                pass
    with output_lock(tmp_path):
        pass


def test_horizon_header():
    assert HORIZON_HEADER[0] == "step"


def test_single_vehicle_v2v_full_equals_fs(codecs):
    sc = [make_scene([make_track(1, vy=12.0)])]
    a = run_v2v(sc, cfg(mode="v2v", ablation="full"), codecs)
    b = run_v2v(sc, cfg(mode="v2v", ablation="FS"), codecs)
    np.testing.assert_array_equal(a[0].candidates.candidates, b[0].candidates.candidates)
    assert isinstance(a[0], PredictionRecord)
