import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rssguard.data import (
    DEFAULT_DEVICES,
    DeviceProfile,
    FingerprintSet,
    FloorplanConfig,
    denormalize_rss,
    export_csv,
    generate_floorplan,
    ingest_csv,
    nearest_centroid_accuracy,
    normalize_rss,
    split_train_test,
    synthesize_fingerprints,
)
from rssguard.errors import ConfigError, ParseError, SchemaError

REFERENCE = DeviceProfile("reference")


def single_ap_floorplan(distance_m: float) -> FloorplanConfig:
    return FloorplanConfig(
        building_id="tiny",
        num_rps=2,
        num_aps=1,
        rp_coords=np.array([[0.0, 0.0], [1.0, 0.0]]),
        ap_coords=np.array([[-distance_m, 0.0]]),
        shadowing_sigma_db=0.0,
    )


def test_building1_scale():
    fp = generate_floorplan("b1", 60, 203, seed=1)
    assert fp.rp_coords.shape == (60, 2) and fp.ap_coords.shape == (203, 2)


def test_floorplan_deterministic():
    a = generate_floorplan("b1", 60, 203, seed=4)
    b = generate_floorplan("b1", 60, 203, seed=4)
    assert a.ap_coords.tobytes() == b.ap_coords.tobytes()
    assert a.shadowing_db().tobytes() == b.shadowing_db().tobytes()
    c = generate_floorplan("b1", 60, 203, seed=5)
    assert a.ap_coords.tobytes() != c.ap_coords.tobytes()


@pytest.mark.parametrize("num_rps", [2, 12, 60, 90])
def test_consecutive_rps_one_meter_apart(num_rps):
    fp = generate_floorplan("b", num_rps, 10, seed=0)
    steps = np.linalg.norm(np.diff(fp.rp_coords, axis=0), axis=1)
    np.testing.assert_array_equal(steps, 1.0)
    assert len({tuple(p) for p in fp.rp_coords}) == num_rps


def test_floorplan_rejects_small_counts():
    with pytest.raises(ConfigError):
        generate_floorplan("b", 1, 10, seed=0)


def test_one_meter_reference_power():
    fs = synthesize_fingerprints(single_ap_floorplan(1.0), REFERENCE, 1, seed=0)
    # -40 dBm -> (-40 + 100) / 100
    assert fs.features[0, 0] == pytest.approx(0.60)


def test_log_distance_law():
    near = single_ap_floorplan(2.0).mean_rss_dbm(shadowing=False)
    far = single_ap_floorplan(20.0).mean_rss_dbm(shadowing=False)
    assert near[0, 0] - far[0, 0] == pytest.approx(10 * 3.0)


def test_distance_floored_at_one_meter():
    fp = single_ap_floorplan(0.25)
    assert fp.mean_rss_dbm(shadowing=False)[0, 0] == pytest.approx(-40.0)


@given(st.integers(0, 2**63 - 1))
@settings(max_examples=10, deadline=None)
def test_features_in_unit_interval(seed):
    fp = generate_floorplan("b", 12, 30, seed=seed)
    fs = synthesize_fingerprints(fp, DEFAULT_DEVICES[4], 2, seed=seed)
    assert fs.features.min() >= 0 and fs.features.max() <= 1


@given(st.floats(-100, 0))
def test_normalization_bijection(r):
    assert denormalize_rss(normalize_rss(r)) == pytest.approx(r, abs=1e-6)


def test_device_heterogeneity_observable():
    fp = generate_floorplan("b", 60, 203, seed=2)
    quiet = [dataclasses.replace(d, noise_sigma_db=0.0) for d in DEFAULT_DEVICES]
    for a, b in [(quiet[0], quiet[1]), (quiet[2], quiet[5])]:
        fa = synthesize_fingerprints(fp, a, 1, seed=0).features
        fb = synthesize_fingerprints(fp, b, 1, seed=0).features
        assert np.mean(np.abs(fa - fb) > 0.01) >= 0.01


def test_nearest_centroid_separability():
    fp = generate_floorplan("b", 60, 203, seed=3)
    train, _ = split_train_test(fp, DEFAULT_DEVICES, "moto_z2", seed=1)
    fresh = synthesize_fingerprints(fp, DEFAULT_DEVICES[2], 1, seed=99)
    assert nearest_centroid_accuracy(train, fresh) >= 0.9


def test_split_shapes():
    fp = generate_floorplan("b", 60, 203, seed=0)
    train, tests = split_train_test(fp, DEFAULT_DEVICES, "moto_z2", seed=0)
    assert len(tests) == 5
    assert len(train) == 5 * 60 and train.device_id == "moto_z2"
    assert all(len(t) == 60 for t in tests)
    assert "moto_z2" not in {t.device_id for t in tests}


def test_split_needs_two_devices():
    fp = generate_floorplan("b", 10, 5, seed=0)
    with pytest.raises(ConfigError):
        split_train_test(fp, DEFAULT_DEVICES[:1], "galaxy_s7", seed=0)


def test_fingerprint_set_validates_range():
    with pytest.raises(SchemaError):
        FingerprintSet(np.array([[1.5]]), np.array([0]), np.zeros((2, 2)))


def _write(path, rows, k=3):
    header = "building_id,device_id,rp_index,x_m,y_m," + ",".join(f"rss_{i}" for i in range(k))
    path.write_text(header + "\n" + "\n".join(rows) + "\n")


def test_ingest_all_floor_row(tmp_path):
    p = tmp_path / "f.csv"
    _write(p, ["b,d,0,0,0,-100,-100,-100", "b,d,1,1,0,-50,-60,-70"])
    fs = ingest_csv(p)
    np.testing.assert_array_equal(fs.features[0], 0)
    np.testing.assert_allclose(fs.features[1], [0.5, 0.4, 0.3], rtol=1e-6)
    np.testing.assert_array_equal(fs.rp_coords, [[0, 0], [1, 0]])


def test_ingest_clamps_and_counts(tmp_path):
    p = tmp_path / "f.csv"
    _write(p, ["b,d,0,0,0,5,-120,-50"])
    fs = ingest_csv(p)
    assert fs.clamped_values == 2
    np.testing.assert_allclose(fs.features[0], [1.0, 0.0, 0.5])


def test_ingest_parse_error_has_line(tmp_path):
    p = tmp_path / "f.csv"
    _write(p, ["b,d,0,0,0,-50,-50,-50", "b,d,1,1,0,-50,oops,-50"])
    with pytest.raises(ParseError) as exc:
        ingest_csv(p)
    assert exc.value.line == 3


def test_ingest_inconsistent_ap_count(tmp_path):
    p = tmp_path / "f.csv"
    _write(p, ["b,d,0,0,0,-50,-50"])
    with pytest.raises(SchemaError):
        ingest_csv(p)


def test_ingest_bad_header(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(SchemaError):
        ingest_csv(p)


def test_csv_round_trip_bitwise(tmp_path):
    fp = generate_floorplan("b", 30, 40, seed=8)
    fs = synthesize_fingerprints(fp, DEFAULT_DEVICES[0], 3, seed=8)
    p = tmp_path / "rt.csv"
    export_csv(fs, p)
    back = ingest_csv(p)
    assert back.features.tobytes() == fs.features.tobytes()
    np.testing.assert_array_equal(back.labels, fs.labels)
    np.testing.assert_array_equal(back.rp_coords, fs.rp_coords)
    assert back.clamped_values == 0
