import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rssguard.attacks import AttackSpec
from rssguard.data import DEFAULT_DEVICES, generate_floorplan, synthesize_fingerprints
from rssguard.errors import ConfigError, ProtocolError
from rssguard.fl import (
    ClientConfig,
    ClientUpdate,
    adjust_update,
    aggregate,
    aggregate_fedavg,
    aggregate_saliency,
    deviation_matrix,
    local_training_set,
    run_round,
    saliency_map,
)
from rssguard.model import TENSOR_NAMES, FusedParams, TrainConfig, init_fused

SMALL = (6, 5, 4)


def scalar_tensors(value):
    return {"w": np.array([value], dtype=np.float32)}


def const_params(like: FusedParams, value: float) -> FusedParams:
    return FusedParams.from_tensors([np.full_like(t, value) for t in like.tensors()])


@pytest.fixture
def gm():
    return init_fused(8, 3, seed=0, hidden=SMALL)


def test_deviation_example():
    assert deviation_matrix(scalar_tensors(2.0), scalar_tensors(5.0))["w"][0] == 3.0


@pytest.mark.parametrize("dw,s", [(0.0, 1.0), (1.0, 0.5), (9.0, 0.1)])
def test_saliency_values(dw, s):
    assert saliency_map(scalar_tensors(dw))["w"][0] == pytest.approx(s)


def test_saliency_rejects_negative():
    with pytest.raises(AssertionError):
        saliency_map(scalar_tensors(-1.0))


def test_adjusted_update_example():
    assert adjust_update(scalar_tensors(4.0), scalar_tensors(0.5))["w"][0] == 2.0


@given(st.floats(0, 1e6))
def test_saliency_in_unit_interval(d):
    s = saliency_map(scalar_tensors(d))["w"][0]
    assert 0 < s <= 1


def test_deviation_name_and_shape_checks(gm):
    t = gm.named_tensors()
    with pytest.raises(ProtocolError):
        deviation_matrix({"x": t[TENSOR_NAMES[0]]}, t)
    other = init_fused(8, 4, seed=0, hidden=SMALL)
    with pytest.raises(ProtocolError):
        deviation_matrix(other, gm)


def test_paper_literal_identical_update_doubles(gm):
    out = aggregate_saliency(gm, [ClientUpdate("a", gm, 1)], mode="paper_literal")
    for a, b in zip(out.tensors(), gm.tensors()):
        np.testing.assert_allclose(a, 2 * b, rtol=1e-6)


def test_normalized_fixed_point_bitwise(gm):
    ups = [ClientUpdate(f"c{i}", gm, 10 + i) for i in range(4)]
    out = aggregate_saliency(gm, ups, mode="normalized")
    for a, b in zip(out.tensors(), gm.tensors()):
        assert a.tobytes() == b.tobytes()


def test_normalized_spot_value(gm):
    # GM all 0, one LM all 1: dW=1, S=0.5, adjusted=0.5, (0 + 0.5) / 2 = 0.25
    zero, one = const_params(gm, 0.0), const_params(gm, 1.0)
    out = aggregate_saliency(zero, [ClientUpdate("a", one, 1)])
    for t in out.tensors():
        np.testing.assert_array_equal(t, 0.25)


def test_saliency_damps_outliers(gm):
    zero = const_params(gm, 0.0)
    ups = [ClientUpdate("a", const_params(gm, 0.1), 1), ClientUpdate("b", const_params(gm, 10.0), 1)]
    sal = aggregate_saliency(zero, ups).tensors()[0][0, 0]
    avg = aggregate_fedavg(zero, ups).tensors()[0][0, 0]
    assert sal < avg


def test_fedavg_weighted_mean(gm):
    ups = [ClientUpdate("a", const_params(gm, 1.0), 1), ClientUpdate("b", const_params(gm, 3.0), 3)]
    out = aggregate_fedavg(gm, ups)
    for t in out.tensors():
        np.testing.assert_allclose(t, 2.5)
    equal = [ClientUpdate("a", const_params(gm, 2.0), 5), ClientUpdate("b", const_params(gm, 3.0), 5)]
    np.testing.assert_allclose(aggregate_fedavg(gm, equal).tensors()[0], 2.5)


@pytest.mark.parametrize("aggregation", ["saliency", "fedavg"])
@given(perm_seed=st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_aggregation_permutation_invariant(aggregation, perm_seed):
    gm = init_fused(8, 3, seed=0, hidden=SMALL)
    ups = [ClientUpdate(f"c{i}", init_fused(8, 3, seed=i + 1, hidden=SMALL), i + 1) for i in range(5)]
    shuffled = [ups[i] for i in np.random.default_rng(perm_seed).permutation(5)]
    a = aggregate(gm, ups, aggregation)
    b = aggregate(gm, shuffled, aggregation)
    for x, y in zip(a.tensors(), b.tensors()):
        assert x.tobytes() == y.tobytes()


def test_aggregation_errors(gm):
    with pytest.raises(ConfigError):
        aggregate(gm, [], "fedavg")
    with pytest.raises(ConfigError):
        aggregate(gm, [ClientUpdate("a", gm, 1)], "median")
    with pytest.raises(ConfigError):
        aggregate_saliency(gm, [ClientUpdate("a", gm, 1)], mode="halved")
    with pytest.raises(ProtocolError):
        aggregate(gm, [ClientUpdate("a", gm, 1), ClientUpdate("a", gm, 1)], "fedavg")


def test_client_config_requires_matching_attack():
    fs = synthesize_fingerprints(generate_floorplan("b", 3, 8, seed=0), DEFAULT_DEVICES[0], 1, seed=0)
    with pytest.raises(ConfigError):
        ClientConfig("c", "d", fs, malicious=True)
    with pytest.raises(ConfigError):
        ClientConfig("c", "d", fs, attack=AttackSpec("fgsm"))


@pytest.fixture(scope="module")
def small_world():
    fp = generate_floorplan("b", 6, 8, seed=1)
    gm = init_fused(8, 6, seed=2, hidden=SMALL)
    sets = [synthesize_fingerprints(fp, d, 2, seed=i) for i, d in enumerate(DEFAULT_DEVICES[:3])]
    clients = [
        ClientConfig("c0", sets[0].device_id, sets[0]),
        ClientConfig("c1", sets[1].device_id, sets[1]),
        ClientConfig("c2", sets[2].device_id, sets[2], True, AttackSpec("label_flip", epsilon=1.0, seed=3)),
    ]
    return gm, clients, sets


def test_label_flip_client_keeps_features(small_world):
    gm, clients, _ = small_world
    ts, rec = local_training_set(gm, clients[2], tau=float("inf"), round_seed=0)
    np.testing.assert_array_equal(ts.features, clients[2].local_data.features)
    assert rec.malicious and rec.attack == "label_flip" and rec.denoise_count == 0


def test_run_round_order_independent(small_world):
    gm, clients, sets = small_world
    cfg = TrainConfig(epochs=1, learning_rate=1e-3)
    a, ra = run_round(gm, clients, "saliency", 0.1, 7, sets, finetune=cfg)
    b, rb = run_round(gm, clients[::-1], "saliency", 0.1, 7, sets, finetune=cfg)
    for x, y in zip(a.tensors(), b.tensors()):
        assert x.tobytes() == y.tobytes()
    assert [c.client_id for c in ra.clients] == ["c0", "c1", "c2"]
    assert ra.mean_error_m == rb.mean_error_m
    assert sum(ra.denoise_trigger_counts.values()) == sum(c.denoise_count for c in ra.clients)
