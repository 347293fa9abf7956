import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwreco.features import (
    BASE_FEATURES,
    FEATURE_NAMES,
    FEATURE_ORDER_HASH,
    LEVELS,
    N_FEATURES,
    FeatureTable,
    ScopeLevel,
    class_normalized_weights,
    extract_features,
    feature_index,
    feature_order_table,
    importance_weights,
    level_of,
    scope_counts,
)
from fwreco.flow_model import Direction, FlowRecord, LabeledPair, Label, Protocol, records_to_frame

T0 = 1704067200  # midnight UTC
HOUR, DAY = 3600, 86400


def rec(ip=1, vm="vm1", port=443, ts=T0, packets=1, inbound=True, protocol="tcp", flags=(),
        org="org1", rport=50000):
    proto = Protocol(protocol)
    return FlowRecord(ts, vm, org, port, ip, rport, Direction.INBOUND if inbound else Direction.OUTBOUND,
                      proto, frozenset(flags) if proto is Protocol.TCP else frozenset(), packets)


def value(table: FeatureTable, row: int, level: str, name: str) -> float:
    return float(table.X[row, feature_index(level, name)])


def test_layout_constants():
    assert len(BASE_FEATURES) == 21 and N_FEATURES == 84 and len(LEVELS) == 4
    assert [lvl.value for lvl in LEVELS] == ["cloud", "organization", "vm", "endpoint"]
    assert feature_index("vm", "hourly_avg") == 2 * 21 + 2
    assert level_of(83) is ScopeLevel.ENDPOINT
    table = feature_order_table()
    assert list(table["column"])[:2] == ["f000", "f001"] and len(table) == 84
    assert FEATURE_NAMES[0] == "cloud.pct_inactive_hours"
    assert len(FEATURE_ORDER_HASH) == 64


def test_inactive_hours():
    flows = [rec(ts=T0 + h * HOUR + 10) for h in (0, 3, 7, 12, 13, 20)]
    t = extract_features(flows, (T0, T0 + DAY))
    for lvl in LEVELS:
        assert value(t, 0, lvl.value, "pct_inactive_hours") == pytest.approx(0.75)


def test_constant_hourly_series():
    flows = [rec(ts=T0 + h * HOUR + 5, packets=4) for h in range(4)]
    t = extract_features(flows, (T0, T0 + 4 * HOUR))
    assert value(t, 0, "endpoint", "hourly_avg") == 4
    assert value(t, 0, "endpoint", "hourly_std") == 0
    assert value(t, 0, "endpoint", "hourly_max_over_avg") == 1
    # a 4-hour window lies inside one day
    assert value(t, 0, "endpoint", "daily_avg") == 16


def test_hourly_std_is_population_std():
    flows = [rec(ts=T0 + h * HOUR, packets=p) for h, p in zip(range(3), (3, 1, 4))]
    t = extract_features(flows, (T0, T0 + 4 * HOUR))
    assert value(t, 0, "cloud", "hourly_std") == pytest.approx(np.std([3, 1, 4, 0]))
    assert value(t, 0, "cloud", "hourly_max_over_avg") == pytest.approx(4 / 2)


def test_type_features_scripted():
    flows = [
        rec(inbound=True, protocol="tcp", flags=("syn",), packets=1),
        rec(inbound=True, protocol="tcp", flags=("syn",), packets=1, ts=T0 + 60),
        rec(inbound=False, protocol="udp", packets=1, ts=T0 + 120),
    ]
    t = extract_features(flows, (T0, T0 + HOUR))
    assert value(t, 0, "endpoint", "sent_tcp_pct") == 1.0
    assert value(t, 0, "endpoint", "sent_syn_pct") == 1.0
    assert value(t, 0, "endpoint", "recv_tcp_pct") == 0.0
    assert value(t, 0, "endpoint", "recv_syn_pct") == 0.0


def test_type_features_weight_by_packets():
    flows = [rec(protocol="tcp", flags=("reset",), packets=3), rec(protocol="udp", packets=1, ts=T0 + 1)]
    t = extract_features(flows, (T0, T0 + HOUR))
    assert value(t, 0, "cloud", "sent_tcp_pct") == pytest.approx(0.75)
    assert value(t, 0, "cloud", "sent_reset_pct") == pytest.approx(0.75)
    assert value(t, 0, "cloud", "sent_fin_pct") == 0.0


def test_zero_denominators_give_zero():
    t = extract_features([rec(inbound=False, protocol="udp")], (T0, T0 + HOUR))
    assert value(t, 0, "cloud", "sent_tcp_pct") == 0.0
    assert np.isfinite(t.X).all()


def scoped_dataset():
    ip = 99
    return [
        rec(ip, vm="vm1", port=443, org="org1", rport=1000),
        rec(ip, vm="vm1", port=80, org="org1", rport=1001),
        rec(ip, vm="vm2", port=443, org="org1", rport=1002),
        rec(ip, vm="vm3", port=22, org="org2", rport=1003, packets=5),
        rec(7, vm="vm4", port=22, org="org2"),  # another client widens the VM universe
    ]


def test_breadth_features_per_level():
    t = extract_features(scoped_dataset(), (T0, T0 + HOUR))
    row = t.keys.index[(t.keys.vm_id == "vm1") & (t.keys.endpoint_port == 443)][0]
    assert value(t, row, "cloud", "vm_pct") == pytest.approx(3 / 4)
    assert value(t, row, "organization", "vm_pct") == pytest.approx(2 / 2)
    assert value(t, row, "vm", "vm_pct") == 1.0
    assert value(t, row, "cloud", "vms_per_packet") == pytest.approx(3 / 8)
    assert value(t, row, "cloud", "src_port_pct") == pytest.approx(4 / 65536)
    assert value(t, row, "cloud", "dst_port_pct") == pytest.approx(3 / 65536)
    assert value(t, row, "organization", "dst_ports_per_packet") == pytest.approx(2 / 3)
    assert value(t, row, "vm", "dst_port_pct") == pytest.approx(2 / 65536)
    assert value(t, row, "endpoint", "src_ports_per_packet") == pytest.approx(1.0)


def test_scope_counts_monotone():
    counts = scope_counts(scoped_dataset(), (T0, T0 + HOUR))
    for col in ("n_vms", "n_src_ports", "n_dst_ports", "packets"):
        vals = counts[[f"{lvl.value}.{col}" for lvl in reversed(LEVELS)]].to_numpy()
        assert (np.diff(vals, axis=1) >= 0).all(), col


def test_endpoint_filter_restricts_rows_not_scopes():
    full = extract_features(scoped_dataset(), (T0, T0 + HOUR))
    part = extract_features(scoped_dataset(), (T0, T0 + HOUR), endpoints=[("vm1", 443)])
    assert len(part) == 1
    row = full.keys.index[(full.keys.vm_id == "vm1") & (full.keys.endpoint_port == 443)][0]
    np.testing.assert_array_equal(part.X[0], full.X[row])


@pytest.mark.parametrize("window", [(T0, T0), (T0 + 10, T0), (T0, T0 + HOUR - 1)])
def test_window_errors(window):
    with pytest.raises(ValueError):
        extract_features([rec()], window)


def test_flows_outside_window_rejected():
    with pytest.raises(ValueError):
        extract_features([rec(ts=T0 + 2 * HOUR)], (T0, T0 + HOUR))


def test_percentages_bounded_and_finite():
    rng = np.random.default_rng(3)
    flows = [rec(int(rng.integers(0, 20)), vm=f"vm{rng.integers(0, 5)}", port=int(rng.choice([22, 80])),
                 ts=T0 + int(rng.integers(0, 2 * DAY)), packets=int(rng.integers(1, 9)),
                 inbound=bool(rng.integers(0, 2)), flags=("syn",) if rng.random() < 0.5 else (),
                 org=f"org{rng.integers(0, 2)}", rport=int(rng.integers(0, 65536)))
             for _ in range(300)]
    t = extract_features(flows, (T0, T0 + 2 * DAY))
    assert np.isfinite(t.X).all() and (t.X >= 0).all()
    pct = [i for i, n in enumerate(FEATURE_NAMES) if n.split(".")[1].endswith("_pct")
           or n.endswith("pct_inactive_hours")]
    assert (t.X[:, pct] <= 1.0).all()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from(["vm1", "vm2", "vm3"]), st.sampled_from([22, 80]),
                          st.integers(0, 2 * DAY - 1), st.integers(1, 50), st.booleans(), st.booleans()),
                min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_permutation_invariance(rows, rnd):
    flows = [rec(ip, vm=vm, port=port, ts=T0 + ts, packets=p, inbound=inb, flags=("fin",) if f else (),
                 org="org1" if vm != "vm3" else "org2") for ip, vm, port, ts, p, inb, f in rows]
    shuffled = flows[:]
    rnd.shuffle(shuffled)
    a = extract_features(flows, (T0, T0 + 2 * DAY))
    b = extract_features(shuffled, (T0, T0 + 2 * DAY))
    pd.testing.assert_frame_equal(a.keys, b.keys)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.importance, b.importance)


# --- weights -------------------------------------------------------------------------

def test_importance_examples():
    w = importance_weights([rec(1, packets=30), rec(2, packets=10)])
    assert w == {(("vm1", 443), 1): 0.75, (("vm1", 443), 2): 0.25}
    assert importance_weights([rec(5, packets=3)]) == {(("vm1", 443), 5): 1.0}
    w = importance_weights([rec(i, packets=7) for i in range(5)])
    assert all(v == pytest.approx(0.2) for v in w.values())
    assert importance_weights([]) == {}


def test_importance_sums_to_one_per_endpoint():
    rng = np.random.default_rng(1)
    flows = [rec(int(rng.integers(0, 50)), vm=f"vm{rng.integers(0, 4)}", packets=int(rng.integers(1, 1000)))
             for _ in range(500)]
    sums = {}
    for (ep, _), v in importance_weights(flows).items():
        sums[ep] = sums.get(ep, 0.0) + v
    assert all(abs(s - 1.0) <= 1e-9 for s in sums.values())


def test_class_normalized_examples():
    assert class_normalized_weights([(0.6, "allow"), (0.2, "allow"), (0.1, "deny")]) == pytest.approx([0.75, 0.25, 1.0])
    assert class_normalized_weights([(0.3, "allow"), (0.9, Label.DENY)]) == [1.0, 1.0]
    with pytest.raises(ValueError):
        class_normalized_weights([(0.0, "allow"), (0.5, "deny")])


def test_class_balance_after_normalization():
    rng = np.random.default_rng(0)
    labels = ["allow"] * 97 + ["deny"] * 3
    w = np.array(class_normalized_weights(zip(rng.random(100), labels)))
    assert w[:97].sum() == pytest.approx(1.0, abs=1e-12) and w[97:].sum() == pytest.approx(1.0, abs=1e-12)


def test_attach_labels_and_csv_round_trip():
    flows = [rec(1, packets=3), rec(2, packets=1), rec(3, vm="vm2")]
    t = extract_features(flows, (T0, T0 + HOUR))
    t = t.attach_labels([LabeledPair(("vm1", 443), 1, Label.ALLOW), LabeledPair(("vm1", 443), 2, Label.DENY)])
    assert list(t.label) == ["allow", "deny", None]
    assert list(t.sample_weight) == [1.0, 1.0, 0.0]
    assert list(t.labeled().y) == [1.0, -1.0]
    buf = io.StringIO()
    t.to_csv(buf)
    header = buf.getvalue().splitlines()[0].split(",")
    assert header[:6] == ["vm_id", "endpoint_port", "remote_ip", "label", "importance", "sample_weight"]
    assert header[6] == "f000" and header[-1] == "f083"
    back = FeatureTable.from_csv(io.StringIO(buf.getvalue()))
    np.testing.assert_array_equal(back.X, t.X)
    np.testing.assert_array_equal(back.importance, t.importance)
    assert list(back.label) == list(t.label)
    pd.testing.assert_frame_equal(back.keys, t.keys, check_dtype=False)


def test_frame_and_records_give_same_features():
    flows = scoped_dataset()
    a = extract_features(flows, (T0, T0 + HOUR))
    b = extract_features(records_to_frame(flows), (T0, T0 + HOUR))
    np.testing.assert_array_equal(a.X, b.X)
