import csv
import math

import numpy as np
import pytest

from evfleetsim.charging import ChargeSession
from evfleetsim.dynamics import Cumulative
from evfleetsim.engine import ms
from evfleetsim.fleet import Lifecycle, Trip
from evfleetsim.metrics import (MetricsCollector, MetricsError, TickRecord,
                                TICK_HEADER)
from evfleetsim.network import Route


def tick(t_s=0.0, vid="v0", **overrides):
    base = dict(state="idle", v_mps=0.0, a_mps2=0.0, soc=0.5,
                p_traction_w=0.0, p_battery_w=0.0, p_recup_w=0.0, p_re_w=0.0)
    base.update(overrides)
    return TickRecord(ms(t_s), vid, **base)


def make_trip(tid, airline, driven, status="completed", depart_s=100.0,
              vehicle_id="v0"):
    trip = Trip(tid, ms(depart_s), "e0", airline, 60.0,
                destination_edge="e1",
                outbound=Route(["e0", "e1"], driven, "e0", "e1"),
                return_route=Route(["e1", "e0"], driven, "e1", "e0"),
                status=status)
    trip.vehicle_id = vehicle_id
    return trip


def session(vid="v0", grant_s=0.0, dur_s=3600.0, energy=2300.0,
            enqueue_s=None, station="st", slot="s0"):
    enqueue_s = grant_s if enqueue_s is None else enqueue_s
    return ChargeSession(
        station_id=station, slot_id=slot, vehicle_id=vid,
        enqueue_ms=ms(enqueue_s), grant_ms=ms(grant_s),
        complete_ms=ms(grant_s + dur_s), duration_s=dur_s,
        effective_power_w=energy * 3600.0 / dur_s, energy_wh=energy,
        start_soc=0.5, target_soc=1.0, completed=True,
    )


# --- tick recording -------------------------------------------------------------

def test_one_record_one_row_after_flush(tmp_path):
    collector = MetricsCollector(tmp_path, tick_buffer_rows=10)
    collector.record_tick(tick())
    collector._flush_ticks()
    rows = (tmp_path / "ticks.csv").read_text().splitlines()
    assert rows[0] == ",".join(TICK_HEADER)
    assert len(rows) == 2


def test_bulk_record_count_matches_exactly(tmp_path):
    n = 1_000_000
    collector = MetricsCollector(tmp_path, tick_buffer_rows=200_000)
    record = tick()
    for _ in range(n):
        collector.record_tick(record)
    collector._flush_ticks()
    assert collector.tick_count == n
    with open(tmp_path / "ticks.csv") as fh:
        assert sum(1 for _ in fh) == n + 1


def test_non_finite_tick_rejected():
    collector = MetricsCollector()
    with pytest.raises(MetricsError, match="non-finite"):
        collector.record_tick(tick(v_mps=float("nan")))
    with pytest.raises(MetricsError):
        collector.record_tick(tick(p_battery_w=float("inf")))


# --- distance histogram -----------------------------------------------------------

def test_histogram_bin_placement():
    collector = MetricsCollector()
    collector.set_trips([make_trip("t0", 400.0, 520.0)])
    edges, airline, driven = collector.distance_histogram([0.0, 500.0, 1000.0])
    assert airline.tolist() == [1, 0]
    assert driven.tolist() == [0, 1]


def test_histogram_totals_equal_accepted_trips():
    trips = [make_trip(f"t{i}", 100.0 + i * 90.0, 200.0 + i * 95.0)
             for i in range(20)]
    trips.append(Trip("rej", 0, "e0", 500.0, 10.0, status="rejected"))
    collector = MetricsCollector()
    collector.set_trips(trips)
    edges, airline, driven = collector.distance_histogram([0.0, 800.0, 1600.0, 2400.0])
    assert int(airline.sum()) == 20
    assert int(driven.sum()) == 20


def test_driven_dominates_airline_per_trip():
    # oracle: pairwise comparison over the trip log
    rng = np.random.default_rng(4)
    trips = []
    for i in range(200):
        airline = float(rng.uniform(50, 2000))
        trips.append(make_trip(f"t{i}", airline, airline * float(rng.uniform(1.0, 1.8))))
    collector = MetricsCollector()
    collector.set_trips(trips)
    for trip in collector.accepted_trips():
        assert trip.outbound.total_length_m >= trip.sampled_airline_m


# --- utilization -----------------------------------------------------------------

def start_idle(collector, vids, t=0):
    for vid in vids:
        collector.record_transition(t, vid, None, Lifecycle.IDLE)


def test_nobody_dispatched_all_idle():
    collector = MetricsCollector()
    start_idle(collector, ["v0", "v1", "v2"])
    series = collector.unused_vehicles_series(60.0, ms(600.0))
    assert all(c == 3 for c in series.counts["idle"])
    assert series.min_idle == 3


def test_one_vehicle_busy_whole_run():
    collector = MetricsCollector()
    start_idle(collector, ["v0", "v1"])
    collector.record_transition(0, "v0", Lifecycle.IDLE, Lifecycle.EN_ROUTE)
    series = collector.unused_vehicles_series(60.0, ms(600.0))
    assert all(c == 1 for c in series.counts["idle"])
    assert all(c == 1 for c in series.counts["busy"])
    assert series.min_idle == 1


def test_partition_sums_to_fleet_size():
    rng = np.random.default_rng(9)
    collector = MetricsCollector()
    vids = [f"v{i}" for i in range(7)]
    start_idle(collector, vids)
    states = list(Lifecycle)
    t = 0
    for _ in range(300):
        t += int(rng.integers(1, 5000))
        vid = vids[int(rng.integers(0, len(vids)))]
        collector.record_transition(t, vid, None,
                                    states[int(rng.integers(0, len(states)))])
    series = collector.unused_vehicles_series(120.0, t + 1000)
    for i in range(len(series.bin_starts_s)):
        assert sum(series.counts[g][i] for g in series.counts) == 7


# --- power flow summaries -----------------------------------------------------------

def test_never_moved_vehicle_summary():
    collector = MetricsCollector()
    start_idle(collector, ["v0"])
    collector.set_run_info(horizon_ms=ms(1000.0))
    collector.record_vehicle_final("v0", Cumulative(), 1.0, 1.0, 0, 18000.0)
    summary = collector.power_flow_summary("v0")
    assert summary.consumed_wh == 0.0
    assert summary.grid_charged_wh == 0.0
    assert len(summary.idle_periods) == 1
    assert summary.idle_periods[0].start_s == 0.0
    assert summary.idle_periods[0].end_s == 1000.0
    assert summary.charging_periods == []


def test_energy_identity_and_fuel_definition():
    # grid + recup + re - consumed = capacity * dSOC; fuel = rate * re_kwh
    collector = MetricsCollector()
    start_idle(collector, ["v0"])
    cap = 18000.0
    consumed, recup, re, grid = 4000.0, 600.0, 1200.0, 1500.0
    soc0 = 0.9
    soc1 = soc0 + (grid + recup + re - consumed) / cap
    rate = 0.28
    cum = Cumulative(consumed_wh=consumed, recuperated_wh=recup,
                     range_extended_wh=re, fuel_liters=rate * re / 1000.0,
                     distance_m=12000.0)
    collector.record_vehicle_final("v0", cum, soc0, soc1, 3, cap)
    collector.set_sessions([session("v0", grant_s=100.0, dur_s=900.0, energy=grid)])
    collector.set_run_info(horizon_ms=ms(4000.0))
    summary = collector.power_flow_summary("v0")
    lhs = (summary.grid_charged_wh + summary.recuperated_wh
           + summary.range_extended_wh - summary.consumed_wh)
    assert lhs == pytest.approx(cap * (soc1 - soc0), rel=1e-9)
    assert summary.fuel_liters == pytest.approx(
        rate * summary.range_extended_wh / 1000.0, rel=1e-9, abs=1e-12
    )
    assert collector.energy_ledger_error() < 1e-9
    with pytest.raises(MetricsError, match="unknown vehicle"):
        collector.power_flow_summary("ghost")


def test_periods_tile_horizon():
    collector = MetricsCollector()
    start_idle(collector, ["v0"])
    seq = [(100.0, Lifecycle.EN_ROUTE), (200.0, Lifecycle.DWELLING),
           (250.0, Lifecycle.RETURNING), (400.0, Lifecycle.CHARGING),
           (500.0, Lifecycle.IDLE)]
    prev = Lifecycle.IDLE
    for t_s, new in seq:
        collector.record_transition(ms(t_s), "v0", prev, new)
        prev = new
    periods = collector.state_periods("v0", ms(1000.0))
    assert periods[0] == ("idle", 0.0, 100.0)
    assert periods[-1] == ("idle", 500.0, 1000.0)
    # contiguous tiling, no gaps or overlaps
    for (_, _, end), (_, start, _) in zip(periods, periods[1:]):
        assert end == start
    assert sum(end - start for _, start, end in periods) == pytest.approx(1000.0)


# --- export ------------------------------------------------------------------------

def test_export_manifest_lists_six_files(tmp_path):
    collector = MetricsCollector(tmp_path)
    start_idle(collector, ["v0"])
    collector.record_tick(tick())
    collector.set_trips([make_trip("t0", 400.0, 520.0)])
    collector.set_sessions([session()])
    collector.record_vehicle_final("v0", Cumulative(), 1.0, 1.0, 1, 18000.0)
    collector.set_run_info(horizon_ms=ms(600.0), seed=1)
    manifest = collector.export_all(tmp_path)
    assert sorted(manifest["files"]) == [
        "histograms.csv", "sessions.csv", "summary.csv", "ticks.csv",
        "trips.csv", "utilization.csv",
    ]
    assert manifest["files"]["ticks.csv"] == 1
    assert manifest["files"]["trips.csv"] == 1
    for name in manifest["files"]:
        assert (tmp_path / name).exists()
    assert (tmp_path / "manifest.json").exists()


def test_export_empty_scenario_headers_only(tmp_path):
    collector = MetricsCollector(tmp_path)
    collector.set_run_info(horizon_ms=0)
    manifest = collector.export_all(tmp_path)
    for name in ("ticks.csv", "trips.csv", "sessions.csv", "summary.csv",
                 "histograms.csv"):
        lines = (tmp_path / name).read_text().splitlines()
        data_rows = manifest["files"][name]
        if name in ("ticks.csv", "trips.csv", "sessions.csv", "summary.csv"):
            assert data_rows == 0
        assert len(lines) == 1 + data_rows
        assert "," in lines[0]


def test_summary_csv_schema(tmp_path):
    collector = MetricsCollector(tmp_path)
    start_idle(collector, ["v0"])
    collector.record_vehicle_final("v0", Cumulative(), 1.0, 1.0, 0, 18000.0)
    collector.set_run_info(horizon_ms=ms(100.0))
    collector.export_all(tmp_path)
    with open(tmp_path / "summary.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["vehicle_id", "consumed_wh", "recuperated_wh",
                      "range_extended_wh", "grid_charged_wh", "fuel_l",
                      "distance_m", "n_trips", "idle_s", "charging_s",
                      "queued_s", "driving_s"]
