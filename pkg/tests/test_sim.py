import heapq
import math

import numpy as np
import pytest

from conftest import make_sim_config
from fedasync import data, models
from fedasync.core import ConfigError, Hyperparams
from fedasync.models import ModelSpec
from fedasync.server import FixedIterations
from fedasync.sim import (
    DeviceProfile,
    bundled_profile_path,
    compare_wallclock,
    load_device_profiles,
    run_async,
    run_replay,
    run_sync,
)

JETSON_EPOCH_SECONDS = [391.1, 293.1, 121.3, 84.5]


def jetson_profiles():
    return load_device_profiles(bundled_profile_path("jetson_hmdb51"))


class TestDeviceProfiles:
    def test_bundled_hmdb51_profile(self):
        profs = jetson_profiles()
        assert [p.seconds_per_local_epoch for p in profs] == JETSON_EPOCH_SECONDS
        assert all(p.uplink_latency_s == 0 and p.downlink_latency_s == 0 for p in profs)

    def test_bundled_ucf101_profile(self):
        profs = load_device_profiles(bundled_profile_path("jetson_ucf101"))
        assert [p.seconds_per_local_epoch for p in profs] == [2691.6, 2001.4, 821.9, 572.1]

    def test_compute_cost_ratio_between_extremes(self):
        profs = jetson_profiles()
        ratio = max(p.seconds_per_local_epoch for p in profs) / min(
            p.seconds_per_local_epoch for p in profs
        )
        assert 4.6 <= ratio <= 4.7

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("device,epoch_s\nx,1.0\n")
        with pytest.raises(ConfigError):
            load_device_profiles(p)

    def test_nonpositive_compute_rejected(self):
        with pytest.raises(ValueError):
            DeviceProfile("x", 0.0)

    def test_unknown_bundled_name(self):
        with pytest.raises(ConfigError):
            bundled_profile_path("not_a_profile")


class TestAsyncSchedule:
    def test_single_client_has_no_staleness_and_regular_clock(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, beta=0.7, a=0.5, h_min=1, h_max=2,
                         e_total=5, batch_size=8, seed=1)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 1, FixedIterations(2),
                              profiles=[DeviceProfile("dev", 3.0)])
        _, trace = run_async(cfg)
        assert [r.staleness for r in trace.rows] == [0] * 5
        assert [r.wall_clock_s for r in trace.rows] == [6.0 * k for k in range(1, 6)]
        assert [r.t for r in trace.rows] == [1, 2, 3, 4, 5]

    def test_two_identical_clients_follow_hand_enumerated_schedule(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, beta=0.7, a=0.5, h_min=1, h_max=2,
                         e_total=6, batch_size=8, seed=1)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 2, FixedIterations(2),
                              profiles=[DeviceProfile("dev", 1.0)])
        _, trace = run_async(cfg)
        # both finish every 2s; ties break by client id, so order alternates
        assert trace.arrival_order() == ["c000", "c001"] * 3
        assert [r.wall_clock_s for r in trace.rows] == [2.0, 2.0, 4.0, 4.0, 6.0, 6.0]
        # first update is fresh; afterwards each client misses exactly one aggregation
        assert [r.staleness for r in trace.rows] == [0, 1, 1, 1, 1, 1]

    def test_four_jetson_profiles_match_independent_event_queue_oracle(
        self, softmax_spec, blob_split
    ):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, beta=0.7, a=0.5, h_min=1, h_max=3,
                         e_total=80, batch_size=8, seed=42, k_bound=16)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 4, FixedIterations(3),
                              profiles=jetson_profiles(), eval_every=80)
        _, trace = run_async(cfg)

        # independent straight-line event queue over (time, id) pairs only
        round_s = {f"c{i:03d}": 3 * s for i, s in enumerate(JETSON_EPOCH_SECONDS)}
        heap = [(t, cid) for cid, t in round_s.items()]
        heapq.heapify(heap)
        oracle = []
        while len(oracle) < 80:
            t, cid = heapq.heappop(heap)
            oracle.append((t, cid))
            heapq.heappush(heap, (t + round_s[cid], cid))

        got = [(r.wall_clock_s, r.client_id) for r in trace.rows]
        assert [cid for _, cid in got] == [cid for _, cid in oracle]
        assert np.allclose([t for t, _ in got], [t for t, _ in oracle], rtol=0, atol=1e-9)
        assert trace.total_wall_clock_s == pytest.approx(oracle[-1][0], abs=1e-9)

        counts = {cid: sum(1 for _, c in got if c == cid) for cid in round_s}
        assert counts["c003"] > counts["c002"] > counts["c001"] > counts["c000"]

    def test_staleness_bounded_by_client_count_with_identical_devices(
        self, softmax_spec, blob_split
    ):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, beta=0.7, a=0.5, h_min=1, h_max=2,
                         e_total=24, batch_size=8, seed=3)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 4, FixedIterations(2))
        _, trace = run_async(cfg)
        assert trace.max_staleness <= 3

    def test_deterministic_traces(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, beta=0.7, a=0.5, h_min=1, h_max=3,
                         e_total=12, batch_size=8, seed=11)
        mk = lambda: make_sim_config(softmax_spec, train, eval_ds, hp, 3, FixedIterations(2),
                                     profiles=jetson_profiles())
        _, a = run_async(mk())
        _, b = run_async(mk())
        assert a.rows == b.rows

    def test_divergence_marks_trace(self):
        ds = data.generate_blobs(3, 4, 30, 1.0, 1)
        spec = ModelSpec("softmax-classifier", input_dim=4, num_classes=3, l2_coeff=1.0)
        hp = Hyperparams(eta=1e30, e_total=40, batch_size=4, seed=0, h_min=1, h_max=2)
        cfg = make_sim_config(spec, ds, None, hp, 2, FixedIterations(2))
        _, trace = run_async(cfg)
        assert trace.diverged
        assert trace.notes and "diverged" in trace.notes[0]
        assert len(trace.rows) < 40

    def test_eval_every_skips_metrics_between_evaluations(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(e_total=6, h_min=1, h_max=2, seed=0)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 2, FixedIterations(2),
                              eval_every=3)
        _, trace = run_async(cfg)
        evaluated = [r.t for r in trace.rows if not math.isnan(r.global_loss)]
        assert evaluated == [3, 6]


class TestSyncSchedule:
    def test_round_time_is_dominated_by_slowest_client(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, e_total=2, h_min=1, h_max=3, batch_size=8, seed=5)
        profiles = [DeviceProfile("nano", 391.1), DeviceProfile("agx", 84.5)]
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 2, FixedIterations(3),
                              profiles=profiles)
        _, trace = run_sync(cfg)
        assert trace.rows[0].wall_clock_s == pytest.approx(3 * 391.1, abs=1e-9)

    def test_total_wall_clock_closed_form_with_latencies(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, e_total=80, h_min=1, h_max=3, batch_size=8, seed=5)
        profiles = [
            DeviceProfile(n, s, uplink_latency_s=1.5, downlink_latency_s=2.5)
            for n, s in zip("abcd", JETSON_EPOCH_SECONDS)
        ]
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 4, FixedIterations(3),
                              profiles=profiles, eval_every=80)
        _, trace = run_sync(cfg)
        assert trace.total_wall_clock_s == pytest.approx(80 * (3 * 391.1 + 1.5 + 2.5), abs=1e-6)

    def test_every_sync_record_has_zero_staleness(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, e_total=10, h_min=1, h_max=3, batch_size=8, seed=5)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 3, FixedIterations(2))
        _, trace = run_sync(cfg)
        assert len(trace.rows) == 10
        assert all(r.staleness == 0 for r in trace.rows)

    def test_single_client_sync_equals_full_replacement_async(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp_sync = Hyperparams(eta=0.05, e_total=8, h_min=1, h_max=2, batch_size=8, seed=6)
        hp_async = Hyperparams(eta=0.05, beta=1.0, a=0.0, theta=hp_sync.theta,
                               e_total=8, h_min=1, h_max=2, batch_size=8, seed=6)
        cfg_s = make_sim_config(softmax_spec, train, eval_ds, hp_sync, 1, FixedIterations(2))
        cfg_a = make_sim_config(softmax_spec, train, eval_ds, hp_async, 1, FixedIterations(2))
        _, tr_s = run_sync(cfg_s)
        _, tr_a = run_async(cfg_a)
        assert [r.global_loss for r in tr_s.rows] == [r.global_loss for r in tr_a.rows]
        assert [r.accuracy for r in tr_s.rows] == [r.accuracy for r in tr_a.rows]


class TestCompareWallclock:
    def test_identical_configs_give_zero_reduction(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, e_total=5, h_min=1, h_max=2, batch_size=8, seed=1)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 1, FixedIterations(2),
                              profiles=[DeviceProfile("dev", 2.0)])
        _, a = run_async(cfg)
        _, b = run_async(cfg)
        assert compare_wallclock(a, b) == 0.0

    def test_async_beats_sync_on_heterogeneous_devices(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, e_total=20, h_min=1, h_max=3, batch_size=8, seed=2)
        mk = lambda: make_sim_config(softmax_spec, train, eval_ds, hp, 4, FixedIterations(3),
                                     profiles=jetson_profiles(), eval_every=20)
        _, tr_async = run_async(mk())
        _, tr_sync = run_sync(mk())
        assert tr_async.total_wall_clock_s < tr_sync.total_wall_clock_s
        assert compare_wallclock(tr_async, tr_sync) > 0.0

    def test_mismatched_budgets_rejected(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp5 = Hyperparams(e_total=5, h_min=1, h_max=2, seed=1)
        hp6 = Hyperparams(e_total=6, h_min=1, h_max=2, seed=1)
        cfg5 = make_sim_config(softmax_spec, train, eval_ds, hp5, 1, FixedIterations(2))
        cfg6 = make_sim_config(softmax_spec, train, eval_ds, hp6, 1, FixedIterations(2))
        _, a = run_async(cfg5)
        _, b = run_async(cfg6)
        with pytest.raises(ValueError):
            compare_wallclock(a, b)


class TestReplay:
    def test_replaying_a_simulated_order_reproduces_the_trajectory(
        self, softmax_spec, blob_split
    ):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, beta=0.7, a=0.5, theta=0.1, e_total=16,
                         h_min=1, h_max=3, batch_size=8, seed=13)
        mk = lambda: make_sim_config(softmax_spec, train, eval_ds, hp, 4, FixedIterations(3),
                                     profiles=jetson_profiles())
        state_live, trace_live = run_async(mk())
        state_replay, trace_replay = run_replay(mk(), trace_live.arrival_order())
        assert state_replay.w.values.tobytes() == state_live.w.values.tobytes()
        assert [r.staleness for r in trace_replay.rows] == [r.staleness for r in trace_live.rows]

    def test_unknown_client_in_order_rejected(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(e_total=4, h_min=1, h_max=2, seed=0)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 2, FixedIterations(2))
        with pytest.raises(ConfigError):
            run_replay(cfg, ["c000", "zzz"])


class TestTraceInvariants:
    def test_clock_monotone_and_epochs_gapless(self, softmax_spec, blob_split):
        train, eval_ds = blob_split
        hp = Hyperparams(eta=0.05, e_total=15, h_min=1, h_max=3, batch_size=8, seed=8)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 3, FixedIterations(2),
                              profiles=jetson_profiles())
        _, trace = run_async(cfg)
        clocks = [r.wall_clock_s for r in trace.rows]
        assert all(a <= b for a, b in zip(clocks, clocks[1:]))
        assert [r.t for r in trace.rows] == list(range(1, 16))

    def test_param_snapshots_cover_initial_and_every_aggregation(
        self, softmax_spec, blob_split
    ):
        train, eval_ds = blob_split
        hp = Hyperparams(e_total=7, h_min=1, h_max=2, seed=8)
        cfg = make_sim_config(softmax_spec, train, eval_ds, hp, 2, FixedIterations(2),
                              record_params=True)
        _, trace = run_async(cfg)
        assert len(trace.param_snapshots) == 8
