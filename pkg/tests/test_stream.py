import pandas as pd
import pytest
from pydantic import ValidationError

from reefdeploy.exceptions import StreamAbortedError
from reefdeploy.models.configs import DecisionConfig, DropPolicy, StreamConfig
from reefdeploy.models.reports import TimingStats
from reefdeploy.models.schemas import DecisionRule, FrameLabel, FrameRecord, GeoPoint
from reefdeploy.services.classification_service import MockBackend, PredictionsFileBackend
from reefdeploy.services.stream_service import VirtualClock, run_stream, summarize, write_timing_csv
from tests.helpers import read_lines


def frames(n: int, prefix: str = "s"):
    return [
        FrameRecord(frame_id=f"{prefix}{i}", timestamp_ms=i * 50, geo=GeoPoint(lat=-18.0 - i * 1e-5, lon=147.0))
        for i in range(n)
    ]


def virtual_run(source, delay_ms, **stream):
    clock = VirtualClock()
    backend = MockBackend(seed=1, delay_ms=delay_ms, sleep=clock.sleep)
    return run_stream(source, backend, DecisionConfig(), StreamConfig(**stream), clock=clock)


class TestVirtualClock:
    def test_slow_backend_drops_stale_frames(self):
        decisions, stats = virtual_run(frames(1000), 100, capture_fps=20, duration_s=5)
        assert stats.frames_offered == 100
        assert 48 <= stats.frames_processed <= 52
        assert stats.frames_dropped > 0
        assert stats.frames_offered == stats.frames_processed + stats.frames_dropped
        assert len(decisions) == stats.frames_processed

    def test_newest_frame_wins(self):
        decisions, _ = virtual_run(frames(100), 100, capture_fps=20, duration_s=5)
        processed = [int(d.frame_id[1:]) for d in decisions]
        assert processed == sorted(processed)
        assert processed[0] == 0
        assert processed[-1] == 99

    def test_fast_backend_keeps_up(self):
        decisions, stats = virtual_run(frames(50), 10, capture_fps=20)
        assert stats.frames_processed == 50
        assert stats.frames_dropped == 0
        assert stats.max_latency_ms == pytest.approx(10.0)
        assert stats.p50_inference_ms == pytest.approx(10.0)

    def test_process_all_never_drops(self):
        decisions, stats = virtual_run(
            frames(40), 100, capture_fps=20, drop_policy=DropPolicy.PROCESS_ALL, queue_capacity=3
        )
        assert [d.frame_id for d in decisions] == [f"s{i}" for i in range(40)]
        assert stats.frames_dropped == 0
        assert stats.elapsed_s == pytest.approx(4.0)
        assert stats.achieved_fps == pytest.approx(10.0)

    def test_frame_budget(self):
        _, stats = virtual_run(frames(100), 0, capture_fps=10, max_frames=7)
        assert (stats.frames_offered, stats.frames_processed) == (7, 7)

    def test_source_shorter_than_budget(self):
        _, stats = virtual_run(frames(3), 0, capture_fps=10, duration_s=60)
        assert stats.frames_offered == 3

    def test_whole_image_rule(self):
        clock = VirtualClock()
        backend = MockBackend(constant=(0.2, 0.1, 0.7), sleep=clock.sleep)
        config = DecisionConfig(rule=DecisionRule.WHOLE_IMAGE)
        decisions, _ = run_stream(frames(5), backend, config, StreamConfig(capture_fps=5), clock=clock)
        assert {d.decision for d in decisions} == {FrameLabel.DEPLOY}
        assert {d.rule for d in decisions} == {DecisionRule.WHOLE_IMAGE}


def test_failure_aborts_with_partial_stats():
    probs = {(f, i): (0.1, 0.1, 0.8) for f in ("s0", "s1") for i in range(28)}
    backend = PredictionsFileBackend(patch_probs=probs)
    with pytest.raises(StreamAbortedError, match="'s2'") as exc:
        run_stream(frames(5), backend, DecisionConfig(), StreamConfig(capture_fps=10), clock=VirtualClock())
    assert [d.frame_id for d in exc.value.decisions] == ["s0", "s1"]
    stats = exc.value.stats
    assert (stats.frames_offered, stats.frames_processed, stats.frames_dropped) == (3, 2, 1)


def test_decision_log_lines(tmp_path):
    path = tmp_path / "stream.jsonl"
    clock = VirtualClock()
    decisions, _ = run_stream(
        frames(6), MockBackend(sleep=clock.sleep), DecisionConfig(alpha=0.2), StreamConfig(capture_fps=10),
        clock=clock, log_path=path,
    )
    lines = read_lines(path)
    assert [line["frame_id"] for line in lines] == [d.frame_id for d in decisions]
    assert lines[3]["lat"] == pytest.approx(-18.00003)
    assert lines[3]["timestamp_ms"] == 150
    assert lines[0]["alpha"] == 0.2


def test_summaries(tmp_path):
    stats = TimingStats(frames_offered=60, frames_processed=55, frames_dropped=5, elapsed_s=10.0, latency_ms=(100.0, 200.0))
    assert stats.achieved_fps == 5.5
    assert "achieved fps:      5.50" in summarize(stats)

    write_timing_csv(tmp_path / "timing.csv", stats)
    row = pd.read_csv(tmp_path / "timing.csv").iloc[0]
    assert row["achieved_fps"] == 5.5
    assert row["latency_max_ms"] == 200.0
    assert row["frames_dropped"] == 5


def test_conservation_is_enforced():
    with pytest.raises(ValidationError):
        TimingStats(frames_offered=3, frames_processed=1, frames_dropped=1)


class TestRealClock:
    def test_zero_cost_pipeline_throughput(self):
        _, stats = run_stream(
            frames(300), MockBackend(), DecisionConfig(), StreamConfig(capture_fps=2000, drop_policy=DropPolicy.PROCESS_ALL)
        )
        assert stats.frames_processed == 300
        assert stats.achieved_fps >= 100

    def test_inference_bound_rate(self):
        _, stats = run_stream(
            frames(1000), MockBackend(delay_ms=180), DecisionConfig(), StreamConfig(capture_fps=20, duration_s=3)
        )
        assert 5.0 <= stats.achieved_fps <= 5.6
        assert stats.frames_offered == stats.frames_processed + stats.frames_dropped
        assert stats.frames_dropped > 0
