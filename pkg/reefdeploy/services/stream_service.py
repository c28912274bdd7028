import json
import logging
import queue
import threading
import time
from collections import deque
from pathlib import Path
from typing import Deque, Iterable, Iterator, List, Optional, Tuple, Union

import pandas as pd

from reefdeploy.exceptions import ReefDeployError, StorageError, StreamAbortedError
from reefdeploy.models.configs import DecisionConfig, DropPolicy, StreamConfig
from reefdeploy.models.reports import TimingStats
from reefdeploy.models.schemas import DecisionRule, FrameDecision, FrameRecord, GridSpec
from reefdeploy.services.classification_service import ClassifierBackend, classify_frame, classify_patches
from reefdeploy.services.decision_service import decide
from reefdeploy.storage import write_frame_csv

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000


class Clock:
    """Monotonic time in integer nanoseconds."""

    def now_ns(self) -> int:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError

    def sleep_until(self, deadline_ns: int) -> None:
        remaining = deadline_ns - self.now_ns()
        if remaining > 0:
            self.sleep(remaining / NS_PER_S)


class RealClock(Clock):
    def now_ns(self) -> int:
        return time.perf_counter_ns()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class VirtualClock(Clock):
    """Time only moves when something sleeps on it."""

    def __init__(self, start_ns: int = 0):
        self._now = int(start_ns)

    def now_ns(self) -> int:
        return self._now

    def sleep(self, seconds: float) -> None:
        self._now += max(0, round(seconds * NS_PER_S))

    def sleep_until(self, deadline_ns: int) -> None:
        self._now = max(self._now, int(deadline_ns))


class DecisionLogWriter(threading.Thread):
    """Single writer of the streamed decision log; every line is flushed."""

    def __init__(self, path: Union[str, Path], capacity: int):
        super().__init__(name="decision-log", daemon=True)
        try:
            self._file = open(path, "w", encoding="utf-8")
        except OSError as e:
            raise StorageError(f"cannot write to {path}: {e}") from e
        self.path = path
        self.queue: "queue.Queue[Optional[dict]]" = queue.Queue(maxsize=capacity)
        self.error: Optional[OSError] = None
        self.written = 0

    def run(self) -> None:
        try:
            while True:
                line = self.queue.get()
                if line is None:
                    break
                if self.error is not None:
                    continue
                try:
                    self._file.write(json.dumps(line) + "\n")
                    self._file.flush()
                    self.written += 1
                except OSError as e:
                    self.error = e
                    logger.error(f"Decision log {self.path} failed: {e}")
        finally:
            self._file.close()

    def submit(self, line: dict) -> None:
        self.queue.put(line)

    def finish(self) -> None:
        self.queue.put(None)
        self.join()
        if self.error is not None:
            raise StorageError(f"decision log {self.path} failed: {self.error}")


class _Schedule:
    """Replays a frame source at the capture rate, honouring frame and duration budgets."""

    def __init__(self, source: Iterable[FrameRecord], config: StreamConfig, start_ns: int):
        self._frames: Iterator[FrameRecord] = iter(source)
        self._config = config
        self._start = start_ns
        self._limit_ns = round(config.duration_s * NS_PER_S) if config.duration_s is not None else None
        self.index = 0
        self.upcoming = self._pull()

    def due_ns(self, k: int) -> int:
        return self._start + round(k * NS_PER_S / self._config.capture_fps)

    def _pull(self) -> Optional[FrameRecord]:
        if self._config.max_frames is not None and self.index >= self._config.max_frames:
            return None
        if self._limit_ns is not None and self.due_ns(self.index) - self._start >= self._limit_ns:
            return None
        return next(self._frames, None)

    def take(self) -> Tuple[int, FrameRecord]:
        arrival, frame = self.due_ns(self.index), self.upcoming
        self.index += 1
        self.upcoming = self._pull()
        return arrival, frame


def _process(
    frame: FrameRecord,
    backend: ClassifierBackend,
    decision_config: DecisionConfig,
    grid: GridSpec,
) -> FrameDecision:
    if decision_config.rule is DecisionRule.WHOLE_IMAGE:
        return decide(classify_frame(backend, frame), decision_config)
    return decide(classify_patches(backend, frame, grid), decision_config)


def run_stream(
    source: Iterable[FrameRecord],
    backend: ClassifierBackend,
    decision_config: DecisionConfig,
    stream_config: StreamConfig,
    grid: GridSpec = GridSpec(),
    clock: Optional[Clock] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> Tuple[List[FrameDecision], TimingStats]:
    """Drive frames through classify and decide at the capture rate.

    Frame k arrives at ``start + k / capture_fps``. Under latest_wins only the
    newest waiting frame is kept whenever the worker frees up; process_all keeps
    every frame and stops reading the source while ``queue_capacity`` frames wait.
    """
    clock = clock or RealClock()
    latest_wins = stream_config.drop_policy is DropPolicy.LATEST_WINS
    writer = DecisionLogWriter(log_path, stream_config.queue_capacity) if log_path is not None else None
    if writer is not None:
        writer.start()

    start = clock.now_ns()
    schedule = _Schedule(source, stream_config, start)
    pending: Deque[Tuple[int, FrameRecord]] = deque()
    decisions: List[FrameDecision] = []
    latency_ms: List[float] = []
    inference_ms: List[float] = []
    offered = dropped = 0
    end = start

    def stats() -> TimingStats:
        return TimingStats(
            frames_offered=offered,
            frames_processed=len(decisions),
            frames_dropped=dropped,
            elapsed_s=(end - start) / NS_PER_S,
            latency_ms=tuple(latency_ms),
            inference_ms=tuple(inference_ms),
        )

    try:
        while True:
            now = clock.now_ns()
            while schedule.upcoming is not None and schedule.due_ns(schedule.index) <= now:
                if not latest_wins and len(pending) >= stream_config.queue_capacity:
                    break
                pending.append(schedule.take())
                offered += 1
                if latest_wins and len(pending) > 1:
                    pending.popleft()
                    dropped += 1

            if not pending:
                if schedule.upcoming is None:
                    break
                clock.sleep_until(schedule.due_ns(schedule.index))
                continue

            arrival, frame = pending.popleft()
            began = clock.now_ns()
            try:
                decision = _process(frame, backend, decision_config, grid)
            except ReefDeployError as e:
                end = clock.now_ns()
                dropped += 1 + len(pending)
                raise StreamAbortedError(
                    f"stream aborted at frame {frame.frame_id!r}: {type(e).__name__}: {e}", decisions, stats()
                ) from e
            end = clock.now_ns()
            decisions.append(decision)
            latency_ms.append((end - arrival) / NS_PER_MS)
            inference_ms.append((end - began) / NS_PER_MS)
            if writer is not None:
                writer.submit(decision.to_log_json(frame))
    finally:
        if writer is not None:
            writer.finish()

    result = stats()
    if result.frames_dropped:
        logger.warning(f"Dropped {result.frames_dropped} of {result.frames_offered} frames")
    logger.info(
        f"Stream done: {result.frames_processed} frames in {result.elapsed_s:.3f}s "
        f"({result.achieved_fps:.2f} fps, p50 latency {result.p50_latency_ms:.1f} ms)"
    )
    return decisions, result


def summarize(stats: TimingStats) -> str:
    lines = [
        f"frames offered:    {stats.frames_offered}",
        f"frames processed:  {stats.frames_processed}",
        f"frames dropped:    {stats.frames_dropped}",
        f"elapsed:           {stats.elapsed_s:.3f} s",
        f"achieved fps:      {stats.achieved_fps:.2f}",
        f"latency p50/p95/max: {stats.p50_latency_ms:.1f} / {stats.p95_latency_ms:.1f} / {stats.max_latency_ms:.1f} ms",
        f"inference p50:     {stats.p50_inference_ms:.1f} ms",
    ]
    return "\n".join(lines)


def timing_frame(stats: TimingStats) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "frames_offered": stats.frames_offered,
                "frames_processed": stats.frames_processed,
                "frames_dropped": stats.frames_dropped,
                "elapsed_s": stats.elapsed_s,
                "achieved_fps": stats.achieved_fps,
                "latency_p50_ms": stats.p50_latency_ms,
                "latency_p95_ms": stats.p95_latency_ms,
                "latency_max_ms": stats.max_latency_ms,
                "inference_p50_ms": stats.p50_inference_ms,
            }
        ]
    )


def write_timing_csv(path: Union[str, Path], stats: TimingStats) -> None:
    write_frame_csv(path, timing_frame(stats))
