import json
import logging
import threading
import tracemalloc
from collections.abc import Iterator, Sequence
from contextlib import contextmanager

from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import ReadableSpan, Span, TracerProvider
from opentelemetry.sdk.trace.export import (
    SimpleSpanProcessor,
    SpanExporter,
    SpanExportResult,
)

from app.app_utils.typing import StageTiming, TimingReport

RUN_SPAN = "pipeline"

# tracemalloc is process-wide; overlapping runs share one tracing session.
_trace_lock = threading.Lock()
_active_runs = 0
_owns_tracing = False


class StageSpanExporter(SpanExporter):
    """
    Keeps finished spans in memory and logs each one as a JSON payload.

    The spans of one pipeline run are turned into a ``TimingReport`` by
    ``StageProbe.report``; nothing leaves the process.
    """

    def __init__(self, service_name: str = "slam3d") -> None:
        self.service_name = service_name
        self._spans: list[ReadableSpan] = []
        self._lock = threading.Lock()

    def export(self, spans: Sequence[ReadableSpan]) -> SpanExportResult:
        for span in spans:
            span_dict = json.loads(span.to_json())
            span_dict["service_name"] = self.service_name
            logging.debug(f"stage span {json.dumps(span_dict, sort_keys=True)}")
        with self._lock:
            self._spans.extend(spans)
        return SpanExportResult.SUCCESS

    def shutdown(self) -> None:
        self.clear()

    def clear(self) -> None:
        with self._lock:
            self._spans.clear()

    @property
    def finished_spans(self) -> list[ReadableSpan]:
        with self._lock:
            return list(self._spans)


def _elapsed_ms(span: ReadableSpan) -> float:
    if span.start_time is None or span.end_time is None:
        return 0.0
    return (span.end_time - span.start_time) / 1e6


def _enter_tracing() -> None:
    global _active_runs, _owns_tracing
    with _trace_lock:
        if _active_runs == 0:
            _owns_tracing = not tracemalloc.is_tracing()
            if _owns_tracing:
                tracemalloc.start()
            else:
                tracemalloc.reset_peak()
        _active_runs += 1


def _exit_tracing() -> None:
    global _active_runs, _owns_tracing
    with _trace_lock:
        _active_runs -= 1
        if _active_runs == 0 and _owns_tracing:
            tracemalloc.stop()
            _owns_tracing = False


class StageProbe:
    """Wall-clock and allocator high-water mark per pipeline stage.

    Usage::

        probe = StageProbe()
        with probe.run():
            with probe.stage("backbone"):
                ...
        report = probe.report()
    """

    def __init__(self, service_name: str = "slam3d") -> None:
        self.exporter = StageSpanExporter(service_name)
        self._provider = TracerProvider(resource=Resource.create({"service.name": service_name}))
        self._provider.add_span_processor(SimpleSpanProcessor(self.exporter))
        self._tracer = self._provider.get_tracer(__name__)

    @staticmethod
    def _peak_bytes() -> int:
        return tracemalloc.get_traced_memory()[1] if tracemalloc.is_tracing() else 0

    @contextmanager
    def run(self) -> Iterator[Span]:
        """Scope of one pipeline run; earlier spans are discarded.

        The first of several overlapping runs starts tracing and the last one
        stops it. The peak is only reset when no other run is active, so each
        run sees a high-water mark that never goes down while it lasts.
        """
        self.exporter.clear()
        _enter_tracing()
        try:
            with self._tracer.start_as_current_span(RUN_SPAN) as span:
                try:
                    yield span
                finally:
                    span.set_attribute("peak_bytes", self._peak_bytes())
        finally:
            _exit_tracing()

    @contextmanager
    def stage(self, name: str) -> Iterator[Span]:
        with self._tracer.start_as_current_span(name) as span:
            try:
                yield span
            finally:
                span.set_attribute("peak_bytes", self._peak_bytes())

    def report(self) -> TimingReport:
        # Completion order: a stage nested in another one is reported first.
        spans = sorted(self.exporter.finished_spans, key=lambda s: s.end_time or 0)
        stages = [
            StageTiming(
                name=s.name,
                ms=_elapsed_ms(s),
                peak_bytes=int((s.attributes or {}).get("peak_bytes", 0)),
            )
            for s in spans
            if s.name != RUN_SPAN
        ]
        runs = [s for s in spans if s.name == RUN_SPAN]
        if runs:
            total_ms = _elapsed_ms(runs[-1])
            peak = int((runs[-1].attributes or {}).get("peak_bytes", 0))
        else:
            total_ms = sum(s.ms for s in stages)
            peak = max((s.peak_bytes for s in stages), default=0)
        return TimingReport(stages=stages, total_ms=total_ms, peak_bytes=peak)
