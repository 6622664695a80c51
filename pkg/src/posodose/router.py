"""Hybrid structuring: rule pipeline first, LLM fallback on low confidence.

The rule pipeline always runs. Its output is scored by the confidence model;
a score strictly below the threshold sends the query to the LLM gateway,
whose output is scored by the same model. The higher score wins and ties go
to the rule pipeline.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

from .confidence import ConfidenceReport, EnsembleModel, default_model, report_from_probs, score_output
from .llm_gateway import LlmGateway
from .pipeline import Nerl
from .schema import PosologyStructure, records_to_json

log = logging.getLogger(__name__)

UNSTRUCTURABLE = "unstructurable"
STAGES = ("nerl", "nerl_score", "llm", "llm_score")


class System(str, Enum):
    NERL = "NERL"
    LLM = "LLM"


class RouterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RouterConfig:
    threshold: float = 0.8
    llm_enabled: bool = True
    tie_break: str = "prefer_nerl"

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise RouterConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.tie_break != "prefer_nerl":
            raise RouterConfigError(f"unknown tie_break {self.tie_break!r}")


@dataclass(frozen=True)
class StructurationResult:
    query: str
    records: tuple[PosologyStructure, ...]
    system: System
    confidence: ConfidenceReport
    timings: dict[str, float] = field(default_factory=dict, compare=False)
    warnings: tuple[str, ...] = ()
    llm_invoked: bool = False
    error: Optional[str] = None

    def to_json(self, include_timings: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "query": self.query,
            "system": self.system.value,
            "records": records_to_json(self.records),
            "confidence": self.confidence.to_json(),
            "llm_invoked": self.llm_invoked,
            "warnings": list(self.warnings),
        }
        if self.error is not None:
            out["error"] = self.error
        if include_timings:
            out["timings"] = dict(self.timings)
        return out

    def dumps(self, include_timings: bool = False) -> str:
        """One JSON line; without timings the text is reproducible byte for byte."""
        return json.dumps(self.to_json(include_timings), ensure_ascii=False, sort_keys=True)


@dataclass(frozen=True)
class BatchSummary:
    queries: int
    llm_invocations: int
    llm_invocation_rate: float
    errors: int
    mean_latency_s: dict[str, float]
    systems: dict[str, int]

    def to_json(self) -> dict[str, Any]:
        return {
            "queries": self.queries,
            "llm_invocations": self.llm_invocations,
            "llm_invocation_rate": self.llm_invocation_rate,
            "errors": self.errors,
            "mean_latency_s": dict(self.mean_latency_s),
            "systems": dict(self.systems),
        }


_FAILED = report_from_probs([0.0, 0.0])


class Router:
    """Holds the pipeline, confidence model and optional gateway.

    Args:
        config: routing parameters.
        gateway: LLM path; required when ``config.llm_enabled``.
        nerl: rule pipeline, shipped resources by default.
        model: confidence model, shipped model by default.

    Raises:
        RouterConfigError: LLM enabled without a gateway.
    """

    def __init__(self, config: RouterConfig = RouterConfig(), gateway: Optional[LlmGateway] = None,
                 nerl: Optional[Nerl] = None, model: Optional[EnsembleModel] = None) -> None:
        if config.llm_enabled and gateway is None:
            raise RouterConfigError("llm_enabled requires a configured backend")
        self.config = config
        self.gateway = gateway
        self.nerl = nerl or Nerl()
        self.model = model or default_model()

    def _score(self, query: str, records: Sequence[PosologyStructure]) -> ConfidenceReport:
        return score_output(self.model, query, list(records))

    def route(self, query: str) -> StructurationResult:
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        nerl = self.nerl.structure(query)
        timings["nerl"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        nerl_conf = self._score(query, nerl.records)
        timings["nerl_score"] = time.perf_counter() - t0
        warnings = list(nerl.warnings)

        if nerl_conf.score >= self.config.threshold or not self.config.llm_enabled or self.gateway is None:
            return self._finish(query, nerl.records, System.NERL, nerl_conf, timings, warnings, False)

        t0 = time.perf_counter()
        llm = self.gateway.structure(query)
        timings["llm"] = time.perf_counter() - t0
        if llm.ok:
            t0 = time.perf_counter()
            llm_conf = self._score(query, llm.records)
            timings["llm_score"] = time.perf_counter() - t0
        else:
            llm_conf = _FAILED
            warnings.append(f"llm output rejected, kept rule output: {llm.error}")

        if llm.ok and llm_conf.score > nerl_conf.score:
            return self._finish(query, llm.records, System.LLM, llm_conf, timings, warnings, True)
        return self._finish(query, nerl.records, System.NERL, nerl_conf, timings, warnings, True)

    @staticmethod
    def _finish(query: str, records: Sequence[PosologyStructure], system: System, conf: ConfidenceReport,
                timings: dict[str, float], warnings: list[str], invoked: bool) -> StructurationResult:
        if not records and UNSTRUCTURABLE not in warnings:
            warnings.append(UNSTRUCTURABLE)
        return StructurationResult(query, tuple(records), system, conf, timings, tuple(warnings), invoked)

    def _safe_route(self, query: str) -> StructurationResult:
        try:
            return self.route(query)
        except Exception as exc:  # isolate one bad query from the batch
            log.exception("routing failed for %r", query)
            return StructurationResult(
                query, (), System.NERL, _FAILED, {}, (UNSTRUCTURABLE,), False, f"{type(exc).__name__}: {exc}",
            )

    def route_batch(self, queries: Iterable[str], jobs: int = 1) -> tuple[list[StructurationResult], BatchSummary]:
        """Route every query, preserving order; failures are isolated per query."""
        queries = list(queries)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(self._safe_route, queries))
        else:
            results = [self._safe_route(q) for q in queries]
        return results, summarize(results)


def summarize(results: Sequence[StructurationResult]) -> BatchSummary:
    n = len(results)
    invoked = sum(r.llm_invoked for r in results)
    latency = {}
    for stage in STAGES:
        values = [r.timings[stage] for r in results if stage in r.timings]
        latency[stage] = sum(values) / len(values) if values else 0.0
    systems = {s.value: sum(r.system is s for r in results) for s in System}
    return BatchSummary(
        queries=n,
        llm_invocations=invoked,
        llm_invocation_rate=invoked / n if n else 0.0,
        errors=sum(r.error is not None for r in results),
        mean_latency_s=latency,
        systems=systems,
    )


def route(query: str, config: RouterConfig = RouterConfig(llm_enabled=False),
          gateway: Optional[LlmGateway] = None) -> StructurationResult:
    """One-off routing with shipped resources."""
    return Router(config, gateway).route(query)


def route_batch(queries: Iterable[str], config: RouterConfig = RouterConfig(llm_enabled=False),
                gateway: Optional[LlmGateway] = None, jobs: int = 1) -> tuple[list[StructurationResult], BatchSummary]:
    return Router(config, gateway).route_batch(queries, jobs)
