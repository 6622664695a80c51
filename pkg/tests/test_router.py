from __future__ import annotations

import json

import pytest

from posodose.confidence import FEATURE_NAMES, default_model, score_output
from posodose.llm_gateway import REFUSAL, BackendDescriptor, LlmGateway, MockAdapter
from posodose.pipeline import Nerl
from posodose.router import (
    UNSTRUCTURABLE,
    Router,
    RouterConfig,
    RouterConfigError,
    System,
    route,
    route_batch,
)
from posodose.synthgen import mixed_corpus

BATCH = [p.text for p in mixed_corpus(100, 100, seed=3)]
RECORDS = FEATURE_NAMES.index("record_count")


def gateway(responder=None):
    adapter = MockAdapter() if responder is None else MockAdapter(responder)
    return LlmGateway(BackendDescriptor("mock://nerl"), adapter=adapter)


class _StubModel:
    """Member probabilities from a function of the feature vector."""

    def __init__(self, fn):
        self.fn = fn

    def member_probabilities(self, f):
        p = self.fn(f.as_array())
        return [p, p]


ONE_CP = "```yaml\nentities:\n- designation: 1 cp\n  quantity_and_rate: {value: 1, unit: cp}\n```"


class TestContracts:
    def test_no_call_above_threshold(self):
        g = gateway()
        router = Router(RouterConfig(0.8), g)
        results, _ = router.route_batch(BATCH)
        model = default_model()
        for r in results:
            nerl_score = score_output(model, r.query, Nerl().structure(r.query).records).score
            if nerl_score >= 0.8:
                assert not r.llm_invoked
        assert g.adapter.calls == g.invocations == sum(r.llm_invoked for r in results)

    def test_score_is_max_of_both_paths(self):
        router = Router(RouterConfig(1.0), gateway())
        model = default_model()
        for r in router.route_batch(BATCH[:60])[0]:
            assert r.llm_invoked
            nerl = score_output(model, r.query, Nerl().structure(r.query).records).score
            llm_result = router.gateway.structure(r.query)
            llm = score_output(model, r.query, llm_result.records).score if llm_result.ok else 0.0
            assert r.confidence.score == max(nerl, llm)

    def test_rate_monotone_in_threshold(self):
        rates = []
        for t in (0.0, 0.5, 0.8, 1.0):
            _, summary = Router(RouterConfig(t), gateway()).route_batch(BATCH)
            rates.append(summary.llm_invocation_rate)
        assert rates == sorted(rates)
        assert rates[0] == 0.0 and rates[-1] == 1.0

    def test_tie_goes_to_rules(self):
        router = Router(RouterConfig(1.0), gateway(ONE_CP), model=_StubModel(lambda x: 0.5))
        r = router.route("3 cp le matin")
        assert r.llm_invoked and r.system is System.NERL

    def test_llm_wins_when_strictly_better(self):
        model = _StubModel(lambda x: 0.9 if x[RECORDS] > 0 else 0.2)
        r = Router(RouterConfig(0.8), gateway(ONE_CP), model=model).route("bonjour")
        assert r.system is System.LLM and r.confidence.score == pytest.approx(0.9)
        assert r.records[0].quantity_and_rate.unit == "comprimé(s)"

    def test_parse_failure_falls_back(self):
        r = Router(RouterConfig(1.0), gateway(REFUSAL)).route("3 cp le matin")
        assert r.system is System.NERL and r.records
        assert any(w.startswith("llm output rejected, kept rule output") for w in r.warnings)

    def test_unstructurable(self):
        r = Router(RouterConfig(1.0), gateway(REFUSAL)).route("bonjour")
        assert r.records == () and UNSTRUCTURABLE in r.warnings

    def test_rules_only_without_gateway(self):
        r = route("3 cp le matin")
        assert r.system is System.NERL and not r.llm_invoked


class TestConfig:
    @pytest.mark.parametrize("t", [-0.01, 1.01])
    def test_threshold_range(self, t):
        with pytest.raises(RouterConfigError):
            RouterConfig(t)

    def test_llm_needs_gateway(self):
        with pytest.raises(RouterConfigError):
            Router(RouterConfig())

    def test_tie_break(self):
        with pytest.raises(RouterConfigError):
            RouterConfig(tie_break="prefer_llm")


class _FlakyNerl:
    def __init__(self):
        self.inner = Nerl()

    def structure(self, q):
        if "boom" in q:
            raise RuntimeError("boom")
        return self.inner.structure(q)


class TestBatch:
    def test_order_and_isolation(self):
        router = Router(RouterConfig(llm_enabled=False), nerl=_FlakyNerl())
        queries = ["1 cp le soir", "boom", "3 cp le matin"]
        results, summary = router.route_batch(queries, jobs=3)
        assert [r.query for r in results] == queries
        assert results[1].error.startswith("RuntimeError") and results[1].records == ()
        assert results[0].records and results[2].records
        assert summary.errors == 1 and summary.queries == 3

    def test_parallel_matches_serial(self):
        router = Router(RouterConfig(0.8), gateway())
        serial, _ = router.route_batch(BATCH[:40])
        parallel, _ = router.route_batch(BATCH[:40], jobs=4)
        assert [r.dumps() for r in serial] == [r.dumps() for r in parallel]

    def test_summary(self):
        results, summary = route_batch(["3 cp le matin", "bonjour"])
        assert summary.llm_invocations == 0 and summary.systems == {"NERL": 2, "LLM": 0}
        assert set(summary.mean_latency_s) == {"nerl", "nerl_score", "llm", "llm_score"}
        assert summary.mean_latency_s["llm"] == 0.0

    def test_json_line(self):
        r = route("3 cp le matin")
        doc = json.loads(r.dumps())
        assert doc["system"] == "NERL" and "timings" not in doc
        assert "timings" in json.loads(r.dumps(include_timings=True))
