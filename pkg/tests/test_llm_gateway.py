from __future__ import annotations

import json

import httpx
import pytest
from conftest import FIXTURES, records
from hypothesis import given
from hypothesis import strategies as st

from posodose import llm_gateway as gw
from posodose.llm_gateway import (
    BackendDescriptor,
    GenerationParams,
    LlmGateway,
    MockAdapter,
    ReplayAdapter,
    ReplyParseError,
)
from posodose.pipeline import structure

NO_WAIT = dict(sleep=lambda s: None)

ANNOTATED_REPLY = """Step by step, the sentence mentions one ampoule per quarter when needed.

```yaml
entities:
- a_needed:
    as_needed: true
    as_needed_for: besoin
  category: MEDICATION
  designation: ampoute 1 fois par trimestre besoin
  entity_type: QUANTITY
  quantity_and_rate:
    type: DOSE
    unit: ampoule(s)
    value: 1
  timing:
    bounds_duration_text: ''
    frequency: 1
    frequency_texts:
    - 1 fois par trimestre
    period: 3
    period_unit: month
posology_string: ampoute 1 fois par trimestre besoin
```
"""


def backend(**kw):
    return BackendDescriptor("mock://nerl", **kw)


class TestBundle:
    def test_prompt_sections_in_order(self):
        prompt = gw.assemble_prompt(gw.default_bundle(), "2 cp le soir")
        marks = ["Worked example 1.", "Example 1.", "Mistakes to avoid:", gw.QUERY_MARKER]
        positions = [prompt.index(m) for m in marks]
        assert positions == sorted(positions)
        assert prompt.rstrip().endswith("2 cp le soir")

    def test_few_shot_example_present(self):
        assert "0.5 à 1 cp au coucher si besoin" in gw.assemble_prompt(gw.default_bundle(), "x")

    def test_prompt_deterministic(self):
        b = gw.default_bundle()
        assert gw.assemble_prompt(b, "1 cp") == gw.assemble_prompt(gw.PromptBundle.load(), "1 cp")

    def test_query_recovered(self):
        prompt = gw.assemble_prompt(gw.default_bundle(), "1 cp\nle soir")
        assert gw.query_from_prompt(prompt) == "1 cp\nle soir"

    def test_empty_query(self):
        with pytest.raises(ValueError):
            gw.assemble_prompt(gw.default_bundle(), "  ")

    def test_digest_tracks_content(self):
        b = gw.default_bundle()
        doc = b.to_json()
        doc["mistakes_to_avoid"] = doc["mistakes_to_avoid"][:-1]
        assert gw.PromptBundle.from_mapping(doc).digest() != b.digest()
        assert gw.PromptBundle.from_mapping(b.to_json()) == b

    def test_default_temperature_zero(self):
        assert gw.default_bundle().generation_params.temperature == 0

    @pytest.mark.parametrize("kw", [{"temperature": -0.1}, {"top_p": 0}, {"top_p": 1.5}, {"top_k": 0}])
    def test_params_bounds(self, kw):
        with pytest.raises(ValueError):
            GenerationParams(**kw)


class TestDescriptor:
    @pytest.mark.parametrize("kw", [{"timeout": 0}, {"max_retries": -1}, {"backoff": -1}, {"max_concurrency": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            backend(**kw)

    def test_scheme(self):
        with pytest.raises(ValueError, match="unsupported"):
            BackendDescriptor("ftp://x")

    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown"):
            BackendDescriptor.from_mapping({"endpoint": "mock://nerl", "api_key": "secret"})


class TestCall:
    def test_retries_server_errors(self):
        adapter = MockAdapter("ok", failures=[500, 503])
        waits = []
        reply = gw.call(backend(max_retries=2, backoff=0.5), "p", adapter=adapter, sleep=waits.append)
        assert (reply.text, reply.attempts, adapter.calls) == ("ok", 3, 3)
        assert waits == [0.5, 1.0]

    def test_gives_up_after_retries(self):
        adapter = MockAdapter("ok", failures=[500, 500, 500])
        with pytest.raises(gw.BackendStatusError) as info:
            gw.call(backend(max_retries=1), "p", adapter=adapter, **NO_WAIT)
        assert info.value.status == 500 and adapter.calls == 2

    def test_client_error_not_retried(self):
        adapter = MockAdapter("ok", failures=[400])
        with pytest.raises(gw.BackendStatusError):
            gw.call(backend(), "p", adapter=adapter, **NO_WAIT)
        assert adapter.calls == 1

    def test_auth_error_not_retried(self):
        adapter = MockAdapter("ok", failures=[401])
        with pytest.raises(gw.BackendAuthError):
            gw.call(backend(), "p", adapter=adapter, **NO_WAIT)
        assert adapter.calls == 1

    def test_timeout(self):
        adapter = MockAdapter("ok", delay=0.05)
        with pytest.raises(gw.BackendTimeout):
            gw.call(backend(timeout=0.01, max_retries=0), "p", adapter=adapter)

    def test_http_retry_then_success(self):
        seen = []

        def handler(request: httpx.Request) -> httpx.Response:
            seen.append(json.loads(request.content))
            if len(seen) <= 2:
                return httpx.Response(500, text="boom")
            return httpx.Response(200, json={"reply": "done"})

        desc = BackendDescriptor("http://llm.test/v1", model_name="m")
        adapter = gw.HttpAdapter(desc, transport=httpx.MockTransport(handler))
        reply = gw.call(desc, "hello", adapter=adapter, **NO_WAIT)
        assert reply.text == "done" and reply.attempts == 3
        assert seen[0] == {"model": "m", "prompt": "hello", "params": GenerationParams().to_json()}

    def test_http_auth_header(self, monkeypatch):
        monkeypatch.setenv("POSODOSE_TEST_TOKEN", "s3cret")
        headers = {}

        def handler(request):
            headers.update(request.headers)
            return httpx.Response(200, text="plain reply")

        desc = BackendDescriptor("https://llm.test", auth="POSODOSE_TEST_TOKEN")
        reply = gw.call(desc, "p", adapter=gw.HttpAdapter(desc, httpx.MockTransport(handler)))
        assert headers["authorization"] == "Bearer s3cret" and reply.text == "plain reply"

    def test_http_missing_credential(self, monkeypatch):
        monkeypatch.delenv("POSODOSE_TEST_TOKEN", raising=False)
        desc = BackendDescriptor("https://llm.test", auth="POSODOSE_TEST_TOKEN")
        adapter = gw.HttpAdapter(desc, httpx.MockTransport(lambda r: httpx.Response(200)))
        with pytest.raises(gw.BackendAuthError, match="POSODOSE_TEST_TOKEN"):
            gw.call(desc, "p", adapter=adapter)

    def test_http_forbidden(self):
        desc = BackendDescriptor("https://llm.test")
        adapter = gw.HttpAdapter(desc, httpx.MockTransport(lambda r: httpx.Response(403)))
        with pytest.raises(gw.BackendAuthError):
            gw.call(desc, "p", adapter=adapter)

    def test_connection_failure_is_unavailable(self):
        def handler(request):
            raise httpx.ConnectError("refused")

        desc = BackendDescriptor("http://llm.test", max_retries=1)
        with pytest.raises(gw.BackendUnavailable):
            gw.call(desc, "p", adapter=gw.HttpAdapter(desc, httpx.MockTransport(handler)), **NO_WAIT)


class TestReplay:
    def test_miss(self, tmp_path):
        with pytest.raises(gw.ReplayMissError):
            gw.call(BackendDescriptor(f"replay://{tmp_path}"), "p", adapter=ReplayAdapter(tmp_path))

    def test_record_then_replay(self, tmp_path):
        desc = BackendDescriptor(f"replay://{tmp_path}")
        recorder = ReplayAdapter(tmp_path, record=MockAdapter("first"))
        assert gw.call(desc, "p", adapter=recorder).text == "first"
        assert gw.call(desc, "p", adapter=ReplayAdapter(tmp_path)).text == "first"
        (path,) = tmp_path.iterdir()
        assert json.loads(path.read_text())["params"]["temperature"] == 0

    def test_shipped_fixtures_cover_their_queries(self):
        directory = FIXTURES / "replay"
        queries = [json.loads(line)["query"] for line in (directory / "queries.jsonl").read_text().splitlines()]
        desc = BackendDescriptor(f"replay://{directory}", model_name="replay-gold")
        gateway = LlmGateway(desc, adapter=ReplayAdapter(directory))
        results = [gateway.structure(q) for q in queries]
        assert len(results) == 50
        assert all(r.ok or r.error.startswith("parse failure") for r in results)


class TestParse:
    def test_annotation_block(self):
        (rec,) = gw.parse_reply(ANNOTATED_REPLY)
        assert rec.as_needed.as_needed_for == "besoin"
        assert (rec.timing.frequency, rec.timing.period, rec.timing.period_unit) == (1, 3, "month")

    def test_bare_yaml_with_prose(self):
        reply = "Sure!\nentities:\n- designation: 1 cp\n  quantity_and_rate: {value: 1}\nHope this helps."
        (rec,) = gw.parse_reply(reply)
        assert rec.designation == "1 cp"

    def test_json_reply(self):
        reply = json.dumps({"entities": [{"designation": "2 cp", "timing": {"time_of_day": ["08:00"]}}]})
        (rec,) = gw.parse_reply(reply)
        assert rec.timing.time_of_day == ("08:00:00",) and rec.timing.frequency == 1

    @pytest.mark.parametrize("reply", [gw.REFUSAL, "", "```yaml\n: : :\n```", "entities: 3"])
    def test_unparseable(self, reply):
        with pytest.raises(ReplyParseError):
            gw.parse_reply(reply)

    def test_schema_violation_is_parse_error(self):
        reply = "entities:\n- designation: x\n  timing: {when: [MORN], time_of_day: ['08:00:00']}"
        with pytest.raises(ReplyParseError):
            gw.parse_reply(reply)

    @given(st.lists(records(), min_size=1, max_size=3))
    def test_parse_inverts_render(self, recs):
        assert gw.parse_reply(gw.render(recs)) == recs

    @given(st.lists(records(), min_size=1, max_size=2), st.sampled_from(["", "Voici :\n", "Output below.\n\n"]))
    def test_prose_around_fence(self, recs, lead):
        assert gw.parse_reply(lead + gw.render(recs) + "\nDone.") == recs


class TestGateway:
    def test_mock_agrees_with_rules(self):
        g = LlmGateway(backend(), adapter=MockAdapter())
        res = g.structure("3 cp le matin")
        assert res.ok and list(res.records) == structure("3 cp le matin") and g.invocations == 1

    def test_refusal_reported_not_raised(self):
        res = LlmGateway(backend(), adapter=MockAdapter(gw.REFUSAL)).structure("3 cp le matin")
        assert not res.ok and res.error.startswith("parse failure") and res.reply is not None

    def test_backend_failure_reported(self):
        adapter = MockAdapter("x", failures=[401])
        res = LlmGateway(backend(), adapter=adapter).structure("3 cp")
        assert res.error.startswith("BackendAuthError")

    def test_deterministic(self):
        g = LlmGateway(backend(), adapter=MockAdapter())
        a, b = g.structure("1 cp le soir"), g.structure("1 cp le soir")
        assert (a.records, a.reply.text) == (b.records, b.reply.text)

    def test_resolve_adapter(self, tmp_path):
        assert isinstance(gw.resolve_adapter(backend()), MockAdapter)
        assert isinstance(gw.resolve_adapter(BackendDescriptor(f"replay://{tmp_path}")), ReplayAdapter)
        assert isinstance(gw.resolve_adapter(backend(max_concurrency=2)), gw.LimitedAdapter)
        with pytest.raises(ValueError):
            gw.resolve_adapter(BackendDescriptor("mock://nonsense"))
