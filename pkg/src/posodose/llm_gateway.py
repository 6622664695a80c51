"""LLM structuring path: prompt assembly, backend calls and reply parsing.

The wire protocol is a single POST of ``{"model", "prompt", "params"}`` as
JSON. Backends are selected by endpoint scheme:

* ``http://`` / ``https://``: the wire protocol over HTTP. The reply is the
  ``reply`` (or ``text``/``content``/``output``) string of a JSON body, or the
  raw body.
* ``mock://nerl``: deterministic in-process backend that answers with the
  rule pipeline's output rendered as YAML. ``mock://refuse`` answers with
  prose only. ``?delay=<seconds>`` adds latency.
* ``replay://<directory>``: answers from recorded fixtures keyed by the
  SHA-256 of the request body.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol, Sequence, Union
from urllib.parse import parse_qs, urlparse

import httpx
import yaml

from .schema import (
    DAYS_OF_WEEK,
    EVENT_TIMING_CODES,
    PERIOD_UNITS,
    PosologyStructure,
    SchemaError,
    from_loose_dict,
    to_dict,
)

log = logging.getLogger(__name__)

QUERY_MARKER = "Instruction to structure:"


class GatewayError(RuntimeError):
    """Base class for backend failures."""


class BackendTimeout(GatewayError):
    pass


class BackendAuthError(GatewayError):
    pass


class BackendStatusError(GatewayError):
    def __init__(self, status: int, body: str = "") -> None:
        super().__init__(f"backend returned status {status}: {body[:200]}")
        self.status = status
        self.body = body

    @property
    def retryable(self) -> bool:
        return self.status >= 500 or self.status == 429


class BackendUnavailable(GatewayError):
    """Transport failure that persisted through every retry."""


class ReplayMissError(GatewayError):
    pass


class ReplyParseError(ValueError):
    """Reply without a usable structured block."""


# ---------------------------------------------------------------------------
# Prompt bundle


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    top_k: Optional[int] = None
    top_p: Optional[float] = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"temperature": self.temperature}
        if self.top_k is not None:
            out["top_k"] = self.top_k
        if self.top_p is not None:
            out["top_p"] = self.top_p
        return out


@dataclass(frozen=True)
class CotExample:
    sentence: str
    reasoning: tuple[str, ...]
    output: str


@dataclass(frozen=True)
class FewShotExample:
    sentence: str
    output: str


@dataclass(frozen=True)
class PromptBundle:
    """Everything the prompt is built from. Frozen, hence hashable."""

    system_instructions: str
    rephrase_directive: str = ""
    cot_examples: tuple[CotExample, ...] = ()
    few_shot_examples: tuple[FewShotExample, ...] = ()
    mistakes_to_avoid: tuple[str, ...] = ()
    generation_params: GenerationParams = field(default_factory=GenerationParams)
    version: int = 1

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "PromptBundle":
        if not isinstance(doc, Mapping) or not isinstance(doc.get("system_instructions"), str):
            raise ValueError("prompt bundle needs a system_instructions text")
        params = doc.get("generation_params") or {}
        return cls(
            system_instructions=doc["system_instructions"],
            rephrase_directive=doc.get("rephrase_directive") or "",
            cot_examples=tuple(
                CotExample(e["sentence"], tuple(e.get("reasoning") or ()), e["output"])
                for e in doc.get("cot_examples") or ()
            ),
            few_shot_examples=tuple(
                FewShotExample(e["sentence"], e["output"]) for e in doc.get("few_shot_examples") or ()
            ),
            mistakes_to_avoid=tuple(doc.get("mistakes_to_avoid") or ()),
            generation_params=GenerationParams(
                float(params.get("temperature", 0.0)), params.get("top_k"), params.get("top_p"),
            ),
            version=int(doc.get("version", 1)),
        )

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "PromptBundle":
        if path is None:
            text = resources.files("posodose.data").joinpath("prompt_bundle.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_mapping(yaml.safe_load(text))

    def to_json(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "system_instructions": self.system_instructions,
            "rephrase_directive": self.rephrase_directive,
            "cot_examples": [
                {"sentence": e.sentence, "reasoning": list(e.reasoning), "output": e.output} for e in self.cot_examples
            ],
            "few_shot_examples": [{"sentence": e.sentence, "output": e.output} for e in self.few_shot_examples],
            "mistakes_to_avoid": list(self.mistakes_to_avoid),
            "generation_params": self.generation_params.to_json(),
        }

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, for manifests."""
        blob = json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


_DEFAULT_BUNDLE: Optional[PromptBundle] = None


def default_bundle() -> PromptBundle:
    global _DEFAULT_BUNDLE
    if _DEFAULT_BUNDLE is None:
        _DEFAULT_BUNDLE = PromptBundle.load()
    return _DEFAULT_BUNDLE


def schema_description() -> str:
    """Plain-text description of the target record format."""
    return "\n".join([
        "Target format (one record per intake instruction):",
        "  designation: text span of the instruction",
        "  quantity_and_rate: {value: number, max_value: number (range upper bound), unit: text}",
        "  max_dose_per_period: {dose: integer, dose_unit: text}",
        "  as_needed: {as_needed: true, as_needed_for: condition text}",
        "  timing:",
        "    frequency: integer (intakes per period), frequency_max: integer",
        f"    period: integer, period_unit: one of {', '.join(PERIOD_UNITS)}",
        f"    bounds_duration: {{value: number, max_value: number, unit: one of {', '.join(PERIOD_UNITS)}}}",
        "    bounds_period: {start_date: YYYY/MM/DD, end_date: YYYY/MM/DD}",
        f"    day_of_week: list of {', '.join(DAYS_OF_WEEK)}",
        "    time_of_day: list of HH:MM:SS",
        f"    when: list of {', '.join(EVENT_TIMING_CODES)}",
        "    offset: text such as '30 minutes'",
        "    number_repeats_allows: integer (prescription renewals)",
        "    sequence: integer (order of successive instructions)",
    ])


def assemble_prompt(bundle: PromptBundle, query: str) -> str:
    """Deterministic prompt text; the query is embedded verbatim at the end.

    Raises:
        ValueError: empty query.
    """
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    parts = [bundle.system_instructions.strip()]
    if bundle.rephrase_directive.strip():
        parts.append(bundle.rephrase_directive.strip())
    for n, ex in enumerate(bundle.cot_examples, 1):
        steps = "\n".join(f"{i}. {step}" for i, step in enumerate(ex.reasoning))
        parts.append(f"Worked example {n}.\nsentence: {ex.sentence}\nreasoning:\n{steps}\nresult:\n{ex.output.strip()}")
    for n, ex in enumerate(bundle.few_shot_examples, 1):
        parts.append(f"Example {n}.\nsentence: {ex.sentence}\nresult:\n{ex.output.strip()}")
    if bundle.mistakes_to_avoid:
        parts.append("Mistakes to avoid:\n" + "\n".join(f"- {m.strip()}" for m in bundle.mistakes_to_avoid))
    parts.append(schema_description())
    return "\n\n".join(parts) + f"\n\n{QUERY_MARKER}\n{query}"


def query_from_prompt(prompt: str) -> str:
    """Recover the embedded query from an assembled prompt."""
    _, sep, tail = prompt.rpartition(QUERY_MARKER + "\n")
    if not sep:
        raise ValueError("prompt has no query marker")
    return tail


# ---------------------------------------------------------------------------
# Backends


@dataclass(frozen=True)
class BackendDescriptor:
    """Where and how to reach a model.

    ``auth`` names an environment variable holding the bearer token; the
    secret itself never lives in config files.
    """

    endpoint: str
    model_name: str = "default"
    auth: Optional[str] = None
    timeout: float = 30.0
    max_retries: int = 2
    backoff: float = 0.5
    max_concurrency: Optional[int] = None

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff < 0:
            raise ValueError("backoff must be >= 0")
        if self.max_concurrency is not None and self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if urlparse(self.endpoint).scheme not in ("http", "https", "mock", "replay"):
            raise ValueError(f"unsupported backend endpoint {self.endpoint!r}")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "BackendDescriptor":
        known = {"endpoint", "model_name", "auth", "timeout", "max_retries", "backoff", "max_concurrency"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown backend keys: {', '.join(sorted(unknown))}")
        if "endpoint" not in doc:
            raise ValueError("backend needs an endpoint")
        return cls(**dict(doc))


class TransportError(GatewayError):
    """Retryable connection-level failure."""


class Adapter(Protocol):
    def send(self, payload: Mapping[str, Any], timeout: float) -> str: ...


def request_key(payload: Mapping[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class HttpAdapter:
    def __init__(self, descriptor: BackendDescriptor, transport: Optional[httpx.BaseTransport] = None) -> None:
        self.descriptor = descriptor
        self._client = httpx.Client(transport=transport)

    def _headers(self) -> dict[str, str]:
        name = self.descriptor.auth
        if not name:
            return {}
        token = os.environ.get(name)
        if not token:
            raise BackendAuthError(f"credential variable {name} is not set")
        return {"Authorization": f"Bearer {token}"}

    def send(self, payload: Mapping[str, Any], timeout: float) -> str:
        try:
            resp = self._client.post(self.descriptor.endpoint, json=dict(payload), headers=self._headers(), timeout=timeout)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"no reply within {timeout}s") from exc
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise BackendAuthError(f"backend rejected credentials (status {resp.status_code})")
        if not resp.is_success:
            raise BackendStatusError(resp.status_code, resp.text)
        try:
            body = resp.json()
        except ValueError:
            return resp.text
        if isinstance(body, dict):
            for key in ("reply", "text", "content", "output"):
                if isinstance(body.get(key), str):
                    return body[key]
        return resp.text


REFUSAL = "I cannot structure this."


def nerl_responder(prompt: str) -> str:
    """Answer as a model that agrees with the rule pipeline."""
    from .pipeline import Nerl

    result = Nerl().structure(query_from_prompt(prompt))
    if not result.records:
        return REFUSAL
    return "Here is the structured output.\n\n" + render(result.records) + "\n"


class MockAdapter:
    """In-process backend for tests and offline runs.

    Args:
        responder: fixed reply text or a function of the prompt.
        delay: simulated latency in seconds; a delay above the timeout raises
            :class:`BackendTimeout` after sleeping for the timeout.
        failures: status codes returned by the first calls, in order.
    """

    def __init__(self, responder: Union[str, Callable[[str], str]] = nerl_responder,
                 delay: float = 0.0, failures: Sequence[int] = ()) -> None:
        self.responder = responder
        self.delay = delay
        self._failures = list(failures)
        self._lock = threading.Lock()
        self.calls = 0

    def send(self, payload: Mapping[str, Any], timeout: float) -> str:
        with self._lock:
            self.calls += 1
            status = self._failures.pop(0) if self._failures else None
        if self.delay:
            time.sleep(min(self.delay, timeout))
            if self.delay > timeout:
                raise BackendTimeout(f"no reply within {timeout}s")
        if status is not None:
            if status in (401, 403):
                raise BackendAuthError(f"backend rejected credentials (status {status})")
            raise BackendStatusError(status, "mock failure")
        r = self.responder
        return r if isinstance(r, str) else r(str(payload["prompt"]))


class ReplayAdapter:
    """Serves recorded replies; with ``record`` set, misses are fetched and stored."""

    def __init__(self, directory: Union[str, Path], record: Optional[Adapter] = None) -> None:
        self.directory = Path(directory)
        self.record = record
        self.calls = 0
        self._lock = threading.Lock()

    def path_for(self, payload: Mapping[str, Any]) -> Path:
        return self.directory / f"{request_key(payload)}.json"

    def send(self, payload: Mapping[str, Any], timeout: float) -> str:
        with self._lock:
            self.calls += 1
        path = self.path_for(payload)
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["reply"]
        if self.record is None:
            raise ReplayMissError(f"no recorded reply {path.name} in {self.directory}")
        reply = self.record.send(payload, timeout)
        self.save(payload, reply)
        return reply

    def save(self, payload: Mapping[str, Any], reply: str) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(payload)
        doc = {"model": payload.get("model"), "params": payload.get("params"), "reply": reply}
        path.write_text(json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
        return path


class LimitedAdapter:
    """Caps the number of in-flight requests to a wrapped adapter."""

    def __init__(self, inner: Adapter, limit: int) -> None:
        self.inner = inner
        self._sem = threading.BoundedSemaphore(limit)

    def send(self, payload: Mapping[str, Any], timeout: float) -> str:
        with self._sem:
            return self.inner.send(payload, timeout)


def resolve_adapter(descriptor: BackendDescriptor) -> Adapter:
    url = urlparse(descriptor.endpoint)
    adapter: Adapter
    if url.scheme in ("http", "https"):
        adapter = HttpAdapter(descriptor)
    elif url.scheme == "mock":
        query = parse_qs(url.query)
        delay = float(query.get("delay", ["0"])[0])
        name = url.netloc or url.path.strip("/")
        if name in ("", "nerl"):
            adapter = MockAdapter(nerl_responder, delay)
        elif name == "refuse":
            adapter = MockAdapter(REFUSAL, delay)
        else:
            raise ValueError(f"unknown mock backend {name!r}")
    elif url.scheme == "replay":
        adapter = ReplayAdapter(url.netloc + url.path)
    else:
        raise ValueError(f"unsupported backend endpoint {descriptor.endpoint!r}")
    if descriptor.max_concurrency:
        adapter = LimitedAdapter(adapter, descriptor.max_concurrency)
    return adapter


@dataclass(frozen=True)
class Reply:
    text: str
    latency_s: float
    attempts: int


def call(
    backend: BackendDescriptor,
    prompt: str,
    params: Optional[GenerationParams] = None,
    adapter: Optional[Adapter] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> Reply:
    """POST one prompt and return the reply text.

    Transport failures, timeouts, 429 and 5xx responses are retried up to
    ``backend.max_retries`` times with exponential backoff. Authentication
    failures and other statuses fail immediately.

    Raises:
        BackendTimeout, BackendAuthError, BackendStatusError,
        BackendUnavailable, ReplayMissError.
    """
    params = params or GenerationParams()
    adapter = adapter or resolve_adapter(backend)
    payload = {"model": backend.model_name, "prompt": prompt, "params": params.to_json()}
    start = time.perf_counter()
    for attempt in range(backend.max_retries + 1):
        try:
            text = adapter.send(payload, backend.timeout)
            return Reply(text, time.perf_counter() - start, attempt + 1)
        except (BackendTimeout, TransportError, BackendStatusError) as exc:
            retryable = not isinstance(exc, BackendStatusError) or exc.retryable
            if not retryable or attempt == backend.max_retries:
                if isinstance(exc, TransportError):
                    raise BackendUnavailable(f"{exc} (after {attempt + 1} attempts)") from exc
                raise
            wait = backend.backoff * 2 ** attempt
            log.warning("backend attempt %d failed (%s); retrying in %.2fs", attempt + 1, exc, wait)
            sleep(wait)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Reply parsing


class _ReplyLoader(yaml.SafeLoader):
    """Safe loader that keeps clock times such as 12:30:00 as strings."""


_ReplyLoader.yaml_implicit_resolvers = {k: list(v) for k, v in yaml.SafeLoader.yaml_implicit_resolvers.items()}
for _digit in "0123456789":
    _ReplyLoader.yaml_implicit_resolvers.setdefault(_digit, []).insert(
        0, ("tag:yaml.org,2002:str", re.compile(r"^\d{1,2}:\d{2}(?::\d{2})?$"))
    )

_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z]*)[ \t]*\n(.*?)```", re.DOTALL)
_START_RE = re.compile(r"^\s*(?:[\[{]|entities\s*:|records\s*:|designation\s*:|- )", re.MULTILINE)


def _load_block(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        pass
    return yaml.load(text, Loader=_ReplyLoader)  # noqa: S506 - safe loader subclass


def _record_docs(doc: Any) -> Optional[list[Any]]:
    if isinstance(doc, dict):
        for key in ("entities", "records", "posologies"):
            if key in doc:
                value = doc[key]
                return list(value) if isinstance(value, list) else ([] if value is None else None)
        if "timing" in doc or "quantity_and_rate" in doc:
            return [doc]
        return None
    if isinstance(doc, list) and all(isinstance(d, dict) for d in doc):
        return doc
    return None


def _candidate_blocks(reply: str) -> Iterable[str]:
    for m in _FENCE_RE.finditer(reply):
        yield m.group(2)
    yield reply
    m = _START_RE.search(reply)
    if m:
        lines = reply[m.start():].splitlines()
        # trailing prose: drop lines from the end until the block parses
        for end in range(len(lines), 0, -1):
            yield "\n".join(lines[:end])


def parse_reply(reply: str) -> list[PosologyStructure]:
    """Records from the first structured block of a model reply.

    Fenced blocks are tried first, then the bare reply, then the text from
    the first line that looks like structured output. Annotation-style keys
    and scaffolding are accepted; see :func:`posodose.schema.from_loose_dict`.

    Raises:
        ReplyParseError: no parseable block, or a record that violates the
            schema after mapping.
    """
    for block in _candidate_blocks(reply):
        try:
            doc = _load_block(block)
        except yaml.YAMLError:
            continue
        docs = _record_docs(doc)
        if docs is None:
            continue
        try:
            return [from_loose_dict(d, fill_timing_defaults=True) for d in docs]
        except SchemaError as exc:
            raise ReplyParseError(f"structured block violates the schema: {exc}") from exc
    raise ReplyParseError("no structured block in reply")


def render(records: Iterable[PosologyStructure]) -> str:
    """Records as a fenced YAML reply; :func:`parse_reply` inverts it."""
    doc = {"entities": [to_dict(r) for r in records]}
    body = yaml.safe_dump(doc, allow_unicode=True, sort_keys=False, default_flow_style=False)
    return f"```yaml\n{body}```"


# ---------------------------------------------------------------------------
# Gateway


@dataclass(frozen=True)
class LlmResult:
    query: str
    records: tuple[PosologyStructure, ...]
    reply: Optional[Reply] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class LlmGateway:
    """Prompt, call and parse for one backend. Safe for concurrent use."""

    def __init__(self, backend: BackendDescriptor, bundle: Optional[PromptBundle] = None,
                 adapter: Optional[Adapter] = None) -> None:
        self.backend = backend
        self.bundle = bundle or default_bundle()
        self.adapter = adapter or resolve_adapter(backend)
        self._lock = threading.Lock()
        self.invocations = 0

    def structure(self, query: str) -> LlmResult:
        """Never raises for backend or parse failures; they are reported in ``error``."""
        with self._lock:
            self.invocations += 1
        prompt = assemble_prompt(self.bundle, query)
        try:
            reply = call(self.backend, prompt, self.bundle.generation_params, self.adapter)
        except GatewayError as exc:
            return LlmResult(query, (), None, f"{type(exc).__name__}: {exc}")
        try:
            records = parse_reply(reply.text)
        except ReplyParseError as exc:
            return LlmResult(query, (), reply, f"parse failure: {exc}")
        return LlmResult(query, tuple(records), reply)
