"""Rule-based recognition of posology entities.

Rules live in a versioned YAML file (``data/ner_rules.yaml``). Each rule is a
regular expression over the normalized text plus bindings that turn regex
groups into typed attributes. Any other recognizer (for example a fine-tuned
token classifier) can be combined with the rule engine through
:class:`HybridRecognizer`.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from datetime import date
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional, Protocol

import yaml

from .normalizer import NormalizedText

ENTITY_TYPES = (
    "BOUNDS", "DOSE", "DRUG", "FORM", "FREQUENCY", "NUMBER_REPEATS",
    "PERIOD", "REASON", "STRENGTH", "TIME_OF_DAY", "WHEN",
)

# surface -> (canonical unit, multiplier)
_PERIOD_UNITS = {
    "h": ("hours", 1), "heure": ("hours", 1), "heures": ("hours", 1),
    "j": ("day", 1), "jour": ("day", 1), "jours": ("day", 1),
    "sem": ("week", 1), "semaine": ("week", 1), "semaines": ("week", 1),
    "mois": ("month", 1),
    "trimestre": ("month", 3), "trimestres": ("month", 3),
    "semestre": ("month", 6), "semestres": ("month", 6),
    "an": ("month", 12), "ans": ("month", 12), "annee": ("month", 12), "annees": ("month", 12),
}

_WEEKDAYS = {
    "lundi": "mon", "mardi": "tue", "mercredi": "wed", "jeudi": "thu",
    "vendredi": "fri", "samedi": "sat", "dimanche": "sun",
}


class RuleError(ValueError):
    """Malformed rule file."""


@dataclass(frozen=True)
class Entity:
    entity_type: str
    span: tuple[int, int]
    surface: str
    attributes: dict[str, Any] = field(default_factory=dict, hash=False, compare=True)
    rule_id: str = ""

    @property
    def start(self) -> int:
        return self.span[0]

    @property
    def end(self) -> int:
        return self.span[1]

    def to_json(self) -> dict[str, Any]:
        attrs = {k: (str(v) if isinstance(v, Decimal | date) else v) for k, v in self.attributes.items()}
        return {
            "type": self.entity_type, "start": self.start, "end": self.end,
            "surface": self.surface, "attributes": attrs, "rule": self.rule_id,
        }


@dataclass(frozen=True)
class TraceEntry:
    rule_id: str
    span: tuple[int, int]
    accepted: bool


# ---------------------------------------------------------------------------
# attribute converters


def parse_number(text: str) -> Decimal:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return Decimal(num) / Decimal(den)
    return Decimal(text)


def parse_clock(text: str) -> str:
    """``08h`` / ``8h30`` / ``20:00`` -> ``HH:mm:ss``."""
    m = re.fullmatch(r"(\d{1,2})(?:h(\d{2})?|:(\d{2})(?::(\d{2}))?)", text.strip())
    if not m:
        raise ValueError(f"not a clock time: {text!r}")
    hour = int(m[1])
    minute = int(m[2] or m[3] or 0)
    second = int(m[4] or 0)
    if hour > 23 or minute > 59 or second > 59:
        raise ValueError(f"not a clock time: {text!r}")
    return f"{hour:02d}:{minute:02d}:{second:02d}"


def parse_french_date(text: str) -> date:
    """``DD/MM/YYYY`` (French order) -> date."""
    d, m, y = (int(x) for x in text.split("/"))
    return date(y, m, d)


def _parse_period_unit(text: str) -> tuple[str, int]:
    try:
        return _PERIOD_UNITS[text.strip()]
    except KeyError as exc:
        raise ValueError(f"unknown time unit {text!r}") from exc


def _parse_weekday(text: str) -> str:
    return _WEEKDAYS[text.strip().rstrip("s")]


CONVERTERS = {
    "number": parse_number,
    "int": lambda s: int(s),
    "clock": parse_clock,
    "date": parse_french_date,
    "period_unit": _parse_period_unit,
    "weekday": _parse_weekday,
    "text": lambda s: " ".join(s.split()),
}


# ---------------------------------------------------------------------------
# rule set


@dataclass(frozen=True)
class Binding:
    group: Optional[str | int] = None
    parse: Optional[str] = None
    const: Any = None


@dataclass(frozen=True)
class Rule:
    rule_id: str
    entity_type: str
    regex: re.Pattern
    priority: int
    bindings: tuple[tuple[str, Binding], ...]


@dataclass(frozen=True)
class RuleSet:
    version: int
    rules: tuple[Rule, ...]
    digest: str

    @classmethod
    def from_text(cls, text: str) -> "RuleSet":
        doc = yaml.safe_load(text)
        if not isinstance(doc, dict) or "rules" not in doc:
            raise RuleError("rule file needs a top-level 'rules' list")
        macros = {k: _join_lines(v) for k, v in (doc.get("macros") or {}).items()}
        seen: set[str] = set()
        rules = []
        for raw in doc["rules"]:
            rid = raw.get("id")
            if not rid or rid in seen:
                raise RuleError(f"missing or duplicate rule id {rid!r}")
            seen.add(rid)
            etype = raw.get("type")
            if etype not in ENTITY_TYPES:
                raise RuleError(f"{rid}: unknown entity type {etype!r}")
            pattern = _expand(_join_lines(raw["pattern"]), macros)
            try:
                regex = re.compile(pattern)
            except re.error as exc:
                raise RuleError(f"{rid}: bad pattern: {exc}") from exc
            bindings = []
            for name, spec in (raw.get("attributes") or {}).items():
                if "const" in spec:
                    bindings.append((name, Binding(const=spec["const"])))
                else:
                    conv = spec.get("parse")
                    if conv is not None and conv not in CONVERTERS:
                        raise RuleError(f"{rid}: unknown converter {conv!r}")
                    bindings.append((name, Binding(group=spec.get("group"), parse=conv)))
            rules.append(Rule(rid, etype, regex, int(raw.get("priority", 0)), tuple(bindings)))
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
        return cls(int(doc.get("version", 0)), tuple(rules), digest)

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "RuleSet":
        if path is None:
            text = resources.files("posodose.data").joinpath("ner_rules.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_text(text)


def _join_lines(pattern: str) -> str:
    if "\n" not in pattern:
        return pattern
    return "".join(line.strip() for line in pattern.splitlines())


def _expand(pattern: str, macros: dict[str, str]) -> str:
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in macros:
            raise RuleError(f"unknown macro {name!r}")
        return macros[name]

    # {NAME} only; regex quantifiers like {1,2} are left alone
    return re.sub(r"\{([A-Z_]+)\}", sub, pattern)


_DEFAULT_RULES: Optional[RuleSet] = None


def default_rules() -> RuleSet:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = RuleSet.load()
    return _DEFAULT_RULES


# ---------------------------------------------------------------------------
# matching


def _boundary(text: str, start: int, end: int) -> bool:
    if start > 0 and text[start - 1].isalnum() and text[start].isalnum():
        if text[start - 1].isdigit() == text[start].isdigit():
            return False
    if end < len(text) and text[end - 1].isalnum() and text[end].isalnum():
        if text[end - 1].isdigit() == text[end].isdigit():
            return False
    return True


def _matches(rule: Rule, text: str) -> Iterable[re.Match]:
    pos = 0
    while pos <= len(text):
        m = rule.regex.search(text, pos)
        if m is None:
            return
        if m.end() > m.start() and _boundary(text, m.start(), m.end()):
            yield m
            pos = m.end()
        else:
            pos = m.start() + 1


def _bind(rule: Rule, m: re.Match) -> Optional[dict[str, Any]]:
    attrs: dict[str, Any] = {}
    for name, b in rule.bindings:
        if b.group is None:
            value = b.const
        else:
            raw = m.group(b.group)
            if raw is None:
                continue
            try:
                value = CONVERTERS[b.parse](raw) if b.parse else " ".join(raw.split())
            except (ValueError, KeyError, ArithmeticError):
                return None
        attrs[name] = value
    return _finalize(rule.entity_type, attrs)


def _finalize(etype: str, attrs: dict[str, Any]) -> Optional[dict[str, Any]]:
    if etype in ("PERIOD", "BOUNDS") and "unit" in attrs:
        unit = attrs["unit"]
        if isinstance(unit, tuple):
            unit, mult = unit
        else:
            mult = 1
        attrs["unit"] = unit
        if "value" in attrs:
            attrs["value"] = Decimal(attrs["value"]) * mult
            if etype == "PERIOD":
                attrs["value"] = int(attrs["value"])
        if "max_value" in attrs:
            attrs["max_value"] = Decimal(attrs["max_value"]) * mult
    if etype in ("DOSE", "STRENGTH") and "value" in attrs:
        value = Decimal(str(attrs["value"]))
        if attrs.pop("half", False):
            value += Decimal("0.5")
        attrs["value"] = value
        if value <= 0 and attrs.get("role") != "max":
            return None
        if "max_value" in attrs and attrs["max_value"] < value:
            return None
    if etype == "FREQUENCY":
        if attrs.get("count", 0) < 1:
            return None
        if "max" in attrs and attrs["max"] < attrs["count"]:
            return None
    if etype == "PERIOD" and attrs.get("value", 1) < 1:
        return None
    if etype == "BOUNDS":
        if "value" in attrs and attrs["value"] <= 0:
            return None
        if "start_date" in attrs and attrs["start_date"] > attrs["end_date"]:
            return None
    return attrs


class Recognizer(Protocol):
    def recognize(self, text: NormalizedText) -> list[Entity]: ...


@dataclass(frozen=True)
class RuleRecognizer:
    """The shipped recognizer: applies every rule, then resolves overlaps."""

    rules: RuleSet = field(default_factory=default_rules)

    def candidates(self, text: NormalizedText) -> list[Entity]:
        s = text.normalized
        found = []
        for rule in self.rules.rules:
            for m in _matches(rule, s):
                attrs = _bind(rule, m)
                if attrs is None:
                    continue
                found.append((rule, Entity(rule.entity_type, (m.start(), m.end()), m.group(), attrs, rule.rule_id)))
        order = {r.rule_id: i for i, r in enumerate(self.rules.rules)}
        found.sort(key=lambda re_: (-(re_[1].end - re_[1].start), -re_[0].priority, re_[1].start, order[re_[0].rule_id]))
        return [e for _, e in found]

    def recognize(self, text: NormalizedText) -> list[Entity]:
        return resolve_overlaps(self.candidates(text))

    def trace(self, text: NormalizedText) -> list[TraceEntry]:
        cands = self.candidates(text)
        kept = {(e.rule_id, e.span) for e in resolve_overlaps(cands)}
        entries = [TraceEntry(e.rule_id, e.span, (e.rule_id, e.span) in kept) for e in cands]
        entries.sort(key=lambda t: (t.span, t.rule_id))
        return entries


def resolve_overlaps(ordered: Iterable[Entity]) -> list[Entity]:
    """Greedy selection in the given preference order; output sorted by start."""
    taken: list[Entity] = []
    for e in ordered:
        if all(e.end <= t.start or e.start >= t.end for t in taken):
            taken.append(e)
    taken.sort(key=lambda e: (e.start, e.end))
    return taken


@dataclass(frozen=True)
class HybridRecognizer:
    """Union of several recognizers; earlier recognizers win overlap ties."""

    recognizers: tuple[Recognizer, ...]

    def recognize(self, text: NormalizedText) -> list[Entity]:
        pool: list[tuple[int, Entity]] = []
        for rank, rec in enumerate(self.recognizers):
            pool.extend((rank, e) for e in rec.recognize(text))
        pool.sort(key=lambda p: (-(p[1].end - p[1].start), p[0], p[1].start))
        return resolve_overlaps(e for _, e in pool)


def recognize(text: NormalizedText, rules: Optional[RuleSet] = None) -> list[Entity]:
    return RuleRecognizer(rules or default_rules()).recognize(text)


def pattern_trace(text: NormalizedText, rules: Optional[RuleSet] = None) -> list[TraceEntry]:
    return RuleRecognizer(rules or default_rules()).trace(text)
