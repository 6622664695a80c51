"""Assembly of recognized entities into posology records.

An anchor entity (a dose, or failing that a bare form or strength) opens a
record; timing, condition and limit entities attach to the nearest anchor. The
rule file ``data/composition_rules.yaml`` lists anchors, attachments and the
derivation steps, each pointing at one of the built-in effects defined here.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import yaml

from .ner import Entity
from .normalizer import NormalizedText
from .schema import (
    UNIT_VOCABULARY,
    AsNeeded,
    BoundsDuration,
    BoundsPeriod,
    MaxDose,
    PosologyStructure,
    QuantityAndRate,
    Timing,
    canonical_unit,
    canonicalize,
    fold,
)

log = logging.getLogger(__name__)

# field paths an effect may declare in `writes`
SCHEMA_FIELDS = frozenset({
    "designation", "as_needed", "quantity_and_rate", "max_dose_per_period",
    "timing.bounds_duration", "timing.bounds_period", "timing.day_of_week",
    "timing.frequency", "timing.frequency_max", "timing.number_repeats_allowed",
    "timing.offset", "timing.period", "timing.period_unit", "timing.sequence",
    "timing.time_of_day", "timing.when",
})


class CompositionError(ValueError):
    """Malformed composition rule file."""


class UnmappedWhenError(ValueError):
    """A WHEN phrase that has no event-timing code."""


# ---------------------------------------------------------------------------
# WHEN phrases -> event-timing codes

_MEAL_RELATIONS = [
    # longest first so that "juste avant" wins over "avant"
    ("immediatement avant", "AC"), ("juste avant", "AC"), ("avant", "AC"),
    ("immediatement apres", "PC"), ("juste apres", "PC"), ("apres", "PC"),
    ("a la fin", "C"), ("au cours", "C"), ("au milieu", "C"), ("au debut", "C"),
    ("au moment", "C"), ("pendant", "C"), ("lors", "C"),
]
_MEALS = [("petit dejeuner", "M"), ("dejeuner", "D"), ("diner", "V"), ("repas", "")]
_DAYPART_MEAL = {"matin": "M", "midi": "D", "soir": "V"}
_DAYPARTS = {"matin": "MORN", "midi": "NOON", "soir": "EVE"}
_OFFSET_RE = re.compile(r"(\d+\s*(?:minutes?|min|mn|heures?|h))\b")


@dataclass(frozen=True)
class WhenParse:
    codes: tuple[str, ...]
    offset: Optional[str] = None


def _has_word(text: str, word: str) -> bool:
    return re.search(rf"(?<![\w-]){re.escape(word)}s?(?![\w-])", text) is not None


def parse_when(phrase: str) -> WhenParse:
    """Event-timing codes and offset expressed by a WHEN phrase.

    A meal code is used only when a meal is named. A day period named next to a
    generic meal ("le matin ... avant le repas") selects that meal.

    Raises:
        UnmappedWhenError: for phrases outside the grammar.
    """
    text = " ".join(fold(phrase).replace("-", " ").replace("'", " ").split())
    m = _OFFSET_RE.search(text)
    offset = m.group(1) if m else None
    if m:
        text = (text[:m.start()] + text[m.end():]).strip()

    if "coucher" in text:
        return WhenParse(("HS",), offset)
    if "reveil" in text:
        return WhenParse(("WAKE",), offset)
    if "apres midi" in text:
        return WhenParse(("AFT",), offset)

    meal = None
    for word, suffix in _MEALS:
        if _has_word(text, word):
            meal = suffix
            break
    if meal is not None:
        if meal == "":
            for part, suffix in _DAYPART_MEAL.items():
                if _has_word(text, part):
                    meal = suffix
                    break
        codes = []
        for alternative in text.split(" ou "):
            rel = next((code for word, code in _MEAL_RELATIONS if word in alternative), None)
            if rel is None:
                # "au repas", "aux repas", "a chaque repas", "le diner"
                if alternative.startswith(("au ", "aux ", "a chaque ", "le ", "du ", "des ", "les ")):
                    rel = "C"
                else:
                    raise UnmappedWhenError(f"unmapped when-phrase {phrase!r}")
            code = rel + meal
            if code not in codes:
                codes.append(code)
        return WhenParse(tuple(codes), offset)

    if _has_word(text, "nuit"):
        return WhenParse(("NIGHT",), offset)
    for part, code in _DAYPARTS.items():
        if _has_word(text, part):
            return WhenParse((code,), offset)
    raise UnmappedWhenError(f"unmapped when-phrase {phrase!r}")


def when_code(phrase: str) -> str:
    """Single event-timing code of a WHEN phrase ("au coucher" -> "HS").

    Raises:
        UnmappedWhenError: for unknown phrases or phrases with alternatives
            (use :func:`parse_when` for those).
    """
    parsed = parse_when(phrase)
    if len(parsed.codes) != 1:
        raise UnmappedWhenError(f"when-phrase {phrase!r} maps to several codes {parsed.codes}")
    return parsed.codes[0]


# ---------------------------------------------------------------------------
# rule file


@dataclass(frozen=True)
class CompositionRule:
    rule_id: str
    entity_type: str
    effect: str
    writes: tuple[str, ...]
    priority: int = 0
    tier: int = 0
    cardinality: str = "many"
    condition: tuple[tuple[str, Any], ...] = ()

    def accepts(self, entity: Entity) -> bool:
        if entity.entity_type != self.entity_type:
            return False
        for key, value in self.condition:
            if key == "has":
                if value not in entity.attributes:
                    return False
            elif key == "lacks":
                if value in entity.attributes:
                    return False
            elif entity.attributes.get(key) != value:
                return False
        return True


@dataclass(frozen=True)
class CompositionRules:
    version: int
    anchors: tuple[CompositionRule, ...]
    attachments: tuple[CompositionRule, ...]
    derivations: tuple[CompositionRule, ...]

    @classmethod
    def from_text(cls, text: str) -> "CompositionRules":
        doc = yaml.safe_load(text)
        if not isinstance(doc, dict):
            raise CompositionError("composition rule file must be a mapping")
        seen: set[str] = set()

        def build(raw: dict, section: str) -> CompositionRule:
            rid = raw.get("id")
            if not rid or rid in seen:
                raise CompositionError(f"missing or duplicate rule id {rid!r}")
            seen.add(rid)
            effect = raw.get("effect")
            if effect not in EFFECTS:
                raise CompositionError(f"{rid}: unknown effect {effect!r}")
            writes = tuple(raw.get("writes") or ())
            bad = [w for w in writes if w not in SCHEMA_FIELDS]
            if bad:
                raise CompositionError(f"{rid}: writes non-schema fields {bad}")
            card = raw.get("cardinality", "many")
            if card not in ("one", "many"):
                raise CompositionError(f"{rid}: cardinality must be 'one' or 'many'")
            etype = raw.get("type", "")
            if section != "derivations" and not etype:
                raise CompositionError(f"{rid}: missing entity type")
            return CompositionRule(
                rid, etype, effect, writes, int(raw.get("priority", 0)), int(raw.get("tier", 0)),
                card, tuple(sorted((raw.get("if") or {}).items())),
            )

        anchors = tuple(build(r, "anchors") for r in doc.get("anchors") or ())
        attachments = tuple(build(r, "attachments") for r in doc.get("attachments") or ())
        derivations = tuple(build(r, "derivations") for r in doc.get("derivations") or ())
        if not anchors:
            raise CompositionError("at least one anchor rule is required")
        attachments = tuple(sorted(attachments, key=lambda r: -r.priority))
        return cls(int(doc.get("version", 0)), anchors, attachments, derivations)

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "CompositionRules":
        if path is None:
            text = resources.files("posodose.data").joinpath("composition_rules.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_text(text)


_DEFAULT_RULES: Optional[CompositionRules] = None


def default_rules() -> CompositionRules:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = CompositionRules.load()
    return _DEFAULT_RULES


# ---------------------------------------------------------------------------
# effects

UnitLinker = Callable[[str], Optional[tuple[str, str]]]
"""unit token -> (code, canonical label), or None when the unit is not linked."""


@dataclass
class _Draft:
    """Mutable record under construction."""

    anchor: Entity
    attached: list[tuple[CompositionRule, Entity]] = field(default_factory=list)
    fields: dict[str, Any] = field(default_factory=dict)
    when: list[str] = field(default_factory=list)
    time_of_day: list[str] = field(default_factory=list)
    day_of_week: list[str] = field(default_factory=list)
    when_entities: int = 0

    def entities(self) -> list[Entity]:
        return [self.anchor, *(e for _, e in self.attached)]


@dataclass(frozen=True)
class _Context:
    text: NormalizedText
    linker: Optional[UnitLinker]
    warnings: list[str]
    index: int
    total: int


def _unit(token: str, ctx: _Context) -> tuple[str, Optional[str]]:
    unit = canonical_unit(token)
    code = None
    if ctx.linker is not None:
        linked = ctx.linker(token)
        if linked is not None:
            code, label = linked
            if unit not in UNIT_VOCABULARY:
                unit = label
    return unit, code


def _raw(ctx: _Context, start: int, end: int) -> str:
    return " ".join(ctx.text.raw_text(start, end).split())


def _eff_dose_quantity(d: _Draft, e: Entity, ctx: _Context) -> None:
    unit, code = _unit(e.attributes["unit_token"], ctx)
    d.fields["quantity_and_rate"] = QuantityAndRate(e.attributes["value"], e.attributes.get("max_value"), unit, code)


def _eff_form_quantity(d: _Draft, e: Entity, ctx: _Context) -> None:
    unit, code = _unit(e.attributes["unit_token"], ctx)
    d.fields["quantity_and_rate"] = QuantityAndRate(Decimal(1), None, unit, code)


def _eff_max_dose(d: _Draft, e: Entity, ctx: _Context) -> None:
    unit, code = _unit(e.attributes["unit_token"], ctx)
    d.fields["max_dose_per_period"] = MaxDose(int(e.attributes["value"]), unit, code)


def _eff_frequency(d: _Draft, e: Entity, ctx: _Context) -> None:
    d.fields["frequency"] = e.attributes["count"]
    if "max" in e.attributes:
        d.fields["frequency_max"] = e.attributes["max"]


def _eff_period(d: _Draft, e: Entity, ctx: _Context) -> None:
    d.fields["period"] = int(e.attributes["value"])
    d.fields["period_unit"] = e.attributes["unit"]


def _eff_bounds(d: _Draft, e: Entity, ctx: _Context) -> None:
    a = e.attributes
    if "start_date" in a:
        d.fields["bounds_period"] = BoundsPeriod(a["start_date"], a["end_date"])
    else:
        d.fields["bounds_duration"] = BoundsDuration(a["value"], a["unit"], a.get("max_value"))


def _eff_repeats(d: _Draft, e: Entity, ctx: _Context) -> None:
    count = e.attributes.get("count")
    d.fields["number_repeats_allowed"] = 1 if count is None else int(count)


def _eff_reason(d: _Draft, e: Entity, ctx: _Context) -> None:
    d.fields["as_needed"] = AsNeeded(True, _raw(ctx, e.start, e.end))


def _eff_day_of_week(d: _Draft, e: Entity, ctx: _Context) -> None:
    d.day_of_week.append(e.attributes["day"])


def _eff_when(d: _Draft, e: Entity, ctx: _Context) -> None:
    parsed = parse_when(e.attributes.get("phrase", e.surface))
    d.when.extend(c for c in parsed.codes if c not in d.when)
    d.when_entities += 1
    offset = e.attributes.get("offset") or parsed.offset
    if offset:
        pos = e.surface.find(offset)
        d.fields["offset"] = _raw(ctx, e.start + pos, e.start + pos + len(offset)) if pos >= 0 else offset


def _eff_time_of_day(d: _Draft, e: Entity, ctx: _Context) -> None:
    if e.attributes["time"] not in d.time_of_day:
        d.time_of_day.append(e.attributes["time"])


def _eff_prefer_time_of_day(d: _Draft, e: Optional[Entity], ctx: _Context) -> None:
    if d.when and d.time_of_day:
        ctx.warnings.append(f"record {ctx.index + 1}: both day periods and clock times; kept the clock times")
        d.when.clear()
        d.when_entities = 0
        d.fields.pop("offset", None)


def _eff_frequency_from_cues(d: _Draft, e: Optional[Entity], ctx: _Context) -> None:
    if "frequency" in d.fields:
        return
    if d.when_entities:
        d.fields["frequency"] = d.when_entities
    elif d.time_of_day:
        d.fields["frequency"] = len(d.time_of_day)
    else:
        if "period" not in d.fields and not d.day_of_week:
            ctx.warnings.append(f"record {ctx.index + 1}: no timing cue, default timing applied")
        d.fields["frequency"] = 1


def designation_text(raw: str) -> str:
    """Designation form of a raw span.

    Punctuation is kept only inside a word or number ("petit-déjeuner",
    "l'après-midi", "0.5", "15/11/2022"); stray marks are dropped and
    whitespace is collapsed.
    """
    cleaned = re.sub(r"(?<![^\W_])[^\w\s]|[^\w\s](?![^\W_])", " ", raw)
    return " ".join(cleaned.split())


def _eff_designation(d: _Draft, e: Optional[Entity], ctx: _Context) -> None:
    ents = d.entities()
    start = min(x.start for x in ents)
    end = max(x.end for x in ents)
    d.fields["designation"] = designation_text(ctx.text.raw_text(start, end))


def _eff_sequence(d: _Draft, e: Optional[Entity], ctx: _Context) -> None:
    if ctx.total > 1:
        d.fields["sequence"] = ctx.index + 1


Effect = Callable[[_Draft, Optional[Entity], _Context], None]

EFFECTS: dict[str, Effect] = {
    "dose_quantity": _eff_dose_quantity,
    "form_quantity": _eff_form_quantity,
    "strength_quantity": _eff_dose_quantity,
    "max_dose": _eff_max_dose,
    "frequency": _eff_frequency,
    "period": _eff_period,
    "bounds": _eff_bounds,
    "repeats": _eff_repeats,
    "reason": _eff_reason,
    "day_of_week": _eff_day_of_week,
    "when": _eff_when,
    "time_of_day": _eff_time_of_day,
    "prefer_time_of_day": _eff_prefer_time_of_day,
    "frequency_from_cues": _eff_frequency_from_cues,
    "designation_from_span": _eff_designation,
    "sequence_in_text_order": _eff_sequence,
}


# ---------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class Composition:
    records: tuple[PosologyStructure, ...]
    warnings: tuple[str, ...] = ()

    @property
    def unstructurable(self) -> bool:
        return not self.records


def _token_index(text: NormalizedText) -> list[tuple[int, int]]:
    return [(s, e) for s, e, _ in text.tokens()]


def _token_range(tokens: list[tuple[int, int]], ent: Entity) -> tuple[int, int]:
    first = next((i for i, (s, e) in enumerate(tokens) if e > ent.start), len(tokens))
    last = max((i for i, (s, e) in enumerate(tokens) if s < ent.end), default=first)
    return first, max(first, last)


def _distance(a: tuple[int, int], b: tuple[int, int]) -> int:
    if a[1] < b[0]:
        return b[0] - a[1] - 1
    if b[1] < a[0]:
        return a[0] - b[1] - 1
    return 0


def compose_with_warnings(
    entities: Sequence[Entity],
    text: NormalizedText,
    rules: Optional[CompositionRules] = None,
    linker: Optional[UnitLinker] = None,
) -> Composition:
    """Build records plus composition warnings. See :func:`compose`."""
    rules = rules or default_rules()
    ents = sorted(entities, key=lambda e: (e.start, e.end))
    warnings: list[str] = []

    anchor_rule = None
    anchors: list[Entity] = []
    for tier in sorted({r.tier for r in rules.anchors}):
        for rule in (r for r in rules.anchors if r.tier == tier):
            hits = [e for e in ents if rule.accepts(e)]
            if hits:
                anchor_rule, anchors = rule, hits
                break
        if anchors:
            break
    if not anchors:
        return Composition((), ("no anchor entity: query is unstructurable",))

    tokens = _token_index(text)
    anchor_ranges = [_token_range(tokens, a) for a in anchors]
    drafts = [_Draft(a) for a in anchors]
    anchor_ids = {id(a) for a in anchors}

    for ent in ents:
        if id(ent) in anchor_ids:
            continue
        rule = next((r for r in rules.attachments if r.accepts(ent)), None)
        if rule is None:
            continue
        rng = _token_range(tokens, ent)
        # nearest anchor; on a tie the anchor on the left (lower index) wins
        best = min(range(len(anchors)), key=lambda i: (_distance(rng, anchor_ranges[i]), i))
        drafts[best].attached.append((rule, ent))

    for i, draft in enumerate(drafts):
        ctx = _Context(text, linker, warnings, i, len(drafts))
        EFFECTS[anchor_rule.effect](draft, draft.anchor, ctx)
        arange = anchor_ranges[i]
        for rule in rules.attachments:
            group = [e for r, e in draft.attached if r is rule]
            if not group:
                continue
            if rule.cardinality == "one" and len(group) > 1:
                group.sort(key=lambda e: (_distance(_token_range(tokens, e), arange), e.start))
                for dropped in group[1:]:
                    warnings.append(
                        f"record {i + 1}: conflicting {rule.entity_type} {dropped.surface!r} ignored, "
                        f"kept {group[0].surface!r}"
                    )
                draft.attached = [(r, e) for r, e in draft.attached if r is not rule or e is group[0]]
                group = group[:1]
            for ent in group:
                EFFECTS[rule.effect](draft, ent, ctx)
        for rule in rules.derivations:
            EFFECTS[rule.effect](draft, None, ctx)

    records = []
    for draft in drafts:
        f = draft.fields
        timing = Timing(
            frequency=f.get("frequency", 1),
            period=f.get("period", 1),
            period_unit=f.get("period_unit", "day"),
            bounds_duration=f.get("bounds_duration"),
            bounds_period=f.get("bounds_period"),
            day_of_week=tuple(draft.day_of_week),
            frequency_max=f.get("frequency_max"),
            number_repeats_allowed=f.get("number_repeats_allowed"),
            offset=f.get("offset"),
            sequence=f.get("sequence"),
            time_of_day=tuple(draft.time_of_day),
            when=tuple(draft.when),
        )
        record = PosologyStructure(
            designation=f.get("designation", ""),
            timing=timing,
            as_needed=f.get("as_needed"),
            quantity_and_rate=f.get("quantity_and_rate"),
            max_dose_per_period=f.get("max_dose_per_period"),
        )
        records.append(canonicalize(record))
    for w in warnings:
        log.debug("composition warning: %s", w)
    return Composition(tuple(records), tuple(warnings))


def compose(
    entities: Sequence[Entity],
    text: NormalizedText,
    rules: Optional[CompositionRules] = None,
    linker: Optional[UnitLinker] = None,
) -> list[PosologyStructure]:
    """Combine entities into records; an empty list means the query is unstructurable.

    Args:
        entities: recognized entities of ``text``.
        text: the normalized query the entities were found in.
        rules: composition rules, the shipped file by default.
        linker: optional unit linker supplying terminology codes.
    """
    return list(compose_with_warnings(entities, text, rules, linker).records)
