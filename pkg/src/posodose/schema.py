"""Canonical posology record: types, validation, canonical form and JSON interchange.

Every record produced or consumed by the pipeline is a :class:`PosologyStructure`.
Values are plain frozen dataclasses; doses and durations are held as
:class:`decimal.Decimal` so that exact-match comparison is deterministic.

The JSON layout uses the dataset key names, including the historical
``number_repeats_allows`` spelling for the repeats field.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field, replace
from datetime import date
from decimal import Decimal, InvalidOperation
from importlib import resources
from typing import Any, Iterable, Optional

PERIOD_UNITS = ("hours", "day", "week", "month")

DAYS_OF_WEEK = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")

# FHIR R4 event-timing value set, in value-set order (used as the canonical sort order).
EVENT_TIMING_CODES = (
    "MORN", "MORN.early", "MORN.late", "NOON", "AFT", "AFT.early", "AFT.late",
    "EVE", "EVE.early", "EVE.late", "NIGHT", "PHS",
    "HS", "WAKE", "C", "CM", "CD", "CV", "AC", "ACM", "ACD", "ACV",
    "PC", "PCM", "PCD", "PCV",
)

_TIME_RE = re.compile(r"^([01]\d|2[0-3]):[0-5]\d:[0-5]\d$")
_DATE_RE = re.compile(r"^(\d{4})/(\d{2})/(\d{2})$")

# canonical label -> surface variants (matched accent- and case-insensitively)
UNIT_VOCABULARY: dict[str, tuple[str, ...]] = {
    "comprimé(s)": ("comprimé", "comprimés", "comprime", "comprimes", "cp", "cps", "cpr", "cprs", "cpe", "cmp"),
    "gélule(s)": ("gélule", "gélules", "gel", "gél"),
    "ampoule(s)": ("ampoule", "ampoules", "amp", "ampoules buvables"),
    "sachet(s)": ("sachet", "sachets", "sach", "sachet-dose", "sachets-doses", "sachet dose"),
    "goutte(s)": ("goutte", "gouttes", "gtt", "gttes"),
    "cuillère(s) à café": ("cuillère à café", "cuillères à café", "cuillere a cafe", "c. à café", "c à café", "cac"),
    "cuillère(s) à soupe": ("cuillère à soupe", "cuillères à soupe", "cuillere a soupe", "c. à soupe", "c à soupe", "cas"),
    "suppositoire(s)": ("suppositoire", "suppositoires", "suppo", "suppos"),
    "bouffée(s)": ("bouffée", "bouffées"),
    "pulvérisation(s)": ("pulvérisation", "pulvérisations", "pulv"),
    "application(s)": ("application", "applications"),
    "patch(s)": ("patch", "patchs"),
    "injection(s)": ("injection", "injections"),
    "dose(s)": ("dose", "doses"),
    "capsule(s)": ("capsule", "capsules"),
    "ovule(s)": ("ovule", "ovules"),
    "inhalation(s)": ("inhalation", "inhalations"),
    "pipette(s)": ("pipette", "pipettes"),
    "mg": ("milligramme", "milligrammes"),
    "g": ("gramme", "grammes", "gr"),
    "µg": ("mcg", "ug", "microgramme", "microgrammes"),
    "ml": ("millilitre", "millilitres"),
    "UI": ("ui", "u.i."),
}


def fold(text: str) -> str:
    """Lowercase and strip diacritics."""
    decomposed = unicodedata.normalize("NFD", text.lower())
    return "".join(c for c in decomposed if not unicodedata.combining(c))


_UNIT_LOOKUP: dict[str, str] = {}
for _label, _variants in UNIT_VOCABULARY.items():
    _UNIT_LOOKUP[fold(_label)] = _label
    for _variant in _variants:
        _UNIT_LOOKUP[fold(_variant)] = _label


def canonical_unit(unit: str) -> str:
    """Map a unit surface form to its canonical label; unknown units are returned unchanged."""
    key = " ".join(fold(unit).split())
    return _UNIT_LOOKUP.get(key, unit.strip())


class SchemaError(ValueError):
    """Malformed document or record that violates the schema."""


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


@dataclass(frozen=True)
class AsNeeded:
    as_needed: bool = True
    as_needed_for: str = ""


@dataclass(frozen=True)
class QuantityAndRate:
    value: Decimal
    max_value: Optional[Decimal] = None
    unit: Optional[str] = None
    code: Optional[str] = None


@dataclass(frozen=True)
class MaxDose:
    dose: int
    dose_unit: Optional[str] = None
    code: Optional[str] = None


@dataclass(frozen=True)
class BoundsDuration:
    value: Decimal
    unit: str
    max_value: Optional[Decimal] = None


@dataclass(frozen=True)
class BoundsPeriod:
    start_date: date
    end_date: date


@dataclass(frozen=True)
class Timing:
    frequency: int = 1
    period: int = 1
    period_unit: str = "day"
    bounds_duration: Optional[BoundsDuration] = None
    bounds_period: Optional[BoundsPeriod] = None
    day_of_week: tuple[str, ...] = ()
    frequency_max: Optional[int] = None
    number_repeats_allowed: Optional[int] = None
    offset: Optional[str] = None
    sequence: Optional[int] = None
    time_of_day: tuple[str, ...] = ()
    when: tuple[str, ...] = ()


@dataclass(frozen=True)
class PosologyStructure:
    designation: str
    timing: Timing = field(default_factory=Timing)
    as_needed: Optional[AsNeeded] = None
    quantity_and_rate: Optional[QuantityAndRate] = None
    max_dose_per_period: Optional[MaxDose] = None


# ---------------------------------------------------------------------------
# validation


def validate(record: PosologyStructure) -> list[Violation]:
    """Check every record invariant. Violations are returned, never raised."""
    out: list[Violation] = []

    def bad(path: str, rule: str) -> None:
        out.append(Violation(path, rule))

    if record.as_needed is not None:
        if record.as_needed.as_needed_for and not record.as_needed.as_needed:
            bad("as_needed.as_needed_for", "as_needed_for set while as_needed is false")

    qr = record.quantity_and_rate
    if qr is not None:
        if not _is_decimal(qr.value) or qr.value < 0:
            bad("quantity_and_rate.value", "value must be a decimal >= 0")
        elif qr.max_value is not None:
            if not _is_decimal(qr.max_value):
                bad("quantity_and_rate.max_value", "max_value must be a decimal")
            elif qr.max_value < qr.value:
                bad("quantity_and_rate.max_value", "max_value < value")

    md = record.max_dose_per_period
    if md is not None and (not _is_int(md.dose) or md.dose <= 0):
        bad("max_dose_per_period.dose", "dose must be an integer > 0")

    t = record.timing
    if not _is_int(t.frequency) or t.frequency < 1:
        bad("timing.frequency", "frequency must be an integer >= 1")
    elif t.frequency_max is not None and (not _is_int(t.frequency_max) or t.frequency_max < t.frequency):
        bad("timing.frequency_max", "frequency_max < frequency")
    if not _is_int(t.period) or t.period < 1:
        bad("timing.period", "period must be an integer >= 1")
    if t.period_unit not in PERIOD_UNITS:
        bad("timing.period_unit", f"unknown period_unit {t.period_unit!r}")
    if t.bounds_duration is not None and t.bounds_period is not None:
        bad("timing.bounds_duration", "bounds_duration/bounds_period exclusivity")
    bd = t.bounds_duration
    if bd is not None:
        if not _is_decimal(bd.value) or bd.value <= 0:
            bad("timing.bounds_duration.value", "value must be a decimal > 0")
        elif bd.max_value is not None and (not _is_decimal(bd.max_value) or bd.max_value < bd.value):
            bad("timing.bounds_duration.max_value", "max_value < value")
        if bd.unit not in PERIOD_UNITS:
            bad("timing.bounds_duration.unit", f"unknown unit {bd.unit!r}")
    bp = t.bounds_period
    if bp is not None and bp.start_date > bp.end_date:
        bad("timing.bounds_period", "start_date after end_date")
    for day in t.day_of_week:
        if day not in DAYS_OF_WEEK:
            bad("timing.day_of_week", f"unknown day {day!r}")
    if t.number_repeats_allowed is not None and (not _is_int(t.number_repeats_allowed) or t.number_repeats_allowed < 0):
        bad("timing.number_repeats_allowed", "must be an integer >= 0")
    if t.sequence is not None and (not _is_int(t.sequence) or t.sequence < 1):
        bad("timing.sequence", "sequence must be an integer >= 1")
    for clock in t.time_of_day:
        if not isinstance(clock, str) or not _TIME_RE.match(clock):
            bad("timing.time_of_day", f"bad clock time {clock!r}")
    for code in t.when:
        if code not in EVENT_TIMING_CODES:
            bad("timing.when", f"unknown event-timing code {code!r}")
    if t.when and t.time_of_day:
        bad("timing.when", "when/time_of_day exclusivity")
    return out


def _is_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_decimal(x: Any) -> bool:
    return isinstance(x, Decimal) and x.is_finite()


# ---------------------------------------------------------------------------
# canonical form


def canonical_decimal(d: Decimal) -> Decimal:
    """Strip trailing zeros without switching to exponent notation (``10`` stays ``10``)."""
    if d == d.to_integral_value():
        return d.quantize(Decimal(1))
    return d.normalize()


def _event_order(code: str) -> int:
    return EVENT_TIMING_CODES.index(code)


def _collapse(text: Optional[str]) -> Optional[str]:
    if text is None:
        return None
    return " ".join(text.split())


def canonicalize(record: PosologyStructure) -> PosologyStructure:
    """Return the deterministic normal form of a valid record.

    Raises:
        SchemaError: if the record does not validate.
    """
    violations = validate(record)
    if violations:
        raise SchemaError("; ".join(map(str, violations)))

    qr = record.quantity_and_rate
    if qr is not None:
        qr = QuantityAndRate(
            value=canonical_decimal(qr.value),
            max_value=None if qr.max_value is None else canonical_decimal(qr.max_value),
            unit=None if not qr.unit else canonical_unit(qr.unit),
            code=qr.code or None,
        )
    md = record.max_dose_per_period
    if md is not None:
        md = MaxDose(md.dose, None if not md.dose_unit else canonical_unit(md.dose_unit), md.code or None)
    an = record.as_needed
    if an is not None:
        an = AsNeeded(an.as_needed, _collapse(an.as_needed_for) or "")

    t = record.timing
    bd = t.bounds_duration
    if bd is not None:
        bd = BoundsDuration(
            canonical_decimal(bd.value), bd.unit,
            None if bd.max_value is None else canonical_decimal(bd.max_value),
        )
    timing = replace(
        t,
        bounds_duration=bd,
        day_of_week=tuple(sorted(set(t.day_of_week), key=DAYS_OF_WEEK.index)),
        when=tuple(sorted(set(t.when), key=_event_order)),
        time_of_day=tuple(sorted(set(t.time_of_day))),
        offset=_collapse(t.offset) or None,
    )
    return PosologyStructure(
        designation=_collapse(record.designation) or "",
        timing=timing,
        as_needed=an,
        quantity_and_rate=qr,
        max_dose_per_period=md,
    )


# ---------------------------------------------------------------------------
# JSON interchange


def _num(d: Decimal) -> int | float:
    d = canonical_decimal(d)
    return int(d) if d == d.to_integral_value() else float(d)


def _fmt_date(d: date) -> str:
    return f"{d.year:04d}/{d.month:02d}/{d.day:02d}"


def to_dict(record: PosologyStructure) -> dict[str, Any]:
    """Plain-JSON view of a record; absent optional fields are omitted."""
    out: dict[str, Any] = {}
    if record.as_needed is not None:
        out["as_needed"] = {
            "as_needed": record.as_needed.as_needed,
            "as_needed_for": record.as_needed.as_needed_for,
        }
    out["designation"] = record.designation
    qr = record.quantity_and_rate
    if qr is not None:
        q: dict[str, Any] = {"value": _num(qr.value)}
        if qr.max_value is not None:
            q["max_value"] = _num(qr.max_value)
        if qr.unit:
            q["unit"] = qr.unit
        if qr.code:
            q["code"] = qr.code
        out["quantity_and_rate"] = q
    md = record.max_dose_per_period
    if md is not None:
        m: dict[str, Any] = {"dose": md.dose}
        if md.dose_unit:
            m["dose_unit"] = md.dose_unit
        if md.code:
            m["code"] = md.code
        out["max_dose_per_period"] = m

    t = record.timing
    tim: dict[str, Any] = {}
    if t.bounds_duration is not None:
        b: dict[str, Any] = {"value": _num(t.bounds_duration.value), "unit": t.bounds_duration.unit}
        if t.bounds_duration.max_value is not None:
            b["max_value"] = _num(t.bounds_duration.max_value)
        tim["bounds_duration"] = b
    if t.bounds_period is not None:
        tim["bounds_period"] = {
            "start_date": _fmt_date(t.bounds_period.start_date),
            "end_date": _fmt_date(t.bounds_period.end_date),
        }
    if t.day_of_week:
        tim["day_of_week"] = list(t.day_of_week)
    tim["frequency"] = t.frequency
    if t.frequency_max is not None:
        tim["frequency_max"] = t.frequency_max
    if t.number_repeats_allowed is not None:
        tim["number_repeats_allows"] = t.number_repeats_allowed
    if t.offset:
        tim["offset"] = t.offset
    tim["period"] = t.period
    tim["period_unit"] = t.period_unit
    if t.sequence is not None:
        tim["sequence"] = t.sequence
    if t.time_of_day:
        tim["time_of_day"] = list(t.time_of_day)
    if t.when:
        tim["when"] = list(t.when)
    out["timing"] = tim
    return out


def _dec(x: Any, path: str) -> Decimal:
    if isinstance(x, bool) or x is None:
        raise SchemaError(f"{path}: expected a number, got {x!r}")
    try:
        d = Decimal(str(x)) if not isinstance(x, Decimal) else x
    except InvalidOperation as exc:
        raise SchemaError(f"{path}: expected a number, got {x!r}") from exc
    if not d.is_finite():
        raise SchemaError(f"{path}: expected a finite number")
    return d


def _int(x: Any, path: str) -> int:
    if isinstance(x, bool):
        raise SchemaError(f"{path}: expected an integer, got {x!r}")
    if isinstance(x, int):
        return x
    d = _dec(x, path)
    if d != d.to_integral_value():
        raise SchemaError(f"{path}: expected an integer, got {x!r}")
    return int(d)


def _opt(x: Any, conv, path: str):
    return None if x is None else conv(x, path)


def _str(x: Any, path: str) -> str:
    if not isinstance(x, str):
        raise SchemaError(f"{path}: expected a string, got {x!r}")
    return x


def _date(x: Any, path: str) -> date:
    if isinstance(x, date):
        return x
    m = _DATE_RE.match(_str(x, path).strip())
    if not m:
        raise SchemaError(f"{path}: expected YYYY/MM/DD, got {x!r}")
    try:
        return date(int(m[1]), int(m[2]), int(m[3]))
    except ValueError as exc:
        raise SchemaError(f"{path}: invalid date {x!r}") from exc


def _enum(x: Any, allowed: Iterable[str], path: str) -> str:
    if x not in tuple(allowed):
        raise SchemaError(f"{path}: unknown value {x!r}")
    return x


def _str_list(x: Any, path: str) -> tuple[str, ...]:
    if x is None:
        return ()
    if isinstance(x, str):
        x = [x]
    if not isinstance(x, list | tuple):
        raise SchemaError(f"{path}: expected a list")
    return tuple(_str(v, path) for v in x)


def from_dict(doc: Any) -> PosologyStructure:
    """Build a record from its JSON view.

    Raises:
        SchemaError: malformed document, unknown period unit, day or event-timing code.
    """
    if not isinstance(doc, dict):
        raise SchemaError("record must be a JSON object")
    an = doc.get("as_needed")
    as_needed = None
    if an is not None:
        if not isinstance(an, dict):
            raise SchemaError("as_needed: expected an object")
        flag = an.get("as_needed", True)
        if not isinstance(flag, bool):
            raise SchemaError("as_needed.as_needed: expected a boolean")
        as_needed = AsNeeded(flag, _str(an.get("as_needed_for") or "", "as_needed.as_needed_for"))

    qr_doc = doc.get("quantity_and_rate")
    qr = None
    if qr_doc is not None:
        if not isinstance(qr_doc, dict) or "value" not in qr_doc:
            raise SchemaError("quantity_and_rate: expected an object with a value")
        qr = QuantityAndRate(
            value=_dec(qr_doc["value"], "quantity_and_rate.value"),
            max_value=_opt(qr_doc.get("max_value"), _dec, "quantity_and_rate.max_value"),
            unit=_opt(qr_doc.get("unit"), _str, "quantity_and_rate.unit"),
            code=_opt(qr_doc.get("code"), _code, "quantity_and_rate.code"),
        )
    md_doc = doc.get("max_dose_per_period")
    md = None
    if md_doc is not None:
        if not isinstance(md_doc, dict) or "dose" not in md_doc:
            raise SchemaError("max_dose_per_period: expected an object with a dose")
        md = MaxDose(
            _int(md_doc["dose"], "max_dose_per_period.dose"),
            _opt(md_doc.get("dose_unit"), _str, "max_dose_per_period.dose_unit"),
            _opt(md_doc.get("code"), _code, "max_dose_per_period.code"),
        )

    t = doc.get("timing")
    if not isinstance(t, dict):
        raise SchemaError("timing: expected an object")
    for key in ("frequency", "period", "period_unit"):
        if t.get(key) is None:
            raise SchemaError(f"timing.{key}: missing")
    bd = None
    if t.get("bounds_duration") is not None:
        b = t["bounds_duration"]
        if not isinstance(b, dict):
            raise SchemaError("timing.bounds_duration: expected an object")
        bd = BoundsDuration(
            _dec(b.get("value"), "timing.bounds_duration.value"),
            _enum(b.get("unit"), PERIOD_UNITS, "timing.bounds_duration.unit"),
            _opt(b.get("max_value"), _dec, "timing.bounds_duration.max_value"),
        )
    bp = None
    if t.get("bounds_period") is not None:
        b = t["bounds_period"]
        if not isinstance(b, dict):
            raise SchemaError("timing.bounds_period: expected an object")
        bp = BoundsPeriod(
            _date(b.get("start_date"), "timing.bounds_period.start_date"),
            _date(b.get("end_date"), "timing.bounds_period.end_date"),
        )
    repeats = t.get("number_repeats_allows", t.get("number_repeats_allowed"))
    timing = Timing(
        frequency=_int(t["frequency"], "timing.frequency"),
        period=_int(t["period"], "timing.period"),
        period_unit=_enum(t["period_unit"], PERIOD_UNITS, "timing.period_unit"),
        bounds_duration=bd,
        bounds_period=bp,
        day_of_week=tuple(_enum(d, DAYS_OF_WEEK, "timing.day_of_week") for d in _str_list(t.get("day_of_week"), "timing.day_of_week")),
        frequency_max=_opt(t.get("frequency_max"), _int, "timing.frequency_max"),
        number_repeats_allowed=_opt(repeats, _int, "timing.number_repeats_allows"),
        offset=_opt(t.get("offset"), _str, "timing.offset") or None,
        sequence=_opt(t.get("sequence"), _int, "timing.sequence"),
        time_of_day=_str_list(t.get("time_of_day"), "timing.time_of_day"),
        when=tuple(_enum(w, EVENT_TIMING_CODES, "timing.when") for w in _str_list(t.get("when"), "timing.when")),
    )
    designation = doc.get("designation")
    return PosologyStructure(
        designation=_str(designation if designation is not None else "", "designation"),
        timing=timing,
        as_needed=as_needed,
        quantity_and_rate=qr,
        max_dose_per_period=md,
    )


def _code(x: Any, path: str) -> str:
    # dataset codes are sometimes written as bare integers
    if isinstance(x, int) and not isinstance(x, bool):
        return str(x)
    return _str(x, path)


def serialize(record: PosologyStructure) -> str:
    return json.dumps(to_dict(record), ensure_ascii=False)


def deserialize(text: str) -> PosologyStructure:
    """Parse one record from JSON text. Raises :class:`SchemaError`."""
    try:
        doc = json.loads(text, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed document: {exc}") from exc
    return from_dict(doc)


def records_to_json(records: Iterable[PosologyStructure]) -> list[dict[str, Any]]:
    return [to_dict(r) for r in records]


def records_from_json(docs: Any) -> list[PosologyStructure]:
    if isinstance(docs, dict):
        docs = [docs]
    if not isinstance(docs, list):
        raise SchemaError("expected a list of records")
    return [from_dict(d) for d in docs]


def load_json_schema() -> dict[str, Any]:
    """The published JSON Schema for one serialized record."""
    text = resources.files("posodose.data").joinpath("posology.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def minimal_record(designation: str = "") -> PosologyStructure:
    return PosologyStructure(designation=designation, timing=Timing())


# Annotation-tool and prompt scaffolding keys that carry no record content.
SCAFFOLDING_KEYS = frozenset({
    "category", "entity_type", "posology_string", "frequency_texts",
    "bounds_duration_text", "type", "text", "span", "id",
})


def _strip_scaffolding(doc: Any) -> Any:
    if isinstance(doc, dict):
        return {k: _strip_scaffolding(v) for k, v in doc.items() if k not in SCAFFOLDING_KEYS}
    if isinstance(doc, list):
        return [_strip_scaffolding(v) for v in doc]
    return doc


_LOOSE_CLOCK_RE = re.compile(r"^(\d{1,2})\s*(?:h|:)\s*(\d{2})?(?::(\d{2}))?$", re.IGNORECASE)


def _loose_clock(value: Any) -> Any:
    """``8h``, ``8h30`` or ``08:30`` to ``HH:MM:SS``; anything else unchanged."""
    if not isinstance(value, str):
        return value
    m = _LOOSE_CLOCK_RE.match(value.strip())
    if not m:
        return value
    return f"{int(m[1]):02d}:{m[2] or '00'}:{m[3] or '00'}"


def from_loose_dict(doc: Any, fill_timing_defaults: bool = False) -> PosologyStructure:
    """Build a record from an annotation-style document.

    Accepts the ``a_needed`` alias and a bare boolean for ``as_needed``, and
    drops scaffolding keys such as ``category`` or ``frequency_texts``.
    With ``fill_timing_defaults`` a missing frequency, period or period unit
    defaults to once a day. The result is validated and canonicalized.

    Raises:
        SchemaError: malformed document or invariant violation.
    """
    if not isinstance(doc, dict):
        raise SchemaError("record must be a mapping")
    doc = dict(doc)
    if "as_needed" not in doc and "a_needed" in doc:
        doc["as_needed"] = doc["a_needed"]
    doc.pop("a_needed", None)
    an = doc.get("as_needed")
    if isinstance(an, bool):
        doc["as_needed"] = {"as_needed": True} if an else None
    elif isinstance(an, dict) and an.get("as_needed") is False and not an.get("as_needed_for"):
        doc["as_needed"] = None
    timing = doc.get("timing")
    if timing is None and fill_timing_defaults:
        timing = {}
    if isinstance(timing, dict):
        timing = _strip_scaffolding(timing)
        if fill_timing_defaults:
            timing.setdefault("frequency", 1)
            timing.setdefault("period", 1)
            timing.setdefault("period_unit", "day")
        for key in ("when", "time_of_day", "day_of_week"):
            if timing.get(key) == "":
                timing[key] = None
        tod = timing.get("time_of_day")
        if isinstance(tod, str):
            tod = [tod]
        if isinstance(tod, list):
            timing["time_of_day"] = [_loose_clock(t) for t in tod]
        doc["timing"] = timing
    for key in ("quantity_and_rate", "max_dose_per_period"):
        if isinstance(doc.get(key), dict):
            doc[key] = _strip_scaffolding(doc[key])
    return canonicalize(from_dict(doc))
