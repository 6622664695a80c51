from __future__ import annotations

import json
from dataclasses import replace
from datetime import date
from decimal import Decimal

import jsonschema
import pytest
from conftest import records
from hypothesis import given

from posodose.schema import (
    AsNeeded,
    BoundsDuration,
    BoundsPeriod,
    PosologyStructure,
    QuantityAndRate,
    SchemaError,
    Timing,
    canonical_unit,
    canonicalize,
    deserialize,
    from_dict,
    from_loose_dict,
    load_json_schema,
    minimal_record,
    serialize,
    to_dict,
    validate,
)


def rules(record):
    return {(v.field, v.rule) for v in validate(record)}


class TestValidate:
    def test_minimal_record_is_valid(self):
        assert validate(minimal_record("1 cp")) == []

    def test_when_and_time_of_day_are_exclusive(self):
        rec = PosologyStructure("1 cp", Timing(when=("MORN",), time_of_day=("08:00:00",)))
        assert ("timing.when", "when/time_of_day exclusivity") in rules(rec)

    def test_max_value_below_value(self):
        rec = PosologyStructure("1 cp", quantity_and_rate=QuantityAndRate(Decimal("1.0"), Decimal("0.5")))
        assert ("quantity_and_rate.max_value", "max_value < value") in rules(rec)

    def test_bounds_exclusivity(self):
        t = Timing(bounds_duration=BoundsDuration(Decimal(7), "day"),
                   bounds_period=BoundsPeriod(date(2022, 1, 1), date(2022, 1, 2)))
        assert any(v.field == "timing.bounds_duration" for v in validate(PosologyStructure("x", t)))

    def test_as_needed_for_requires_flag(self):
        rec = PosologyStructure("x", as_needed=AsNeeded(False, "si besoin"))
        assert validate(rec)

    @pytest.mark.parametrize("timing", [
        Timing(frequency=0),
        Timing(period=0),
        Timing(period_unit="fortnight"),
        Timing(frequency=3, frequency_max=2),
        Timing(bounds_period=BoundsPeriod(date(2022, 2, 1), date(2022, 1, 1))),
        Timing(time_of_day=("8h",)),
        Timing(when=("BREAKFAST",)),
        Timing(day_of_week=("monday",)),
        Timing(sequence=0),
        Timing(number_repeats_allowed=-1),
    ])
    def test_timing_violations(self, timing):
        assert validate(PosologyStructure("x", timing))

    def test_violation_names_field_and_rule(self):
        (v,) = validate(PosologyStructure("x", Timing(frequency=0)))
        assert str(v).startswith("timing.frequency: ")


class TestCanonicalize:
    def test_unit_abbreviation(self):
        rec = PosologyStructure("3 cp", quantity_and_rate=QuantityAndRate(Decimal(3), unit="cp"))
        assert canonicalize(rec).quantity_and_rate.unit == "comprimé(s)"

    @pytest.mark.parametrize("surface,label", [("amp", "ampoule(s)"), ("sach", "sachet(s)"), ("cmp", "comprimé(s)")])
    def test_unit_vocabulary(self, surface, label):
        assert canonical_unit(surface) == label

    def test_when_sorted_in_value_set_order(self):
        rec = PosologyStructure("x", Timing(when=("HS", "MORN")))
        assert canonicalize(rec).timing.when == ("MORN", "HS")

    def test_trailing_zeros_trimmed(self):
        rec = PosologyStructure("x", quantity_and_rate=QuantityAndRate(Decimal("1.00")))
        assert to_dict(canonicalize(rec))["quantity_and_rate"]["value"] == 1
        assert serialize(canonicalize(rec)).count('"value": 1}') == 1

    def test_dates_formatted(self):
        rec = PosologyStructure("x", Timing(bounds_period=BoundsPeriod(date(2022, 11, 15), date(2022, 11, 20))))
        assert to_dict(rec)["timing"]["bounds_period"] == {"start_date": "2022/11/15", "end_date": "2022/11/20"}

    def test_invalid_record_raises(self):
        with pytest.raises(SchemaError):
            canonicalize(PosologyStructure("x", Timing(frequency=0)))

    @given(records())
    def test_idempotent(self, rec):
        assert canonicalize(canonicalize(rec)) == canonicalize(rec)


class TestSerialization:
    @given(records())
    def test_round_trip(self, rec):
        assert deserialize(serialize(rec)) == rec

    @given(records())
    def test_valid_records_match_published_schema(self, rec):
        assert validate(rec) == []
        jsonschema.validate(json.loads(serialize(rec)), load_json_schema())

    def test_unknown_period_unit_rejected(self):
        doc = {"designation": "x", "timing": {"frequency": 1, "period": 1, "period_unit": "fortnight"}}
        with pytest.raises(SchemaError, match="period_unit"):
            deserialize(json.dumps(doc))

    def test_unknown_when_code_rejected(self):
        doc = {"designation": "x", "timing": {"frequency": 1, "period": 1, "period_unit": "day", "when": ["LUNCH"]}}
        with pytest.raises(SchemaError, match="when"):
            from_dict(doc)

    def test_malformed_document(self):
        with pytest.raises(SchemaError):
            deserialize("{not json")

    def test_worked_example_document(self):
        doc = {
            "designation": "0.5 a 1 cp au coucher si besoin",
            "as_needed": {"as_needed": True, "as_needed_for": "si besoin"},
            "quantity_and_rate": {"max_value": 1.0, "unit": "comprimé(s)", "value": 0.5},
            "timing": {"frequency": 1, "period": 1, "period_unit": "day", "when": ["HS"]},
        }
        rec = deserialize(json.dumps(doc))
        assert rec.quantity_and_rate.value == Decimal("0.5")
        assert rec.quantity_and_rate.max_value == Decimal("1.0")
        assert rec.timing.when == ("HS",)

    def test_repeats_key_spelling(self):
        rec = replace(minimal_record("x"), timing=Timing(number_repeats_allowed=2))
        assert to_dict(rec)["timing"]["number_repeats_allows"] == 2
        doc = to_dict(rec)
        doc["timing"]["number_repeats_allowed"] = doc["timing"].pop("number_repeats_allows")
        assert from_dict(doc) == rec


class TestLooseMapping:
    def test_annotation_aliases_and_scaffolding(self):
        doc = {
            "a_needed": {"as_needed": True, "as_needed_for": "besoin"},
            "category": "MEDICATION",
            "entity_type": "QUANTITY",
            "designation": "ampoute 1 fois par trimestre besoin",
            "quantity_and_rate": {"type": "DOSE", "unit": "ampoule(s)", "value": 1},
            "timing": {"bounds_duration_text": "", "frequency": 1, "frequency_texts": ["1 fois par trimestre"],
                       "period": 3, "period_unit": "month"},
        }
        rec = from_loose_dict(doc)
        assert rec.as_needed == AsNeeded(True, "besoin")
        assert (rec.timing.frequency, rec.timing.period, rec.timing.period_unit) == (1, 3, "month")

    def test_timing_defaults_only_on_request(self):
        with pytest.raises(SchemaError):
            from_loose_dict({"designation": "x", "timing": {}})
        assert from_loose_dict({"designation": "x"}, fill_timing_defaults=True).timing == Timing()

    def test_loose_clock_times(self):
        rec = from_loose_dict({"designation": "x", "timing": {"frequency": 2, "period": 1, "period_unit": "day",
                                                              "time_of_day": ["8h", "20:30"]}})
        assert rec.timing.time_of_day == ("08:00:00", "20:30:00")

    def test_violation_after_mapping(self):
        doc = {"designation": "x", "timing": {"frequency": 1, "period": 1, "period_unit": "day",
                                              "when": ["MORN"], "time_of_day": ["08:00:00"]}}
        with pytest.raises(SchemaError, match="exclusivity"):
            from_loose_dict(doc)
