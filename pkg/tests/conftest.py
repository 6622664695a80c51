from __future__ import annotations

from datetime import date
from decimal import Decimal
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from posodose.schema import (
    DAYS_OF_WEEK,
    EVENT_TIMING_CODES,
    PERIOD_UNITS,
    UNIT_VOCABULARY,
    AsNeeded,
    BoundsDuration,
    BoundsPeriod,
    MaxDose,
    PosologyStructure,
    QuantityAndRate,
    Timing,
    canonicalize,
)

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"

WORDS = ["1", "2", "cp", "comprimé", "le", "matin", "soir", "gélule", "par", "jour", "si", "besoin", "à", "08h", "0.5"]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def decimals(min_value: str = "0", max_value: str = "100") -> st.SearchStrategy[Decimal]:
    return st.decimals(min_value=Decimal(min_value), max_value=Decimal(max_value), places=2,
                       allow_nan=False, allow_infinity=False)


@st.composite
def records(draw) -> PosologyStructure:
    """Arbitrary valid records in canonical form."""
    designation = " ".join(draw(st.lists(st.sampled_from(WORDS), min_size=1, max_size=6)))
    qr = None
    if draw(st.booleans()):
        value = draw(decimals())
        max_value = draw(st.none() | decimals().map(lambda d, v=value: v + d))
        qr = QuantityAndRate(
            value, max_value,
            draw(st.none() | st.sampled_from(sorted(UNIT_VOCABULARY))),
            draw(st.none() | st.from_regex(r"[1-9][0-9]{5,9}", fullmatch=True)),
        )
    md = None
    if draw(st.booleans()):
        md = MaxDose(draw(st.integers(1, 12)), draw(st.none() | st.sampled_from(sorted(UNIT_VOCABULARY))))
    an = None
    if draw(st.booleans()):
        an = AsNeeded(True, draw(st.sampled_from(["", "si besoin", "si douleurs", "en cas de fièvre"])))
    frequency = draw(st.integers(1, 6))
    bounds = draw(st.sampled_from(["none", "duration", "period"]))
    bd = bp = None
    if bounds == "duration":
        v = draw(decimals("1", "90"))
        bd = BoundsDuration(v, draw(st.sampled_from(PERIOD_UNITS)), draw(st.none() | decimals("0", "30").map(lambda d, v=v: v + d)))
    elif bounds == "period":
        start = draw(st.dates(date(2020, 1, 1), date(2030, 1, 1)))
        end = draw(st.dates(start, date(2031, 1, 1)))
        bp = BoundsPeriod(start, end)
    cue = draw(st.sampled_from(["none", "when", "time"]))
    when = tuple(draw(st.lists(st.sampled_from(EVENT_TIMING_CODES), min_size=1, max_size=3, unique=True))) if cue == "when" else ()
    times = ()
    if cue == "time":
        times = tuple(draw(st.lists(
            st.tuples(st.integers(0, 23), st.sampled_from([0, 15, 30, 45])).map(lambda hm: f"{hm[0]:02d}:{hm[1]:02d}:00"),
            min_size=1, max_size=3, unique=True,
        )))
    timing = Timing(
        frequency=frequency,
        period=draw(st.integers(1, 24)),
        period_unit=draw(st.sampled_from(PERIOD_UNITS)),
        bounds_duration=bd,
        bounds_period=bp,
        day_of_week=tuple(draw(st.lists(st.sampled_from(DAYS_OF_WEEK), max_size=3, unique=True))),
        frequency_max=draw(st.none() | st.integers(frequency, 8)),
        number_repeats_allowed=draw(st.none() | st.integers(0, 5)),
        offset=draw(st.none() | st.sampled_from(["30 minutes", "1 heure", "15 min"])),
        sequence=draw(st.none() | st.integers(1, 3)),
        time_of_day=times,
        when=when,
    )
    return canonicalize(PosologyStructure(designation, timing, an, qr, md))


def release_like_dataset(n_queries: int = 129, n_instructions: int = 131, seed: int = 21) -> list[dict]:
    """Generated stand-in with the released dataset's shape: annotation-style gold, string ids."""
    from posodose.schema import to_dict
    from posodose.synthgen import generate

    pool = generate(4 * n_queries, seed=seed)
    multi = [p for p in pool if len(p.gold) == 2]
    single = [p for p in pool if len(p.gold) == 1]
    n_multi = n_instructions - n_queries
    chosen = multi[:n_multi] + single[: n_queries - n_multi]
    assert len(chosen) == n_queries
    out = []
    for i, p in enumerate(chosen):
        entities = []
        for rec in p.gold:
            doc = to_dict(rec)
            doc["category"] = "MEDICATION"
            doc["entity_type"] = "QUANTITY"
            entities.append(doc)
        out.append({"id": f"q{i:03d}", "posology_string": p.text, "entities": entities})
    return out
