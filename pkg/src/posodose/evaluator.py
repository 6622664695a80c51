"""Query-wise exact accuracy with per-field diagnostics.

A query is correct when its predicted records equal the gold records as a
multiset, after canonicalization, with terminology codes masked and text
fields compared loosely (accent-folded, lowercased, whitespace collapsed).
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Union

from .schema import PosologyStructure, SchemaError, canonicalize, fold, from_loose_dict, to_dict

log = logging.getLogger(__name__)

MASKED_FIELDS = frozenset({"quantity_and_rate.code", "max_dose_per_period.code"})
TEXT_FIELDS = frozenset({"designation", "as_needed.as_needed_for", "timing.offset"})

# Key spellings accepted by the dataset adapter, in lookup order.
ID_KEYS = ("id", "query_id", "uid", "idx")
QUERY_KEYS = ("query", "text", "sentence", "posology_string", "input")
GOLD_KEYS = ("gold", "entities", "posologies", "instructions", "structures", "records", "output", "annotations")
CONTAINER_KEYS = ("queries", "data", "examples", "items")


class EvaluationError(ValueError):
    """Unknown or duplicate query id in an evaluation run."""


class DatasetError(ValueError):
    """Dataset file that cannot be read or whose records violate the schema."""


@dataclass(frozen=True)
class GoldQuery:
    id: str
    query: str
    gold: tuple[PosologyStructure, ...]


@dataclass(frozen=True)
class Diff:
    """One unequal field; ``path`` is ``record`` for an unmatched record."""

    path: str
    predicted: Any
    gold: Any

    def to_json(self) -> dict[str, Any]:
        return {"path": self.path, "predicted": self.predicted, "gold": self.gold}


@dataclass(frozen=True)
class Verdict:
    correct: bool
    diffs: tuple[Diff, ...] = ()


@dataclass(frozen=True)
class QueryVerdict:
    id: str
    correct: bool
    diffs: tuple[Diff, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {"id": self.id, "correct": self.correct, "diffs": [d.to_json() for d in self.diffs]}


@dataclass(frozen=True)
class EvalReport:
    exact_accuracy: float
    per_field_error_counts: dict[str, int]
    per_query_verdicts: tuple[QueryVerdict, ...]
    correct_count: int = 0
    query_count: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "exact_accuracy": self.exact_accuracy,
            "correct": self.correct_count,
            "queries": self.query_count,
            "per_field_error_counts": dict(sorted(self.per_field_error_counts.items())),
            "per_query_verdicts": [v.to_json() for v in self.per_query_verdicts],
        }

    def table(self) -> str:
        """Human-readable summary."""
        lines = [f"exact accuracy: {self.correct_count}/{self.query_count} = {self.exact_accuracy:.4f}"]
        if self.per_field_error_counts:
            width = max(len(k) for k in self.per_field_error_counts)
            lines.append("field errors:")
            for path, count in sorted(self.per_field_error_counts.items(), key=lambda kv: (-kv[1], kv[0])):
                lines.append(f"  {path:<{width}}  {count}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Record comparison


def _loose_text(value: Any) -> Any:
    return " ".join(fold(value).split()) if isinstance(value, str) else value


def _flatten(doc: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if path == "timing.number_repeats_allows":
            path = "timing.number_repeats_allowed"
        if isinstance(value, dict):
            out.update(_flatten(value, path + "."))
        elif isinstance(value, list):
            out[path] = tuple(value)
        else:
            out[path] = value
    return out


def comparable(record: PosologyStructure, mask_codes: bool = True) -> dict[str, Any]:
    """Flat ``path -> value`` view used for equality, codes optionally masked."""
    flat = _flatten(to_dict(canonicalize(record)))
    out = {}
    for path, value in flat.items():
        if mask_codes and path in MASKED_FIELDS:
            continue
        out[path] = _loose_text(value) if path in TEXT_FIELDS else value
    return out


def _key(flat: Mapping[str, Any]) -> tuple:
    return tuple(sorted(flat.items()))


def _field_diffs(pred: Mapping[str, Any], gold: Mapping[str, Any]) -> list[Diff]:
    return [
        Diff(path, pred.get(path), gold.get(path))
        for path in sorted(set(pred) | set(gold))
        if pred.get(path) != gold.get(path)
    ]


def _overlap(a: Mapping[str, Any], b: Mapping[str, Any]) -> int:
    agree = sum(1 for p in a if p in b and a[p] == b[p])
    return 2 * agree - len(set(a) | set(b))


def _match(pred: list[dict], gold: list[dict]) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    seq_p = [p.get("timing.sequence") for p in pred]
    seq_g = [g.get("timing.sequence") for g in gold]
    if (
        pred and gold
        and None not in seq_p and None not in seq_g
        and len(set(seq_p)) == len(seq_p) and len(set(seq_g)) == len(seq_g)
    ):
        by_seq = {s: j for j, s in enumerate(seq_g)}
        pairs = [(i, by_seq[s]) for i, s in enumerate(seq_p) if s in by_seq]
    else:
        candidates = sorted(
            ((-_overlap(p, g), i, j) for i, p in enumerate(pred) for j, g in enumerate(gold)),
        )
        used_p: set[int] = set()
        used_g: set[int] = set()
        pairs = []
        for _, i, j in candidates:
            if i not in used_p and j not in used_g:
                pairs.append((i, j))
                used_p.add(i)
                used_g.add(j)
    matched_p = {i for i, _ in pairs}
    matched_g = {j for _, j in pairs}
    return (
        sorted(pairs),
        [i for i in range(len(pred)) if i not in matched_p],
        [j for j in range(len(gold)) if j not in matched_g],
    )


def compare(
    predicted: Iterable[PosologyStructure],
    gold: Iterable[PosologyStructure],
    mask_codes: bool = True,
) -> Verdict:
    """Exact-match verdict for one query plus the unequal field paths.

    Records are paired by ``timing.sequence`` when every record carries a
    distinct one, otherwise greedily by field overlap. Unpaired records on
    either side are reported with path ``record``.
    """
    pred = [comparable(r, mask_codes) for r in predicted]
    gold_flat = [comparable(r, mask_codes) for r in gold]
    correct = Counter(map(_key, pred)) == Counter(map(_key, gold_flat))
    pairs, extra, missing = _match(pred, gold_flat)
    diffs: list[Diff] = []
    for i, j in pairs:
        diffs.extend(_field_diffs(pred[i], gold_flat[j]))
    diffs.extend(Diff("record", dict(pred[i]), None) for i in extra)
    diffs.extend(Diff("record", None, dict(gold_flat[j])) for j in missing)
    return Verdict(correct, tuple(diffs))


# ---------------------------------------------------------------------------
# Whole-dataset evaluation

Predictions = Union[Mapping[str, Iterable[PosologyStructure]], Iterable[tuple[str, Iterable[PosologyStructure]]]]


def _prediction_items(predictions: Predictions) -> list[tuple[str, list[PosologyStructure]]]:
    if isinstance(predictions, Mapping):
        return [(str(k), list(v)) for k, v in predictions.items()]
    return [(str(k), list(v)) for k, v in predictions]


def evaluate(predictions: Predictions, dataset: Iterable[GoldQuery], mask_codes: bool = True) -> EvalReport:
    """Score predictions against a gold dataset.

    A dataset id without a prediction counts as incorrect.

    Raises:
        EvaluationError: duplicate ids on either side, or a prediction for an
            id absent from the dataset.
    """
    dataset = list(dataset)
    gold_by_id: dict[str, GoldQuery] = {}
    for q in dataset:
        if q.id in gold_by_id:
            raise EvaluationError(f"duplicate dataset id {q.id!r}")
        gold_by_id[q.id] = q
    pred_by_id: dict[str, list[PosologyStructure]] = {}
    for qid, records in _prediction_items(predictions):
        if qid in pred_by_id:
            raise EvaluationError(f"duplicate prediction id {qid!r}")
        if qid not in gold_by_id:
            raise EvaluationError(f"prediction for unknown id {qid!r}")
        pred_by_id[qid] = records

    verdicts: list[QueryVerdict] = []
    errors: Counter[str] = Counter()
    for q in dataset:
        if q.id not in pred_by_id:
            diffs = (Diff("prediction", None, "missing"),)
            verdicts.append(QueryVerdict(q.id, False, diffs))
            errors["prediction"] += 1
            continue
        v = compare(pred_by_id[q.id], q.gold, mask_codes)
        verdicts.append(QueryVerdict(q.id, v.correct, v.diffs))
        errors.update({d.path for d in v.diffs})
    n_correct = sum(v.correct for v in verdicts)
    accuracy = n_correct / len(verdicts) if verdicts else 0.0
    return EvalReport(accuracy, dict(errors), tuple(verdicts), n_correct, len(verdicts))


# ---------------------------------------------------------------------------
# Dataset loading


def _first(entry: Mapping[str, Any], keys: Iterable[str]) -> Optional[str]:
    for k in keys:
        if k in entry:
            return k
    return None


def _entries(doc: Any) -> list[tuple[Optional[str], Any]]:
    if isinstance(doc, dict):
        container = _first(doc, CONTAINER_KEYS)
        if container is not None:
            return _entries(doc[container])
        # mapping id -> entry
        return [(str(k), v) for k, v in doc.items()]
    if isinstance(doc, list):
        return [(None, v) for v in doc]
    raise DatasetError("dataset must be a list of queries or a mapping of id to query")


def _gold_docs(value: Any) -> list[Any]:
    if isinstance(value, dict):
        inner = _first(value, ("entities", "records", "instructions"))
        return list(value[inner]) if inner is not None else [value]
    if isinstance(value, list):
        return value
    if value is None:
        return []
    raise DatasetError(f"expected a list of records, got {type(value).__name__}")


def parse_dataset(doc: Any) -> list[GoldQuery]:
    """Adapt an already-parsed dataset document; see :func:`load_dataset`."""
    out: list[GoldQuery] = []
    for position, (key_id, entry) in enumerate(_entries(doc)):
        if not isinstance(entry, dict):
            raise DatasetError(f"entry {position}: expected an object")
        id_key = _first(entry, ID_KEYS)
        qid = str(entry[id_key]) if id_key is not None else (key_id if key_id is not None else str(position))
        query_key = _first(entry, QUERY_KEYS)
        query = entry.get(query_key, "") if query_key is not None else ""
        if not isinstance(query, str):
            raise DatasetError(f"query {qid!r}: query text must be a string")
        gold_key = _first(entry, GOLD_KEYS)
        if gold_key is None:
            raise DatasetError(f"query {qid!r}: no gold records (expected one of {', '.join(GOLD_KEYS)})")
        records = []
        for k, rec in enumerate(_gold_docs(entry[gold_key])):
            try:
                records.append(from_loose_dict(rec))
            except SchemaError as exc:
                raise DatasetError(f"query {qid!r}, record {k}: {exc}") from exc
        out.append(GoldQuery(qid, query, tuple(records)))
    return out


def read_json_or_jsonl(path: Union[str, Path]) -> Any:
    """Parse a JSON document, falling back to one JSON value per line."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    try:
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON or JSONL ({exc})") from exc


def load_dataset(path: Union[str, Path, None] = None) -> list[GoldQuery]:
    """Load gold queries from a JSON or JSONL file.

    The adapter accepts a list of query objects, a mapping of id to query, or
    an object wrapping the list under ``queries``/``data``/``examples``. Each
    query carries an id (``id``/``query_id``/``uid``, else its position), the
    text (``query``/``text``/``sentence``/``posology_string``) and its gold
    records under ``gold``/``entities``/``posologies``/``instructions`` and
    similar keys. Records may use annotation-style keys; see
    :func:`posodose.schema.from_loose_dict`. ``None`` loads the shipped
    three-query sample.

    Raises:
        FileNotFoundError: missing file.
        DatasetError: unreadable layout or a record violating the schema; the
            message names the query id and the field.
    """
    if path is None:
        from importlib import resources

        doc = json.loads(resources.files("posodose.data").joinpath("sample_dataset.json").read_text(encoding="utf-8"))
    else:
        doc = read_json_or_jsonl(path)
    queries = parse_dataset(doc)
    stats = dataset_stats(queries)
    log.info("loaded %d queries with %d instructions from %s", stats["queries"], stats["instructions"], path or "sample")
    return queries


def dataset_stats(queries: Iterable[GoldQuery]) -> dict[str, int]:
    queries = list(queries)
    return {"queries": len(queries), "instructions": sum(len(q.gold) for q in queries)}


def load_predictions(path: Union[str, Path]) -> list[tuple[str, list[PosologyStructure]]]:
    """Read JSONL predictions of ``{"id": ..., "records": [...]}``.

    Raises:
        DatasetError: malformed line or record.
    """
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            qid = str(doc["id"])
            records = [from_loose_dict(r, fill_timing_defaults=True) for r in doc.get("records") or []]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{n}: malformed prediction ({exc})") from exc
        except SchemaError as exc:
            raise DatasetError(f"{path}:{n}: prediction {doc.get('id')!r}: {exc}") from exc
        out.append((qid, records))
    return out
