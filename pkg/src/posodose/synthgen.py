"""Template generator of (posology text, gold records) pairs.

Templates live in ``data/templates.yaml``. A template is a surface string with
typed slots and a gold constructor::

    - id: dose_when
      tags: [DOSE, WHEN]
      slots: {d: dose, u: unit, w: when}
      text: "{pre}[{d} {u} {w}]{end}"
      gold:
        - quantity_and_rate: {value: "{d.value}", unit: "{u.unit}"}
          timing: {when: ["{w.code}"]}

``{name}`` inserts the slot surface, ``{name.field}`` a field of the chosen
vocabulary entry. A gold string that is exactly one reference keeps the field's
type. ``[...]`` marks the designation of each record, in record order.
``pre`` and ``end`` are implicit slots drawn from the ``prefix`` and ``ending``
vocabularies. Missing timing fields default to once a day; records of a
multi-record template are numbered through ``timing.sequence``.
"""

from __future__ import annotations

import copy
import json
import random
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import yaml

from .composer import designation_text
from .ner import ENTITY_TYPES
from .schema import PosologyStructure, canonicalize, from_dict, records_from_json, records_to_json

CORRUPTIONS = ("ocr", "truncation", "colloquial")

_REF_RE = re.compile(r"\{(\w+)(?:\.(\w+))?\}")
_PIECE_RE = re.compile(r"\{(\w+)\}|\[|\]|[^{}\[\]]+")


class TemplateError(ValueError):
    """Malformed template file or impossible generation request."""


@dataclass(frozen=True)
class Template:
    template_id: str
    tags: tuple[str, ...]
    slots: tuple[tuple[str, str], ...]
    text: str
    gold: tuple[dict, ...]


@dataclass(frozen=True)
class TemplateSet:
    vocab: dict[str, tuple[dict, ...]]
    templates: tuple[Template, ...]
    colloquial: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_text(cls, text: str) -> "TemplateSet":
        doc = yaml.safe_load(text)
        if not isinstance(doc, dict) or "templates" not in doc:
            raise TemplateError("template file needs 'vocab' and 'templates'")
        vocab: dict[str, tuple[dict, ...]] = {}
        for name, entries in (doc.get("vocab") or {}).items():
            norm = []
            for e in entries:
                entry = {"surface": e} if isinstance(e, str) else dict(e)
                if "surface" not in entry:
                    raise TemplateError(f"vocab {name}: entry without surface: {e!r}")
                entry["surface"] = str(entry["surface"])
                norm.append(entry)
            if not norm:
                raise TemplateError(f"vocab {name} is empty")
            vocab[name] = tuple(norm)
        for implicit in ("prefix", "ending"):
            vocab.setdefault(implicit, ({"surface": ""},))
        seen: set[str] = set()
        templates = []
        for raw in doc["templates"]:
            tid = raw.get("id")
            if not tid or tid in seen:
                raise TemplateError(f"missing or duplicate template id {tid!r}")
            seen.add(tid)
            tags = tuple(raw.get("tags") or ())
            bad = [t for t in tags if t not in ENTITY_TYPES]
            if bad:
                raise TemplateError(f"{tid}: unknown entity types {bad}")
            slots = dict(raw.get("slots") or {})
            slots.setdefault("pre", "prefix")
            slots.setdefault("end", "ending")
            for slot, vname in slots.items():
                if vname not in vocab:
                    raise TemplateError(f"{tid}: slot {slot} uses unknown vocab {vname!r}")
            gold = raw.get("gold")
            if isinstance(gold, dict):
                gold = [gold]
            if not gold:
                raise TemplateError(f"{tid}: empty gold")
            body = raw["text"]
            if body.count("[") != len(gold) or body.count("]") != len(gold):
                raise TemplateError(f"{tid}: need one [...] designation per gold record")
            for m in _REF_RE.finditer(body + yaml.safe_dump(gold)):
                if m.group(1) not in slots:
                    raise TemplateError(f"{tid}: reference to undeclared slot {m.group(1)!r}")
            templates.append(Template(tid, tags, tuple(slots.items()), body, tuple(gold)))
        colloquial = tuple((str(a), str(b)) for a, b in (doc.get("colloquial") or {}).items())
        return cls(vocab, tuple(templates), colloquial)

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "TemplateSet":
        if path is None:
            text = resources.files("posodose.data").joinpath("templates.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_text(text)


_DEFAULT: Optional[TemplateSet] = None


def default_templates() -> TemplateSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = TemplateSet.load()
    return _DEFAULT


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Piece:
    """A run of the rendered text: literal, slot value, or designation bracket."""

    kind: str  # lit | slot | open | close
    text: str = ""
    slot: str = ""


@dataclass(frozen=True)
class Pair:
    text: str
    gold: Optional[tuple[PosologyStructure, ...]]  # None: no structure can be recovered
    template_id: str = ""
    tags: tuple[str, ...] = ()
    corruption: Optional[str] = None
    pieces: tuple[Piece, ...] = field(default=(), repr=False, compare=False)
    bindings: Mapping[str, dict] = field(default_factory=dict, repr=False, compare=False)
    gold_spec: tuple[dict, ...] = field(default=(), repr=False, compare=False)

    def to_json(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "gold": None if self.gold is None else records_to_json(self.gold),
            "template": self.template_id,
            "tags": list(self.tags),
            "corruption": self.corruption,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "Pair":
        gold = doc.get("gold")
        return cls(
            doc["text"],
            None if gold is None else tuple(records_from_json(gold)),
            doc.get("template", ""),
            tuple(doc.get("tags") or ()),
            doc.get("corruption"),
        )


def _render_text(pieces: Sequence[Piece]) -> tuple[str, list[str]]:
    out: list[str] = []
    designations: list[str] = []
    opened: list[int] = []
    for p in pieces:
        if p.kind == "open":
            opened.append(len("".join(out)))
        elif p.kind == "close":
            start = opened.pop()
            designations.append("".join(out)[start:])
        else:
            out.append(p.text)
    text = " ".join("".join(out).split())
    return text, [designation_text(d) for d in designations]


def _resolve(value: Any, bindings: Mapping[str, dict]) -> Any:
    """Substitute slot references; a reference to a removed slot yields None."""
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            r = _resolve(v, bindings)
            if r is not None and r != {} and r != []:
                out[k] = r
        return out
    if isinstance(value, list):
        return [r for r in (_resolve(v, bindings) for v in value) if r is not None]
    if not isinstance(value, str):
        return value
    whole = _REF_RE.fullmatch(value)
    if whole:
        entry = bindings.get(whole.group(1))
        if entry is None:
            return None
        return entry[whole.group(2) or "surface"]
    missing = False

    def sub(m: re.Match) -> str:
        nonlocal missing
        entry = bindings.get(m.group(1))
        if entry is None:
            missing = True
            return ""
        return str(entry[m.group(2) or "surface"])

    text = _REF_RE.sub(sub, value)
    return None if missing else text


def _build_gold(spec: Sequence[dict], bindings: Mapping[str, dict], designations: Sequence[str]) -> tuple[PosologyStructure, ...]:
    records = []
    for i, rec in enumerate(spec):
        doc = _resolve(copy.deepcopy(rec), bindings)
        timing = doc.setdefault("timing", {})
        timing.setdefault("frequency", 1)
        timing.setdefault("period", 1)
        timing.setdefault("period_unit", "day")
        if len(spec) > 1:
            timing.setdefault("sequence", i + 1)
        doc["designation"] = designations[i]
        records.append(canonicalize(from_dict(doc)))
    return tuple(records)


def _pieces(template: Template, bindings: Mapping[str, dict]) -> list[Piece]:
    out = []
    for m in _PIECE_RE.finditer(template.text):
        tok = m.group()
        if tok == "[":
            out.append(Piece("open"))
        elif tok == "]":
            out.append(Piece("close"))
        elif m.group(1):
            out.append(Piece("slot", bindings[m.group(1)]["surface"], m.group(1)))
        else:
            out.append(Piece("lit", tok))
    return out


def render(template: Template, bindings: Mapping[str, dict]) -> Pair:
    pieces = _pieces(template, bindings)
    text, designations = _render_text(pieces)
    gold = _build_gold(template.gold, bindings, designations)
    return Pair(text, gold, template.template_id, template.tags, None, tuple(pieces), dict(bindings), template.gold)


def _draw(template: Template, vocab: Mapping[str, Sequence[dict]], rng: random.Random) -> dict[str, dict]:
    bindings: dict[str, dict] = {}
    by_vocab: dict[str, list[str]] = {}
    for slot, vname in template.slots:
        by_vocab.setdefault(vname, []).append(slot)
    for vname in sorted(by_vocab):
        slots = by_vocab[vname]
        entries = vocab[vname]
        if len(slots) > len(entries):
            raise TemplateError(f"{template.template_id}: vocab {vname} too small for {len(slots)} distinct slots")
        # slots sharing a vocabulary get distinct entries
        for slot, entry in zip(slots, rng.sample(range(len(entries)), len(slots))):
            bindings[slot] = entries[entry]
    return bindings


def generate(
    n: int,
    seed: int = 0,
    mix: Optional[Mapping[str, float]] = None,
    templates: Optional[TemplateSet] = None,
) -> list[Pair]:
    """``n`` pairs; each draws an entity type by ``mix`` weight, then a template tagged with it.

    Raises:
        TemplateError: bad n or weights, or no template for a weighted type.
    """
    if n < 1:
        raise TemplateError("n must be >= 1")
    ts = templates or default_templates()
    weights = dict(mix) if mix else {t: 1.0 for t in ENTITY_TYPES}
    if any(w < 0 for w in weights.values()) or not any(w > 0 for w in weights.values()):
        raise TemplateError("mix weights must be >= 0 and not all zero")
    unknown = [t for t in weights if t not in ENTITY_TYPES]
    if unknown:
        raise TemplateError(f"unknown entity types in mix: {unknown}")
    types = [t for t in ENTITY_TYPES if weights.get(t, 0) > 0]
    pools = {t: [tpl for tpl in ts.templates if t in tpl.tags] for t in types}
    empty = [t for t, pool in pools.items() if not pool]
    if empty:
        raise TemplateError(f"no template exercises {empty}")
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        etype = rng.choices(types, weights=[weights[t] for t in types])[0]
        tpl = rng.choice(pools[etype])
        out.append(render(tpl, _draw(tpl, ts.vocab, rng)))
    return out


# ---------------------------------------------------------------------------
# corruption

_KEYBOARD = "abcdefghijklmnopqrstuvwxyz"


def ocr_edit(word: str, rng: random.Random) -> str:
    """One seeded substitution, deletion or insertion inside ``word``."""
    if not word:
        return word
    pos = rng.randrange(len(word))
    op = rng.choice(("sub", "del", "ins")) if len(word) > 3 else "sub"
    if op == "sub":
        choices = [c for c in _KEYBOARD if c != word[pos].lower()]
        return word[:pos] + rng.choice(choices) + word[pos + 1:]
    if op == "del":
        return word[:pos] + word[pos + 1:]
    return word[:pos] + rng.choice(_KEYBOARD) + word[pos:]


def _rebuild(pair: Pair, pieces: list[Piece], bindings: dict[str, dict], kind: str,
             drop_gold: bool = False) -> Pair:
    text, designations = _render_text(pieces)
    gold = None if drop_gold else _build_gold(pair.gold_spec, bindings, designations)
    return replace(pair, text=text, gold=gold, corruption=kind, pieces=tuple(pieces), bindings=bindings)


def corrupt(pair: Pair, kind: str, seed: int = 0, templates: Optional[TemplateSet] = None) -> Pair:
    """Seeded corruption of a generated pair.

    ``ocr`` edits one letter of a content word (gold unchanged apart from the
    designation text). ``truncation`` removes the treatment-duration phrase and
    its gold field; without one it cuts the last slot and the gold becomes
    unrecoverable (None). ``colloquial`` rewrites a phrase into informal wording
    with the same meaning.
    """
    if kind not in CORRUPTIONS:
        raise TemplateError(f"unknown corruption {kind!r}")
    if not pair.pieces:
        raise TemplateError("only freshly generated pairs can be corrupted")
    rng = random.Random(f"{seed}:{kind}:{pair.text}")
    pieces = list(pair.pieces)
    bindings = dict(pair.bindings)

    if kind == "ocr":
        sites = [
            (i, m.start(), m.end())
            for i, p in enumerate(pieces) if p.kind == "slot"
            for m in re.finditer(r"[^\W\d_]{4,}", p.text)
        ]
        if not sites:
            return replace(pair, corruption=kind)
        i, s, e = rng.choice(sites)
        p = pieces[i]
        new = p.text[:s] + ocr_edit(p.text[s:e], rng) + p.text[e:]
        pieces[i] = replace(p, text=new)
        bindings[p.slot] = {**bindings[p.slot], "surface": new}
        return _rebuild(pair, pieces, bindings, kind)

    if kind == "truncation":
        bounds = [i for i, p in enumerate(pieces) if p.kind == "slot" and _is_bounds(pair, p.slot)]
        if bounds:
            i = bounds[-1]
            slot = pieces[i].slot
            pieces[i] = replace(pieces[i], text="")
            del bindings[slot]
            return _rebuild(pair, pieces, bindings, kind)
        content = [i for i, p in enumerate(pieces) if p.kind == "slot" and p.slot not in ("pre", "end") and p.text.strip()]
        if not content:
            return replace(pair, corruption=kind)
        i = content[-1]
        words = pieces[i].text.split()
        pieces[i] = replace(pieces[i], text=" ".join(words[:-1]))
        return _rebuild(pair, pieces, bindings, kind, drop_gold=True)

    ts = templates or default_templates()
    options = [
        (i, a, b) for i, p in enumerate(pieces) if p.kind == "slot"
        for a, b in ts.colloquial if re.search(rf"(?<!\w){re.escape(a)}(?!\w)", p.text)
    ]
    if not options:
        return replace(pair, corruption=kind)
    i, a, b = rng.choice(options)
    p = pieces[i]
    new = re.sub(rf"(?<!\w){re.escape(a)}(?!\w)", b, p.text, count=1)
    pieces[i] = replace(p, text=new)
    bindings[p.slot] = {**bindings[p.slot], "surface": new}
    return _rebuild(pair, pieces, bindings, kind)


def _is_bounds(pair: Pair, slot: str) -> bool:
    """True when the slot only feeds timing.bounds_* fields of the gold."""
    refs: list[str] = []

    def walk(node: Any, path: str) -> None:
        if isinstance(node, dict):
            for k, v in node.items():
                walk(v, f"{path}.{k}" if path else k)
        elif isinstance(node, list):
            for v in node:
                walk(v, path)
        elif isinstance(node, str):
            for m in _REF_RE.finditer(node):
                if m.group(1) == slot:
                    refs.append(path)

    for rec in pair.gold_spec:
        walk(rec, "")
    return bool(refs) and all(r.startswith(("timing.bounds_duration", "timing.bounds_period")) for r in refs)


def mixed_corpus(n_clean: int, n_corrupt: int, seed: int = 0, mix: Optional[Mapping[str, float]] = None) -> list[Pair]:
    """Clean pairs followed by corrupted ones, corruption kinds in rotation."""
    clean = generate(n_clean, seed, mix)
    base = generate(n_corrupt, seed + 1, mix)
    corrupted = [corrupt(p, CORRUPTIONS[i % len(CORRUPTIONS)], seed + i) for i, p in enumerate(base)]
    return clean + corrupted


# ---------------------------------------------------------------------------
# confidence filtering


@dataclass(frozen=True)
class FilterResult:
    retained: tuple[Pair, ...]
    scores: tuple[float, ...]
    retention_rate: float


def filter_by_confidence(
    pairs: Sequence[Pair],
    model: Any,
    floor: float,
    structure: Optional[Callable[[str], Sequence[PosologyStructure]]] = None,
) -> FilterResult:
    """Keep pairs whose pipeline output scores strictly above ``floor``."""
    from .confidence import score_output
    from .pipeline import Nerl

    run = structure or (lambda q, _n=Nerl(): _n.structure(q).records)
    scores = []
    kept = []
    for p in pairs:
        s = score_output(model, p.text, list(run(p.text))).score
        scores.append(s)
        if s > floor:
            kept.append(p)
    rate = len(kept) / len(pairs) if pairs else 0.0
    return FilterResult(tuple(kept), tuple(scores), rate)


def write_jsonl(pairs: Iterable[Pair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
