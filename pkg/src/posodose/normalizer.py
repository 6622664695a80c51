"""Query text repair before entity recognition.

The normalized text is lowercased and accent-folded so that recognition rules
can be written once. Clock times and dates pass through untouched apart from
case. Every change keeps an alignment back to the raw text so that spans found
in the normalized text can be reported in the user's own wording.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Optional

from .schema import fold

RepairKind = Literal["abbreviation", "ocr", "punctuation"]

# kept as tokens; every other punctuation mark is dropped
KEPT_PUNCT = frozenset(",;:()/+-=")

_TOKEN_RE = re.compile(
    r"""
    (?P<date>\d{1,2}/\d{1,2}/\d{4}(?!\d))
  | (?P<clock>\d{1,2}:\d{2}(?::\d{2})?(?!\d)|\d{1,2}\s?[hH](?:\s?\d{2}(?!\d))?(?![^\W\d_]))
  | (?P<frac>\d+/\d+(?![\d/]))
  | (?P<number>\d+(?:[.,]\d+)?)
  | (?P<word>[^\W\d_]+(?:['’][^\W\d_]+)*(?:-[^\W\d_]+)*['’]?)
  | (?P<punct>\S)
    """,
    re.VERBOSE,
)

_STOPWORDS = frozenset(
    """
    a au aux avec ce ces cet cette dans de des du elle en et est il ils je la le les leur lui ma me
    mes moi mon ne nos notre nous on ou par pas pour qu que qui sa se ses si son sur ta te tes toi ton
    tu un une vos votre vous y l d j m n s t c ca ou donc car mais ni or puis alors
    tous tout toute toutes chaque jusqu jusqu'a jusqu'au lors lorsque quand comme plus moins tres
    bien peu fin debut entre sans sous vers chez depuis apres avant pendant durant
    voir pour foie soit sois mois moi nuit fuit midi mini soir noir voir loin fois foi jour pour tour
    cour cours court dose doses prise prises prend prends prendre prenez prise boire
    eau verre lait repas heure heures semaine demi moitie quart matin fin faim
    jeun vide plein selon suivant ensuite reprendre arreter stop arret
    oral orale voie cutanee application local locale
    """.split()
)

_FRENCH_UNITS = [
    "zero", "un", "deux", "trois", "quatre", "cinq", "six", "sept", "huit", "neuf", "dix",
    "onze", "douze", "treize", "quatorze", "quinze", "seize",
]
_FRENCH_TENS = {20: "vingt", 30: "trente", 40: "quarante", 50: "cinquante", 60: "soixante"}


def _french_numeral_table() -> dict[str, int]:
    def words(n: int) -> list[str]:
        if n <= 16:
            return [_FRENCH_UNITS[n]]
        if n < 20:
            return ["dix " + _FRENCH_UNITS[n - 10]]
        if n == 100:
            return ["cent"]
        if n < 70:
            tens, unit = divmod(n, 10)
            base = _FRENCH_TENS[tens * 10]
            if unit == 0:
                return [base]
            if unit == 1:
                return [f"{base} et un", f"{base} un"]
            return [f"{base} {w}" for w in words(unit)]
        if n < 80:
            rest = n - 60
            if rest == 11:
                return ["soixante et onze", "soixante onze"]
            return [f"soixante {w}" for w in words(rest)]
        rest = n - 80
        if rest == 0:
            return ["quatre vingt", "quatre vingts"]
        return [f"quatre vingt {w}" for w in words(rest)]

    table: dict[str, int] = {}
    for n in range(101):
        for w in words(n):
            table[w] = n
            if w.endswith(" un") or w == "un":
                table[w[:-2] + "une"] = n
            table[w.replace(" et ", " ")] = n
    table["une"] = 1
    return table


NUMERALS = _french_numeral_table()
_MAX_NUMERAL_WORDS = max(len(k.split()) for k in NUMERALS)


@dataclass(frozen=True)
class Repair:
    raw_span: tuple[int, int]
    replacement: str
    kind: RepairKind


@dataclass(frozen=True)
class NormalizedText:
    raw: str
    normalized: str
    char_map: tuple[int, ...]
    repairs: tuple[Repair, ...] = ()

    def raw_span(self, start: int, end: int) -> tuple[int, int]:
        """Raw offsets covering the normalized span ``[start, end)``."""
        if start >= end:
            pos = self.char_map[start]
            return pos, pos
        raw_start = self.char_map[start]
        # end of the last covered char, so partially-mapped replacements stay whole
        raw_end = max(self.char_map[end], self.char_map[end - 1] + 1)
        return raw_start, min(raw_end, len(self.raw))

    def raw_text(self, start: int, end: int) -> str:
        s, e = self.raw_span(start, end)
        return self.raw[s:e]

    def tokens(self) -> list[tuple[int, int, str]]:
        """Whitespace-separated tokens of the normalized text with offsets."""
        return [(m.start(), m.end(), m.group()) for m in re.finditer(r"\S+", self.normalized)]


@dataclass(frozen=True)
class Lexicon:
    """Immutable abbreviation table plus protected vocabulary."""

    expansions: dict[str, str] = field(default_factory=dict)
    kept: dict[str, str] = field(default_factory=dict)
    vocabulary: frozenset[str] = frozenset()

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Lexicon":
        expansions: dict[str, str] = {}
        kept: dict[str, str] = {}
        vocab: set[str] = set()
        for lineno, line in enumerate(lines, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            key = fold(cols[0].strip())
            if len(cols) == 1:
                vocab.add(key)
            elif len(cols) == 2:
                expansions[key] = fold(cols[1].strip())
            elif len(cols) == 3 and cols[2].strip() == "keep":
                kept[key] = cols[1].strip()
            else:
                raise ValueError(f"lexicon line {lineno}: expected 1 to 3 tab-separated columns")
        return cls(expansions, kept, frozenset(vocab))

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "Lexicon":
        if path is None:
            text = resources.files("posodose.data").joinpath("lexicon.tsv").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_lines(text.splitlines())

    @cached_property
    def protected(self) -> frozenset[str]:
        words = set(self.vocabulary) | set(self.expansions) | set(self.kept) | _STOPWORDS
        for expansion in self.expansions.values():
            words.update(expansion.split())
        return frozenset(words)

    def ocr_candidate(self, token: str) -> Optional[str]:
        """Vocabulary word one edit away from ``token``, if ``token`` looks corrupted."""
        return _ocr_candidate(self, token)


@lru_cache(maxsize=4096)
def _ocr_candidate_cached(vocab: frozenset[str], protected: frozenset[str], token: str) -> Optional[str]:
    if len(token) < 4 or token in protected or not token.isalpha():
        return None
    hits = [w for w in vocab if len(w) >= 4 and edit_distance_le1(token, w)]
    if not hits:
        return None
    hits.sort(key=lambda w: (len(w) != len(token), w))
    return hits[0]


def _ocr_candidate(lex: Lexicon, token: str) -> Optional[str]:
    return _ocr_candidate_cached(lex.vocabulary, lex.protected, token)


def edit_distance_le1(a: str, b: str) -> bool:
    """True when a and b differ by at most one insertion, deletion or substitution."""
    if a == b:
        return True
    la, lb = len(a), len(b)
    if abs(la - lb) > 1:
        return False
    if la == lb:
        return sum(x != y for x, y in zip(a, b)) == 1
    if la > lb:
        a, b, la, lb = b, a, lb, la
    i = 0
    while i < la and a[i] == b[i]:
        i += 1
    return a[i:] == b[i + 1:]


_DEFAULT_LEXICON: Optional[Lexicon] = None


def default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = Lexicon.load()
    return _DEFAULT_LEXICON


def _fold_keep(text: str) -> str:
    # fold() but keep the micro sign, which NFD leaves alone anyway
    text = text.replace("’", "'")
    return "".join(c for c in unicodedata.normalize("NFD", text.lower()) if not unicodedata.combining(c))


def normalize(raw: str, lexicon: Optional[Lexicon] = None) -> NormalizedText:
    """Lowercase, fold accents, expand abbreviations, convert numerals and repair OCR typos."""
    lex = lexicon or default_lexicon()
    raw = unicodedata.normalize("NFC", raw)
    raw_tokens: list[tuple[str, int, int, str]] = []
    for m in _TOKEN_RE.finditer(raw):
        kind = m.lastgroup or "punct"
        raw_tokens.append((kind, m.start(), m.end(), m.group()))

    repairs: list[Repair] = []
    # each output piece: (text, raw_start, raw_end)
    pieces: list[tuple[str, int, int]] = []
    i = 0
    while i < len(raw_tokens):
        kind, s, e, text = raw_tokens[i]
        if kind == "word":
            n, consumed = _match_numeral(raw_tokens, i)
            if consumed:
                end = raw_tokens[i + consumed - 1][2]
                pieces.append((str(n), s, end))
                i += consumed
                continue
            low = _fold_keep(text)
            if low in lex.expansions:
                replacement = lex.expansions[low]
                repairs.append(Repair((s, e), replacement, "abbreviation"))
                pieces.append((replacement, s, e))
            elif low in lex.kept:
                repairs.append(Repair((s, e), lex.kept[low], "abbreviation"))
                pieces.append((low, s, e))
            else:
                fixed = lex.ocr_candidate(low)
                if fixed is not None:
                    repairs.append(Repair((s, e), fixed, "ocr"))
                    pieces.append((fixed, s, e))
                else:
                    pieces.append((low, s, e))
        elif kind == "number":
            if "," in text:
                repairs.append(Repair((s, e), text.replace(",", "."), "punctuation"))
            pieces.append((text.replace(",", "."), s, e))
        elif kind == "clock":
            pieces.append((re.sub(r"\s+", "", text.lower()), s, e))
        elif kind in ("date", "frac"):
            pieces.append((text, s, e))
        else:
            if text == "½":
                pieces.append(("1/2", s, e))
            elif text in KEPT_PUNCT:
                pieces.append((text, s, e))
            elif text == "’" or text == "'":
                repairs.append(Repair((s, e), "", "punctuation"))
            else:
                repairs.append(Repair((s, e), "", "punctuation"))
        i += 1

    out: list[str] = []
    char_map: list[int] = []
    prev_end: Optional[int] = None
    for text, s, e in pieces:
        if prev_end is not None and s > prev_end:
            out.append(" ")
            char_map.append(prev_end)
        n = len(text)
        span = e - s
        for k in range(n):
            char_map.append(s + (k * span) // n if n else s)
            out.append(text[k])
        prev_end = e
    char_map.append(prev_end if prev_end is not None else len(raw))
    normalized = "".join(out)
    return NormalizedText(raw, normalized, tuple(char_map), tuple(repairs))


def _match_numeral(tokens: list[tuple[str, int, int, str]], i: int) -> tuple[int, int]:
    """Longest run of word tokens starting at i that spells a French numeral."""
    best = (0, 0)
    words: list[str] = []
    for j in range(i, min(len(tokens), i + _MAX_NUMERAL_WORDS)):
        kind, _, _, text = tokens[j]
        if kind != "word":
            break
        words.extend(_fold_keep(text).replace("-", " ").split())
        key = " ".join(words)
        if key in NUMERALS:
            best = (NUMERALS[key], j - i + 1)
    return best
