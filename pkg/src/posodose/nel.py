"""Linking of dose-unit tokens to terminology concepts.

Phrases are embedded with a word-vector table in the usual text format
(``token v1 v2 ...`` per line). Tokens missing from the table are composed from
their character n-grams (``<am``, ``amp`` ... ``le>``), which the table also
stores, so inflected and slightly misspelled units still land near their
concept. Candidates are ranked by cosine similarity after an exact-match and a
single-edit synonym pass.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ner import Entity
from .normalizer import edit_distance_le1
from .schema import fold

SIMILARITY_FLOOR = 0.4
NGRAM_SIZES = (3, 4, 5)


class UnembeddableError(ValueError):
    """No token of the phrase could be resolved in the vector table."""


class LinkingError(ValueError):
    pass


def char_ngrams(word: str, sizes: Iterable[int] = NGRAM_SIZES) -> list[str]:
    padded = f"<{word}>"
    grams = []
    for n in sizes:
        grams.extend(padded[i:i + n] for i in range(len(padded) - n + 1))
    return grams


@dataclass(frozen=True)
class VectorTable:
    """Immutable token -> vector table."""

    dim: int
    vectors: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def from_text(cls, text: str) -> "VectorTable":
        lines = text.splitlines()
        header = lines[0].split()
        count, dim = int(header[0]), int(header[1])
        vectors: dict[str, np.ndarray] = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                raise ValueError(f"vector row for {parts[0]!r} has {len(parts) - 1} values, expected {dim}")
            vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            vec.setflags(write=False)
            vectors[parts[0]] = vec
        if len(vectors) != count:
            raise ValueError(f"header announces {count} vectors, found {len(vectors)}")
        return cls(dim, vectors)

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "VectorTable":
        if path is None:
            text = resources.files("posodose.data").joinpath("unit_vectors.vec").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_text(text)

    def token_vector(self, token: str) -> Optional[np.ndarray]:
        if token in self.vectors:
            return self.vectors[token]
        grams = [self.vectors[g] for g in char_ngrams(token) if g in self.vectors]
        if not grams:
            return None
        return np.mean(grams, axis=0)

    def embed(self, phrase: str) -> np.ndarray:
        tokens = fold(phrase).replace("(s)", "").split()
        vecs = [v for v in (self.token_vector(t) for t in tokens) if v is not None]
        if not vecs:
            raise UnembeddableError(f"unembeddable phrase {phrase!r}")
        mean = np.mean(vecs, axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise UnembeddableError(f"unembeddable phrase {phrase!r}")
        return mean / norm

    def to_text(self) -> str:
        rows = [f"{len(self.vectors)} {self.dim}"]
        for token in sorted(self.vectors):
            rows.append(token + " " + " ".join(f"{x:.5f}" for x in self.vectors[token]))
        return "\n".join(rows) + "\n"


def hashed_ngram_table(words: Iterable[str], dim: int = 32, seed: str = "posodose-v1") -> VectorTable:
    """Deterministic n-gram vectors for a vocabulary (used to build the shipped table)."""
    vectors: dict[str, np.ndarray] = {}
    for word in words:
        for token in fold(word).replace("(s)", "").split():
            for gram in char_ngrams(token):
                if gram in vectors:
                    continue
                digest = hashlib.sha256(f"{seed}:{gram}".encode("utf-8")).digest()
                rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
                vectors[gram] = np.round(rng.standard_normal(dim), 5)
    return VectorTable(dim, vectors)


_DEFAULT_TABLE: Optional[VectorTable] = None


def default_table() -> VectorTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = VectorTable.load()
    return _DEFAULT_TABLE


def embed(phrase: str, table: Optional[VectorTable] = None) -> np.ndarray:
    if not phrase.strip():
        raise UnembeddableError("empty phrase")
    return (table or default_table()).embed(phrase)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class UnitConcept:
    code: str
    canonical_label: str
    synonyms: tuple[str, ...]
    vector: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def names(self) -> tuple[str, ...]:
        return (self.canonical_label, *self.synonyms)


@dataclass(frozen=True)
class Link:
    concept: UnitConcept
    similarity: float
    method: str  # exact | edit | embedding


def build_catalog(entries: Sequence[dict], table: Optional[VectorTable] = None) -> list[UnitConcept]:
    table = table or default_table()
    labels = set()
    out = []
    for entry in entries:
        label = entry["canonical_label"]
        if label in labels:
            raise ValueError(f"duplicate canonical_label {label!r}")
        labels.add(label)
        names = [label, *entry.get("synonyms", [])]
        vecs = []
        for name in names:
            try:
                vecs.append(table.embed(name))
            except UnembeddableError:
                continue
        vector = None
        if vecs:
            mean = np.mean(vecs, axis=0)
            vector = mean / np.linalg.norm(mean)
            vector.setflags(write=False)
        out.append(UnitConcept(str(entry["code"]), label, tuple(entry.get("synonyms", [])), vector))
    return out


def load_catalog(path: Optional[str | Path] = None, table: Optional[VectorTable] = None) -> list[UnitConcept]:
    if path is None:
        text = resources.files("posodose.data").joinpath("unit_catalog.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return build_catalog(json.loads(text), table)


_DEFAULT_CATALOG: Optional[list[UnitConcept]] = None


def default_catalog() -> list[UnitConcept]:
    global _DEFAULT_CATALOG
    if _DEFAULT_CATALOG is None:
        _DEFAULT_CATALOG = load_catalog()
    return _DEFAULT_CATALOG


def link_token(
    token: str,
    catalog: Sequence[UnitConcept],
    k: int = 1,
    table: Optional[VectorTable] = None,
) -> list[Link]:
    """Rank catalog concepts for a unit token: exact synonym, then one-edit synonym, then cosine."""
    if not catalog:
        raise LinkingError("empty catalog")
    if k < 1:
        raise ValueError("k must be >= 1")
    table = table or default_table()
    key = " ".join(fold(token).split())
    try:
        query = table.embed(token)
    except UnembeddableError:
        query = None

    ranked = []
    for concept in catalog:
        names = [" ".join(fold(n).split()) for n in concept.names()]
        sim = cosine(query, concept.vector) if query is not None and concept.vector is not None else None
        if key in names:
            ranked.append((0, -1.0, concept.canonical_label, Link(concept, 1.0, "exact")))
        elif any(len(n) >= 4 and edit_distance_le1(key, n) for n in names):
            ranked.append((1, -(sim or 0.0), concept.canonical_label, Link(concept, sim or 0.0, "edit")))
        elif sim is not None:
            ranked.append((2, -sim, concept.canonical_label, Link(concept, sim, "embedding")))
    ranked.sort(key=lambda r: r[:3])
    return [r[3] for r in ranked[:k]]


def link(
    entity: Entity,
    catalog: Optional[Sequence[UnitConcept]] = None,
    k: int = 1,
    table: Optional[VectorTable] = None,
) -> list[Link]:
    token = entity.attributes.get("unit_token")
    if entity.entity_type not in ("DOSE", "FORM", "STRENGTH") or not token:
        raise LinkingError(f"{entity.entity_type} entity has no unit token to link")
    return link_token(token, default_catalog() if catalog is None else catalog, k, table)


def best_concept(links: Sequence[Link], floor: float = SIMILARITY_FLOOR) -> Optional[UnitConcept]:
    """Top concept, or None when the best candidate is an embedding match under the floor."""
    if not links:
        return None
    top = links[0]
    if top.method == "embedding" and top.similarity < floor:
        return None
    return top.concept
