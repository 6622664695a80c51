"""The deterministic structuring pipeline: normalize, recognize, link, compose."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import nel
from .composer import CompositionRules, compose_with_warnings
from .ner import Entity, Recognizer, RuleRecognizer
from .normalizer import Lexicon, NormalizedText, normalize
from .schema import PosologyStructure


@dataclass(frozen=True)
class NerlResult:
    query: str
    normalized: NormalizedText
    entities: tuple[Entity, ...]
    records: tuple[PosologyStructure, ...]
    warnings: tuple[str, ...] = ()

    @property
    def unstructurable(self) -> bool:
        return not self.records


@dataclass(frozen=True)
class Nerl:
    """Normalizer, recognizer, unit linker and composer wired together.

    Every component is immutable after construction, so one instance can serve
    concurrent callers.
    """

    lexicon: Optional[Lexicon] = None
    recognizer: Recognizer = field(default_factory=RuleRecognizer)
    composition: Optional[CompositionRules] = None
    catalog: Optional[tuple[nel.UnitConcept, ...]] = None
    table: Optional[nel.VectorTable] = None
    link_units: bool = True
    similarity_floor: float = nel.SIMILARITY_FLOOR

    def _linker(self, token: str) -> Optional[tuple[str, str]]:
        catalog = self.catalog if self.catalog is not None else nel.default_catalog()
        try:
            links = nel.link_token(token, catalog, k=1, table=self.table)
        except nel.LinkingError:
            return None
        concept = nel.best_concept(links, self.similarity_floor)
        return None if concept is None else (concept.code, concept.canonical_label)

    def structure(self, query: str) -> NerlResult:
        text = normalize(query, self.lexicon)
        entities = self.recognizer.recognize(text)
        result = compose_with_warnings(
            entities, text, self.composition, self._linker if self.link_units else None,
        )
        return NerlResult(query, text, tuple(entities), result.records, result.warnings)


def structure(query: str) -> list[PosologyStructure]:
    """Records for one query with the shipped resources."""
    return list(Nerl().structure(query).records)
