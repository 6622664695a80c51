from __future__ import annotations

import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posodose import nel
from posodose.ner import Entity


def _oracle_embed(phrase: str, table: nel.VectorTable) -> list[float]:
    # plain-python re-derivation of the phrase vector: mean of n-gram means, then unit norm
    rows = []
    for token in phrase.split():
        grams = [table.vectors[g] for g in nel.char_ngrams(token) if g in table.vectors]
        rows.append([sum(col) / len(grams) for col in zip(*grams)])
    mean = [sum(col) / len(rows) for col in zip(*rows)]
    norm = math.sqrt(sum(x * x for x in mean))
    return [x / norm for x in mean]


def _oracle_cosine(a: str, b: str) -> float:
    table = nel.default_table()
    va, vb = _oracle_embed(a, table), _oracle_embed(b, table)
    return sum(x * y for x, y in zip(va, vb))


class TestEmbedding:
    def test_ngrams(self):
        assert nel.char_ngrams("cp") == ["<cp", "cp>", "<cp>"]

    def test_pinned_similarities(self):
        close = nel.cosine(nel.embed("ampoule"), nel.embed("ampoules"))
        far = nel.cosine(nel.embed("ampoule"), nel.embed("comprimé"))
        assert close == pytest.approx(0.8169672586853505, abs=1e-12)
        assert far == pytest.approx(-0.13184173669887272, abs=1e-12)
        assert close == pytest.approx(_oracle_cosine("ampoule", "ampoules"), abs=1e-9)
        assert far == pytest.approx(_oracle_cosine("ampoule", "comprime"), abs=1e-9)

    def test_unit_norm(self):
        assert np.linalg.norm(nel.embed("gélule")) == pytest.approx(1.0)

    @pytest.mark.parametrize("phrase", ["", "   ", "xyz"])
    def test_unembeddable(self, phrase):
        with pytest.raises(nel.UnembeddableError):
            nel.embed(phrase)

    def test_table_text_round_trip(self):
        table = nel.hashed_ngram_table(["cp", "dose"], dim=4)
        again = nel.VectorTable.from_text(table.to_text())
        assert again.dim == 4 and set(again.vectors) == set(table.vectors)

    def test_table_header_mismatch(self):
        with pytest.raises(ValueError, match="header"):
            nel.VectorTable.from_text("3 2\na 1 2\n")

    def test_shipped_table_matches_builder(self):
        # the shipped file is a frozen output of the deterministic builder
        table = nel.default_table()
        rebuilt = nel.hashed_ngram_table(["ampoule"], dim=table.dim)
        for gram, vec in rebuilt.vectors.items():
            np.testing.assert_allclose(table.vectors[gram], vec, atol=1e-5)


class TestLinking:
    @pytest.mark.parametrize("token,label,method", [
        ("cp", "comprimé(s)", "exact"),
        ("cpr", "comprimé(s)", "exact"),
        ("gelules", "gélule(s)", "exact"),
        ("sachets", "sachet(s)", "exact"),
        ("ampoulle", "ampoule(s)", "edit"),
        ("ml", "ml", "exact"),
    ])
    def test_top_link(self, token, label, method):
        (top,) = nel.link_token(token, nel.default_catalog())
        assert (top.concept.canonical_label, top.method) == (label, method)

    def test_catalog_codes(self):
        codes = {c.canonical_label: c.code for c in nel.default_catalog()}
        assert codes["comprimé(s)"] == "732936001"
        assert codes["gélule(s)"] == "732937005"

    def test_floor_rejects_weak_embedding_match(self):
        links = nel.link_token("bonjour", nel.default_catalog(), k=2)
        assert links and links[0].similarity < nel.SIMILARITY_FLOOR
        assert nel.best_concept(links) is None

    def test_unembeddable_token_has_no_candidates(self):
        assert nel.link_token("xyz", nel.default_catalog()) == []
        assert nel.best_concept([]) is None

    def test_entity_link(self):
        e = Entity("DOSE", (0, 4), "2 cp", {"value": Decimal(2), "unit_token": "cp"})
        assert nel.link(e)[0].concept.code == "732936001"

    def test_entity_without_unit(self):
        with pytest.raises(nel.LinkingError):
            nel.link(Entity("WHEN", (0, 8), "le matin", {}))

    def test_empty_catalog(self):
        with pytest.raises(nel.LinkingError):
            nel.link_token("cp", [])

    def test_duplicate_label(self):
        with pytest.raises(ValueError, match="duplicate"):
            nel.build_catalog([{"code": "1", "canonical_label": "x"}, {"code": "2", "canonical_label": "x"}])

    @given(st.sampled_from([c.canonical_label for c in nel.default_catalog()]))
    def test_canonical_label_links_to_itself(self, label):
        (top,) = nel.link_token(label, nel.default_catalog())
        assert top.concept.canonical_label == label and top.similarity == 1.0

    @given(st.text("abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=10), st.integers(1, 5))
    def test_ranking_shape(self, token, k):
        links = nel.link_token(token, nel.default_catalog(), k=k)
        assert len(links) <= k
        assert links == nel.link_token(token, nel.default_catalog(), k=k)
        for link in links:
            assert -1.0 - 1e-9 <= link.similarity <= 1.0 + 1e-9
