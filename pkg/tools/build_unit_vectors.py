"""Build the shipped unit vector table and its manifest.

The table holds deterministic hashed character n-gram vectors for every name in
the unit catalog and every vocabulary word of the lexicon. Rerunning the script
reproduces the files byte for byte.

Usage: python3 tools/build_unit_vectors.py [--dim 32] [--seed posodose-v1]
"""

from __future__ import annotations

import argparse
import hashlib
import json
from pathlib import Path

from posodose.nel import NGRAM_SIZES, hashed_ngram_table
from posodose.normalizer import Lexicon

DATA = Path(__file__).resolve().parents[1] / "src" / "posodose" / "data"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--seed", default="posodose-v1")
    args = parser.parse_args()

    catalog = json.loads((DATA / "unit_catalog.json").read_text(encoding="utf-8"))
    words = set()
    for entry in catalog:
        words.add(entry["canonical_label"])
        words.update(entry.get("synonyms", []))
    lexicon = Lexicon.load(DATA / "lexicon.tsv")
    words.update(lexicon.vocabulary)
    table = hashed_ngram_table(sorted(words), dim=args.dim, seed=args.seed)
    text = table.to_text()
    (DATA / "unit_vectors.vec").write_text(text, encoding="utf-8")
    manifest = {
        "file": "unit_vectors.vec",
        "dimension": args.dim,
        "entries": len(table.vectors),
        "source": "hashed character n-grams over catalog names and lexicon vocabulary",
        "ngram_sizes": list(NGRAM_SIZES),
        "seed": args.seed,
        "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
    }
    (DATA / "unit_vectors.manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(table.vectors)} vectors of dimension {args.dim}")


if __name__ == "__main__":
    main()
