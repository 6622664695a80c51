"""Build the shipped confidence model from a synthetic labelled corpus.

Each synthetic pair (clean or corrupted) is run through the rule pipeline and
labelled correct when the output matches the gold records under the
evaluator's exact-match rule. Corrupted pairs whose gold is unrecoverable are
always labelled incorrect.

Usage:
    python tools/train_confidence_model.py [--clean 600] [--corrupt 600] [--seed 1000]
        [--out src/posodose/data/confidence_model.json] [--examples-out FILE]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from posodose import confidence, evaluator, synthgen
from posodose.pipeline import Nerl

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "src" / "posodose" / "data" / "confidence_model.json"


def labelled_examples(n_clean: int, n_corrupt: int, seed: int) -> list[confidence.Example]:
    nerl = Nerl()
    out = []
    for pair in synthgen.mixed_corpus(n_clean, n_corrupt, seed):
        records = nerl.structure(pair.text).records
        correct = pair.gold is not None and evaluator.compare(records, pair.gold).correct
        out.append(confidence.Example(pair.text, tuple(records), correct))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clean", type=int, default=600)
    ap.add_argument("--corrupt", type=int, default=600)
    ap.add_argument("--seed", type=int, default=1000)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    ap.add_argument("--examples-out", type=Path)
    args = ap.parse_args()

    examples = labelled_examples(args.clean, args.corrupt, args.seed)
    if args.examples_out:
        with open(args.examples_out, "w", encoding="utf-8") as fh:
            for e in examples:
                fh.write(json.dumps(e.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
    model = confidence.train(examples, confidence.TrainConfig(seed=args.seed))
    model.manifest["source"] = (
        f"synthetic substitute: synthgen mixed corpus, {args.clean} clean + {args.corrupt} corrupted, seed {args.seed}"
    )
    model.save(args.out)
    positives = sum(e.correct for e in examples)
    print(f"{len(examples)} examples, {positives} labelled correct -> {args.out}")


if __name__ == "__main__":
    main()
