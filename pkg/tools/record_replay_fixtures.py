"""Record replay fixtures for hermetic routing tests.

The recorded backend answers each prompt with the synthetic gold records of
its query (a well-behaved model), or with a refusal when the gold is
unrecoverable. Queries come from a seed-fixed synthgen mixed corpus; the query
list is written next to the fixtures as ``queries.jsonl``.

Fixtures are keyed by the request body, so they must be re-recorded whenever
the prompt bundle or the schema description changes.

Usage:
    python tools/record_replay_fixtures.py [--out tests/fixtures/replay] [--n 50] [--seed 11]
"""

from __future__ import annotations

import argparse
import json
import shutil
from pathlib import Path

from posodose import llm_gateway as gw
from posodose import synthgen

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "replay"
MODEL_NAME = "replay-gold"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    half = args.n // 2
    pairs = synthgen.mixed_corpus(half, args.n - half, args.seed)
    answers = {p.text: p.gold for p in pairs}

    def respond(prompt: str) -> str:
        gold = answers[gw.query_from_prompt(prompt)]
        return gw.REFUSAL if gold is None else "Structured output:\n" + gw.render(gold) + "\n"

    if args.out.exists():
        shutil.rmtree(args.out)
    replay = gw.ReplayAdapter(args.out, record=gw.MockAdapter(respond))
    descriptor = gw.BackendDescriptor(f"replay://{args.out}", model_name=MODEL_NAME)
    bundle = gw.default_bundle()
    for p in pairs:
        gw.call(descriptor, gw.assemble_prompt(bundle, p.text), bundle.generation_params, replay)
    with open(args.out / "queries.jsonl", "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"query": p.text}, ensure_ascii=False) + "\n")
    print(f"recorded {len(pairs)} replies in {args.out}")


if __name__ == "__main__":
    main()
