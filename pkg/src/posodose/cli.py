"""Command-line entry point.

Machine-readable output goes to stdout, diagnostics to stderr. Exit codes:
0 success, 1 input error (missing or malformed input file, bad query),
2 configuration error (unreadable config, invalid settings, missing
resource file, bad arguments).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from datetime import date
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from . import __version__

log = logging.getLogger("posodose")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONFIG = 2

PATH_KEYS = (
    "ner_rules", "composition_rules", "lexicon", "unit_catalog",
    "unit_vectors", "confidence_model", "prompt_bundle",
)


class InputError(Exception):
    """Bad user input; exit code 1."""


class ConfigError(Exception):
    """Bad configuration; exit code 2."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class AppConfig:
    paths: dict[str, Optional[Path]] = field(default_factory=dict)
    threshold: float = 0.8
    llm_enabled: bool = False
    backend: Optional[dict[str, Any]] = None
    backends: dict[str, dict[str, Any]] = field(default_factory=dict)
    log_level: str = "WARNING"
    jobs: int = 1

    @classmethod
    def from_mapping(cls, doc: Any, base: Path = Path(".")) -> "AppConfig":
        if doc is None:
            doc = {}
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a mapping")
        known = {"paths", "router", "backend", "backends", "log_level", "jobs"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        raw_paths = doc.get("paths") or {}
        bad = set(raw_paths) - set(PATH_KEYS)
        if bad:
            raise ConfigError(f"unknown path keys: {', '.join(sorted(bad))}")
        paths: dict[str, Optional[Path]] = {}
        for key in PATH_KEYS:
            value = raw_paths.get(key)
            if value:
                p = Path(value)
                p = p if p.is_absolute() else base / p
                if not p.is_file():
                    raise ConfigError(f"paths.{key}: file not found: {p}")
                paths[key] = p
            else:
                paths[key] = None
        router = doc.get("router") or {}
        try:
            threshold = float(router.get("threshold", 0.8))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"router.threshold: {exc}") from exc
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError(f"router.threshold must be in [0, 1], got {threshold}")
        backend = doc.get("backend")
        if backend is not None and not isinstance(backend, Mapping):
            raise ConfigError("backend must be a mapping")
        backends = doc.get("backends") or {}
        if not isinstance(backends, Mapping):
            raise ConfigError("backends must be a mapping of name to backend")
        jobs = doc.get("jobs", 1)
        if not isinstance(jobs, int) or jobs < 1:
            raise ConfigError("jobs must be a positive integer")
        return cls(
            paths=paths,
            threshold=threshold,
            llm_enabled=bool(router.get("llm_enabled", False)),
            backend=dict(backend) if backend else None,
            backends={str(k): dict(v) for k, v in backends.items()},
            log_level=str(doc.get("log_level", "WARNING")).upper(),
            jobs=jobs,
        )

    @classmethod
    def load(cls, path: Optional[Path]) -> "AppConfig":
        if path is None:
            text = resources.files("posodose.data").joinpath("config.yaml").read_text(encoding="utf-8")
            return cls.from_mapping(yaml.safe_load(text))
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_mapping(doc, Path(path).parent)


def _descriptor(doc: Mapping[str, Any]):
    from .llm_gateway import BackendDescriptor

    try:
        return BackendDescriptor.from_mapping(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"backend: {exc}") from exc


def build_nerl(cfg: AppConfig):
    from . import composer, nel, ner, normalizer
    from .pipeline import Nerl

    p = cfg.paths
    try:
        table = nel.VectorTable.load(p["unit_vectors"]) if p.get("unit_vectors") else None
        catalog = None
        if p.get("unit_catalog") or table is not None:
            catalog = tuple(nel.load_catalog(p.get("unit_catalog"), table))
        return Nerl(
            lexicon=normalizer.Lexicon.load(p["lexicon"]) if p.get("lexicon") else None,
            recognizer=ner.RuleRecognizer(ner.RuleSet.load(p["ner_rules"])) if p.get("ner_rules") else ner.RuleRecognizer(),
            composition=composer.CompositionRules.load(p["composition_rules"]) if p.get("composition_rules") else None,
            catalog=catalog,
            table=table,
        )
    except (ValueError, KeyError, OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load pipeline resources: {exc}") from exc


def load_model(cfg: AppConfig):
    from .confidence import ConfidenceError, EnsembleModel

    try:
        return EnsembleModel.load(cfg.paths.get("confidence_model"))
    except (ConfidenceError, ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"cannot load confidence model: {exc}") from exc


def load_bundle(cfg: AppConfig):
    from .llm_gateway import PromptBundle

    try:
        return PromptBundle.load(cfg.paths.get("prompt_bundle"))
    except (ValueError, KeyError, TypeError, OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load prompt bundle: {exc}") from exc


# ---------------------------------------------------------------------------
# Output helpers


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, Decimal):
        return int(obj) if obj == obj.to_integral_value() else float(obj)
    if isinstance(obj, date):
        return obj.strftime("%Y/%m/%d")
    if isinstance(obj, (set, frozenset, tuple)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(doc: Any) -> str:
    return json.dumps(doc, ensure_ascii=False, sort_keys=True, default=_jsonable)


def _emit(doc: Any) -> None:
    sys.stdout.write(dumps(doc) + "\n")


def _read_queries(path: Path) -> list[dict[str, Any]]:
    """JSONL of ``{"query": ...}`` (``id`` kept), JSON strings, or plain text lines."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            doc = line
        if isinstance(doc, str):
            out.append({"query": doc})
        elif isinstance(doc, dict) and isinstance(doc.get("query", doc.get("text")), str):
            item = {"query": doc.get("query", doc.get("text"))}
            if "id" in doc:
                item["id"] = doc["id"]
            out.append(item)
        else:
            raise InputError(f"{path}:{n}: expected a query string or an object with 'query'")
    return out


def _write_lines(lines: Sequence[str], out: Optional[Path]) -> None:
    text = "".join(line + "\n" for line in lines)
    if out is None:
        sys.stdout.write(text)
    else:
        try:
            out.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot write {out}: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommands


def cmd_structure(args: argparse.Namespace, cfg: AppConfig) -> int:
    from .schema import records_to_json

    nerl = build_nerl(_with_overrides(args, cfg))
    queries = [{"query": q} for q in args.text]
    if args.input:
        queries += _read_queries(args.input)
    if not queries:
        raise InputError("no query given (pass text or --in)")
    for item in queries:
        if not item["query"].strip():
            raise InputError("empty query")
        result = nerl.structure(item["query"])
        doc = {**item, "records": records_to_json(result.records), "warnings": list(result.warnings)}
        _emit(doc)
    return EXIT_OK


def _with_overrides(args: argparse.Namespace, cfg: AppConfig) -> AppConfig:
    paths = dict(cfg.paths)
    for key in ("ner_rules", "lexicon"):
        value = getattr(args, key, None)
        if value is not None:
            if not value.is_file():
                raise ConfigError(f"--{key.replace('ner_', '')}: file not found: {value}")
            paths[key] = value
    return replace(cfg, paths=paths)


def cmd_ner(args: argparse.Namespace, cfg: AppConfig) -> int:
    """One JSON line per entity, or per rule match with ``--trace``."""
    from .normalizer import normalize

    nerl = build_nerl(_with_overrides(args, cfg))
    text = normalize(args.text, nerl.lexicon)
    if args.trace:
        for t in nerl.recognizer.trace(text):
            _emit({"rule": t.rule_id, "span": list(t.span), "accepted": t.accepted})
        return EXIT_OK
    for e in nerl.recognizer.recognize(text):
        _emit({
            "type": e.entity_type, "span": list(e.span), "raw_span": list(text.raw_span(*e.span)),
            "surface": e.surface, "attributes": dict(e.attributes), "rule": e.rule_id,
        })
    return EXIT_OK


def _gateway(cfg: AppConfig, backend_doc: Mapping[str, Any]):
    from .llm_gateway import LlmGateway

    descriptor = _descriptor(backend_doc)
    try:
        return LlmGateway(descriptor, load_bundle(cfg))
    except ValueError as exc:
        raise ConfigError(f"backend: {exc}") from exc


def cmd_route(args: argparse.Namespace, cfg: AppConfig) -> int:
    from .router import Router, RouterConfig, RouterConfigError

    threshold = cfg.threshold if args.threshold is None else args.threshold
    llm_enabled = cfg.llm_enabled and not args.no_llm
    try:
        rc = RouterConfig(threshold=threshold, llm_enabled=llm_enabled)
    except RouterConfigError as exc:
        raise ConfigError(str(exc)) from exc
    gateway = None
    if llm_enabled:
        if not cfg.backend:
            raise ConfigError("router.llm_enabled is true but no backend is configured")
        gateway = _gateway(cfg, cfg.backend)
    router = Router(rc, gateway, build_nerl(cfg), load_model(cfg))
    items = _read_queries(args.input)
    results, summary = router.route_batch([i["query"] for i in items], jobs=args.jobs or cfg.jobs)
    lines = []
    for item, res in zip(items, results):
        doc = res.to_json(include_timings=args.timings)
        if "id" in item:
            doc["id"] = item["id"]
        lines.append(dumps(doc))
    if args.output is None:
        _write_lines(lines, None)
        log.info("summary: %s", dumps(summary.to_json()))
    else:
        _write_lines(lines, args.output)
        _emit(summary.to_json())
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, cfg: AppConfig) -> int:
    from .evaluator import DatasetError, EvaluationError, evaluate, load_dataset, load_predictions

    for path in (args.gold, args.pred):
        if not path.is_file():
            raise InputError(f"file not found: {path}")
    try:
        dataset = load_dataset(args.gold)
        predictions = load_predictions(args.pred)
        report = evaluate(predictions, dataset, mask_codes=not args.keep_codes)
    except (DatasetError, EvaluationError) as exc:
        raise InputError(str(exc)) from exc
    _emit(report.to_json())
    sys.stderr.write(report.table() + "\n")
    return EXIT_OK


def _parse_mix(value: Optional[str]) -> Optional[dict[str, float]]:
    if value is None:
        return None
    path = Path(value)
    try:
        if path.is_file():
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        else:
            doc = {k.strip(): float(v) for k, v in (part.split("=", 1) for part in value.split(","))}
    except (ValueError, yaml.YAMLError) as exc:
        raise InputError(f"--mix: expected a YAML/JSON file or TYPE=weight,... ({exc})") from exc
    if not isinstance(doc, dict):
        raise InputError("--mix must map entity types to weights")
    return {str(k): float(v) for k, v in doc.items()}


def cmd_generate(args: argparse.Namespace, cfg: AppConfig) -> int:
    from . import synthgen

    mix = _parse_mix(args.mix)
    try:
        pairs = synthgen.generate(args.n, args.seed, mix)
        if args.corrupt:
            pairs = [synthgen.corrupt(p, args.corrupt, args.seed + i) for i, p in enumerate(pairs)]
    except synthgen.TemplateError as exc:
        raise InputError(str(exc)) from exc
    _write_lines([dumps(p.to_json()) for p in pairs], args.output)
    return EXIT_OK


def cmd_train_confidence(args: argparse.Namespace, cfg: AppConfig) -> int:
    from .confidence import ConfidenceError, TrainConfig, load_examples, train

    if not args.data.is_file():
        raise InputError(f"file not found: {args.data}")
    try:
        config = TrainConfig(members=args.members, max_depth=args.max_depth,
                             n_estimators=args.rounds, seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    try:
        model = train(load_examples(args.data), config)
    except (ConfidenceError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    model.manifest["source"] = str(args.data)
    try:
        model.save(args.out)
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc}") from exc
    _emit(model.manifest)
    return EXIT_OK


def cmd_llm(args: argparse.Namespace, cfg: AppConfig) -> int:
    from .schema import records_to_json

    name = args.backend
    if name in cfg.backends:
        backend_doc = cfg.backends[name]
    elif "://" in name:
        backend_doc = {"endpoint": name}
    else:
        raise ConfigError(f"unknown backend {name!r}; configured: {', '.join(sorted(cfg.backends)) or 'none'}")
    gateway = _gateway(cfg, backend_doc)
    if not args.text.strip():
        raise InputError("empty query")
    result = gateway.structure(args.text)
    doc: dict[str, Any] = {"query": args.text, "records": records_to_json(result.records), "error": result.error}
    if args.raw and result.reply is not None:
        doc["reply"] = result.reply.text
    _emit(doc)
    if result.error:
        log.error("%s", result.error)
        return EXIT_INPUT
    return EXIT_OK


def version_info(cfg: AppConfig) -> dict[str, Any]:
    import hashlib

    from . import composer, ner

    def sha(path: Optional[Path], resource: str) -> str:
        data = path.read_bytes() if path else resources.files("posodose.data").joinpath(resource).read_bytes()
        return hashlib.sha256(data).hexdigest()

    p = cfg.paths
    rules = ner.RuleSet.load(p.get("ner_rules"))
    comp = composer.CompositionRules.load(p.get("composition_rules"))
    vectors = json.loads(resources.files("posodose.data").joinpath("unit_vectors.manifest.json").read_text(encoding="utf-8"))
    model = load_model(cfg)
    return {
        "tool": {"name": "posodose", "version": __version__},
        "ner_rules": {"version": rules.version, "rules": len(rules.rules), "sha256": sha(p.get("ner_rules"), "ner_rules.yaml")},
        "composition_rules": {"version": comp.version, "sha256": sha(p.get("composition_rules"), "composition_rules.yaml")},
        "lexicon": {"sha256": sha(p.get("lexicon"), "lexicon.tsv")},
        "unit_catalog": {"sha256": sha(p.get("unit_catalog"), "unit_catalog.json")},
        "unit_vectors": vectors if not p.get("unit_vectors") else {"sha256": sha(p["unit_vectors"], "")},
        "confidence_model": {k: v for k, v in model.manifest.items() if k != "feature_names"},
        "prompt_bundle": {"sha256": load_bundle(cfg).digest()},
    }


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="posodose", description="Structure French medication dosage instructions.")
    ap.add_argument("--config", type=Path, help="YAML configuration file")
    ap.add_argument("--log-level", help="override the configured log level")
    ap.add_argument("--version", action="store_true", help="print tool, rule and model manifests")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("structure", help="run the rule pipeline on queries")
    p.add_argument("text", nargs="*", help="query text")
    p.add_argument("--in", dest="input", type=Path, help="JSONL or text file of queries")
    p.add_argument("--rules", dest="ner_rules", type=Path, help="entity rule file")
    p.add_argument("--lexicon", type=Path, help="abbreviation lexicon file")
    p.set_defaults(func=cmd_structure)

    p = sub.add_parser("ner", help="recognized entities of one query, one JSON line each")
    p.add_argument("text")
    p.add_argument("--rules", dest="ner_rules", type=Path, help="entity rule file")
    p.add_argument("--lexicon", type=Path, help="abbreviation lexicon file")
    p.add_argument("--trace", action="store_true", help="print every rule match and whether it was kept")
    p.set_defaults(func=cmd_ner)

    p = sub.add_parser("route", help="hybrid routing over a batch of queries")
    p.add_argument("--in", dest="input", type=Path, required=True, help="JSONL of {query} objects")
    p.add_argument("--out", dest="output", type=Path, help="results JSONL (stdout if omitted)")
    p.add_argument("--threshold", type=float, help="override router.threshold")
    p.add_argument("--no-llm", action="store_true", help="disable the LLM path")
    p.add_argument("--timings", action="store_true", help="include per-stage timings in results")
    p.add_argument("--jobs", type=int, help="parallel queries (default from config)")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("evaluate", help="exact-match accuracy of predictions against gold")
    p.add_argument("--gold", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True, help="JSONL of {id, records}")
    p.add_argument("--keep-codes", action="store_true", help="compare terminology codes too")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="synthetic (text, gold) pairs")
    p.add_argument("--n", type=int, default=1600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", help="YAML/JSON file or TYPE=weight,... of entity-type weights")
    p.add_argument("--corrupt", choices=("ocr", "truncation", "colloquial"), help="corrupt every pair")
    p.add_argument("--out", dest="output", type=Path, help="output JSONL (stdout if omitted)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-confidence", help="train a confidence model from labelled JSONL")
    p.add_argument("--data", type=Path, required=True, help="JSONL of {query, output, label}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--members", type=int, default=5)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--rounds", type=int, default=100)
    p.set_defaults(func=cmd_train_confidence)

    p = sub.add_parser("llm", help="structure one query with an LLM backend")
    p.add_argument("--backend", required=True, help="configured backend name or endpoint URL")
    p.add_argument("--raw", action="store_true", help="include the raw reply")
    p.add_argument("text")
    p.set_defaults(func=cmd_llm)
    return ap


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        cfg = AppConfig.load(args.config)
    except ConfigError as exc:
        sys.stderr.write(f"posodose: config error: {exc}\n")
        return EXIT_CONFIG
    level = (args.log_level or cfg.log_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.version:
            _emit(version_info(cfg))
            return EXIT_OK
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            return EXIT_CONFIG
        return args.func(args, cfg)
    except InputError as exc:
        sys.stderr.write(f"posodose: input error: {exc}\n")
        return EXIT_INPUT
    except ConfigError as exc:
        sys.stderr.write(f"posodose: config error: {exc}\n")
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
