"""Query-level confidence for a structuring output.

An ensemble of gradient-boosted tree classifiers predicts the probability that
an output is correct from features of the query text and of the records. The
spread between members gives the uncertainty decomposition:

* total uncertainty is the binary entropy of the mean probability,
* aleatoric uncertainty is the mean of the members' entropies,
* epistemic uncertainty is their difference.

Members are trained with scikit-learn and exported to plain JSON trees, so a
saved model is evaluated without scikit-learn and without pickles.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from decimal import Decimal, InvalidOperation
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .composer import compose_with_warnings
from .ner import ENTITY_TYPES, RuleRecognizer
from .normalizer import normalize
from .schema import PosologyStructure, fold, records_from_json, records_to_json

log = logging.getLogger(__name__)

MODEL_FORMAT = "posodose-confidence/1"

_PRESENCE_FIELDS = (
    "as_needed", "quantity_and_rate", "max_value", "unit", "max_dose_per_period",
    "bounds_duration", "bounds_period", "day_of_week", "frequency_max",
    "number_repeats_allowed", "offset", "sequence", "time_of_day", "when",
)

FEATURE_NAMES: tuple[str, ...] = (
    "text_length", "token_count", "unrecognized_token_ratio",
    "repairs_abbreviation", "repairs_ocr", "repairs_punctuation",
    *(f"entities_{t.lower()}" for t in ENTITY_TYPES),
    "record_count",
    *(f"has_{f}" for f in _PRESENCE_FIELDS),
    "designation_in_text", "numbers_in_text",
    "composition_warnings",
)


class ConfidenceError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]

    names = FEATURE_NAMES

    def __post_init__(self) -> None:
        if len(self.values) != len(FEATURE_NAMES):
            raise ConfidenceError(f"expected {len(FEATURE_NAMES)} features, got {len(self.values)}")

    def __getitem__(self, name: str) -> float:
        return self.values[FEATURE_NAMES.index(name)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


_RECOGNIZER: Optional[RuleRecognizer] = None


def _recognizer() -> RuleRecognizer:
    global _RECOGNIZER
    if _RECOGNIZER is None:
        _RECOGNIZER = RuleRecognizer()
    return _RECOGNIZER


def _presence(rec: PosologyStructure, name: str) -> bool:
    t = rec.timing
    qr = rec.quantity_and_rate
    if name == "max_value":
        return qr is not None and qr.max_value is not None
    if name == "unit":
        return qr is not None and bool(qr.unit)
    if name in ("as_needed", "quantity_and_rate", "max_dose_per_period"):
        return getattr(rec, name) is not None
    value = getattr(t, name)
    return bool(value) if isinstance(value, tuple) else value is not None


def _record_numbers(rec: PosologyStructure) -> list[Decimal]:
    nums: list[Decimal] = []
    if rec.quantity_and_rate is not None:
        nums.append(rec.quantity_and_rate.value)
        if rec.quantity_and_rate.max_value is not None:
            nums.append(rec.quantity_and_rate.max_value)
    t = rec.timing
    # 1 is the default for frequency and period and need not be written out
    for n in (t.frequency, t.period, t.frequency_max, t.number_repeats_allowed):
        if n is not None and n != 1:
            nums.append(Decimal(n))
    if t.bounds_duration is not None:
        nums.append(t.bounds_duration.value)
    if rec.max_dose_per_period is not None:
        nums.append(Decimal(rec.max_dose_per_period.dose))
    return nums


def _text_numbers(normalized: str) -> set[Decimal]:
    out: set[Decimal] = set()
    for m in re.finditer(r"\d+(?:\.\d+)?(?:/\d+)?", normalized):
        s = m.group()
        try:
            if "/" in s:
                a, b = s.split("/")
                out.add(Decimal(a) / Decimal(b))
            else:
                out.add(Decimal(s))
        except (InvalidOperation, ZeroDivisionError):
            continue
    return out


def featurize(query: str, output: Sequence[PosologyStructure]) -> FeatureVector:
    """Fixed-order feature vector of a (query, records) pair. Deterministic."""
    text = normalize(query)
    entities = _recognizer().recognize(text)
    tokens = [(s, e) for s, e, tok in text.tokens() if any(c.isalnum() for c in tok)]
    covered = sum(1 for s, e in tokens if any(ent.start < e and s < ent.end for ent in entities))
    unrecognized = (len(tokens) - covered) / len(tokens) if tokens else 0.0

    repairs = {"abbreviation": 0, "ocr": 0, "punctuation": 0}
    for r in text.repairs:
        repairs[r.kind] += 1
    counts = {t: 0 for t in ENTITY_TYPES}
    for ent in entities:
        counts[ent.entity_type] += 1

    n = len(output)
    presence = [float(any(_presence(r, f) for r in output)) for f in _PRESENCE_FIELDS]
    folded = " ".join(fold(query).split())
    if n:
        in_text = sum(1 for r in output if r.designation and " ".join(fold(r.designation).split()) in folded) / n
    else:
        in_text = 0.0
    available = _text_numbers(text.normalized)
    nums = [x for r in output for x in _record_numbers(r)]
    numbers_ok = sum(1 for x in nums if x in available) / len(nums) if nums else (1.0 if n else 0.0)
    warnings = len(compose_with_warnings(entities, text).warnings) if entities else 1

    values = (
        float(len(query)), float(len(tokens)), unrecognized,
        float(repairs["abbreviation"]), float(repairs["ocr"]), float(repairs["punctuation"]),
        *(float(counts[t]) for t in ENTITY_TYPES),
        float(n), *presence, in_text, numbers_ok, float(warnings),
    )
    return FeatureVector(tuple(values))


# ---------------------------------------------------------------------------
# entropy and the uncertainty decomposition


def binary_entropy(p: float) -> float:
    """H(p) in bits; 0 at p in {0, 1}."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log2(p) + (1.0 - p) * math.log2(1.0 - p))


@dataclass(frozen=True)
class ConfidenceReport:
    score: float
    model_uncertainty: float
    aleatoric: float
    epistemic: float
    total: float

    def to_json(self) -> dict[str, float]:
        return asdict(self)


def decompose(member_probs: Sequence[float]) -> tuple[float, float, float, float]:
    """(score, total, aleatoric, epistemic) with epistemic not yet clamped."""
    probs = [float(p) for p in member_probs]
    if not probs:
        raise ConfidenceError("no member probabilities")
    score = math.fsum(probs) / len(probs)
    total = binary_entropy(score)
    aleatoric = math.fsum(binary_entropy(p) for p in probs) / len(probs)
    return score, total, aleatoric, total - aleatoric


def report_from_probs(member_probs: Sequence[float]) -> ConfidenceReport:
    score, total, aleatoric, epistemic = decompose(member_probs)
    if epistemic < 0.0:
        log.debug("epistemic uncertainty %.3g clamped to 0", epistemic)
        epistemic = 0.0
    return ConfidenceReport(score, 1.0 - score, aleatoric, epistemic, total)


# ---------------------------------------------------------------------------
# exported trees


@dataclass(frozen=True)
class Tree:
    children_left: tuple[int, ...]
    children_right: tuple[int, ...]
    feature: tuple[int, ...]
    threshold: tuple[float, ...]
    value: tuple[float, ...]

    def predict(self, x: np.ndarray) -> float:
        node = 0
        while self.children_left[node] != -1:
            # scikit-learn compares in float32
            if np.float32(x[self.feature[node]]) <= self.threshold[node]:
                node = self.children_left[node]
            else:
                node = self.children_right[node]
        return self.value[node]

    def to_json(self) -> dict[str, list]:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, doc: Mapping[str, Sequence]) -> "Tree":
        return cls(
            tuple(int(v) for v in doc["children_left"]),
            tuple(int(v) for v in doc["children_right"]),
            tuple(int(v) for v in doc["feature"]),
            tuple(float(v) for v in doc["threshold"]),
            tuple(float(v) for v in doc["value"]),
        )


@dataclass(frozen=True)
class BoostedMember:
    """One boosted classifier: sigmoid(init_raw + learning_rate * sum of tree outputs)."""

    init_raw: float
    learning_rate: float
    trees: tuple[Tree, ...]

    def probability(self, x: np.ndarray) -> float:
        raw = self.init_raw + self.learning_rate * math.fsum(t.predict(x) for t in self.trees)
        if raw >= 0:
            return 1.0 / (1.0 + math.exp(-raw))
        z = math.exp(raw)
        return z / (1.0 + z)

    def to_json(self) -> dict[str, Any]:
        return {"init_raw": self.init_raw, "learning_rate": self.learning_rate,
                "trees": [t.to_json() for t in self.trees]}

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "BoostedMember":
        return cls(float(doc["init_raw"]), float(doc["learning_rate"]),
                   tuple(Tree.from_json(t) for t in doc["trees"]))


@dataclass(frozen=True)
class TrainConfig:
    members: int = 5
    max_depth: int = 3
    n_estimators: int = 100
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.members < 2:
            raise ConfidenceError("an ensemble needs at least 2 members")
        if not 1 <= self.max_depth <= 4:
            raise ConfidenceError("max_depth must be in [1, 4]")
        if not 1 <= self.n_estimators <= 200:
            raise ConfidenceError("n_estimators must be in [1, 200]")
        if not 0 < self.learning_rate <= 1:
            raise ConfidenceError("learning_rate must be in (0, 1]")


@dataclass(frozen=True)
class EnsembleModel:
    members: tuple[BoostedMember, ...]
    manifest: dict[str, Any] = field(default_factory=dict, hash=False, compare=False)

    def member_probabilities(self, f: FeatureVector | np.ndarray) -> list[float]:
        if not self.members:
            raise ConfidenceError("untrained model")
        x = f.as_array() if isinstance(f, FeatureVector) else np.asarray(f, dtype=np.float64)
        return [m.probability(x) for m in self.members]

    def to_json(self) -> dict[str, Any]:
        return {"format": MODEL_FORMAT, "manifest": self.manifest,
                "members": [m.to_json() for m in self.members]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "EnsembleModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ConfidenceError(f"unsupported model format {doc.get('format')!r}")
        manifest = dict(doc.get("manifest") or {})
        if manifest.get("feature_names") and tuple(manifest["feature_names"]) != FEATURE_NAMES:
            raise ConfidenceError("model was trained on a different feature set")
        members = tuple(BoostedMember.from_json(m) for m in doc["members"])
        if len(members) < 2:
            raise ConfidenceError("an ensemble needs at least 2 members")
        return cls(members, manifest)

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "EnsembleModel":
        if path is None:
            text = resources.files("posodose.data").joinpath("confidence_model.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_json(json.loads(text))


_DEFAULT_MODEL: Optional[EnsembleModel] = None


def default_model() -> EnsembleModel:
    global _DEFAULT_MODEL
    if _DEFAULT_MODEL is None:
        _DEFAULT_MODEL = EnsembleModel.load()
    return _DEFAULT_MODEL


def predict(model: EnsembleModel, f: FeatureVector | np.ndarray) -> ConfidenceReport:
    return report_from_probs(model.member_probabilities(f))


def score_output(model: EnsembleModel, query: str, output: Sequence[PosologyStructure]) -> ConfidenceReport:
    return predict(model, featurize(query, output))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class Example:
    query: str
    output: tuple[PosologyStructure, ...]
    correct: bool

    def to_json(self) -> dict[str, Any]:
        return {"query": self.query, "output": records_to_json(self.output),
                "label": "correct" if self.correct else "incorrect"}

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "Example":
        label = doc["label"]
        if isinstance(label, str):
            if label not in ("correct", "incorrect"):
                raise ConfidenceError(f"unknown label {label!r}")
            correct = label == "correct"
        else:
            correct = bool(label)
        return cls(doc["query"], tuple(records_from_json(doc.get("output") or [])), correct)


def load_examples(path: str | Path) -> list[Example]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(Example.from_json(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise ConfidenceError(f"{path}:{lineno}: {exc}") from exc
    return out


def _export(clf: Any, x0: np.ndarray) -> BoostedMember:
    lr = float(clf.learning_rate)
    trees = []
    for est in clf.estimators_[:, 0]:
        t = est.tree_
        trees.append(Tree(
            tuple(int(v) for v in t.children_left),
            tuple(int(v) for v in t.children_right),
            tuple(int(v) for v in t.feature),
            tuple(float(v) for v in t.threshold),
            tuple(float(v) for v in t.value[:, 0, 0]),
        ))
    partial = BoostedMember(0.0, lr, tuple(trees))
    tree_sum = lr * math.fsum(tr.predict(x0) for tr in partial.trees)
    init_raw = float(clf.decision_function(x0.reshape(1, -1))[0]) - tree_sum
    return BoostedMember(init_raw, lr, tuple(trees))


def train_matrix(x: np.ndarray, y: np.ndarray, config: TrainConfig = TrainConfig(),
                 data_hash: Optional[str] = None) -> EnsembleModel:
    """Train on a prepared feature matrix (rows in FEATURE_NAMES order when used with featurize)."""
    from sklearn.ensemble import GradientBoostingClassifier

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ConfidenceError("no training examples")
    if min(int(y.sum()), int(len(y) - y.sum())) < 2:
        raise ConfidenceError("training needs at least 2 examples of each class")
    members = []
    for i in range(config.members):
        rng = np.random.default_rng(config.seed + i)
        for _ in range(100):
            idx = rng.integers(0, len(y), len(y))
            if 0 < y[idx].sum() < len(idx):
                break
        else:
            idx = np.arange(len(y))
        clf = GradientBoostingClassifier(
            n_estimators=config.n_estimators, max_depth=config.max_depth,
            learning_rate=config.learning_rate, random_state=config.seed + i,
        )
        clf.fit(x[idx], y[idx])
        members.append(_export(clf, x[0]))
    if data_hash is None:
        data_hash = hashlib.sha256(x.tobytes() + y.tobytes()).hexdigest()
    manifest = {
        "data_sha256": data_hash,
        "examples": int(len(y)),
        "positives": int(y.sum()),
        "seed": config.seed,
        "hyperparameters": asdict(config),
        "feature_names": list(FEATURE_NAMES) if x.shape[1] == len(FEATURE_NAMES) else None,
    }
    return EnsembleModel(tuple(members), manifest)


def train(examples: Sequence[Example], config: TrainConfig = TrainConfig()) -> EnsembleModel:
    """Fit the ensemble; each member sees its own bootstrap sample and seed."""
    if not examples:
        raise ConfidenceError("no training examples")
    x = np.array([featurize(e.query, e.output).values for e in examples], dtype=np.float64)
    y = np.array([int(e.correct) for e in examples], dtype=np.int64)
    payload = "\n".join(json.dumps(e.to_json(), sort_keys=True, ensure_ascii=False) for e in examples)
    return train_matrix(x, y, config, hashlib.sha256(payload.encode("utf-8")).hexdigest())


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_score: float
    accuracy: float

    @property
    def gap(self) -> float:
        return abs(self.mean_score - self.accuracy) if self.count else 0.0


@dataclass(frozen=True)
class CalibrationReport:
    bins: tuple[ReliabilityBin, ...]
    ece: float
    count: int

    def to_json(self) -> dict[str, Any]:
        return {"ece": self.ece, "count": self.count,
                "bins": [{**asdict(b), "gap": b.gap} for b in self.bins]}


def reliability_table(scores: Sequence[float], labels: Sequence[bool], n_bins: int = 10) -> CalibrationReport:
    """Equal-width bins over [0, 1]; the last bin is closed on the right."""
    if len(scores) != len(labels):
        raise ConfidenceError("scores and labels differ in length")
    if not scores:
        raise ConfidenceError("empty held-out set")
    members: list[list[int]] = [[] for _ in range(n_bins)]
    for i, s in enumerate(scores):
        members[min(int(s * n_bins), n_bins - 1)].append(i)
    bins = []
    ece = 0.0
    for b, idx in enumerate(members):
        lo, hi = b / n_bins, (b + 1) / n_bins
        if idx:
            mean = math.fsum(scores[i] for i in idx) / len(idx)
            acc = sum(bool(labels[i]) for i in idx) / len(idx)
        else:
            mean = acc = 0.0
        rb = ReliabilityBin(lo, hi, len(idx), mean, acc)
        ece += len(idx) / len(scores) * rb.gap
        bins.append(rb)
    return CalibrationReport(tuple(bins), ece, len(scores))


def calibration_report(model: EnsembleModel, held_out: Iterable[Example], n_bins: int = 10) -> CalibrationReport:
    held = list(held_out)
    scores = [score_output(model, e.query, e.output).score for e in held]
    return reliability_table(scores, [e.correct for e in held], n_bins)
