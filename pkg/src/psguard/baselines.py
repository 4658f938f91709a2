"""Traditional n-gram detectors: tf / tf-idf features plus logistic regression.

Character n-grams run over the digit-normalized, lowercased text; token
n-grams run over the token sequence, restricted to tokens frequent enough in
the fitting corpus. The classifier is plain logistic regression trained by
SGD with log loss and an L2 penalty.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .preprocess import CodeInstance, normalize_digits, tokenize

CHAR_NGRAM = "char_ngram"
TOKEN_NGRAM = "token_ngram"

TF = "tf"
TFIDF = "tfidf"

TOKEN_MIN_INSTANCES = 10

SparseVector = dict[int, float]


class BaselineError(Exception):
    pass


def _char_stream(instance: CodeInstance) -> str:
    return normalize_digits(instance.text).lower()


def _token_stream(instance: CodeInstance) -> list[str]:
    return tokenize(normalize_digits(instance.text))


def char_ngrams(text: str, n: int) -> Counter:
    """Contiguous character n-grams with multiplicity; empty if len(text) < n."""
    return Counter(text[i : i + n] for i in range(len(text) - n + 1))


def token_ngrams(tokens: Sequence[str], n: int) -> Counter:
    """Contiguous token n-grams joined by a single space."""
    return Counter(
        " ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1)
    )


@dataclass
class FeatureSpace:
    """A fitted n-gram feature space with document frequencies.

    Token spaces only admit n-grams whose every token appeared in at least
    TOKEN_MIN_INSTANCES fitting instances; rarer tokens behave like noise for
    this detector family.
    """

    kind: str
    n: int
    weighting: str = TFIDF
    columns: dict[str, int] = field(default_factory=dict)
    doc_freq: dict[str, int] = field(default_factory=dict)
    documents: int = 0
    allowed_tokens: Optional[set[str]] = None

    def __post_init__(self) -> None:
        if self.kind not in (CHAR_NGRAM, TOKEN_NGRAM):
            raise ValueError(f"unknown feature kind: {self.kind}")
        if self.weighting not in (TF, TFIDF):
            raise ValueError(f"unknown weighting: {self.weighting}")

    def __len__(self) -> int:
        return len(self.columns)

    def idf(self, feature: str) -> float:
        # smoothed idf; a feature present in every document still weighs 1
        return math.log((1 + self.documents) / (1 + self.doc_freq[feature])) + 1.0


def _instance_grams(instance: CodeInstance, space: FeatureSpace, allowed: Optional[set[str]]) -> Counter:
    if space.kind == CHAR_NGRAM:
        return char_ngrams(_char_stream(instance), space.n)
    tokens = _token_stream(instance)
    grams = token_ngrams(tokens, space.n)
    if allowed is not None:
        grams = Counter({g: c for g, c in grams.items() if all(t in allowed for t in g.split(" "))})
    return grams


def fit_feature_space(
    instances: Sequence[CodeInstance], kind: str, n: int, weighting: str = TFIDF
) -> FeatureSpace:
    """Fit columns and document frequencies on training instances only."""
    space = FeatureSpace(kind=kind, n=n, weighting=weighting, documents=len(instances))
    allowed = None
    if kind == TOKEN_NGRAM:
        token_df: Counter = Counter()
        for inst in instances:
            token_df.update(set(_token_stream(inst)))
        allowed = {t for t, c in token_df.items() if c >= TOKEN_MIN_INSTANCES}
    df: Counter = Counter()
    for inst in instances:
        df.update(set(_instance_grams(inst, space, allowed)))
    for feature in sorted(df):
        space.columns[feature] = len(space.columns)
        space.doc_freq[feature] = df[feature]
    space.allowed_tokens = allowed
    return space


def extract_ngrams(instance: CodeInstance, space: FeatureSpace) -> SparseVector:
    """Sparse raw counts over the fitted columns; unseen features vanish."""
    grams = _instance_grams(instance, space, space.allowed_tokens)
    return {
        space.columns[g]: float(c) for g, c in grams.items() if g in space.columns
    }


def tfidf_transform(counts: SparseVector, space: FeatureSpace) -> SparseVector:
    """Weight counts by smoothed idf (tfidf mode) and L2-normalize."""
    if not counts:
        return {}
    inv = {i: f for f, i in space.columns.items()}
    if space.weighting == TFIDF:
        weighted = {i: c * space.idf(inv[i]) for i, c in counts.items()}
    else:
        weighted = dict(counts)
    norm = math.sqrt(sum(v * v for v in weighted.values()))
    return {i: v / norm for i, v in weighted.items()}


def featurize(instance: CodeInstance, space: FeatureSpace) -> SparseVector:
    return tfidf_transform(extract_ngrams(instance, space), space)


@dataclass
class LogRegConfig:
    learning_rate: float = 0.01
    l2: float = 1e-4
    max_epochs: int = 100
    loss_tolerance: float = 1e-4
    seed: int = 1


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    epoch_losses: list[float] = field(default_factory=list)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def train_logreg(
    features: Sequence[SparseVector],
    labels: np.ndarray,
    dim: int,
    config: LogRegConfig = LogRegConfig(),
) -> LinearModel:
    """SGD on class-weighted log loss with an L2 penalty.

    Runs seeded-shuffle epochs until the epoch-mean objective stops improving
    by the tolerance or the epoch cap is reached. The L2 term shrinks every
    weight each step via a scale factor, so sparse rows stay cheap.
    """
    labels = np.asarray(labels, dtype=np.float64)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise BaselineError("training data must contain both classes")
    w_pos = neg / pos

    v = np.zeros(dim, dtype=np.float64)  # weights = scale * v
    scale = 1.0
    bias = 0.0
    rng = np.random.default_rng(config.seed)
    lr, lam = config.learning_rate, config.l2

    n = len(features)
    prev = None
    losses = []
    for _ in range(config.max_epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for i in order:
            x = features[i]
            y = labels[i]
            weight = w_pos if y == 1 else 1.0
            z = scale * sum(v[j] * val for j, val in x.items()) + bias
            p = _sigmoid(z)
            loss_sum += -weight * (
                y * math.log(max(p, 1e-12)) + (1 - y) * math.log(max(1 - p, 1e-12))
            )
            err = weight * (p - y)
            # clamp: an overshooting penalty step stops at zero weights
            scale *= max(0.0, 1.0 - lr * lam)
            if scale < 1e-9:
                v *= scale
                scale = 1.0
            for j, val in x.items():
                v[j] -= lr * err * val / scale
            bias -= lr * err
        weights = scale * v
        objective = loss_sum / n + 0.5 * lam * float(weights @ weights)
        losses.append(objective)
        if prev is not None and prev - objective < config.loss_tolerance:
            break
        prev = objective
    return LinearModel(weights=scale * v, bias=bias, epoch_losses=losses)


def score_logreg(model: LinearModel, features: SparseVector) -> float:
    z = model.bias + sum(model.weights[j] * val for j, val in features.items())
    return _sigmoid(z)


def score_corpus(model: LinearModel, features: Iterable[SparseVector]) -> np.ndarray:
    return np.array([score_logreg(model, f) for f in features])


# -- persistence -----------------------------------------------------------------


def save_baseline(space: FeatureSpace, model: LinearModel, path: str | Path) -> None:
    """Auditable JSON: vocabulary, document frequencies, weights."""
    payload = {
        "kind": space.kind,
        "n": space.n,
        "weighting": space.weighting,
        "documents": space.documents,
        "columns": space.columns,
        "doc_freq": space.doc_freq,
        "allowed_tokens": sorted(space.allowed_tokens or []),
        "weights": [float(w) for w in model.weights],
        "bias": float(model.bias),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_baseline(path: str | Path) -> tuple[FeatureSpace, LinearModel]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    space = FeatureSpace(
        kind=payload["kind"],
        n=payload["n"],
        weighting=payload["weighting"],
        columns=payload["columns"],
        doc_freq=payload["doc_freq"],
        documents=payload["documents"],
    )
    if payload["kind"] == TOKEN_NGRAM:
        space.allowed_tokens = set(payload.get("allowed_tokens", []))
    model = LinearModel(
        weights=np.array(payload["weights"], dtype=np.float64), bias=payload["bias"]
    )
    return space, model
