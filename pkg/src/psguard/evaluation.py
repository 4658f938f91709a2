"""Evaluation protocol: time-based splits, 3-fold CV, ROC at a tight FPR budget.

The headline metric everywhere is the true-positive rate at the largest
threshold family keeping the false-positive rate within a small budget
(1e-3 by default); plain AUC is reported alongside. Cross-validation picks
the best training epoch per fold on validation TPR under that budget, and
test instances are scored with the mean of the fold models.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Optional, Sequence

import numpy as np

from .embedding import EmbeddingConfig, EmbeddingModel, FASTTEXT, build_vocab, train_cbow
from .models import (
    ArchitectureSpec,
    EMBED_FASTTEXT,
    EMBED_INLINE,
    EMBED_W2V,
    NetworkModel,
    TrainConfig,
    build_model,
    build_token_index,
    label_array,
    score,
    train,
    vectorize,
)
from .preprocess import CodeInstance, normalize_digits, tokenize

DEFAULT_FPR_BUDGET = 1e-3


class EvaluationError(Exception):
    pass


@dataclass
class RocReport:
    """Threshold sweep over the distinct scores, descending.

    points holds (threshold, fpr, tpr); both rates grow as the threshold
    drops. tpr_at_budget is the best TPR over thresholds whose FPR stays
    within the budget, i.e. the rate at the lowest admissible threshold.
    """

    points: list[tuple[float, float, float]]
    auc: float
    tpr_at_budget: float
    budget: float
    threshold_at_budget: Optional[float] = None


def roc(
    scores: np.ndarray,
    labels: np.ndarray,
    budget: float = DEFAULT_FPR_BUDGET,
    strict_budget: bool = False,
) -> RocReport:
    """Tie-grouped ROC with trapezoidal AUC.

    Equal scores collapse into a single threshold so the curve is invariant
    under any strictly increasing transform of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise EvaluationError("ROC needs both classes present")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # group ties: indices where a threshold group ends
    distinct = np.nonzero(np.diff(s))[0]
    ends = np.concatenate([distinct, [len(s) - 1]])
    tp_cum = np.cumsum(y == 1)[ends]
    fp_cum = np.cumsum(y == 0)[ends]
    thresholds = s[ends]

    points = []
    auc = 0.0
    prev_tp = prev_fp = 0
    best_tpr = 0.0
    best_threshold = None
    for t, tp, fp in zip(thresholds, tp_cum, fp_cum):
        fpr = fp / neg
        tpr = tp / pos
        points.append((float(t), float(fpr), float(tpr)))
        auc += (fp - prev_fp) * (tp + prev_tp) / 2.0
        within = fpr < budget if strict_budget else fpr <= budget
        if within and tpr >= best_tpr:
            best_tpr = tpr
            best_threshold = float(t)
        prev_tp, prev_fp = tp, fp
    auc /= pos * neg
    return RocReport(
        points=points,
        auc=float(auc),
        tpr_at_budget=float(best_tpr),
        budget=budget,
        threshold_at_budget=best_threshold,
    )


def time_split(
    corpus: Sequence[CodeInstance], boundary: datetime
) -> tuple[list[CodeInstance], list[CodeInstance]]:
    """Train on instances collected before the boundary, test on the rest."""
    missing = [inst.id for inst in corpus if inst.collected_at is None]
    if missing:
        raise EvaluationError(
            f"{len(missing)} instances lack collection timestamps "
            f"(first: {missing[0]}); supply an explicit split instead"
        )
    train_set = [i for i in corpus if i.collected_at < boundary]
    test_set = [i for i in corpus if i.collected_at >= boundary]
    if not test_set:
        warnings.warn("time split produced an empty test set", stacklevel=2)
    return train_set, test_set


def split_by_ids(
    corpus: Sequence[CodeInstance], train_ids: set[str], test_ids: set[str]
) -> tuple[list[CodeInstance], list[CodeInstance]]:
    """Explicit split for corpora without usable timestamps."""
    overlap = train_ids & test_ids
    if overlap:
        raise EvaluationError(f"ids assigned to both splits: {sorted(overlap)[:3]}")
    return (
        [i for i in corpus if i.id in train_ids],
        [i for i in corpus if i.id in test_ids],
    )


@dataclass
class FoldPlan:
    k: int
    folds: list[tuple[np.ndarray, np.ndarray]]  # (train indices, validation indices)


def stratified_kfold(labels: np.ndarray, k: int = 3, seed: int = 1) -> FoldPlan:
    """Seeded shuffle within each class, then round-robin fold assignment."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if len(idx) < k:
            raise EvaluationError(f"class {cls} has {len(idx)} members, fewer than k={k}")
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % k
    folds = []
    everything = np.arange(len(labels))
    for f in range(k):
        val = everything[assignment == f]
        trn = everything[assignment != f]
        folds.append((trn, val))
    return FoldPlan(k=k, folds=folds)


def select_best_epoch(reports: Sequence[RocReport]) -> int:
    """Epoch with the highest budgeted TPR; earliest epoch wins ties."""
    if not reports:
        raise EvaluationError("no epochs to select from")
    best = 0
    for i, rep in enumerate(reports):
        if rep.tpr_at_budget > reports[best].tpr_at_budget:
            best = i
    return best


def fold_average(score_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Mean probability across the fold models, per instance."""
    return np.mean(np.stack(score_sets), axis=0)


def ensemble_average(
    scores_a: np.ndarray,
    scores_b: np.ndarray,
    ids_a: Optional[Sequence[str]] = None,
    ids_b: Optional[Sequence[str]] = None,
) -> np.ndarray:
    """Elementwise mean of two detectors' scores over one instance set."""
    if ids_a is not None or ids_b is not None:
        if list(ids_a) != list(ids_b):
            raise EvaluationError("ensemble inputs score different instance sets")
    if len(scores_a) != len(scores_b):
        raise EvaluationError("ensemble inputs have different lengths")
    return (np.asarray(scores_a) + np.asarray(scores_b)) / 2.0


# -- cross-validation protocol -------------------------------------------------


@dataclass
class FoldOutcome:
    best_epoch: int
    epoch_reports: list[RocReport]
    train_tpr: float
    validation_tpr: float
    validation_threshold: Optional[float]
    test_scores: np.ndarray


@dataclass
class ProtocolResult:
    fold_outcomes: list[FoldOutcome] = field(default_factory=list)
    test_scores: Optional[np.ndarray] = None
    test_report: Optional[RocReport] = None
    train_tpr_mean: float = 0.0
    train_tpr_std: float = 0.0
    validation_tpr_mean: float = 0.0
    validation_tpr_std: float = 0.0

    def summary(self) -> dict:
        out = {
            "folds": [
                {
                    "best_epoch": f.best_epoch,
                    "validation_tpr": f.validation_tpr,
                    "validation_threshold": f.validation_threshold,
                    "train_tpr": f.train_tpr,
                    "epoch_validation_tpr": [r.tpr_at_budget for r in f.epoch_reports],
                }
                for f in self.fold_outcomes
            ],
            "train_tpr_mean": self.train_tpr_mean,
            "train_tpr_std": self.train_tpr_std,
            "validation_tpr_mean": self.validation_tpr_mean,
            "validation_tpr_std": self.validation_tpr_std,
        }
        if self.test_report is not None:
            out["test_auc"] = self.test_report.auc
            out["test_tpr"] = self.test_report.tpr_at_budget
        return out


def run_protocol(
    spec: ArchitectureSpec,
    train_instances: Sequence[CodeInstance],
    test_instances: Sequence[CodeInstance],
    vocab_tokens: Sequence[str],
    train_config: TrainConfig,
    embedding: Optional[EmbeddingModel] = None,
    k: int = 3,
    budget: float = DEFAULT_FPR_BUDGET,
    seed: int = 1,
    model_sink: Optional[Callable[[int, NetworkModel], None]] = None,
) -> ProtocolResult:
    """Cross-validate one architecture and score the held-out test set.

    Per fold: train up to the epoch cap, checkpointing every epoch; pick the
    epoch with the best validation TPR under the FPR budget; restore it and
    score the test set. Test metrics come from the fold-averaged scores, with
    the budget threshold recomputed on the test score distribution; the
    validation-derived thresholds are kept in the per-fold outcomes.
    """
    train_labels = label_array(train_instances)
    token_index = build_token_index(vocab_tokens)
    data = [vectorize(i, spec, token_index, embedding) for i in train_instances]
    test_data = [vectorize(i, spec, token_index, embedding) for i in test_instances]
    test_labels = label_array(test_instances) if test_instances else None

    plan = stratified_kfold(train_labels, k=k, seed=seed)
    result = ProtocolResult()
    for fold_id, (trn, val) in enumerate(plan.folds):
        model = build_model(spec, vocab_tokens, embedding, seed=seed + fold_id)
        fold_train = [data[i] for i in trn]
        fold_val = [data[i] for i in val]
        epoch_reports: list[RocReport] = []
        best: dict = {"tpr": -1.0, "snapshot": None, "epoch": 0}

        def on_epoch(epoch: int, m: NetworkModel, mean_loss: float) -> bool:
            rep = roc(score(m, fold_val), train_labels[val], budget=budget)
            epoch_reports.append(rep)
            if rep.tpr_at_budget > best["tpr"]:
                best.update(tpr=rep.tpr_at_budget, snapshot=m.snapshot(), epoch=epoch)
            return False

        cfg = TrainConfig(**{**train_config.__dict__, "seed": train_config.seed + fold_id})
        train(model, fold_train, train_labels[trn], cfg, keep_snapshots=False, on_epoch=on_epoch)
        model.restore(best["snapshot"])
        best_epoch = select_best_epoch(epoch_reports)
        assert best_epoch == best["epoch"]

        train_rep = roc(score(model, fold_train), train_labels[trn], budget=budget)
        val_rep = epoch_reports[best_epoch]
        test_scores = score(model, test_data) if test_data else np.zeros(0)
        if model_sink is not None:
            model_sink(fold_id, model)
        result.fold_outcomes.append(
            FoldOutcome(
                best_epoch=best_epoch,
                epoch_reports=epoch_reports,
                train_tpr=train_rep.tpr_at_budget,
                validation_tpr=val_rep.tpr_at_budget,
                validation_threshold=val_rep.threshold_at_budget,
                test_scores=test_scores,
            )
        )

    train_tprs = [f.train_tpr for f in result.fold_outcomes]
    val_tprs = [f.validation_tpr for f in result.fold_outcomes]
    result.train_tpr_mean = float(np.mean(train_tprs))
    result.train_tpr_std = float(np.std(train_tprs))
    result.validation_tpr_mean = float(np.mean(val_tprs))
    result.validation_tpr_std = float(np.std(val_tprs))
    if test_data:
        result.test_scores = fold_average([f.test_scores for f in result.fold_outcomes])
        result.test_report = roc(result.test_scores, test_labels, budget=budget)
    return result


EMBED_CORPUS_NONE = "none"
EMBED_CORPUS_TRAIN = "train_only"
EMBED_CORPUS_ALL = "train_unlabeled"
EMBED_CORPORA = (EMBED_CORPUS_NONE, EMBED_CORPUS_TRAIN, EMBED_CORPUS_ALL)


def ablation_matrix(
    kinds: Sequence[str],
    train_instances: Sequence[CodeInstance],
    test_instances: Sequence[CodeInstance],
    unlabeled_instances: Sequence[CodeInstance],
    embedding_config: EmbeddingConfig,
    train_config: TrainConfig,
    corpora: Sequence[str] = EMBED_CORPORA,
    k: int = 3,
    budget: float = DEFAULT_FPR_BUDGET,
    seed: int = 1,
) -> dict:
    """Train every (architecture x embedding corpus) cell, same protocol.

    Corpus options: no pretraining at all, an embedding trained on the
    labeled training set only, and one trained on the training set plus the
    unlabeled corpus. Labels never feed the embeddings.
    """
    pretrained_init = EMBED_W2V if embedding_config.mode != FASTTEXT else EMBED_FASTTEXT
    train_tokens = [tokenize(normalize_digits(i.text)) for i in train_instances]
    unlabeled_tokens = [tokenize(normalize_digits(i.text)) for i in unlabeled_instances]

    embeddings: dict[str, Optional[EmbeddingModel]] = {}
    for option in corpora:
        if option == EMBED_CORPUS_NONE:
            embeddings[option] = None
        elif option == EMBED_CORPUS_TRAIN:
            embeddings[option] = train_cbow(train_tokens, embedding_config)
        elif option == EMBED_CORPUS_ALL:
            embeddings[option] = train_cbow(train_tokens + unlabeled_tokens, embedding_config)
        else:
            raise EvaluationError(f"unknown embedding corpus option: {option}")

    inline_vocab = build_vocab(train_tokens, embedding_config).tokens
    table: dict = {"budget": budget, "cells": []}
    for kind in kinds:
        for option in corpora:
            emb = embeddings[option]
            init = EMBED_INLINE if emb is None else pretrained_init
            spec = ArchitectureSpec.for_kind(kind, embed_init=init)
            vocab_tokens = inline_vocab if emb is None else emb.vocab.tokens
            res = run_protocol(
                spec,
                train_instances,
                test_instances,
                vocab_tokens,
                train_config,
                embedding=emb,
                k=k,
                budget=budget,
                seed=seed,
            )
            cell = {
                "architecture": kind,
                "embedding_corpus": option,
                "train_tpr": res.train_tpr_mean,
                "validation_tpr": res.validation_tpr_mean,
                "test_tpr": res.test_report.tpr_at_budget if res.test_report else None,
                "test_auc": res.test_report.auc if res.test_report else None,
            }
            table["cells"].append(cell)
    return table
