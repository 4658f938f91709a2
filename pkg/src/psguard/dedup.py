"""Corpus de-duplication for labeled PowerShell instances.

Near-identical instances (same script with different IP addresses, random
file names, digit noise) collapse to one representative so that training
and validation never see the same underlying code. Four stages: tokenize,
drop rare tokens, cluster on the surviving token set, pick a representative.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

from .preprocess import CodeInstance, normalize_digits, tokenize

DEFAULT_THRESHOLD = 100


def count_instance_frequencies(corpus: Iterable[Sequence[str]]) -> Counter:
    """Count, per token, the number of distinct instances containing it.

    Repeated occurrences inside one instance count once.
    """
    counts: Counter = Counter()
    for tokens in corpus:
        counts.update(set(tokens))
    return counts


def significant_tokens(
    counts: Counter, threshold: int = DEFAULT_THRESHOLD, strict: bool = True
) -> set[str]:
    """Tokens frequent enough to identify an instance.

    strict=True keeps tokens seen in MORE than `threshold` instances;
    strict=False relaxes to at-least.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if strict:
        return {t for t, c in counts.items() if c > threshold}
    return {t for t, c in counts.items() if c >= threshold}


def cluster_key(tokens: Sequence[str], significant: set[str]) -> str:
    """Canonical key: the sorted distinct significant tokens of an instance.

    Instances differing only in rare tokens share a key. The separator '|'
    is outside the token alphabet, so keys never collide across sets.
    """
    return "|".join(sorted(set(tokens) & significant))


def deduplicate(
    corpus: list[CodeInstance],
    threshold: int = DEFAULT_THRESHOLD,
    strict: bool = True,
) -> list[CodeInstance]:
    """One representative per cluster, ordered by ascending representative id."""
    survivors, _ = deduplicate_with_report(corpus, threshold=threshold, strict=strict)
    return survivors


def deduplicate_with_report(
    corpus: list[CodeInstance],
    threshold: int = DEFAULT_THRESHOLD,
    strict: bool = True,
) -> tuple[list[CodeInstance], dict]:
    """Deduplicate and describe the clustering.

    The representative of each cluster is the instance with the
    lexicographically smallest id, making the result independent of corpus
    order. The report carries every cluster's representative, size and member
    ids, and flags instances whose significant-token set is empty (they all
    collapse into one cluster under the empty key).
    """
    token_lists = [tokenize(normalize_digits(inst.text)) for inst in corpus]
    counts = count_instance_frequencies(token_lists)
    sig = significant_tokens(counts, threshold=threshold, strict=strict)

    clusters: dict[str, list[CodeInstance]] = {}
    for inst, tokens in zip(corpus, token_lists):
        clusters.setdefault(cluster_key(tokens, sig), []).append(inst)

    survivors = []
    report_clusters = []
    empty_key_count = 0
    for key, members in clusters.items():
        rep = min(members, key=lambda inst: inst.id)
        survivors.append(rep)
        if key == "":
            empty_key_count = len(members)
        report_clusters.append(
            {
                "representative": rep.id,
                "size": len(members),
                "members": sorted(m.id for m in members),
            }
        )
    survivors.sort(key=lambda inst: inst.id)
    report_clusters.sort(key=lambda c: c["representative"])

    report = {
        "instances": len(corpus),
        "clusters": report_clusters,
        "cluster_count": len(report_clusters),
        "survivors": len(survivors),
        "significant_tokens": len(sig),
        "threshold": threshold,
        "strict": strict,
        "empty_key_instances": empty_key_count,
    }
    return survivors, report
