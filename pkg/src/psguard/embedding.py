"""Contextual token embeddings trained with CBOW and negative sampling.

Two modes share one trainer: plain token vectors ("w2v") and subword-enriched
vectors ("fasttext") where a token's representation is its own vector plus the
vectors of its hashed character n-grams. Query helpers answer similarity,
analogy and odd-one-out questions over the trained space.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

W2V = "w2v"
FASTTEXT = "fasttext"

_MAGIC = b"PSGEMB1\n"

# Exponent flattening the unigram distribution for noise-word draws, and the
# floor below which the linearly decaying learning rate never falls.
NOISE_EXPONENT = 0.75
MIN_LR_FRACTION = 1e-4

SUBWORD_BOUNDARY_START = "<"
SUBWORD_BOUNDARY_END = ">"


class EmbeddingError(Exception):
    pass


class EmptyVocabularyError(EmbeddingError):
    pass


class OutOfVocabularyError(EmbeddingError):
    pass


class TrainingDiverged(EmbeddingError):
    pass


@dataclass
class EmbeddingConfig:
    dim: int = 32
    window: int = 4
    negatives: int = 5
    epochs: int = 15
    min_count: int = 10
    min_token_len: int = 2
    max_token_len: int = 50
    mode: str = W2V
    subword_min_n: int = 3
    subword_max_n: int = 6
    bucket_count: int = 2_000_000
    initial_lr: Optional[float] = None
    seed: int = 1

    def __post_init__(self) -> None:
        if self.mode not in (W2V, FASTTEXT):
            raise ValueError(f"mode must be '{W2V}' or '{FASTTEXT}'")
        if self.dim <= 0 or self.window < 1 or self.negatives < 1:
            raise ValueError("dim, window and negatives must be positive")
        if self.subword_min_n > self.subword_max_n:
            raise ValueError("subword_min_n must not exceed subword_max_n")

    @property
    def learning_rate(self) -> float:
        if self.initial_lr is not None:
            return self.initial_lr
        return 0.05 if self.mode == FASTTEXT else 0.025


@dataclass
class Vocabulary:
    """Dense token index ordered by descending instance count, then token."""

    tokens: list[str]
    counts: np.ndarray
    index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __getitem__(self, token: str) -> int:
        return self.index[token]


def build_vocab(corpus: Iterable[Sequence[str]], config: EmbeddingConfig) -> Vocabulary:
    """Count distinct instances per token and keep the frequent ones.

    Tokens outside [min_token_len, max_token_len] or seen in fewer than
    min_count instances are dropped.
    """
    counts: dict[str, int] = {}
    for tokens in corpus:
        for t in set(tokens):
            if config.min_token_len <= len(t) <= config.max_token_len:
                counts[t] = counts.get(t, 0) + 1
    kept = [(t, c) for t, c in counts.items() if c >= config.min_count]
    if not kept:
        raise EmptyVocabularyError(
            f"no token appears in at least {config.min_count} instances"
        )
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    tokens = [t for t, _ in kept]
    return Vocabulary(tokens=tokens, counts=np.array([c for _, c in kept], dtype=np.int64))


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a. Fixed constants keep bucket ids stable across platforms."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def subwords(token: str, min_n: int = 3, max_n: int = 6) -> list[str]:
    """All boundary-marked character n-grams of a token, n in [min_n, max_n].

    The token is wrapped in '<' and '>', which are outside the token alphabet,
    so boundary-anchored n-grams never collide with interior ones.
    """
    wrapped = SUBWORD_BOUNDARY_START + token + SUBWORD_BOUNDARY_END
    grams = []
    for n in range(min_n, max_n + 1):
        for i in range(len(wrapped) - n + 1):
            grams.append(wrapped[i : i + n])
    return grams


def subword_buckets(token: str, min_n: int, max_n: int, bucket_count: int) -> np.ndarray:
    """Bucket indices (with multiplicity) for a token's n-grams."""
    grams = subwords(token, min_n, max_n)
    return np.array(
        [fnv1a_64(g.encode("utf-8")) % bucket_count for g in grams], dtype=np.int64
    )


def _logsigmoid_neg(scores: np.ndarray) -> np.ndarray:
    # -log sigmoid(s) == log(1 + exp(-s)), computed stably
    return np.logaddexp(0.0, -scores)


def cbow_example_loss(
    input_vectors: np.ndarray,
    output_vectors: np.ndarray,
    target: int,
    context_ids: np.ndarray,
    negative_ids: np.ndarray,
    subword_vectors: Optional[np.ndarray] = None,
    context_subword_ids: Optional[Sequence[np.ndarray]] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and full gradients for one (target, context) training example.

    The hidden state is the mean over context tokens of their representation:
    the token's input vector alone, or, when subword tables are given, the
    input vector plus the sum of its subword vectors. The loss is the
    negative-sampling logistic loss with the target labeled 1 and each noise
    word labeled 0. Gradient arrays match the parameter shapes; this is the
    reference the trainer's in-place updates follow and the function gradient
    checks probe.
    """
    reps = input_vectors[context_ids].astype(np.float64)
    if subword_vectors is not None:
        for row, sub_ids in enumerate(context_subword_ids):
            reps[row] += subword_vectors[sub_ids].sum(axis=0)
    h = reps.mean(axis=0)

    idxs = np.concatenate(([target], negative_ids)).astype(np.int64)
    u = output_vectors[idxs].astype(np.float64)
    scores = u @ h
    loss = float(_logsigmoid_neg(scores[0]) + np.sum(_logsigmoid_neg(-scores[1:])))

    labels = np.zeros(len(idxs))
    labels[0] = 1.0
    dscores = _sigmoid(scores) - labels

    d_output = np.zeros_like(output_vectors, dtype=np.float64)
    np.add.at(d_output, idxs, dscores[:, None] * h)
    dh = dscores @ u
    d_input = np.zeros_like(input_vectors, dtype=np.float64)
    np.add.at(d_input, context_ids, dh / len(context_ids))
    grads = {"input": d_input, "output": d_output}
    if subword_vectors is not None:
        d_sub = np.zeros_like(subword_vectors, dtype=np.float64)
        for sub_ids in context_subword_ids:
            np.add.at(d_sub, sub_ids, dh / len(context_ids))
        grads["subword"] = d_sub
    return loss, grads


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class EmbeddingModel:
    """Trained vector tables plus the vocabulary they index."""

    def __init__(
        self,
        config: EmbeddingConfig,
        vocab: Vocabulary,
        input_vectors: np.ndarray,
        output_vectors: np.ndarray,
        subword_vectors: Optional[np.ndarray] = None,
        epoch_losses: Optional[list[float]] = None,
    ):
        self.config = config
        self.vocab = vocab
        self.input_vectors = input_vectors
        self.output_vectors = output_vectors
        self.subword_vectors = subword_vectors
        self.epoch_losses = epoch_losses or []
        self._composed: Optional[np.ndarray] = None
        self._subword_cache: dict[str, np.ndarray] = {}

    # -- representations ----------------------------------------------------

    def _buckets(self, token: str) -> np.ndarray:
        got = self._subword_cache.get(token)
        if got is None:
            c = self.config
            got = subword_buckets(token, c.subword_min_n, c.subword_max_n, c.bucket_count)
            self._subword_cache[token] = got
        return got

    def token_vector(self, token: str) -> np.ndarray:
        """Query-side vector for a token.

        w2v: a plain vocabulary lookup, raising for unknown tokens.
        fasttext: the token's input vector (zero when out of vocabulary) plus
        the sum of its subword vectors, so unseen tokens remain representable.
        """
        idx = self.vocab.index.get(token)
        if self.config.mode == W2V:
            if idx is None:
                raise OutOfVocabularyError(f"token not in vocabulary: {token!r}")
            return self.input_vectors[idx].copy()
        vec = np.zeros(self.config.dim, dtype=self.input_vectors.dtype)
        if idx is not None:
            vec += self.input_vectors[idx]
        vec += self.subword_vectors[self._buckets(token)].sum(axis=0)
        return vec

    def composed_vectors(self) -> np.ndarray:
        """Per-vocabulary-token query vectors as one (V, dim) matrix."""
        if self._composed is None:
            if self.config.mode == W2V:
                self._composed = self.input_vectors
            else:
                mat = self.input_vectors.copy()
                for i, token in enumerate(self.vocab.tokens):
                    mat[i] += self.subword_vectors[self._buckets(token)].sum(axis=0)
                self._composed = mat
        return self._composed

    # -- queries ------------------------------------------------------------

    def _ranked(self, query: np.ndarray, exclude: set[str]) -> list[tuple[str, float]]:
        mat = self.composed_vectors()
        dists = np.linalg.norm(mat.astype(np.float64) - query.astype(np.float64), axis=1)
        order = sorted(
            (float(d), t) for d, t in zip(dists, self.vocab.tokens) if t not in exclude
        )
        return [(t, d) for d, t in order]

    def nearest_neighbors(self, token: str, k: int) -> list[tuple[str, float]]:
        """The k nearest vocabulary tokens by Euclidean distance, ascending.

        The query token itself is excluded; equal distances order
        lexicographically.
        """
        if k < 0:
            raise ValueError("k must be >= 0")
        query = self.token_vector(token)
        return self._ranked(query, exclude={token})[:k]

    def analogy_candidates(self, a: str, b: str, c: str, k: int) -> list[tuple[str, float]]:
        """Tokens nearest to vector(a) - vector(b) + vector(c), excluding a, b, c."""
        query = (
            self.token_vector(a).astype(np.float64)
            - self.token_vector(b).astype(np.float64)
            + self.token_vector(c).astype(np.float64)
        )
        return self._ranked(query, exclude={a, b, c})[:k]

    def analogy(self, a: str, b: str, c: str) -> str:
        candidates = self.analogy_candidates(a, b, c, k=1)
        if not candidates:
            raise EmbeddingError("no candidate tokens outside {a, b, c}")
        return candidates[0][0]

    def odd_one_out(self, tokens: Sequence[str]) -> str:
        """The listed token farthest from the group's mean vector.

        Ties resolve to the lexicographically smallest token.
        """
        if len(tokens) < 3:
            raise ValueError("odd_one_out needs at least 3 tokens")
        vecs = np.stack([self.token_vector(t).astype(np.float64) for t in tokens])
        center = vecs.mean(axis=0)
        dists = np.linalg.norm(vecs - center, axis=1)
        best = min(zip(-dists, tokens))
        return best[1]

    # -- persistence ----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        """Write vectors.txt (word-vector text convention, raw input table)
        and embedding.bin (config, counts, output and subword tables)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_word_vectors(
            directory / "vectors.txt", self.vocab.tokens, self.input_vectors
        )
        header = {
            "config": asdict(self.config),
            "counts": [int(c) for c in self.vocab.counts],
            "epoch_losses": self.epoch_losses,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(directory / "embedding.bin", "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.output_vectors, dtype="<f4").tobytes())
            if self.config.mode == FASTTEXT:
                fh.write(np.ascontiguousarray(self.subword_vectors, dtype="<f4").tobytes())

    @classmethod
    def load(cls, directory: str | Path) -> "EmbeddingModel":
        directory = Path(directory)
        tokens, input_vectors = load_word_vectors(directory / "vectors.txt")
        with open(directory / "embedding.bin", "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise EmbeddingError(f"bad sidecar magic: {magic!r}")
            (blob_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(blob_len))
            config = EmbeddingConfig(**header["config"])
            v, dim = len(tokens), config.dim
            output_vectors = np.frombuffer(fh.read(v * dim * 4), dtype="<f4").reshape(v, dim).copy()
            subword_vectors = None
            if config.mode == FASTTEXT:
                n = config.bucket_count * dim * 4
                subword_vectors = (
                    np.frombuffer(fh.read(n), dtype="<f4").reshape(config.bucket_count, dim).copy()
                )
        vocab = Vocabulary(tokens=tokens, counts=np.array(header["counts"], dtype=np.int64))
        return cls(
            config,
            vocab,
            input_vectors,
            output_vectors,
            subword_vectors,
            epoch_losses=list(header["epoch_losses"]),
        )


def _float_repr(x: float) -> str:
    # repr of the exact float64 value of a float32 round-trips it
    return repr(float(x))


def write_word_vectors(path: str | Path, tokens: Sequence[str], vectors: np.ndarray) -> None:
    """Text vector file: "V dim" header, then one token and its floats per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(tokens)} {vectors.shape[1]}\n")
        for token, row in zip(tokens, vectors):
            fh.write(token + " " + " ".join(_float_repr(v) for v in row) + "\n")


def load_word_vectors(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        v, dim = (int(x) for x in fh.readline().split())
        tokens = []
        mat = np.zeros((v, dim), dtype=np.float32)
        for i in range(v):
            parts = fh.readline().rstrip("\n").split(" ")
            tokens.append(parts[0])
            mat[i] = np.array([np.float32(x) for x in parts[1 : dim + 1]], dtype=np.float32)
    return tokens, mat


# -- training -----------------------------------------------------------------


def _noise_cumulative(counts: np.ndarray) -> np.ndarray:
    weights = counts.astype(np.float64) ** NOISE_EXPONENT
    return np.cumsum(weights)


def _sample_negatives(
    rng: np.random.Generator, cum: np.ndarray, count: int, forbidden: int
) -> np.ndarray:
    total = cum[-1]
    out = np.searchsorted(cum, rng.random(count) * total, side="right")
    for _ in range(100):
        bad = out == forbidden
        if not bad.any():
            break
        out[bad] = np.searchsorted(cum, rng.random(int(bad.sum())) * total, side="right")
    return out[out != forbidden] if (out == forbidden).any() else out


def train_cbow(
    corpus: Iterable[Sequence[str]],
    config: EmbeddingConfig,
    vocab: Optional[Vocabulary] = None,
    workers: int = 1,
) -> EmbeddingModel:
    """Train an embedding over a corpus of token sequences.

    One code instance is one sentence; context windows never span instances.
    The learning rate decays linearly with processed positions, from
    config.learning_rate down to a small floor, over config.epochs passes.

    workers=1 is fully deterministic for a fixed seed. workers>1 shards the
    sentences across threads that update the shared tables without locking;
    results then vary run to run, but all structural invariants still hold.
    """
    if vocab is None:
        corpus = list(corpus)
        vocab = build_vocab(corpus, config)

    rng = np.random.default_rng(config.seed)
    dim = config.dim
    v = len(vocab)
    bound = 0.5 / dim
    input_vectors = rng.uniform(-bound, bound, size=(v, dim)).astype(np.float32)
    output_vectors = np.zeros((v, dim), dtype=np.float32)
    subword_vectors = None
    subword_ids: Optional[list[np.ndarray]] = None
    if config.mode == FASTTEXT:
        subword_vectors = rng.uniform(
            -bound, bound, size=(config.bucket_count, dim)
        ).astype(np.float32)
        subword_ids = [
            subword_buckets(t, config.subword_min_n, config.subword_max_n, config.bucket_count)
            for t in vocab.tokens
        ]

    sentences = [
        np.array([vocab.index[t] for t in tokens if t in vocab.index], dtype=np.int64)
        for tokens in corpus
    ]
    sentences = [s for s in sentences if len(s) >= 1]
    cum = _noise_cumulative(vocab.counts)
    total_positions = sum(len(s) for s in sentences) * config.epochs

    model = EmbeddingModel(config, vocab, input_vectors, output_vectors, subword_vectors)
    if total_positions == 0:
        return model

    def run_shard(
        shard: list[np.ndarray], shard_rng: np.random.Generator, position_offset: int, epoch: int
    ) -> tuple[float, int, int]:
        loss_sum = 0.0
        examples = 0
        processed = position_offset + epoch * (total_positions // config.epochs)
        lr0 = config.learning_rate
        window = config.window
        for sent in shard:
            n = len(sent)
            for pos in range(n):
                alpha = lr0 * max(1.0 - processed / (total_positions + 1), MIN_LR_FRACTION)
                processed += 1
                lo = max(0, pos - window)
                ctx = np.concatenate((sent[lo:pos], sent[pos + 1 : pos + 1 + window]))
                if len(ctx) == 0:
                    continue
                target = int(sent[pos])

                reps = input_vectors[ctx].astype(np.float64)
                if subword_ids is not None:
                    for row, cid in enumerate(ctx):
                        reps[row] += subword_vectors[subword_ids[cid]].sum(axis=0)
                h = reps.mean(axis=0)

                negs = _sample_negatives(shard_rng, cum, config.negatives, target)
                idxs = np.concatenate(([target], negs))
                u = output_vectors[idxs].astype(np.float64)
                scores = u @ h
                loss = _logsigmoid_neg(scores[0]) + np.sum(_logsigmoid_neg(-scores[1:]))
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, target index {target}: "
                        f"scores={scores}"
                    )
                loss_sum += float(loss)
                examples += 1

                labels = np.zeros(len(idxs))
                labels[0] = 1.0
                g = (labels - _sigmoid(scores)) * alpha
                np.add.at(output_vectors, idxs, (g[:, None] * h).astype(np.float32))
                dh = ((g @ u) / len(ctx)).astype(np.float32)
                np.add.at(input_vectors, ctx, dh)
                if subword_ids is not None:
                    for cid in ctx:
                        np.add.at(subword_vectors, subword_ids[cid], dh)
        return loss_sum, examples, processed

    epoch_losses = []
    for epoch in range(config.epochs):
        if workers <= 1:
            loss_sum, examples, _ = run_shard(sentences, rng, 0, epoch)
        else:
            shards = [sentences[i::workers] for i in range(workers)]
            offsets = []
            acc = 0
            for shard in shards:
                offsets.append(acc)
                acc += sum(len(s) for s in shard)
            shard_rngs = [
                np.random.default_rng((config.seed, epoch, i)) for i in range(workers)
            ]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(
                    pool.map(run_shard, shards, shard_rngs, offsets, [epoch] * workers)
                )
            loss_sum = sum(r[0] for r in results)
            examples = sum(r[1] for r in results)
        epoch_losses.append(loss_sum / examples if examples else 0.0)

    model.epoch_losses = epoch_losses
    return model
