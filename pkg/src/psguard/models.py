"""The four detector architectures: assembly, vectorization, training, scoring.

Token-level networks read a fixed-length vocabulary-index sequence through a
trainable embedding table; character-level networks read the 62-wide one-hot
encoding. The combined network reads both. All share the engine in nn.py.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .embedding import EmbeddingModel, FASTTEXT
from .preprocess import (
    CHAR_SLOTS,
    CHAR_WIDTH,
    CASE_BIT,
    CodeInstance,
    MALICIOUS,
    encode_char_indices,
    normalize_digits,
    tokenize,
    truncate_tokens,
)

ARCH_CNN = "cnn"
ARCH_CNN_RNN = "cnn_rnn"
ARCH_CNN4_CHAR = "cnn4_char"
ARCH_TOKEN_CHAR = "token_char"
ARCHITECTURES = (ARCH_CNN, ARCH_CNN_RNN, ARCH_CNN4_CHAR, ARCH_TOKEN_CHAR)

EMBED_INLINE = "inline_uniform"
EMBED_W2V = "pretrained_w2v"
EMBED_FASTTEXT = "pretrained_fasttext"
EMBED_MODES = (EMBED_INLINE, EMBED_W2V, EMBED_FASTTEXT)

PAD_INDEX = 0
OOV_INDEX = 1
RESERVED_ROWS = 2

INLINE_INIT_BOUND = 0.05

_CKPT_MAGIC = b"PSGNET1\n"


class ModelError(Exception):
    pass


class SingleClassError(ModelError):
    pass


@dataclass
class ArchitectureSpec:
    """One of the four fixed architectures plus its embedding initialization.

    The combined token+char network is the only one running 64 filters and
    1,000-step inputs; the others use 128 filters.
    """

    kind: str
    embed_init: str = EMBED_INLINE
    token_input_len: int = 0
    char_input_len: int = 0
    filters: int = 128
    lstm_units: int = 32
    embed_dim: int = 32
    kernel_size: int = 3
    pool: int = 3
    pool_stride: int = 3
    head_dropout: float = 0.5
    dense_units: int = 1024
    path_dropout: float = 0.5
    lstm_dropout: float = 0.0
    lstm_recurrent_dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ARCHITECTURES:
            raise ValueError(f"unknown architecture kind: {self.kind}")
        if self.embed_init not in EMBED_MODES:
            raise ValueError(f"unknown embedding initialization: {self.embed_init}")
        combined = self.kind == ARCH_TOKEN_CHAR
        reduced = (
            self.filters == 64
            and self.token_input_len == 1000
            and self.char_input_len == 1000
        )
        if combined != reduced:
            raise ValueError(
                "64 filters with 1,000-step token and char inputs apply to the "
                "combined token+char architecture and only to it"
            )

    @classmethod
    def for_kind(cls, kind: str, embed_init: str = EMBED_INLINE) -> "ArchitectureSpec":
        if kind == ARCH_CNN:
            return cls(kind, embed_init, token_input_len=2000)
        if kind == ARCH_CNN_RNN:
            return cls(
                kind,
                embed_init,
                token_input_len=2000,
                lstm_dropout=0.5,
                lstm_recurrent_dropout=0.02,
            )
        if kind == ARCH_CNN4_CHAR:
            return cls(kind, embed_init, char_input_len=1000)
        if kind == ARCH_TOKEN_CHAR:
            return cls(
                kind,
                embed_init,
                token_input_len=1000,
                char_input_len=1000,
                filters=64,
                lstm_dropout=0.3,
                lstm_recurrent_dropout=0.01,
            )
        raise ValueError(f"unknown architecture kind: {kind}")

    @property
    def uses_tokens(self) -> bool:
        return self.kind in (ARCH_CNN, ARCH_CNN_RNN, ARCH_TOKEN_CHAR)

    @property
    def uses_chars(self) -> bool:
        return self.kind in (ARCH_CNN4_CHAR, ARCH_TOKEN_CHAR)


@dataclass
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 30
    loss_tolerance: float = 1e-4
    learning_rate: float = 0.001
    seed: int = 1
    freeze_embedding: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be at least 1")


@dataclass
class VectorizedInstance:
    """Fixed-length model inputs for one code instance."""

    token_ids: Optional[np.ndarray] = None
    overlay: Optional[dict[int, np.ndarray]] = None
    char_slots: Optional[np.ndarray] = None
    char_case: Optional[np.ndarray] = None
    byte_size: int = 0


def build_token_index(tokens: Sequence[str]) -> dict[str, int]:
    """Classifier index: 0 reserved for padding, 1 for out-of-vocabulary."""
    return {t: i + RESERVED_ROWS for i, t in enumerate(tokens)}


def initial_embedding_table(
    spec: ArchitectureSpec,
    tokens: Sequence[str],
    embedding: Optional[EmbeddingModel],
    seed: int,
) -> np.ndarray:
    """Embedding table per the initialization mode.

    Inline: uniform in +-0.05. Pretrained: per-token vectors copied from the
    trained embedding (the subword-composed vector in fasttext mode). Row 0
    (padding) is zero in every mode; row 1 (out-of-vocabulary) starts uniform.
    The table stays trainable either way.
    """
    rng = np.random.default_rng(seed)
    rows = len(tokens) + RESERVED_ROWS
    table = rng.uniform(-INLINE_INIT_BOUND, INLINE_INIT_BOUND, size=(rows, spec.embed_dim)).astype(
        np.float32
    )
    table[PAD_INDEX] = 0.0
    if spec.embed_init != EMBED_INLINE:
        if embedding is None:
            raise ModelError(f"{spec.embed_init} requires a trained embedding")
        if embedding.config.dim != spec.embed_dim:
            raise ModelError(
                f"embedding dim {embedding.config.dim} != architecture dim {spec.embed_dim}"
            )
        for i, token in enumerate(tokens):
            table[i + RESERVED_ROWS] = embedding.token_vector(token)
    return table


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Per-instance loss weights: malicious weighted by the class ratio."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("training data must contain both classes")
    w_malicious = n_neg / n_pos
    return np.where(labels == 1, w_malicious, 1.0)


def label_array(instances: Sequence[CodeInstance]) -> np.ndarray:
    for inst in instances:
        if inst.label is None:
            raise ModelError(f"instance {inst.id} is unlabeled")
    return np.array([1 if i.label == MALICIOUS else 0 for i in instances], dtype=np.int8)


def vectorize(
    instance: CodeInstance,
    spec: ArchitectureSpec,
    token_index: Optional[dict[str, int]] = None,
    embedding: Optional[EmbeddingModel] = None,
) -> VectorizedInstance:
    """Map one instance to padded model inputs.

    Token path: digit-normalize, tokenize, truncate, map through the
    vocabulary with unknown tokens at the reserved index; right-pad with the
    padding index. In fasttext mode an unknown token additionally gets a
    subword-composed vector, attached as a per-position overlay. Char path:
    the first char_input_len characters of the digit-normalized text (casing
    preserved), padded with all-zero rows.
    """
    out = VectorizedInstance(byte_size=len(instance.text.encode("utf-8", errors="replace")))
    normalized = normalize_digits(instance.text)
    if spec.uses_tokens:
        tokens = truncate_tokens(tokenize(normalized), spec.token_input_len)
        ids = np.full(spec.token_input_len, PAD_INDEX, dtype=np.int32)
        overlay: dict[int, np.ndarray] = {}
        use_subwords = (
            spec.embed_init == EMBED_FASTTEXT
            and embedding is not None
            and embedding.config.mode == FASTTEXT
        )
        for pos, token in enumerate(tokens):
            idx = token_index.get(token)
            if idx is None:
                ids[pos] = OOV_INDEX
                if use_subwords:
                    overlay[pos] = embedding.token_vector(token).astype(np.float32)
            else:
                ids[pos] = idx
        out.token_ids = ids
        out.overlay = overlay
    if spec.uses_chars:
        slots, case = encode_char_indices(normalized, spec.char_input_len)
        pad_slots = np.full(spec.char_input_len, -1, dtype=np.int16)
        pad_case = np.zeros(spec.char_input_len, dtype=np.int8)
        pad_slots[: len(slots)] = slots
        pad_case[: len(case)] = case
        out.char_slots = pad_slots
        out.char_case = pad_case
    return out


def assemble_batch(
    items: Sequence[VectorizedInstance], spec: ArchitectureSpec, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Stack vectorized instances into batch arrays."""
    batch: dict[str, np.ndarray] = {}
    b = len(items)
    if spec.uses_tokens:
        ids = np.stack([it.token_ids for it in items])
        batch["token_ids"] = ids
        mask = np.zeros(ids.shape, dtype=bool)
        values = None
        if any(it.overlay for it in items):
            values = np.zeros((*ids.shape, spec.embed_dim), dtype=dtype)
            for row, it in enumerate(items):
                for pos, vec in (it.overlay or {}).items():
                    mask[row, pos] = True
                    values[row, pos] = vec
        batch["overlay_mask"] = mask
        batch["overlay_values"] = values
    if spec.uses_chars:
        onehot = np.zeros((b, spec.char_input_len, CHAR_WIDTH), dtype=dtype)
        slots = np.stack([it.char_slots for it in items]).astype(np.int64)
        case = np.stack([it.char_case for it in items])
        bidx, pidx = np.nonzero(slots >= 0)
        onehot[bidx, pidx, slots[bidx, pidx]] = 1
        onehot[:, :, CASE_BIT] = case
        batch["char_onehot"] = onehot
    return batch


class NetworkModel:
    """One assembled detector with forward, backward and parameter access."""

    def __init__(
        self,
        spec: ArchitectureSpec,
        tokens: Sequence[str],
        embedding_table: Optional[np.ndarray] = None,
        seed: int = 1,
        dtype=np.float32,
    ):
        self.spec = spec
        self.tokens = list(tokens)
        self.token_index = build_token_index(self.tokens)
        self.dtype = dtype
        self.last_shapes: dict[str, tuple] = {}
        rng = np.random.default_rng(seed + 1)
        k = spec.kernel_size

        if spec.uses_tokens:
            if embedding_table is None:
                raise ModelError("token architectures need an embedding table")
            self.embed = nn.Embedding(embedding_table.astype(dtype))
            self.token_conv = nn.Conv1D(spec.embed_dim, spec.filters, k, rng=rng, dtype=dtype)
        if spec.uses_chars:
            self.char_conv = nn.Conv1D(CHAR_WIDTH, spec.filters, k, rng=rng, dtype=dtype)

        if spec.kind == ARCH_CNN:
            self.gmp = nn.GlobalMaxPool()
            self.drop = nn.Dropout(spec.head_dropout)
            self.out = nn.Dense(spec.filters, 1, activation="sigmoid", rng=rng, dtype=dtype)
        elif spec.kind == ARCH_CNN_RNN:
            self.pool = nn.MaxPool1D(spec.pool, spec.pool_stride)
            self.lstm = nn.BiLSTM(
                spec.filters,
                spec.lstm_units,
                dropout=spec.lstm_dropout,
                recurrent_dropout=spec.lstm_recurrent_dropout,
                rng=rng,
                dtype=dtype,
            )
            self.out = nn.Dense(2 * spec.lstm_units, 1, activation="sigmoid", rng=rng, dtype=dtype)
        elif spec.kind == ARCH_CNN4_CHAR:
            self.pool = nn.MaxPool1D(spec.pool, spec.pool_stride)
            pooled = nn.MaxPool1D.output_length(spec.char_input_len - k + 1, spec.pool, spec.pool_stride)
            flat = pooled * spec.filters
            self.fc1 = nn.Dense(flat, spec.dense_units, activation="relu", rng=rng, dtype=dtype)
            self.drop1 = nn.Dropout(spec.head_dropout)
            self.fc2 = nn.Dense(spec.dense_units, spec.dense_units, activation="relu", rng=rng, dtype=dtype)
            self.drop2 = nn.Dropout(spec.head_dropout)
            self.out = nn.Dense(spec.dense_units, 1, activation="sigmoid", rng=rng, dtype=dtype)
        elif spec.kind == ARCH_TOKEN_CHAR:
            self.pool = nn.MaxPool1D(spec.pool, spec.pool_stride)
            self.token_drop = nn.Dropout(spec.path_dropout)
            self.char_gmp = nn.GlobalMaxPool()
            self.char_drop = nn.Dropout(spec.path_dropout)
            self.lstm = nn.BiLSTM(
                2 * spec.filters,
                spec.lstm_units,
                dropout=spec.lstm_dropout,
                recurrent_dropout=spec.lstm_recurrent_dropout,
                rng=rng,
                dtype=dtype,
            )
            self.out = nn.Dense(2 * spec.lstm_units, 1, activation="sigmoid", rng=rng, dtype=dtype)

    # -- parameter registry ---------------------------------------------------

    def _layers(self):
        names = [
            "embed",
            "token_conv",
            "char_conv",
            "lstm",
            "fc1",
            "fc2",
            "out",
        ]
        return [(n, getattr(self, n)) for n in names if hasattr(self, n)]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self._layers():
            for i, p in enumerate(layer.params()):
                out.append((f"{name}.{i}", p))
        return out

    def params(self) -> list[np.ndarray]:
        return [p for _, p in self.named_params()]

    def grads(self) -> list[np.ndarray]:
        return [g for _, layer in self._layers() for g in layer.grads()]

    # -- forward / backward ----------------------------------------------------

    def forward(self, batch: dict, training: bool = False, rng=None) -> np.ndarray:
        spec = self.spec
        shapes = {}
        if spec.kind == ARCH_CNN:
            e = self.embed.forward(batch["token_ids"], batch.get("overlay_mask"), batch.get("overlay_values"))
            c = self.token_conv.forward(e)
            p = self.gmp.forward(c)
            d = self.drop.forward(p, training, rng)
            prob = self.out.forward(d)[:, 0]
            shapes = {"embedded": e.shape, "conv": c.shape, "pooled": p.shape}
        elif spec.kind == ARCH_CNN_RNN:
            e = self.embed.forward(batch["token_ids"], batch.get("overlay_mask"), batch.get("overlay_values"))
            c = self.token_conv.forward(e)
            p = self.pool.forward(c)
            h = self.lstm.forward(p, training, rng)
            prob = self.out.forward(h)[:, 0]
            shapes = {"embedded": e.shape, "conv": c.shape, "pooled": p.shape, "lstm": h.shape}
        elif spec.kind == ARCH_CNN4_CHAR:
            c = self.char_conv.forward(batch["char_onehot"])
            p = self.pool.forward(c)
            self._flat_shape = p.shape
            flat = p.reshape(p.shape[0], -1)
            z = self.drop1.forward(self.fc1.forward(flat), training, rng)
            z = self.drop2.forward(self.fc2.forward(z), training, rng)
            prob = self.out.forward(z)[:, 0]
            shapes = {"conv": c.shape, "pooled": p.shape, "flat": flat.shape}
        else:  # token + char
            e = self.embed.forward(batch["token_ids"], batch.get("overlay_mask"), batch.get("overlay_values"))
            tc = self.token_conv.forward(e)
            tp = self.pool.forward(tc)
            td = self.token_drop.forward(tp, training, rng)
            cc = self.char_conv.forward(batch["char_onehot"])
            cp = self.char_gmp.forward(cc)
            cd = self.char_drop.forward(cp, training, rng)
            self._repeat_steps = td.shape[1]
            repeated = np.broadcast_to(cd[:, None, :], (cd.shape[0], td.shape[1], cd.shape[1]))
            merged = np.concatenate([td, repeated], axis=2)
            h = self.lstm.forward(merged, training, rng)
            prob = self.out.forward(h)[:, 0]
            shapes = {
                "token_conv": tc.shape,
                "token_pooled": tp.shape,
                "char_conv": cc.shape,
                "char_pooled": cp.shape,
                "merged": merged.shape,
                "lstm": h.shape,
            }
        self.last_shapes = shapes
        return prob

    def backward(self, dprob: np.ndarray) -> None:
        spec = self.spec
        dout = dprob[:, None]
        if spec.kind == ARCH_CNN:
            d = self.out.backward(dout)
            d = self.drop.backward(d)
            d = self.gmp.backward(d)
            d = self.token_conv.backward(d)
            self.embed.backward(d)
        elif spec.kind == ARCH_CNN_RNN:
            d = self.out.backward(dout)
            d = self.lstm.backward(d)
            d = self.pool.backward(d)
            d = self.token_conv.backward(d)
            self.embed.backward(d)
        elif spec.kind == ARCH_CNN4_CHAR:
            d = self.out.backward(dout)
            d = self.drop2.backward(d)
            d = self.fc2.backward(d)
            d = self.drop1.backward(d)
            d = self.fc1.backward(d)
            d = self.pool.backward(d.reshape(self._flat_shape))
            self.char_conv.backward(d)
        else:
            d = self.out.backward(dout)
            d = self.lstm.backward(d)
            f = self.spec.filters
            d_token = self.token_drop.backward(d[:, :, :f])
            d_token = self.pool.backward(d_token)
            d_token = self.token_conv.backward(d_token)
            self.embed.backward(d_token)
            d_char = d[:, :, f:].sum(axis=1)
            d_char = self.char_drop.backward(d_char)
            d_char = self.char_gmp.backward(d_char)
            self.char_conv.backward(d_char)

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def restore(self, snapshot: Sequence[np.ndarray]) -> None:
        for p, s in zip(self.params(), snapshot):
            p[...] = s


def build_model(
    spec: ArchitectureSpec,
    tokens: Sequence[str],
    embedding: Optional[EmbeddingModel] = None,
    seed: int = 1,
    dtype=np.float32,
) -> NetworkModel:
    """Assemble a detector for a classifier vocabulary.

    `tokens` is the ordered classifier vocabulary (from the pretrained
    embedding, or built from the training corpus in inline mode).
    """
    table = None
    if spec.uses_tokens:
        table = initial_embedding_table(spec, tokens, embedding, seed)
    return NetworkModel(spec, tokens, table, seed=seed, dtype=dtype)


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    snapshots: list[list[np.ndarray]] = field(default_factory=list)
    stopped_early: bool = False


def train(
    model: NetworkModel,
    data: Sequence[VectorizedInstance],
    labels: np.ndarray,
    config: TrainConfig,
    keep_snapshots: bool = True,
    on_epoch=None,
) -> TrainResult:
    """Weighted binary cross-entropy training with Adam.

    Shuffles with a seeded generator each epoch, checkpoints after every
    epoch and stops early once the epoch-mean loss stops improving by at
    least the configured tolerance (non-positive tolerance disables the
    stop). on_epoch(epoch, model, mean_loss) runs after each epoch
    checkpoint; returning True stops training.
    """
    labels = np.asarray(labels, dtype=np.float64)
    weights = class_weights(labels)
    n = len(data)
    rng = np.random.default_rng(config.seed)
    params = model.params()
    if config.freeze_embedding and hasattr(model, "embed"):
        embed_table = model.embed.table
        keep = [i for i, p in enumerate(params) if p is not embed_table]
    else:
        keep = list(range(len(params)))
    opt = nn.Adam([params[i] for i in keep], lr=config.learning_rate)

    result = TrainResult()
    prev_loss = None
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = assemble_batch([data[i] for i in idx], model.spec, dtype=model.dtype)
            probs = model.forward(batch, training=True, rng=rng)
            loss, dprob = nn.weighted_bce(probs, labels[idx], weights[idx])
            loss_sum += float(loss.sum())
            model.backward((dprob / len(idx)).astype(model.dtype))
            grads = model.grads()
            opt.step([grads[i] for i in keep])
        mean_loss = loss_sum / n
        result.epoch_losses.append(mean_loss)
        if keep_snapshots:
            result.snapshots.append(model.snapshot())
        if on_epoch is not None and on_epoch(epoch, model, mean_loss):
            result.stopped_early = True
            break
        if (
            config.loss_tolerance > 0
            and prev_loss is not None
            and prev_loss - mean_loss < config.loss_tolerance
        ):
            result.stopped_early = True
            break
        prev_loss = mean_loss
    return result


def score(
    model: NetworkModel, data: Sequence[VectorizedInstance], batch_size: int = 256
) -> np.ndarray:
    """Deterministic inference probabilities; dropout inactive."""
    out = np.empty(len(data), dtype=np.float64)
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        batch = assemble_batch(chunk, model.spec, dtype=model.dtype)
        out[start : start + len(chunk)] = model.forward(batch, training=False)
    return out


# -- checkpoints ----------------------------------------------------------------


def vocab_hash(tokens: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()


def save_checkpoint(model: NetworkModel, path: str | Path) -> None:
    """Versioned binary checkpoint.

    Layout: magic, JSON header (architecture, vocabulary, char alphabet,
    parameter shape table), then each parameter's raw little-endian floats in
    header order.
    """
    named = model.named_params()
    header = {
        "format": 1,
        "spec": asdict(model.spec),
        "tokens": model.tokens,
        "vocab_hash": vocab_hash(model.tokens),
        "char_slots": CHAR_SLOTS,
        "params": [[name, list(p.shape)] for name, p in named],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> NetworkModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ModelError(f"not a model checkpoint: {path}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len))
        if header["char_slots"] != CHAR_SLOTS:
            raise ModelError(
                "checkpoint was written with a different character alphabet; "
                "encoder and model would disagree"
            )
        spec = ArchitectureSpec(**header["spec"])
        tokens = header["tokens"]
        table = None
        if spec.uses_tokens:
            table = np.zeros((len(tokens) + RESERVED_ROWS, spec.embed_dim), dtype=np.float32)
        model = NetworkModel(spec, tokens, table)
        for (name, shape), param in zip(header["params"], model.params()):
            want = tuple(shape)
            if tuple(param.shape) != want:
                raise ModelError(f"parameter {name}: shape {param.shape} != checkpoint {want}")
            data = np.frombuffer(fh.read(param.size * 4), dtype="<f4").reshape(want)
            param[...] = data
    return model
