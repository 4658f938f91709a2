import numpy as np
import pytest

from psguard.embedding import EmbeddingConfig, train_cbow
from psguard.models import (
    ARCH_CNN,
    ARCH_CNN4_CHAR,
    ARCH_CNN_RNN,
    ARCH_TOKEN_CHAR,
    ArchitectureSpec,
    EMBED_FASTTEXT,
    EMBED_INLINE,
    EMBED_W2V,
    ModelError,
    OOV_INDEX,
    PAD_INDEX,
    SingleClassError,
    TrainConfig,
    assemble_batch,
    build_model,
    build_token_index,
    class_weights,
    initial_embedding_table,
    label_array,
    load_checkpoint,
    save_checkpoint,
    score,
    train,
    vectorize,
)
from psguard.preprocess import BENIGN, MALICIOUS, CodeInstance
from psguard.synth import planted_marker_corpus


def small_vocab():
    return [f"token-{i:02d}" for i in range(20)]


def embedding_for(tokens, mode="w2v", seed=5):
    corpus = [[t] * 2 + ["filler-ctx"] for t in tokens for _ in range(2)]
    config = EmbeddingConfig(min_count=1, mode=mode, seed=seed, bucket_count=256, epochs=1)
    return train_cbow(corpus, config)


class TestArchitectureSpec:
    def test_paper_defaults(self):
        cnn = ArchitectureSpec.for_kind(ARCH_CNN)
        assert (cnn.token_input_len, cnn.filters) == (2000, 128)
        rnn = ArchitectureSpec.for_kind(ARCH_CNN_RNN)
        assert (rnn.lstm_dropout, rnn.lstm_recurrent_dropout) == (0.5, 0.02)
        char4 = ArchitectureSpec.for_kind(ARCH_CNN4_CHAR)
        assert (char4.char_input_len, char4.filters) == (1000, 128)
        tc = ArchitectureSpec.for_kind(ARCH_TOKEN_CHAR)
        assert (tc.token_input_len, tc.char_input_len, tc.filters) == (1000, 1000, 64)
        assert (tc.lstm_dropout, tc.lstm_recurrent_dropout) == (0.3, 0.01)

    def test_reduced_configuration_is_exclusive(self):
        with pytest.raises(ValueError):
            ArchitectureSpec(kind=ARCH_CNN, token_input_len=1000, char_input_len=1000, filters=64)
        with pytest.raises(ValueError):
            ArchitectureSpec(kind=ARCH_TOKEN_CHAR, token_input_len=1000, char_input_len=1000, filters=128)


class TestShapes:
    def test_cnn_shapes(self):
        spec = ArchitectureSpec.for_kind(ARCH_CNN)
        model = build_model(spec, small_vocab(), seed=0)
        inst = CodeInstance(id="x", text="Get-ChildItem " * 50)
        batch = assemble_batch([vectorize(inst, spec, model.token_index)], spec)
        model.forward(batch)
        assert model.last_shapes["conv"] == (1, 1998, 128)
        assert model.last_shapes["pooled"] == (1, 128)

    def test_cnn_rnn_shapes(self):
        spec = ArchitectureSpec.for_kind(ARCH_CNN_RNN)
        model = build_model(spec, small_vocab(), seed=0)
        inst = CodeInstance(id="x", text="Write-Output hello " * 20)
        batch = assemble_batch([vectorize(inst, spec, model.token_index)], spec)
        model.forward(batch)
        assert model.last_shapes["conv"] == (1, 1998, 128)
        assert model.last_shapes["pooled"] == (1, 666, 128)
        assert model.last_shapes["lstm"] == (1, 64)

    def test_cnn4_char_shapes(self):
        spec = ArchitectureSpec.for_kind(ARCH_CNN4_CHAR)
        model = build_model(spec, [], seed=0)
        inst = CodeInstance(id="x", text="IEX (New-Object Net.WebClient)")
        batch = assemble_batch([vectorize(inst, spec)], spec)
        model.forward(batch)
        assert model.last_shapes["conv"] == (1, 998, 128)
        assert model.last_shapes["pooled"] == (1, 332, 128)

    def test_token_char_shapes(self):
        spec = ArchitectureSpec.for_kind(ARCH_TOKEN_CHAR)
        model = build_model(spec, small_vocab(), seed=0)
        inst = CodeInstance(id="x", text="Invoke-Command $x " * 30)
        batch = assemble_batch([vectorize(inst, spec, model.token_index)], spec)
        model.forward(batch)
        assert model.last_shapes["token_pooled"] == (1, 332, 64)
        assert model.last_shapes["char_pooled"] == (1, 64)
        assert model.last_shapes["merged"] == (1, 332, 128)
        assert model.last_shapes["lstm"] == (1, 64)

    @pytest.mark.parametrize("kind", [ARCH_CNN, ARCH_CNN_RNN, ARCH_CNN4_CHAR, ARCH_TOKEN_CHAR])
    @pytest.mark.parametrize("text_len", [1, 10, 5000])
    def test_any_input_length_normalizes(self, kind, text_len):
        spec = ArchitectureSpec.for_kind(kind)
        model = build_model(spec, small_vocab(), seed=0)
        inst = CodeInstance(id="x", text="x" * text_len)
        batch = assemble_batch([vectorize(inst, spec, model.token_index)], spec)
        prob = model.forward(batch)
        assert prob.shape == (1,)
        assert 0 < prob[0] < 1


class TestVectorize:
    def test_empty_instance_scores(self):
        spec = ArchitectureSpec.for_kind(ARCH_CNN)
        model = build_model(spec, small_vocab(), seed=0)
        inst = CodeInstance(id="x", text="!!!")  # tokenizes to nothing
        vec = vectorize(inst, spec, model.token_index)
        assert np.all(vec.token_ids == PAD_INDEX)
        prob = model.forward(assemble_batch([vec], spec))
        assert 0 < prob[0] < 1

    def test_exact_length_no_padding(self):
        spec = ArchitectureSpec.for_kind(ARCH_CNN)
        index = build_token_index(["aa"])
        text = " ".join(["aa"] * 2000)
        vec = vectorize(CodeInstance(id="x", text=text), spec, index)
        assert np.all(vec.token_ids == index["aa"])

    def test_oov_maps_to_reserved_index(self):
        spec = ArchitectureSpec.for_kind(ARCH_CNN)
        index = build_token_index(["known-token"])
        vec = vectorize(CodeInstance(id="x", text="known-token mystery-token"), spec, index)
        assert vec.token_ids[0] == index["known-token"]
        assert vec.token_ids[1] == OOV_INDEX
        assert not vec.overlay

    def test_fasttext_oov_overlay(self):
        tokens = ["invoke-webrequest", "other-token"]
        emb = embedding_for(tokens, mode="fasttext")
        spec = ArchitectureSpec.for_kind(ARCH_CNN, embed_init=EMBED_FASTTEXT)
        index = build_token_index(emb.vocab.tokens)
        vec = vectorize(
            CodeInstance(id="x", text="invoke-webrequests"), spec, index, emb
        )
        assert vec.token_ids[0] == OOV_INDEX
        assert 0 in vec.overlay
        assert np.linalg.norm(vec.overlay[0]) > 0
        assert np.array_equal(vec.overlay[0], emb.token_vector("invoke-webrequests").astype(np.float32))


class TestEmbeddingTable:
    def test_pretrained_rows_copied(self):
        emb = embedding_for(["alpha-tok", "beta-tok"], mode="w2v")
        spec = ArchitectureSpec.for_kind(ARCH_CNN, embed_init=EMBED_W2V)
        table = initial_embedding_table(spec, emb.vocab.tokens, emb, seed=0)
        assert np.all(table[PAD_INDEX] == 0)
        for i, token in enumerate(emb.vocab.tokens):
            assert np.allclose(table[i + 2], emb.token_vector(token))

    def test_dim_mismatch_rejected(self):
        corpus = [["aa", "bb"]] * 3
        emb = train_cbow(corpus, EmbeddingConfig(dim=8, min_count=1, epochs=1))
        spec = ArchitectureSpec.for_kind(ARCH_CNN, embed_init=EMBED_W2V)
        with pytest.raises(ModelError):
            initial_embedding_table(spec, emb.vocab.tokens, emb, seed=0)

    def test_pretrained_required(self):
        spec = ArchitectureSpec.for_kind(ARCH_CNN, embed_init=EMBED_W2V)
        with pytest.raises(ModelError):
            initial_embedding_table(spec, ["aa"], None, seed=0)


class TestClassWeights:
    def test_ratio_rule(self):
        labels = np.array([0] * 30_000 + [1] * 3_000)
        weights = class_weights(labels)
        assert weights[-1] == 10.0
        assert weights[0] == 1.0

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassError):
            class_weights(np.zeros(5))


def tiny_training_setup(kind=ARCH_CNN, n=24, seed=3):
    corpus = planted_marker_corpus(n=n, seed=seed, lines=4)
    spec = ArchitectureSpec.for_kind(kind)
    from psguard.embedding import build_vocab
    from psguard.preprocess import token_sequences

    vocab = build_vocab(list(token_sequences(corpus)), EmbeddingConfig(min_count=2)).tokens
    model = build_model(spec, vocab, seed=seed)
    data = [vectorize(i, spec, model.token_index) for i in corpus]
    labels = label_array(corpus)
    return model, data, labels, corpus


class TestTraining:
    def test_seeded_rerun_identical_losses(self):
        results = []
        for _ in range(2):
            model, data, labels, _ = tiny_training_setup()
            cfg = TrainConfig(batch_size=8, max_epochs=2, seed=9)
            results.append(train(model, data, labels, cfg).epoch_losses)
        assert results[0] == results[1]

    def test_single_class_rejected(self):
        model, data, labels, _ = tiny_training_setup()
        with pytest.raises(SingleClassError):
            train(model, data, np.zeros_like(labels), TrainConfig(max_epochs=1))

    def test_marker_separates_quickly(self):
        model, data, labels, _ = tiny_training_setup(n=32)
        cfg = TrainConfig(batch_size=8, max_epochs=8, seed=2)
        train(model, data, labels, cfg, keep_snapshots=False)
        probs = score(model, data)
        assert probs[labels == 1].min() > probs[labels == 0].max()

    def test_snapshots_per_epoch(self):
        model, data, labels, _ = tiny_training_setup()
        cfg = TrainConfig(batch_size=8, max_epochs=3, seed=2, loss_tolerance=0.0)
        result = train(model, data, labels, cfg)
        assert len(result.snapshots) == len(result.epoch_losses) == 3

    def test_freeze_embedding(self):
        model, data, labels, _ = tiny_training_setup()
        before = model.embed.table.copy()
        cfg = TrainConfig(batch_size=8, max_epochs=2, seed=2, freeze_embedding=True)
        train(model, data, labels, cfg, keep_snapshots=False)
        assert np.array_equal(model.embed.table, before)


class TestScoring:
    def test_inference_deterministic(self):
        model, data, labels, _ = tiny_training_setup()
        a = score(model, data[:4])
        b = score(model, data[:4])
        assert np.array_equal(a, b)

    def test_oov_replacement_invariance_w2v(self):
        # two different unknown tokens map to the same reserved row
        spec = ArchitectureSpec.for_kind(ARCH_CNN)
        model = build_model(spec, small_vocab(), seed=1)
        a = CodeInstance(id="a", text="token-00 zz-unknown-aa token-01")
        b = CodeInstance(id="b", text="token-00 qq-unknown-bb token-01")
        pa = score(model, [vectorize(a, spec, model.token_index)])
        pb = score(model, [vectorize(b, spec, model.token_index)])
        assert pa[0] == pb[0]

    def test_fasttext_oov_not_invariant(self):
        emb = embedding_for(["stable-token", "other-token"], mode="fasttext")
        spec = ArchitectureSpec.for_kind(ARCH_CNN, embed_init=EMBED_FASTTEXT)
        model = build_model(spec, emb.vocab.tokens, emb, seed=1)
        a = CodeInstance(id="a", text="stable-token unknown-alpha")
        b = CodeInstance(id="b", text="stable-token unknown-beta")
        pa = score(model, [vectorize(a, spec, model.token_index, emb)])
        pb = score(model, [vectorize(b, spec, model.token_index, emb)])
        assert pa[0] != pb[0]


class TestCheckpoints:
    def test_round_trip_scores(self, tmp_path):
        model, data, labels, _ = tiny_training_setup()
        cfg = TrainConfig(batch_size=8, max_epochs=2, seed=2)
        train(model, data, labels, cfg, keep_snapshots=False)
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.spec == model.spec
        assert loaded.tokens == model.tokens
        assert np.array_equal(score(loaded, data), score(model, data))

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        for name in ("a", "b"):
            model, data, labels, _ = tiny_training_setup()
            cfg = TrainConfig(batch_size=8, max_epochs=2, seed=2)
            train(model, data, labels, cfg, keep_snapshots=False)
            save_checkpoint(model, tmp_path / f"{name}.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ModelError):
            load_checkpoint(path)
