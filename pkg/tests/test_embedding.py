import numpy as np
import pytest

from psguard.embedding import (
    EmbeddingConfig,
    EmbeddingModel,
    EmptyVocabularyError,
    OutOfVocabularyError,
    Vocabulary,
    build_vocab,
    cbow_example_loss,
    fnv1a_64,
    load_word_vectors,
    subword_buckets,
    subwords,
    train_cbow,
    write_word_vectors,
)
from .conftest import finite_difference, relative_error

GRAD_TOL = 1e-4


class TestSubwords:
    def test_iex(self):
        assert set(subwords("iex")) == {"<ie", "iex", "ex>", "<iex", "iex>", "<iex>"}

    def test_ab(self):
        assert set(subwords("ab")) == {"<ab", "ab>", "<ab>"}

    def test_hash_deterministic(self):
        a = subword_buckets("invoke-webrequest", 3, 6, 2048)
        b = subword_buckets("invoke-webrequest", 3, 6, 2048)
        assert np.array_equal(a, b)
        assert a.max() < 2048 and a.min() >= 0

    def test_fnv1a_known_values(self):
        # standard FNV-1a 64-bit test vectors
        assert fnv1a_64(b"") == 0xCBF29CE484222325
        assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C


class TestVocabulary:
    def test_length_filters(self):
        config = EmbeddingConfig(min_count=1)
        corpus = [["aa", "x" * 51, "bb"]] * 2
        vocab = build_vocab(corpus, config)
        assert "aa" in vocab and "bb" in vocab
        assert "x" * 51 not in vocab

    def test_min_count(self):
        config = EmbeddingConfig(min_count=10)
        corpus = [["rare", "common"] if i < 9 else ["common"] for i in range(20)]
        vocab = build_vocab(corpus, config)
        assert "common" in vocab and "rare" not in vocab

    def test_derived_count(self, rng):
        # 30 distinct tokens; 12 planted in enough instances to qualify
        config = EmbeddingConfig(min_count=5)
        frequent = [f"freq-{i:02d}" for i in range(12)]
        rare = [f"rare-{i:02d}" for i in range(18)]
        corpus = []
        for k in range(10):
            sent = list(frequent)
            sent.append(rare[k])  # each rare token in exactly 1 instance
            corpus.append(sent)
        corpus.append(rare[10:])
        vocab = build_vocab(corpus, config)
        brute = {
            t
            for t in frequent + rare
            if sum(1 for s in corpus if t in s) >= config.min_count
        }
        assert len(vocab) == len(brute) == 12

    def test_order_by_count_then_token(self):
        config = EmbeddingConfig(min_count=1)
        corpus = [["bb", "aa"], ["bb"], ["cc", "aa"]]
        vocab = build_vocab(corpus, config)
        assert vocab.tokens == ["aa", "bb", "cc"]  # counts 2,2,1; tie by token

    def test_empty_vocab_raises(self):
        with pytest.raises(EmptyVocabularyError):
            build_vocab([["aa"]], EmbeddingConfig(min_count=10))


class TestCbowLossGradient:
    @pytest.mark.parametrize("with_subwords", [False, True])
    def test_matches_finite_differences(self, rng, with_subwords):
        for _ in range(20):
            v, dim, buckets = 6, 5, 16
            input_vectors = rng.standard_normal((v, dim))
            output_vectors = rng.standard_normal((v, dim))
            subword_vectors = rng.standard_normal((buckets, dim)) if with_subwords else None
            context = rng.integers(0, v, size=3)
            sub_ids = (
                [rng.integers(0, buckets, size=4) for _ in context] if with_subwords else None
            )
            target = int(rng.integers(0, v))
            negatives = rng.integers(0, v, size=5)

            def objective():
                loss, _ = cbow_example_loss(
                    input_vectors, output_vectors, target, context, negatives,
                    subword_vectors, sub_ids,
                )
                return loss

            _, grads = cbow_example_loss(
                input_vectors, output_vectors, target, context, negatives,
                subword_vectors, sub_ids,
            )
            arrays = [input_vectors, output_vectors]
            keys = ["input", "output"]
            if with_subwords:
                arrays.append(subword_vectors)
                keys.append("subword")
            numeric = finite_difference(objective, arrays)
            for key, want in zip(keys, numeric):
                assert relative_error(grads[key], want) < GRAD_TOL, key


def paired_context_corpus(repeats: int = 60) -> list[list[str]]:
    """aa and bb appear in identical contexts; other tokens do not."""
    corpus = []
    for i in range(repeats):
        corpus.append(["left-ctx", "aa" if i % 2 == 0 else "bb", "right-ctx"])
        corpus.append(["open-tag", "cc", "close-tag"])
        corpus.append(["start-kw", "dd", "stop-kw"])
    return corpus


class TestTraining:
    def test_identical_contexts_become_neighbors(self):
        config = EmbeddingConfig(min_count=1, seed=3)
        model = train_cbow(paired_context_corpus(), config)
        neighbors = [t for t, _ in model.nearest_neighbors("aa", 1)]
        assert neighbors == ["bb"]
        neighbors = [t for t, _ in model.nearest_neighbors("bb", 1)]
        assert neighbors == ["aa"]

    def test_no_training_pairs(self):
        # the sole sentence has one in-vocab token: no (target, context) pairs
        config = EmbeddingConfig(min_count=1)
        vocab = Vocabulary(tokens=["aa"], counts=np.array([1]))
        model = train_cbow([["aa"]], config, vocab=vocab)
        assert model.epoch_losses == [0.0] * config.epochs

    def test_loss_trend_non_increasing(self):
        config = EmbeddingConfig(min_count=1, seed=5, initial_lr=0.005)
        model = train_cbow(paired_context_corpus(30), config)
        losses = model.epoch_losses
        assert len(losses) == 15
        # monotone trend with tolerance for sampling noise
        violations = sum(1 for a, b in zip(losses, losses[1:]) if b > a + 0.05)
        assert violations == 0
        assert losses[-1] < losses[0]

    def test_deterministic_artifacts(self, tmp_path):
        config = EmbeddingConfig(min_count=1, seed=11, mode="fasttext", bucket_count=512)
        for name in ("one", "two"):
            model = train_cbow(paired_context_corpus(20), config)
            model.save(tmp_path / name)
        for f in ("vectors.txt", "embedding.bin"):
            assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()

    def test_parallel_mode_trains(self):
        config = EmbeddingConfig(min_count=1, seed=2)
        model = train_cbow(paired_context_corpus(20), config, workers=3)
        assert np.all(np.isfinite(model.input_vectors))
        assert len(model.epoch_losses) == 15


def hand_built_model(coords: dict[str, list[float]], mode="w2v", dim=3) -> EmbeddingModel:
    tokens = list(coords)
    config = EmbeddingConfig(dim=dim, min_count=1, mode=mode, bucket_count=64)
    vocab = Vocabulary(tokens=tokens, counts=np.ones(len(tokens), dtype=np.int64))
    vectors = np.array([coords[t] for t in tokens], dtype=np.float32)
    sub = np.zeros((64, dim), dtype=np.float32) if mode == "fasttext" else None
    return EmbeddingModel(config, vocab, vectors, np.zeros_like(vectors), sub)


class TestQueries:
    def test_w2v_oov_raises(self):
        model = hand_built_model({"aa": [0, 0, 0], "bb": [1, 0, 0]})
        with pytest.raises(OutOfVocabularyError):
            model.token_vector("cc")

    def test_nearest_k0(self):
        model = hand_built_model({"aa": [0, 0, 0], "bb": [1, 0, 0]})
        assert model.nearest_neighbors("aa", 0) == []

    def test_nearest_matches_hand_distances(self):
        model = hand_built_model({"aa": [0, 0, 0], "bb": [3, 0, 0], "cc": [1, 1, 0]})
        got = model.nearest_neighbors("aa", 2)
        assert [t for t, _ in got] == ["cc", "bb"]
        assert got[0][1] == pytest.approx(np.sqrt(2))
        assert got[1][1] == pytest.approx(3.0)

    def test_nearest_prefix_property(self, rng):
        coords = {f"tk{i:02d}": rng.standard_normal(3).tolist() for i in range(12)}
        model = hand_built_model(coords)
        for k in range(11):
            small = model.nearest_neighbors("tk00", k)
            big = model.nearest_neighbors("tk00", k + 1)
            assert big[:k] == small

    def test_analogy_brute_force(self, rng):
        coords = {f"w{i}": rng.standard_normal(4).tolist() for i in range(8)}
        model = hand_built_model(coords, dim=4)
        a, b, c = "w0", "w1", "w2"
        query = (
            np.array(coords[a]) - np.array(coords[b]) + np.array(coords[c])
        )
        candidates = {
            t: np.linalg.norm(np.array(v) - query)
            for t, v in coords.items()
            if t not in (a, b, c)
        }
        want = min(candidates, key=lambda t: (candidates[t], t))
        assert model.analogy(a, b, c) == want

    def test_analogy_cancellation(self):
        coords = {"aa": [0, 0], "bb": [5, 5], "cc": [0.4, 0], "dd": [3, 3]}
        model = hand_built_model(coords, dim=2)
        # vec(aa) - vec(bb) + vec(bb) == vec(aa); nearest excluding {aa, bb}
        assert model.analogy("aa", "bb", "bb") == "cc"

    def test_odd_one_out_distant(self):
        model = hand_built_model(
            {"aa": [0, 0, 0], "bb": [0.1, 0, 0], "cc": [0, 0.1, 0], "zz": [9, 9, 9]}
        )
        assert model.odd_one_out(["aa", "bb", "cc", "zz"]) == "zz"

    def test_odd_one_out_tie_lexicographic(self):
        model = hand_built_model({"cc": [1, 1, 1], "aa": [1, 1, 1], "bb": [1, 1, 1]})
        assert model.odd_one_out(["cc", "aa", "bb"]) == "aa"

    def test_odd_one_out_needs_three(self):
        model = hand_built_model({"aa": [0, 0, 0], "bb": [1, 0, 0]})
        with pytest.raises(ValueError):
            model.odd_one_out(["aa", "bb"])


class TestFastTextComposition:
    def test_in_vocab_is_lookup_plus_subword_sum(self):
        config = EmbeddingConfig(min_count=1, seed=4, mode="fasttext", bucket_count=256)
        model = train_cbow(paired_context_corpus(10), config)
        token = "aa"
        idx = model.vocab[token]
        buckets = subword_buckets(token, 3, 6, 256)
        expected = model.input_vectors[idx] + model.subword_vectors[buckets].sum(axis=0)
        assert np.array_equal(model.token_vector(token), expected)

    def test_oov_sharing_subwords_nonzero(self):
        config = EmbeddingConfig(min_count=1, seed=4, mode="fasttext", bucket_count=256)
        model = train_cbow(paired_context_corpus(10), config)
        vec = model.token_vector("left-ctxx")  # unseen, shares subwords with left-ctx
        buckets = subword_buckets("left-ctxx", 3, 6, 256)
        expected = model.subword_vectors[buckets].sum(axis=0)
        assert np.array_equal(vec, expected)
        assert np.linalg.norm(vec) > 0

    def test_decomposition_survives_persistence(self, tmp_path):
        config = EmbeddingConfig(min_count=1, seed=4, mode="fasttext", bucket_count=256)
        model = train_cbow(paired_context_corpus(10), config)
        model.save(tmp_path)
        loaded = EmbeddingModel.load(tmp_path)
        for token in loaded.vocab.tokens:
            assert np.array_equal(loaded.token_vector(token), model.token_vector(token))


class TestPersistence:
    def test_round_trip_w2v(self, tmp_path):
        config = EmbeddingConfig(min_count=1, seed=8)
        model = train_cbow(paired_context_corpus(10), config)
        model.save(tmp_path)
        loaded = EmbeddingModel.load(tmp_path)
        assert loaded.vocab.tokens == model.vocab.tokens
        assert np.array_equal(loaded.input_vectors, model.input_vectors)
        assert np.array_equal(loaded.output_vectors, model.output_vectors)
        assert loaded.epoch_losses == model.epoch_losses

    def test_word_vector_text_round_trip(self, tmp_path):
        tokens = ["alpha", "beta"]
        mat = np.array([[0.125, -1.5], [3.0e-7, 42.0]], dtype=np.float32)
        path = tmp_path / "vectors.txt"
        write_word_vectors(path, tokens, mat)
        got_tokens, got = load_word_vectors(path)
        assert got_tokens == tokens
        assert np.array_equal(got, mat)
