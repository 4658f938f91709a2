import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from psguard.preprocess import (
    CASE_BIT,
    CHAR_WIDTH,
    NUM_SYMBOL_SLOTS,
    OTHER_SLOT,
    CodeInstance,
    char_slot,
    encode_chars,
    ingest_directory,
    ingest_jsonl,
    normalize_digits,
    tokenize,
    truncate_tokens,
)


class TestNormalizeDigits:
    def test_interleaved(self):
        assert normalize_digits("a1b2") == "a*b*"

    def test_empty(self):
        assert normalize_digits("") == ""

    def test_url_with_ip(self):
        assert normalize_digits("http://10.0.0.1/ry.exe") == "http://**.*.*.*/ry.exe"

    def test_preserves_length_and_case(self):
        text = "Get-Item 42 X9"
        out = normalize_digits(text)
        assert len(out) == len(text)
        assert out == "Get-Item ** X*"


class TestTokenize:
    def test_variable_reference(self):
        assert tokenize("Invoke-Expression $env:var") == ["invoke-expression", "$env", "var"]

    def test_punctuation_delimiters(self):
        assert tokenize("IEX(New-Object Net.WebClient)") == ["iex", "new-object", "net", "webclient"]

    def test_short_fragments_dropped(self):
        assert tokenize("a * bb") == ["bb"]

    def test_case_insensitive(self):
        assert tokenize("WRITE-HOST $X YZ") == tokenize("write-host $x yz")


class TestTruncate:
    def test_long_sequence(self):
        tokens = [f"tok{i:04d}" for i in range(2500)]
        out = truncate_tokens(tokens, 2000)
        assert len(out) == 2000
        assert out == tokens[:2000]

    def test_short_sequence_unchanged(self):
        tokens = ["aa"] * 10
        assert truncate_tokens(tokens, 2000) == tokens

    def test_exact_boundary(self):
        tokens = ["aa"] * 1000
        assert truncate_tokens(tokens, 1000) == tokens

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            truncate_tokens(["aa"], 0)


class TestEncodeChars:
    def test_case_bit(self):
        rows = encode_chars("aA", 10)
        assert rows.shape == (2, CHAR_WIDTH)
        a_slot = char_slot("a")
        assert rows[0, a_slot] == 1 and rows[1, a_slot] == 1
        assert rows[0, CASE_BIT] == 0 and rows[1, CASE_BIT] == 1

    def test_out_of_alphabet(self):
        rows = encode_chars("§", 10)
        assert rows[0, OTHER_SLOT] == 1
        assert rows[0, CASE_BIT] == 0

    def test_alternating_case_same_slots(self):
        mixed = encode_chars("iNvOkE", 10)
        lower = encode_chars("invoke", 10)
        assert np.array_equal(mixed[:, :NUM_SYMBOL_SLOTS], lower[:, :NUM_SYMBOL_SLOTS])
        assert mixed[:, CASE_BIT].tolist() == [0, 1, 0, 1, 0, 1]

    def test_truncates(self):
        assert encode_chars("abcdef", 3).shape == (3, CHAR_WIDTH)

    @given(st.text(max_size=200), st.integers(min_value=1, max_value=64))
    def test_row_structure(self, text, max_chars):
        rows = encode_chars(text, max_chars)
        assert rows.shape[0] == min(len(text), max_chars)
        if rows.size:
            assert np.all(rows[:, :NUM_SYMBOL_SLOTS].sum(axis=1) == 1)
            assert set(np.unique(rows[:, CASE_BIT])) <= {0.0, 1.0}


@given(st.text(max_size=300))
def test_digit_normalization_idempotent(text):
    once = normalize_digits(text)
    assert normalize_digits(once) == once


@given(st.text(max_size=300))
def test_tokens_match_alphabet(text):
    for token in tokenize(normalize_digits(text)):
        assert len(token) >= 2
        assert all(c in "abcdefghijklmnopqrstuvwxyz*$-" for c in token)


# ASCII only: Unicode case folding (e.g. sharp s to SS) can create new letters
@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=300))
def test_tokenize_case_insensitive(text):
    assert tokenize(text.upper()) == tokenize(text)


class TestIngestion:
    def test_directory(self, tmp_path):
        (tmp_path / "a.ps1").write_text("Get-ChildItem")
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "b.psm1").write_text("function f { }")
        (tmp_path / "c.txt").write_text("ignored")
        (tmp_path / "blank.ps1").write_text("   \n  ")
        instances = ingest_directory(tmp_path)
        assert [i.id for i in instances] == ["a.ps1", "sub/b.psm1"]

    def test_jsonl_with_bad_line(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        lines = [
            json.dumps({"id": "x", "code": "Write-Output 1", "label": "benign"}),
            "{not json",
            json.dumps({"id": "y", "code": "IEX $p", "label": "malicious",
                        "collected_at": "2018-06-01T00:00:00Z"}),
            json.dumps({"id": "z", "code": "nop"}),
        ]
        path.write_text("\n".join(lines) + "\n")
        instances, errors = ingest_jsonl(path)
        assert [i.id for i in instances] == ["x", "y", "z"]
        assert len(errors) == 1 and errors[0][0] == 2
        assert instances[1].collected_at.year == 2018
        assert instances[2].label is None

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            CodeInstance(id="a", text="x", label="weird")
