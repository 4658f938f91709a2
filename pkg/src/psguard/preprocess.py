"""Normalization and input encoding for PowerShell code instances.

Turns raw code into the two model-input views used everywhere downstream:
a lowercase token sequence and a character one-hot matrix with a casing bit.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

BENIGN = "benign"
MALICIOUS = "malicious"
LABELS = (BENIGN, MALICIOUS)

# Token alphabet: everything outside it delimits. Digits never appear here
# because they are rewritten to '*' before tokenization. '$' prefixes
# variables and '-' joins verb-noun command names, so both stay in tokens.
_TOKEN_RE = re.compile(r"[A-Za-z*$\-]+")
MIN_TOKEN_LEN = 2

_DIGIT_TABLE = str.maketrans({d: "*" for d in "0123456789"})

# Character encoder alphabet. One slot per character below, one trailing
# "other" slot for anything else, plus a casing bit: 61 + 1 = 62 columns,
# matching the fixed kernel width of the character-level networks.
# Uppercase A-Z fold onto their lowercase slot with the casing bit set.
CHAR_SLOTS = (
    "abcdefghijklmnopqrstuvwxyz"
    "*$- "
    ".,;:'\"`()[]{}<>|&!?@#%^+=/\\_"
    "\n\t"
)
OTHER_SLOT = len(CHAR_SLOTS)  # 60
NUM_SYMBOL_SLOTS = OTHER_SLOT + 1  # 61
CASE_BIT = NUM_SYMBOL_SLOTS  # 61
CHAR_WIDTH = NUM_SYMBOL_SLOTS + 1  # 62

_SLOT_OF = {c: i for i, c in enumerate(CHAR_SLOTS)}


class IngestError(Exception):
    """Raised when a corpus source cannot be ingested at all."""


@dataclass(frozen=True)
class CodeInstance:
    """One unit of PowerShell content (command, script, or module)."""

    id: str
    text: str
    label: Optional[str] = None
    collected_at: Optional[datetime] = None

    def __post_init__(self) -> None:
        if self.label is not None and self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


def normalize_digits(text: str) -> str:
    """Replace every decimal digit with '*'; everything else is untouched."""
    return text.translate(_DIGIT_TABLE)


def tokenize(text: str) -> list[str]:
    """Split digit-normalized text into lowercase tokens of length >= 2.

    Any character outside {a-z, A-Z, '*', '$', '-'} is a delimiter and is
    dropped. Single-character fragments are discarded.
    """
    return [
        frag.lower()
        for frag in _TOKEN_RE.findall(text)
        if len(frag) >= MIN_TOKEN_LEN
    ]


def truncate_tokens(tokens: list[str], max_tokens: int) -> list[str]:
    """Keep the first max_tokens tokens; shorter sequences pass through."""
    if max_tokens <= 0:
        raise ValueError("max_tokens must be positive")
    return tokens[:max_tokens]


def char_slot(ch: str) -> int:
    """Symbol slot for one character; uppercase folds to its letter slot."""
    if "A" <= ch <= "Z":
        return _SLOT_OF[ch.lower()]
    return _SLOT_OF.get(ch, OTHER_SLOT)


def encode_char_indices(text: str, max_chars: int) -> tuple[np.ndarray, np.ndarray]:
    """Compact character encoding: (symbol slots, casing bits) as int arrays.

    The one-hot expansion is deferred so corpora can be held in memory as
    two small integer vectors per instance.
    """
    chars = text[:max_chars]
    slots = np.fromiter((char_slot(c) for c in chars), dtype=np.int16, count=len(chars))
    case = np.fromiter(
        (1 if "A" <= c <= "Z" else 0 for c in chars), dtype=np.int8, count=len(chars)
    )
    return slots, case


def expand_char_onehot(
    slots: np.ndarray, case: np.ndarray, dtype=np.float32
) -> np.ndarray:
    """Expand compact slot/case vectors to an (n, 62) one-hot-plus-case matrix."""
    n = len(slots)
    rows = np.zeros((n, CHAR_WIDTH), dtype=dtype)
    if n:
        rows[np.arange(n), slots.astype(np.int64)] = 1
        rows[:, CASE_BIT] = case
    return rows


def encode_chars(text: str, max_chars: int, dtype=np.float32) -> np.ndarray:
    """Encode the first max_chars characters as 62-wide one-hot rows.

    Each row sets exactly one of the 61 symbol slots; the final column is 1
    iff the source character was an ASCII uppercase letter. Text must already
    be digit-normalized; casing must NOT have been folded.
    """
    slots, case = encode_char_indices(text, max_chars)
    return expand_char_onehot(slots, case, dtype=dtype)


def parse_timestamp(value: str) -> datetime:
    """Parse an ISO-8601 timestamp, tolerating a trailing 'Z'."""
    return datetime.fromisoformat(value.replace("Z", "+00:00"))


def ingest_directory(root: str | Path, extensions: tuple[str, ...] = (".ps1", ".psm1")) -> list[CodeInstance]:
    """Read every script under a directory tree, one instance per file.

    Instance ids are the relative POSIX paths; whitespace-only files are
    skipped. Files are decoded as UTF-8 with lossy replacement.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"not a directory: {root}")
    instances = []
    for path in sorted(root.rglob("*")):
        if path.suffix.lower() not in extensions or not path.is_file():
            continue
        text = path.read_text(encoding="utf-8", errors="replace")
        if not text.strip():
            continue
        instances.append(CodeInstance(id=path.relative_to(root).as_posix(), text=text))
    return instances


def ingest_jsonl(path: str | Path) -> tuple[list[CodeInstance], list[tuple[int, str]]]:
    """Read a labeled corpus from JSON lines.

    Each line is an object with fields id, code, label ("benign"|"malicious")
    and an optional ISO-8601 collected_at. Returns the parsed instances plus
    a list of (line number, message) for lines that failed to parse; callers
    decide whether partial ingestion is acceptable.
    """
    path = Path(path)
    instances: list[CodeInstance] = []
    errors: list[tuple[int, str]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                collected = obj.get("collected_at")
                inst = CodeInstance(
                    id=str(obj["id"]),
                    text=str(obj["code"]),
                    label=obj.get("label"),
                    collected_at=parse_timestamp(collected) if collected else None,
                )
                if not inst.text.strip():
                    raise ValueError("whitespace-only code")
                instances.append(inst)
            except (KeyError, ValueError, TypeError) as exc:
                errors.append((lineno, str(exc)))
    return instances, errors


def token_sequences(instances: Iterable[CodeInstance]) -> Iterator[list[str]]:
    """Tokenize a corpus: digit normalization then tokenization, per instance."""
    for inst in instances:
        yield tokenize(normalize_digits(inst.text))
