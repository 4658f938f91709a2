"""Synthetic PowerShell-like corpora for tests and the scoring benchmark.

No real malware: "malicious" instances simply carry planted marker tokens so
detectors have something learnable with a known ground truth.
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone

import numpy as np

from .preprocess import BENIGN, MALICIOUS, CodeInstance

_CMDLETS = [
    "Get-ChildItem", "Set-Location", "Write-Output", "Get-ItemProperty",
    "New-Object", "Import-Module", "Get-Process", "Start-Service",
    "Test-Path", "Copy-Item", "Remove-Item", "Get-Content", "Set-Content",
    "Invoke-Command", "Select-Object", "Where-Object", "ForEach-Object",
    "Get-Date", "Out-File", "Join-Path", "Split-Path", "Get-Service",
]
_VARS = ["$path", "$item", "$result", "$config", "$server", "$name", "$env:temp"]
_KEYWORDS = ["function", "param", "if", "else", "while", "try", "catch", "return"]
_OPERATORS = ["-eq", "-ne", "-gt", "-lt", "-match", "-and", "-or"]

DEFAULT_MARKERS = ["Invoke-Implant", "Get-StagePayload"]


def _line(rng: np.random.Generator) -> str:
    kind = rng.integers(4)
    cmdlet = _CMDLETS[rng.integers(len(_CMDLETS))]
    var = _VARS[rng.integers(len(_VARS))]
    if kind == 0:
        return f"{var} = {cmdlet} -Path 'C:\\data\\{rng.integers(1000)}.txt'"
    if kind == 1:
        op = _OPERATORS[rng.integers(len(_OPERATORS))]
        return f"if ({var} {op} {rng.integers(100)}) {{ {cmdlet} {var} }}"
    if kind == 2:
        kw = _KEYWORDS[rng.integers(len(_KEYWORDS))]
        return f"{kw} Process-Item{rng.integers(50)} {{ {cmdlet} -Name {var} }}"
    return f"{cmdlet} {var} | {_CMDLETS[rng.integers(len(_CMDLETS))]}"


def synthetic_script(
    rng: np.random.Generator,
    lines: int = 12,
    markers: list[str] | None = None,
) -> str:
    body = [_line(rng) for _ in range(lines)]
    for marker in markers or []:
        body.insert(int(rng.integers(len(body) + 1)), f"{marker} -Target $server -Port {rng.integers(9999)}")
    return "\n".join(body)


def planted_marker_corpus(
    n: int = 200,
    malicious_fraction: float = 0.5,
    seed: int = 7,
    markers: list[str] | None = None,
    lines: int = 12,
    prefix: str = "synth",
) -> list[CodeInstance]:
    """Labeled corpus where malicious instances carry a planted marker token.

    Separable by construction: every malicious instance contains one of the
    markers and no benign instance does. Labels interleave so any contiguous
    slice keeps both classes.
    """
    rng = np.random.default_rng(seed)
    markers = markers or DEFAULT_MARKERS
    n_mal = int(round(n * malicious_fraction))
    base = datetime(2018, 5, 1, tzinfo=timezone.utc)
    out = []
    malicious_left = n_mal
    for i in range(n):
        malicious = malicious_left > 0 and (i % max(n // max(n_mal, 1), 1) == 0 or n - i <= malicious_left)
        if malicious:
            malicious_left -= 1
        chosen = [markers[int(rng.integers(len(markers)))]] if malicious else None
        out.append(
            CodeInstance(
                id=f"{prefix}-{i:05d}",
                text=synthetic_script(rng, lines=lines, markers=chosen),
                label=MALICIOUS if malicious else BENIGN,
                collected_at=base + timedelta(hours=i),
            )
        )
    return out


def benchmark_corpus(total_bytes: int, seed: int = 11, lines: int = 40) -> list[CodeInstance]:
    """Unlabeled synthetic scripts totalling at least total_bytes of text."""
    rng = np.random.default_rng(seed)
    out = []
    accumulated = 0
    i = 0
    while accumulated < total_bytes:
        text = synthetic_script(rng, lines=lines)
        accumulated += len(text.encode("utf-8"))
        out.append(CodeInstance(id=f"bench-{i:06d}", text=text))
        i += 1
    return out
