"""Sharded JSONL corpus store with a content hash for provenance tracking."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

from .preprocess import CodeInstance, parse_timestamp

SHARD_SIZE = 10_000


class CorpusStoreError(Exception):
    pass


def _instance_obj(inst: CodeInstance) -> dict:
    obj = {"id": inst.id, "code": inst.text}
    if inst.label is not None:
        obj["label"] = inst.label
    if inst.collected_at is not None:
        obj["collected_at"] = inst.collected_at.isoformat()
    return obj


def corpus_hash(instances: Sequence[CodeInstance]) -> str:
    """Content address: order-independent sha256 over ids, labels and text."""
    h = hashlib.sha256()
    for inst in sorted(instances, key=lambda i: i.id):
        h.update(inst.id.encode("utf-8"))
        h.update(b"\x00")
        h.update((inst.label or "").encode("utf-8"))
        h.update(b"\x00")
        h.update(inst.text.encode("utf-8", errors="replace"))
        h.update(b"\x01")
    return h.hexdigest()


def write_store(instances: Sequence[CodeInstance], directory: str | Path) -> dict:
    """Write shards of SHARD_SIZE instances plus an index; duplicate ids fail."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    for inst in instances:
        if inst.id in seen:
            raise CorpusStoreError(f"duplicate instance id: {inst.id}")
        seen.add(inst.id)

    shards = []
    for start in range(0, max(len(instances), 1), SHARD_SIZE):
        chunk = instances[start : start + SHARD_SIZE]
        name = f"corpus-{start // SHARD_SIZE:05d}.jsonl"
        payload = "".join(
            json.dumps(_instance_obj(i), sort_keys=True) + "\n" for i in chunk
        ).encode("utf-8")
        (directory / name).write_bytes(payload)
        shards.append(
            {"file": name, "count": len(chunk), "sha256": hashlib.sha256(payload).hexdigest()}
        )
    index = {
        "instances": len(instances),
        "shards": shards,
        "corpus_hash": corpus_hash(instances),
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2), encoding="utf-8")
    return index


def read_store(directory: str | Path) -> list[CodeInstance]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise CorpusStoreError(f"no corpus index at {index_path}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    out: list[CodeInstance] = []
    for shard in index["shards"]:
        with (directory / shard["file"]).open(encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                collected = obj.get("collected_at")
                out.append(
                    CodeInstance(
                        id=obj["id"],
                        text=obj["code"],
                        label=obj.get("label"),
                        collected_at=parse_timestamp(collected) if collected else None,
                    )
                )
    return out


def store_hash(directory: str | Path) -> str:
    index = json.loads((Path(directory) / "index.json").read_text(encoding="utf-8"))
    return index["corpus_hash"]
