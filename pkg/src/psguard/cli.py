"""Command-line surface: ingest, dedup, embed, train, eval, ablation, score,
inspect, benchmark.

Each artifact-producing command writes its outputs under --out together with
a run.json snapshot of the merged configuration and the content hashes of its
input artifacts, so any run can be reconstructed from its directory.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 data error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusStoreError, read_store, store_hash, write_store
from .dedup import deduplicate_with_report
from .embedding import (
    EmbeddingError,
    EmbeddingModel,
    FASTTEXT,
    OutOfVocabularyError,
    build_vocab,
    train_cbow,
    write_word_vectors,
)
from .evaluation import (
    EvaluationError,
    ablation_matrix,
    roc,
    run_protocol,
    split_by_ids,
    time_split,
)
from .models import (
    ARCH_TOKEN_CHAR,
    ARCHITECTURES,
    EMBED_FASTTEXT,
    EMBED_INLINE,
    EMBED_MODES,
    EMBED_W2V,
    ModelError,
    SingleClassError,
    build_model,
    build_token_index,
    label_array,
    load_checkpoint,
    save_checkpoint,
    score as score_batch,
    train as train_model,
    vectorize,
)
from .preprocess import CodeInstance, IngestError, ingest_directory, ingest_jsonl
from .synth import benchmark_corpus

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4


class MissingArtifact(Exception):
    pass


class DataError(Exception):
    pass


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_dir(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(_sha256_file(f).encode())
    return h.hexdigest()


def _artifact_hash(path: str | Path) -> str:
    path = Path(path)
    return _sha256_dir(path) if path.is_dir() else _sha256_file(path)


def _require(path: Optional[str], kind: str, produced_by: str) -> Path:
    if path is None:
        raise MissingArtifact(f"missing {kind}; produce one with 'psguard {produced_by}'")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(
            f"{kind} not found at {p}; produce one with 'psguard {produced_by}'"
        )
    return p


def _write_snapshot(out_dir: Path, command: str, args: dict, config: RunConfig, inputs: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "command": command,
        "version": __version__,
        "arguments": {k: v for k, v in args.items() if k not in ("func", "config")},
        "config": config.snapshot(),
        "input_hashes": inputs,
    }
    (out_dir / "run.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True), encoding="utf-8")


def _load_labeled_store(path: Path) -> list[CodeInstance]:
    instances = read_store(path)
    if not instances:
        raise DataError(f"corpus store {path} is empty")
    return instances


def _load_embedding(path: Optional[str], required: bool) -> Optional[EmbeddingModel]:
    if path is None:
        if required:
            raise MissingArtifact("pretrained initialization needs --embedding; run 'psguard embed'")
        return None
    p = _require(path, "embedding artifact", "embed")
    return EmbeddingModel.load(p)


def _classifier_vocab(
    cfg: RunConfig, spec_kind: str, embedding: Optional[EmbeddingModel], instances: Sequence[CodeInstance]
):
    """Pretrained models reuse the embedding vocabulary; inline models build
    one from the training corpus (min 20 instances for the combined
    architecture, 10 otherwise, unless configured)."""
    if embedding is not None:
        return embedding.vocab.tokens
    from .preprocess import token_sequences

    default_min = 20 if spec_kind == ARCH_TOKEN_CHAR else 10
    econf = cfg.embedding_config(
        min_count=int(cfg.sections["embedding"].get("min_count", default_min))
    )
    return build_vocab(list(token_sequences(instances)), econf).tokens


# -- commands -------------------------------------------------------------------


def cmd_ingest(args, cfg: RunConfig) -> int:
    instances: list[CodeInstance] = []
    failures = 0
    for path in args.paths:
        p = Path(path)
        if args.format == "dir":
            try:
                got = ingest_directory(p)
            except IngestError as exc:
                print(f"warning: {exc}", file=sys.stderr)
                failures += 1
                continue
            if not got:
                print(f"warning: no script files under {p}", file=sys.stderr)
            instances.extend(got)
        else:
            if not p.is_file():
                print(f"warning: unreadable file {p}", file=sys.stderr)
                failures += 1
                continue
            got, errors = ingest_jsonl(p)
            for lineno, message in errors:
                print(f"warning: {p}:{lineno}: {message}", file=sys.stderr)
            instances.extend(got)
    if failures == len(args.paths):
        raise DataError("all input paths failed to ingest")
    out = Path(args.out)
    index = write_store(instances, out)
    _write_snapshot(out, "ingest", vars(args), cfg, {})
    print(f"ingested {index['instances']} instances into {out}")
    return EXIT_OK


def cmd_dedup(args, cfg: RunConfig) -> int:
    store = _require(args.store, "corpus store", "ingest")
    instances = _load_labeled_store(store)
    survivors, report = deduplicate_with_report(
        instances, threshold=cfg.dedup_threshold, strict=cfg.dedup_strict
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_store(survivors, out / "store")
    (out / "dedup_report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    _write_snapshot(out, "dedup", vars(args), cfg, {"store": store_hash(store)})
    print(
        f"dedup: {report['instances']} -> {report['survivors']} instances "
        f"({report['cluster_count']} clusters, {report['empty_key_instances']} with empty keys)"
    )
    return EXIT_OK


def cmd_embed(args, cfg: RunConfig) -> int:
    from .preprocess import token_sequences

    store = _require(args.store, "corpus store", "ingest")
    corpus = list(token_sequences(_load_labeled_store(store)))
    inputs = {"store": store_hash(store)}
    if args.extra_store:
        extra = _require(args.extra_store, "extra corpus store", "ingest")
        corpus += list(token_sequences(_load_labeled_store(extra)))
        inputs["extra_store"] = store_hash(extra)
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    econf = cfg.embedding_config(**overrides)
    model = train_cbow(corpus, econf, workers=args.workers)
    out = Path(args.out)
    model.save(out)
    _write_snapshot(out, "embed", vars(args), cfg, inputs)
    print(
        f"trained {econf.mode} embedding: {len(model.vocab)} tokens, "
        f"final epoch loss {model.epoch_losses[-1]:.4f}" if model.epoch_losses else "trained embedding"
    )
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    store = _require(args.store, "corpus store", "ingest")
    instances = _load_labeled_store(store)
    spec = cfg.architecture(kind=args.arch, embed_init=args.embed_init)
    embedding = _load_embedding(args.embedding, required=spec.embed_init != EMBED_INLINE)
    vocab_tokens = _classifier_vocab(cfg, spec.kind, embedding, instances)

    labels = label_array(instances)
    token_index = build_token_index(vocab_tokens)
    data = [vectorize(i, spec, token_index, embedding) for i in instances]
    model = build_model(spec, vocab_tokens, embedding, seed=cfg.seed)

    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_epoch(epoch, m, mean_loss):
        save_checkpoint(m, ckpt_dir / f"epoch-{epoch:03d}.bin")
        return False

    result = train_model(
        model, data, labels, cfg.train_config(), keep_snapshots=False, on_epoch=on_epoch
    )
    save_checkpoint(model, out / "model.bin")

    inputs = {"store": store_hash(store)}
    if args.embedding:
        inputs["embedding"] = _artifact_hash(args.embedding)
    manifest = {
        "architecture": spec.__dict__,
        "embedding": {
            "mode": embedding.config.mode if embedding else None,
            "artifact_hash": inputs.get("embedding"),
        },
        "train": cfg.train_config().__dict__,
        "epochs_run": len(result.epoch_losses),
        "epoch_losses": result.epoch_losses,
        "stopped_early": result.stopped_early,
        "vocab_size": len(vocab_tokens),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    with (out / "losses.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        writer.writerows(enumerate(result.epoch_losses))
    from .figures import plot_training_loss

    plot_training_loss(result.epoch_losses, out / "losses.png")
    _write_snapshot(out, "train", vars(args), cfg, inputs)
    print(f"trained {spec.kind} for {len(result.epoch_losses)} epochs; model at {out / 'model.bin'}")
    return EXIT_OK


def _resolve_split(args, cfg: RunConfig, instances):
    if args.test_store:
        test = _load_labeled_store(_require(args.test_store, "test corpus store", "ingest"))
        return instances, test
    if args.split_file:
        payload = json.loads(Path(args.split_file).read_text(encoding="utf-8"))
        return split_by_ids(instances, set(payload["train"]), set(payload["test"]))
    boundary = args.boundary or cfg.boundary
    if boundary is None:
        raise DataError("no test split: give --test-store, --split-file or --boundary")
    from .preprocess import parse_timestamp

    return time_split(instances, parse_timestamp(boundary))


def cmd_eval(args, cfg: RunConfig) -> int:
    store = _require(args.store, "corpus store", "ingest")
    instances = _load_labeled_store(store)
    train_set, test_set = _resolve_split(args, cfg, instances)
    spec = cfg.architecture(kind=args.arch, embed_init=args.embed_init)
    embedding = _load_embedding(args.embedding, required=spec.embed_init != EMBED_INLINE)
    vocab_tokens = _classifier_vocab(cfg, spec.kind, embedding, train_set)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def sink(fold_id, model):
        save_checkpoint(model, out / f"fold-{fold_id}.bin")

    result = run_protocol(
        spec,
        train_set,
        test_set,
        vocab_tokens,
        cfg.train_config(),
        embedding=embedding,
        k=cfg.folds,
        budget=cfg.fpr_budget,
        seed=cfg.seed,
        model_sink=sink,
    )

    report = {
        "architecture": spec.__dict__,
        "train_instances": len(train_set),
        "test_instances": len(test_set),
        **result.summary(),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    if result.test_report is not None:
        with (out / "roc.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            writer.writerows(result.test_report.points)
        from .figures import plot_epoch_curves, plot_roc

        plot_roc({spec.kind: result.test_report}, out / "roc.png")
        plot_epoch_curves(
            [[r.tpr_at_budget for r in f.epoch_reports] for f in result.fold_outcomes],
            out / "epochs.png",
        )
    inputs = {"store": store_hash(store)}
    if args.embedding:
        inputs["embedding"] = _artifact_hash(args.embedding)
    _write_snapshot(out, "eval", vars(args), cfg, inputs)
    if result.test_report:
        print(
            f"eval {spec.kind}: test AUC {result.test_report.auc:.4f}, "
            f"test TPR@{cfg.fpr_budget:g} {result.test_report.tpr_at_budget:.4f}"
        )
    return EXIT_OK


def cmd_ablation(args, cfg: RunConfig) -> int:
    store = _require(args.store, "corpus store", "ingest")
    unlabeled = _require(args.unlabeled_store, "unlabeled corpus store", "ingest")
    instances = _load_labeled_store(store)
    train_set, test_set = _resolve_split(args, cfg, instances)
    kinds = [k.strip() for k in args.arch.split(",")]
    table = ablation_matrix(
        kinds,
        train_set,
        test_set,
        read_store(unlabeled),
        cfg.embedding_config(),
        cfg.train_config(),
        k=cfg.folds,
        budget=cfg.fpr_budget,
        seed=cfg.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True), encoding="utf-8")
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["architecture", "embedding_corpus", "train_tpr", "validation_tpr", "test_tpr", "test_auc"])
        for c in table["cells"]:
            writer.writerow(
                [c["architecture"], c["embedding_corpus"], c["train_tpr"], c["validation_tpr"], c["test_tpr"], c["test_auc"]]
            )
    from .figures import plot_ablation

    plot_ablation(table, out / "ablation.png")
    _write_snapshot(
        out,
        "ablation",
        vars(args),
        cfg,
        {"store": store_hash(store), "unlabeled_store": store_hash(unlabeled)},
    )
    print(f"ablation table with {len(table['cells'])} cells written to {out}")
    return EXIT_OK


def cmd_score(args, cfg: RunConfig) -> int:
    ckpt = _require(args.model, "model checkpoint", "train")
    model = load_checkpoint(ckpt)
    embedding = _load_embedding(
        args.embedding, required=model.spec.embed_init == EMBED_FASTTEXT
    )
    if args.files:
        instances = []
        for f in args.files:
            if f == "-":
                instances.append(CodeInstance(id="-", text=sys.stdin.read()))
            else:
                p = Path(f)
                if not p.is_file():
                    raise DataError(f"no such file: {p}")
                instances.append(
                    CodeInstance(id=str(p), text=p.read_text(encoding="utf-8", errors="replace"))
                )
    else:
        instances = [CodeInstance(id="-", text=sys.stdin.read())]
    token_index = build_token_index(model.tokens)
    data = [vectorize(i, model.spec, token_index, embedding) for i in instances]
    probs = score_batch(model, data, batch_size=args.batch_size)
    for inst, p in zip(instances, probs):
        print(f"{inst.id},{p:.6f}")
    return EXIT_OK


def cmd_inspect(args, cfg: RunConfig) -> int:
    embedding = _load_embedding(args.embedding, required=True)
    if args.query == "nn":
        token, k = args.args[0], int(args.args[1]) if len(args.args) > 1 else 5
        for tok, dist in embedding.nearest_neighbors(token, k):
            print(f"{tok}\t{dist:.6f}")
    elif args.query == "analogy":
        a, b, c = args.args[:3]
        for tok, dist in embedding.analogy_candidates(a, b, c, k=args.k):
            print(f"{tok}\t{dist:.6f}")
    elif args.query == "oddoneout":
        print(embedding.odd_one_out(args.args))
    elif args.query == "export-vectors":
        out = Path(args.out or "vectors.txt")
        mat = embedding.composed_vectors()
        write_word_vectors(out, embedding.vocab.tokens, mat)
        print(f"wrote {len(embedding.vocab)} vectors to {out}")
    return EXIT_OK


def cmd_benchmark(args, cfg: RunConfig) -> int:
    corpus = benchmark_corpus(int(args.size_mb * 1_000_000), seed=cfg.seed)
    total_bytes = sum(len(i.text.encode("utf-8")) for i in corpus)
    if args.model:
        model = load_checkpoint(_require(args.model, "model checkpoint", "train"))
        embedding = _load_embedding(
            args.embedding, required=model.spec.embed_init == EMBED_FASTTEXT
        )
    else:
        from .preprocess import token_sequences

        econf = cfg.embedding_config(min_count=20)
        vocab_tokens = build_vocab(list(token_sequences(corpus[:2000])), econf).tokens
        spec = cfg.architecture(kind=ARCH_TOKEN_CHAR, embed_init=EMBED_INLINE)
        model = build_model(spec, vocab_tokens, seed=cfg.seed)
        embedding = None
    token_index = build_token_index(model.tokens)

    start = time.perf_counter()
    data = [vectorize(i, model.spec, token_index, embedding) for i in corpus]
    probs = score_batch(model, data, batch_size=args.batch_size)
    elapsed = time.perf_counter() - start

    mb_per_s = total_bytes / 1_000_000 / elapsed
    print(
        f"scored {len(corpus)} instances, {total_bytes / 1_000_000:.1f} MB "
        f"in {elapsed:.1f}s: {mb_per_s:.2f} MB/s (mean score {probs.mean():.3f})"
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "benchmark.json").write_text(
            json.dumps(
                {
                    "instances": len(corpus),
                    "bytes": total_bytes,
                    "seconds": elapsed,
                    "mb_per_second": mb_per_s,
                    "architecture": model.spec.kind,
                },
                indent=2,
            ),
            encoding="utf-8",
        )
        _write_snapshot(out, "benchmark", vars(args), cfg, {})
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psguard",
        description="Malicious PowerShell detection toolkit",
    )
    parser.add_argument("--config", help="TOML configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a corpus store from scripts or JSONL")
    p.add_argument("--format", choices=("dir", "jsonl"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("dedup", help="collapse near-duplicate labeled instances")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("embed", help="train the contextual token embedding")
    p.add_argument("--store", required=True)
    p.add_argument("--extra-store", help="additional (e.g. unlabeled) corpus store")
    p.add_argument("--mode", choices=("w2v", "fasttext"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train one detector on a labeled store")
    p.add_argument("--store", required=True)
    p.add_argument("--arch", choices=ARCHITECTURES, required=True)
    p.add_argument("--embed-init", choices=EMBED_MODES, default=EMBED_INLINE)
    p.add_argument("--embedding", help="embedding artifact directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-validate and score a held-out test set")
    p.add_argument("--store", required=True)
    p.add_argument("--test-store")
    p.add_argument("--split-file", help="JSON {train: [ids], test: [ids]}")
    p.add_argument("--boundary", help="ISO timestamp for the time split")
    p.add_argument("--arch", choices=ARCHITECTURES, required=True)
    p.add_argument("--embed-init", choices=EMBED_MODES, default=EMBED_INLINE)
    p.add_argument("--embedding")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="architecture x embedding-corpus matrix")
    p.add_argument("--store", required=True)
    p.add_argument("--unlabeled-store", required=True)
    p.add_argument("--test-store")
    p.add_argument("--split-file")
    p.add_argument("--boundary")
    p.add_argument("--arch", default="cnn", help="comma-separated architecture kinds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("score", help="score scripts from files or stdin")
    p.add_argument("--model", required=True)
    p.add_argument("--embedding")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("files", nargs="*")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("inspect", help="query a trained embedding")
    p.add_argument("query", choices=("nn", "analogy", "oddoneout", "export-vectors"))
    p.add_argument("--embedding", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out")
    p.add_argument("args", nargs="*")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("benchmark", help="measure batched scoring throughput")
    p.add_argument("--size-mb", type=float, default=10.0)
    p.add_argument("--model")
    p.add_argument("--embedding")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, CorpusStoreError, IngestError, SingleClassError, ModelError,
            EvaluationError, EmbeddingError, OutOfVocabularyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
