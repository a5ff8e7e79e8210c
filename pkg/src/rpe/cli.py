"""Command line pipeline: preprocess, train, eval-lp, eval-tc, inspect, export.

Preprocessed artifacts live in a cache directory (``--cache-dir``, else the
``RPE_CACHE_DIR`` environment variable, else ``./.rpe-cache``), one
subdirectory per dataset directory. Every artifact carries a manifest with
the content hashes of its inputs so stale caches are caught before use.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluate import (generate_classification_negatives, link_prediction, triple_classification,
                       tune_thresholds)
from .kb import DataError, TripleStore, build_type_index
from .model import MODES, ConfigError, ModelParams
from .paths import PathEvidence, mine_evidence, top_paths_for_relation
from .trainer import INITS, SAMPLING, NumericalError, TrainConfig, Trainer

log = logging.getLogger("rpe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CACHE_ENV = "RPE_CACHE_DIR"
SPLITS = ("train", "valid", "test")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# hashing and manifests --------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def write_manifest(path, manifest: dict) -> dict:
    manifest = dict(manifest, manifest_hash=manifest_hash(manifest))
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict | None:
    path = Path(path)
    if not path.exists():
        return None
    manifest = json.loads(path.read_text())
    if manifest.get("manifest_hash") != manifest_hash(manifest):
        raise DataError(f"{path}: manifest hash does not match its contents")
    return manifest


def dataset_files(data_dir: Path) -> dict:
    files = {}
    for split in SPLITS:
        p = data_dir / f"{split}.txt"
        if p.exists():
            files[split] = {"path": str(p), "sha256": sha256_file(p)}
    if "train" not in files:
        raise DataError(f"{data_dir}: no train.txt")
    return files


def cache_root(args) -> Path:
    return Path(args.cache_dir or os.environ.get(CACHE_ENV) or ".rpe-cache")


def dataset_cache(args, data_dir) -> Path:
    data_dir = Path(data_dir).resolve()
    tag = hashlib.sha256(str(data_dir).encode()).hexdigest()[:8]
    return cache_root(args) / f"{data_dir.name}-{tag}"


class Prepared:
    """Preprocessed artifacts of one dataset, checked against the current input files."""

    def __init__(self, args, data_dir):
        self.data_dir = Path(data_dir)
        self.dir = dataset_cache(args, data_dir)
        self.manifest = read_manifest(self.dir / "manifest.json")
        hint = f"run `rpe preprocess {data_dir}` first"
        if self.manifest is None:
            raise DataError(f"no preprocessed cache for {data_dir}; {hint}")
        current = dataset_files(self.data_dir)
        if {k: v["sha256"] for k, v in current.items()} != \
                {k: v["sha256"] for k, v in self.manifest["inputs"].items()}:
            raise DataError(f"input files of {data_dir} changed since preprocessing; {hint}")
        self.store = TripleStore.load(self.dir / "store.bin")
        if self.store.content_hash() != self.manifest["store_hash"]:
            raise DataError(f"{self.dir / 'store.bin'} does not match its manifest; {hint}")
        self._evidence = None

    @property
    def hash(self) -> str:
        return self.manifest["manifest_hash"]

    def evidence(self, eta=None, max_len=None) -> PathEvidence:
        path = self.dir / "paths.bin"
        flags = f"--max-path-len {max_len or 2} --eta {eta or 0.05}"
        hint = f"run `rpe preprocess {self.data_dir} {flags}`"
        if not path.exists():
            raise DataError(f"path evidence missing from {self.dir}; {hint}")
        head = PathEvidence.read_header(path)
        if head["dataset_hash"] != self.manifest["store_hash"]:
            raise DataError(f"{path} was mined from different data; {hint}")
        if (eta is not None and head["eta"] != eta) or (max_len is not None and head["max_len"] != max_len):
            raise DataError(f"evidence was mined with max_path_len={head['max_len']}, eta={head['eta']}; "
                            f"the config asks for max_path_len={max_len}, eta={eta}; {hint}")
        if self._evidence is None:
            self._evidence = PathEvidence.load(path)
        return self._evidence


# subcommands ------------------------------------------------------------


def cmd_preprocess(args) -> int:
    if not 0 < args.eta < 1:
        raise UsageError(f"--eta must lie in (0, 1), got {args.eta}")
    if args.max_path_len < 1:
        raise UsageError("--max-path-len must be >= 1")
    data_dir = Path(args.data)
    inputs = dataset_files(data_dir)
    out = dataset_cache(args, data_dir)
    params = {"max_path_len": args.max_path_len, "eta": args.eta}
    try:
        old = read_manifest(out / "manifest.json")
    except DataError as exc:
        old = None
        print(f"{exc}; rebuilding")
    if old is not None and not args.force:
        if old["inputs"] == inputs and old["params"] == params and \
                all((out / f).exists() for f in ("store.bin", "paths.bin")):
            print(f"{out}: up to date")
            return EXIT_OK
        print(f"{out}: inputs or parameters changed; rebuilding")

    store = TripleStore()
    for split in SPLITS:
        if split in inputs:
            store.load_triples(inputs[split]["path"], split)
    base_relations = store.num_relations
    store.add_inverses()
    evidence = mine_evidence(store, max_len=args.max_path_len, eta=args.eta)

    out.mkdir(parents=True, exist_ok=True)
    store.save(out / "store.bin")
    store.write_id_maps(out)
    evidence.save(out / "paths.bin")
    write_manifest(out / "manifest.json", {
        "kind": "preprocess", "tool_version": __version__, "inputs": inputs, "params": params,
        "store_hash": store.content_hash(), "evidence_sha256": sha256_file(out / "paths.bin"),
    })
    with_paths = sum(1 for v in evidence.triples.values() if v)
    print(f"entities\t{store.num_entities}")
    print(f"relations\t{base_relations}")
    print(f"train\t{len(store.base_train())}")
    for split in ("valid", "test"):
        print(f"{split}\t{len(store.splits[split])}")
    print(f"skipped\t{len(store.skipped)}")
    print(f"triples_with_paths\t{with_paths}")
    print(f"cache\t{out}")
    return EXIT_OK


CONFIG_FLAGS = {
    # flag -> TrainConfig field
    "dim_entity": "n", "dim_relation": "m", "margin_rel": "margin_rel", "margin_path": "margin_path",
    "lr": "lr", "batch_size": "batch_size", "lam": "lam", "eta": "eta", "max_path_len": "max_path_len",
    "epochs": "epochs", "sampling": "sampling", "mode": "mode", "seed": "seed", "init": "init",
    "warm_start": "warm_start", "norm": "norm", "checkpoint_every": "checkpoint_every", "threads": "threads",
}


def train_config(args) -> TrainConfig:
    overrides = {field: getattr(args, flag) for flag, field in CONFIG_FLAGS.items()}
    if args.config:
        cfg = TrainConfig.from_file(args.config, **overrides)
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = train_config(args)
    if cfg.threads > 1:
        log.warning("threads=%d requested; training runs single-threaded", cfg.threads)
    prep = Prepared(args, args.data)
    evidence = prep.evidence(cfg.eta, cfg.max_path_len) if cfg.lam > 0 else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_text = cfg.to_text()
    (out / "config.txt").write_text(config_text)
    config_hash = hashlib.sha256(config_text.encode()).hexdigest()

    lineage = []
    if cfg.init != "random":
        parent = read_manifest(Path(cfg.warm_start).parent / "manifest.json")
        lineage = (parent or {}).get("lineage", []) + [{"init": cfg.init, "checkpoint": cfg.warm_start,
                                                       "sha256": sha256_file(cfg.warm_start)}]
    trainer = Trainer(prep.store, cfg, evidence)
    trainer.fit(log_path=out / "training_log.tsv", checkpoint_dir=out)
    ckpt = out / "model.ckpt"
    trainer.params.save(ckpt, {"epoch": len(trainer.history), "seed": cfg.seed, "config_hash": config_hash,
                               "data_manifest": prep.hash})
    write_manifest(out / "manifest.json", {
        "kind": "train", "tool_version": __version__, "data_dir": str(prep.data_dir), "data_manifest": prep.hash,
        "config_hash": config_hash, "lineage": lineage + [{"init": "final", "checkpoint": str(ckpt),
                                                           "sha256": sha256_file(ckpt)}],
    })
    last = trainer.history[-1]
    print(f"epochs\t{last.epoch}")
    print(f"final_loss\t{last.loss:.6f}")
    print(f"checkpoint\t{ckpt}")
    return EXIT_OK


def load_checkpoint(args, prep: Prepared) -> ModelParams:
    params = ModelParams.load(args.checkpoint)
    owner = params.meta.get("data_manifest")
    if owner is not None and owner != prep.hash:
        raise DataError(f"{args.checkpoint} was trained on different preprocessed data; retrain it")
    if params.num_entities != prep.store.num_entities or params.num_relations != prep.store.num_relations:
        raise DataError(f"{args.checkpoint} does not match the dataset's entity/relation counts")
    return params


def emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)


def cmd_eval_lp(args) -> int:
    prep = Prepared(args, args.data)
    params = load_checkpoint(args, prep)
    evidence = prep.evidence() if params.lam > 0 else None
    triples = prep.store.splits[args.split]
    if len(triples) == 0:
        raise DataError(f"split {args.split!r} is empty")
    labels = prep.store.labels.get(args.split)
    if labels is not None and len(labels):
        triples = triples[labels == 1]
    rep = link_prediction(triples, params, prep.store, evidence, tie=args.tie)
    print(rep.pretty(args.setting, args.by_category))
    emit(rep.to_tsv(), args.out)
    return EXIT_OK


def labelled(prep: Prepared, split: str, seed: int):
    triples = prep.store.splits[split]
    labels = prep.store.labels.get(split)
    if labels is not None and len(labels) == len(triples) and (labels == -1).any():
        return triples, labels
    return generate_classification_negatives(triples, prep.store, build_type_index(prep.store), seed=seed)


def cmd_eval_tc(args) -> int:
    prep = Prepared(args, args.data)
    params = load_checkpoint(args, prep)
    evidence = prep.evidence() if params.lam > 0 else None
    vx, vy = labelled(prep, "valid", args.seed)
    tx, ty = labelled(prep, "test", args.seed + 1)
    if len(vx) == 0 or len(tx) == 0:
        raise DataError("triple classification needs non-empty valid and test splits")
    th = tune_thresholds(vx, vy, params, evidence)
    acc = triple_classification(tx, ty, params, th, evidence)
    rows = [("accuracy", f"{acc:.2f}"), ("test_triples", str(len(tx))), ("fallback_threshold", f"{th.fallback:.6f}")]
    rows += [(f"threshold_{prep.store.relations[r]}", f"{d:.6f}") for r, d in sorted(th.per_relation.items())]
    print(f"model       accuracy(%)\n{params.mode:<12}{acc:.1f}")
    emit("metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in rows), args.out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.k < 1:
        raise UsageError("-k must be >= 1")
    prep = Prepared(args, args.data)
    names = prep.store.relations
    if args.relation not in names:
        near = difflib.get_close_matches(args.relation, names, n=5)
        hint = f"; did you mean {', '.join(near)}?" if near else ""
        raise UsageError(f"unknown relation {args.relation!r}{hint}")
    r = names.index(args.relation)
    paths = top_paths_for_relation(prep.evidence(), r, args.k)
    if not paths:
        print(f"{args.relation}: no reliable paths")
        return EXIT_OK
    print("path\tconfidence")
    for p, conf in paths:
        print(" -> ".join(names[x] for x in p) + f"\t{conf:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    prep = Prepared(args, args.data)
    params = load_checkpoint(args, prep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fname, names, mat in (("entity_embeddings.tsv", prep.store.entities, params.entity),
                              ("relation_embeddings.tsv", prep.store.relations, params.relation)):
        with open(out / fname, "w", encoding="utf-8") as fh:
            for name, row in zip(names, mat):
                fh.write(name + "\t" + "\t".join(f"{x:.8g}" for x in row) + "\n")
    np.save(out / "projections.npy", params.proj.astype(np.float32))
    print(f"exported {params.num_entities} entities and {params.num_relations} relations to {out}")
    return EXIT_OK


# argument parsing -------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="rpe", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"rpe {__version__}")
    parser.add_argument("--cache-dir", help=f"cache directory (default: ${CACHE_ENV} or ./.rpe-cache)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("preprocess", help="load a dataset, add inverse relations, mine path evidence")
    p.add_argument("data", help="directory holding train.txt and optionally valid.txt, test.txt")
    p.add_argument("--max-path-len", type=int, default=2)
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--force", action="store_true", help="rebuild even when the cache is up to date")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model; flags override the config file")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--out", required=True, help="output directory for checkpoint, log and config")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--dim-entity", type=int, help="n")
    p.add_argument("--dim-relation", type=int, help="m")
    p.add_argument("--margin-rel", type=float, help="gamma_1")
    p.add_argument("--margin-path", type=float, help="gamma_2")
    p.add_argument("--lr", type=float, help="learning rate alpha")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lam", type=float, help="balance factor lambda")
    p.add_argument("--eta", type=float)
    p.add_argument("--max-path-len", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--sampling", choices=SAMPLING)
    p.add_argument("--seed", type=int)
    p.add_argument("--init", choices=INITS)
    p.add_argument("--warm-start", help="checkpoint to initialise entity and relation vectors from")
    p.add_argument("--norm", type=int, choices=(1, 2))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-lp", help="link prediction: mean rank and hits@10")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--setting", choices=("raw", "filter", "both"), default="both")
    p.add_argument("--by-category", action="store_true")
    p.add_argument("--tie", choices=("optimistic", "pessimistic"), default="optimistic")
    p.add_argument("--out", help="write the report as TSV")
    p.set_defaults(func=cmd_eval_lp)

    p = sub.add_parser("eval-tc", help="triple classification with per-relation thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for generated negatives")
    p.add_argument("--out", help="write the report as TSV")
    p.set_defaults(func=cmd_eval_tc)

    p = sub.add_parser("inspect", help="most predictive paths for a relation")
    p.add_argument("--data", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("export", help="write embeddings as TSV and projections as .npy")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
