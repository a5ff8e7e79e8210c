"""Triple storage, vocabularies, adjacency and type-constraint statistics."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
INVERSE_SUFFIX = "^-1"

_STORE_MAGIC = b"RPESTORE"
_STORE_VERSION = 1

CATEGORIES = ("1-1", "1-N", "N-1", "N-N")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class SkipReport:
    split: str
    line: int
    text: str
    reason: str


@dataclass
class TripleStore:
    """Entity/relation vocabularies plus train/valid/test triples.

    Ids are dense and assigned in first-seen order. After :meth:`add_inverses`
    the relation vocabulary has ``2 * num_base_relations`` ids, the second
    half being inverses, and the training split holds both directions.
    """

    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, np.ndarray | None] = field(default_factory=dict)
    skipped: list[SkipReport] = field(default_factory=list)
    augmented: bool = False
    num_base_relations: int = 0

    def __post_init__(self):
        self._ent_index = {name: i for i, name in enumerate(self.entities)}
        self._rel_index = {name: i for i, name in enumerate(self.relations)}
        for s in SPLITS:
            self.splits.setdefault(s, np.zeros((0, 3), dtype=np.int64))
            self.labels.setdefault(s, None)

    # vocabulary ---------------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def entity_id(self, name: str) -> int:
        return self._ent_index[name]

    def relation_id(self, name: str) -> int:
        return self._rel_index[name]

    def inverse(self, r):
        """Inverse relation id; works elementwise on arrays."""
        if not self.augmented:
            raise DataError("store has no inverse relations; call add_inverses first")
        R = self.num_base_relations
        return np.where(r < R, r + R, r - R) if isinstance(r, np.ndarray) else (r + R if r < R else r - R)

    @property
    def train(self) -> np.ndarray:
        return self.splits["train"]

    @property
    def valid(self) -> np.ndarray:
        return self.splits["valid"]

    @property
    def test(self) -> np.ndarray:
        return self.splits["test"]

    def base_train(self) -> np.ndarray:
        """Training triples over original (non-inverse) relations."""
        tr = self.train
        if not self.augmented:
            return tr
        return tr[tr[:, 1] < self.num_base_relations]

    # ingestion ----------------------------------------------------------

    def load_triples(self, path, split: str) -> "TripleStore":
        """Append the triples of a tab-separated file to ``split``.

        Lines are ``head<TAB>relation<TAB>tail`` with an optional fourth
        ``label`` column in {1, -1}. Training lines extend the vocabularies;
        valid/test lines with unseen names are recorded in ``skipped``.
        """
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if self.augmented:
            raise DataError("cannot load into an inverse-augmented store")
        rows, labs = [], []
        saw_label = False
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n").rstrip("\r")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) not in (3, 4):
                    raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
                h, r, t = parts[:3]
                label = 1
                if len(parts) == 4:
                    saw_label = True
                    try:
                        label = int(parts[3])
                    except ValueError:
                        label = 0
                    if label not in (1, -1):
                        raise DataError(f"{path}:{lineno}: label must be 1 or -1, got {parts[3]!r}")
                if split == "train":
                    ids = (self._add_entity(h), self._add_relation(r), self._add_entity(t))
                else:
                    missing = [x for x, idx in ((h, self._ent_index), (r, self._rel_index), (t, self._ent_index)) if x not in idx]
                    if missing:
                        self.skipped.append(SkipReport(split, lineno, line, f"unseen in train: {', '.join(missing)}"))
                        continue
                    ids = (self._ent_index[h], self._rel_index[r], self._ent_index[t])
                rows.append(ids)
                labs.append(label)
        self._append(split, rows, labs if saw_label else None)
        self.num_base_relations = len(self.relations)
        return self

    def add_triples(self, triples, split: str, labels=None) -> "TripleStore":
        """Append id triples (already in-vocabulary) to ``split``."""
        triples = [tuple(int(x) for x in tr) for tr in triples]
        for h, r, t in triples:
            if not (0 <= h < self.num_entities and 0 <= t < self.num_entities and 0 <= r < self.num_relations):
                raise DataError(f"triple {(h, r, t)} out of vocabulary")
        self._append(split, triples, None if labels is None else [int(x) for x in labels])
        return self

    def _append(self, split, rows, labs):
        old, old_labels = self.splits[split], self.labels[split]
        labelled = old_labels is not None or labs is not None
        if labelled:
            if old_labels is None:
                old_labels = np.ones(len(old), dtype=np.int64)
            if labs is None:
                labs = [1] * len(rows)
            seen = set(zip(map(tuple, old.tolist()), old_labels.tolist()))
        else:
            labs = [1] * len(rows)
            seen = {(tr, 1) for tr in map(tuple, old.tolist())}
        keep_rows, keep_labs = [], []
        for tr, lab in zip(rows, labs):
            if (tr, lab) in seen:
                continue
            seen.add((tr, lab))
            keep_rows.append(tr)
            keep_labs.append(lab)
        self.splits[split] = np.concatenate([old, np.asarray(keep_rows, dtype=np.int64).reshape(-1, 3)])
        if labelled:
            self.labels[split] = np.concatenate([old_labels, np.asarray(keep_labs, dtype=np.int64)])

    def _add_entity(self, name):
        idx = self._ent_index.get(name)
        if idx is None:
            idx = self._ent_index[name] = len(self.entities)
            self.entities.append(name)
        return idx

    def _add_relation(self, name):
        idx = self._rel_index.get(name)
        if idx is None:
            idx = self._rel_index[name] = len(self.relations)
            self.relations.append(name)
        return idx

    @classmethod
    def from_triples(cls, train, valid=(), test=(), num_entities=None, num_relations=None) -> "TripleStore":
        """Build a store directly from integer triples; names are ``e<i>``/``r<i>``."""
        train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
        everything = [np.asarray(x, dtype=np.int64).reshape(-1, 3) for x in (train, valid, test)]
        allt = np.concatenate(everything)
        if num_entities is None:
            num_entities = int(max(allt[:, 0].max(initial=-1), allt[:, 2].max(initial=-1))) + 1
        if num_relations is None:
            num_relations = int(allt[:, 1].max(initial=-1)) + 1
        store = cls(entities=[f"e{i}" for i in range(num_entities)], relations=[f"r{i}" for i in range(num_relations)])
        store.num_base_relations = num_relations
        for split, arr in zip(SPLITS, everything):
            store.add_triples(arr, split)
        return store

    # augmentation -------------------------------------------------------

    def add_inverses(self) -> "TripleStore":
        """Add an inverse for every relation and every training triple, in place."""
        if self.augmented:
            raise DataError("store is already inverse-augmented")
        R = len(self.relations)
        self.num_base_relations = R
        for name in list(self.relations):
            self._add_relation(name + INVERSE_SUFFIX)
        tr = self.splits["train"]
        inv = np.stack([tr[:, 2], tr[:, 1] + R, tr[:, 0]], axis=1)
        self.splits["train"] = np.concatenate([tr, inv])
        if self.labels["train"] is not None:
            self.labels["train"] = np.concatenate([self.labels["train"], self.labels["train"]])
        self.augmented = True
        return self

    # derived views ------------------------------------------------------

    def known_positives(self) -> set[tuple[int, int, int]]:
        """All positive triples of train, valid and test (the filter set)."""
        out = set()
        for s in SPLITS:
            arr, lab = self.splits[s], self.labels[s]
            if lab is not None:
                arr = arr[lab == 1]
            out.update(map(tuple, arr.tolist()))
        return out

    def train_set(self) -> set[tuple[int, int, int]]:
        return set(map(tuple, self.train.tolist()))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.entities, self.relations, self.augmented]).encode())
        for s in SPLITS:
            h.update(np.ascontiguousarray(self.splits[s], dtype="<i8").tobytes())
        return h.hexdigest()

    # persistence --------------------------------------------------------

    def write_id_maps(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "entity2id.tsv", "w", encoding="utf-8") as fh:
            fh.writelines(f"{name}\t{i}\n" for i, name in enumerate(self.entities))
        with open(directory / "relation2id.tsv", "w", encoding="utf-8") as fh:
            fh.writelines(f"{name}\t{i}\n" for i, name in enumerate(self.relations))

    def save(self, path) -> None:
        header = {
            "entities": self.entities,
            "relations": self.relations,
            "augmented": self.augmented,
            "num_base_relations": self.num_base_relations,
            "sizes": {s: len(self.splits[s]) for s in SPLITS},
            "labelled": {s: self.labels[s] is not None for s in SPLITS},
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_STORE_MAGIC + struct.pack("<II", _STORE_VERSION, len(blob)))
            fh.write(blob)
            for s in SPLITS:
                fh.write(np.ascontiguousarray(self.splits[s], dtype="<i4").tobytes())
                if self.labels[s] is not None:
                    fh.write(np.ascontiguousarray(self.labels[s], dtype="<i1").tobytes())

    @classmethod
    def load(cls, path) -> "TripleStore":
        data = Path(path).read_bytes()
        if data[:8] != _STORE_MAGIC:
            raise DataError(f"{path}: not a triple store cache")
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != _STORE_VERSION:
            raise DataError(f"{path}: store cache version {version}, expected {_STORE_VERSION}")
        off = 16
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        store = cls(entities=header["entities"], relations=header["relations"])
        for s in SPLITS:
            n = header["sizes"][s]
            arr = np.frombuffer(data, dtype="<i4", count=3 * n, offset=off).reshape(n, 3)
            off += 12 * n
            store.splits[s] = arr.astype(np.int64)
            if header["labelled"][s]:
                store.labels[s] = np.frombuffer(data, dtype="<i1", count=n, offset=off).astype(np.int64)
                off += n
        store.augmented = header["augmented"]
        store.num_base_relations = header["num_base_relations"]
        return store


class AdjacencyIndex:
    """Successor lists keyed by (entity, relation) over the training split."""

    def __init__(self, triples, num_entities: int):
        succ = defaultdict(set)
        pred = defaultdict(set)
        for h, r, t in np.asarray(triples).tolist():
            succ[h, r].add(t)
            pred[t, r].add(h)
        self.num_entities = num_entities
        self._succ = {k: np.array(sorted(v), dtype=np.int64) for k, v in succ.items()}
        self._pred = {k: np.array(sorted(v), dtype=np.int64) for k, v in pred.items()}
        out = defaultdict(set)
        for h, r in self._succ:
            out[h].add(r)
        self._out = {e: sorted(rs) for e, rs in out.items()}
        self._empty = np.zeros(0, dtype=np.int64)

    @classmethod
    def from_store(cls, store: TripleStore) -> "AdjacencyIndex":
        return cls(store.train, store.num_entities)

    def successors(self, h: int, r: int) -> np.ndarray:
        return self._succ.get((h, r), self._empty)

    def predecessors(self, t: int, r: int) -> np.ndarray:
        return self._pred.get((t, r), self._empty)

    def out_relations(self, h: int) -> list[int]:
        return self._out.get(h, [])

    def has_edge(self, h, r, t) -> bool:
        s = self._succ.get((h, r))
        if s is None:
            return False
        i = np.searchsorted(s, t)
        return i < len(s) and s[i] == t


@dataclass
class TypeConstraintIndex:
    """Per-relation domain/range sets (LCWA) and Bernoulli corruption rates."""

    domain: dict[int, np.ndarray]
    range: dict[int, np.ndarray]
    teh: dict[int, float]
    het: dict[int, float]

    def head_replace_prob(self, r: int) -> float:
        return self.teh[r] / (self.teh[r] + self.het[r])

    def __contains__(self, r) -> bool:
        return r in self.teh


def _per_relation_stats(triples):
    heads = defaultdict(set)
    tails = defaultdict(set)
    pairs = defaultdict(set)
    for h, r, t in np.asarray(triples).tolist():
        heads[r].add(h)
        tails[r].add(t)
        pairs[r].add((h, t))
    return heads, tails, pairs


def build_type_index(store: TripleStore, num_relations: int | None = None) -> TypeConstraintIndex:
    """Domain/range and teh/het for each relation, from training triples only.

    teh is the number of distinct (h, t) pairs divided by the number of
    distinct heads; het the same over distinct tails.
    """
    if len(store.train) == 0:
        raise DataError("training split is empty")
    heads, tails, pairs = _per_relation_stats(store.train)
    num_relations = store.num_relations if num_relations is None else num_relations
    domain, rng, teh, het = {}, {}, {}, {}
    for r in range(num_relations):
        if r not in pairs:
            log.warning("relation %d has no training triples; excluded from type index", r)
            continue
        n = len(pairs[r])
        domain[r] = np.array(sorted(heads[r]), dtype=np.int64)
        rng[r] = np.array(sorted(tails[r]), dtype=np.int64)
        teh[r] = n / len(heads[r])
        het[r] = n / len(tails[r])
    return TypeConstraintIndex(domain, rng, teh, het)


def category_for(tph: float, hpt: float) -> str:
    if tph < 1.5 and hpt < 1.5:
        return "1-1"
    if tph >= 1.5 and hpt < 1.5:
        return "1-N"
    if tph < 1.5 and hpt >= 1.5:
        return "N-1"
    return "N-N"


def classify_relations(store: TripleStore) -> dict[int, str]:
    """Map each relation with training triples to its 1-1/1-N/N-1/N-N category.

    Statistics come from the original (non-inverse) training triples; inverse
    relations, when present, get the mirrored category.
    """
    if len(store.train) == 0:
        raise DataError("training split is empty")
    heads, tails, pairs = _per_relation_stats(store.base_train())
    out = {}
    for r, ps in pairs.items():
        out[r] = category_for(len(ps) / len(heads[r]), len(ps) / len(tails[r]))
    if store.augmented:
        mirror = {"1-1": "1-1", "1-N": "N-1", "N-1": "1-N", "N-N": "N-N"}
        for r, c in list(out.items()):
            out[store.inverse(r)] = mirror[c]
    return out
