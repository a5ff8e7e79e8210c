"""Relation-path enumeration, PRA random-walk probabilities and path evidence."""

from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kb import AdjacencyIndex, DataError, TripleStore


_CACHE_MAGIC = b"RPEPATHS"
_CACHE_VERSION = 1


def path_probability(h: int, path, index: AdjacencyIndex) -> dict[int, float]:
    """P(t | h, path) for every entity t reachable from h along ``path``.

    Each step spreads the current mass uniformly over the successors of an
    entity under the next relation; mass at entities with no successor is
    dropped, so the result sums to at most 1.
    """
    dist = {h: 1.0}
    for r in path:
        nxt: dict[int, float] = defaultdict(float)
        for e in sorted(dist):
            succ = index.successors(e, r)
            if len(succ) == 0:
                continue
            share = dist[e] / len(succ)
            for t in succ.tolist():
                nxt[t] += share
        dist = dict(nxt)
        if not dist:
            break
    return dist


def path_distributions(h: int, max_len: int, index: AdjacencyIndex) -> dict[tuple, dict[int, float]]:
    """Random-walk distributions from ``h`` for every non-empty path up to ``max_len``.

    Only paths with at least one complete walk are returned.
    """
    out = {}
    frontier = {(): {h: 1.0}}
    for _ in range(max_len):
        nxt: dict[tuple, dict[int, float]] = {}
        for path, dist in frontier.items():
            ext: dict[int, dict[int, float]] = {}
            for e in sorted(dist):
                pe = dist[e]
                for r in index.out_relations(e):
                    succ = index.successors(e, r)
                    share = pe / len(succ)
                    d = ext.setdefault(r, defaultdict(float))
                    for t in succ.tolist():
                        d[t] += share
            for r, d in ext.items():
                nxt[path + (r,)] = dict(d)
        out.update(nxt)
        frontier = nxt
    return out


def enumerate_paths(h: int, t: int, max_len: int, index: AdjacencyIndex) -> list[tuple]:
    """All relation sequences of length 1..max_len with a walk from h to t.

    Ordered by length, then lexicographically by relation id.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    found = set()

    def walk(e, prefix):
        if prefix and e == t:
            found.add(prefix)
        if len(prefix) == max_len:
            return
        for r in index.out_relations(e):
            for nxt in index.successors(e, r).tolist():
                walk(nxt, prefix + (r,))

    walk(h, ())
    return sorted(found, key=lambda p: (len(p), p))


@dataclass
class PathEvidence:
    """Reliable paths per training triple plus the path/relation co-occurrence table.

    ``triples`` maps (h, r, t) to a list of (path, P(t|h,path)); ``cooc`` maps
    (path, r) to the number of training entity pairs joined by both, and
    ``marginal`` maps path to the number of training pairs it reliably joins.
    """

    triples: dict[tuple[int, int, int], list[tuple[tuple, float]]] = field(default_factory=dict)
    cooc: dict[tuple[tuple, int], int] = field(default_factory=dict)
    marginal: dict[tuple, int] = field(default_factory=dict)
    max_len: int = 2
    eta: float = 0.05
    dataset_hash: str = ""

    def paths_for(self, triple) -> list[tuple[tuple, float]]:
        return self.triples.get(tuple(int(x) for x in triple), [])

    def z(self, triple) -> float:
        return float(sum(p for _, p in self.paths_for(triple)))

    def confidence(self, r: int, path) -> float:
        path = tuple(path)
        if path not in self.marginal:
            raise KeyError(f"path {path} never observed as reliable")
        return self.cooc.get((path, r), 0) / self.marginal[path]

    def weighted(self, triple):
        """(path, P(t|h,p) * conf(r|p), P(t|h,p)) for a triple's evidence."""
        r = int(triple[1])
        return [(p, prob * self.confidence(r, p), prob) for p, prob in self.paths_for(triple)]

    def save(self, path) -> None:
        header = json.dumps({"dataset_hash": self.dataset_hash, "max_len": self.max_len, "eta": self.eta}).encode()
        buf = bytearray(_CACHE_MAGIC)
        buf += struct.pack("<II", _CACHE_VERSION, len(header)) + header
        buf += struct.pack("<Q", len(self.triples))
        for (h, r, t), items in self.triples.items():
            buf += struct.pack("<iiiI", h, r, t, len(items))
            for p, prob in items:
                buf += struct.pack(f"<B{len(p)}id", len(p), *p, prob)
        buf += struct.pack("<Q", len(self.cooc))
        for (p, r), c in self.cooc.items():
            buf += struct.pack(f"<B{len(p)}iiQ", len(p), *p, r, c)
        buf += struct.pack("<Q", len(self.marginal))
        for p, c in self.marginal.items():
            buf += struct.pack(f"<B{len(p)}iQ", len(p), *p, c)
        Path(path).write_bytes(bytes(buf))

    @staticmethod
    def read_header(path) -> dict:
        with open(path, "rb") as fh:
            data = fh.read(16)
            if data[:8] != _CACHE_MAGIC:
                raise DataError(f"{path}: not a path evidence cache")
            version, hlen = struct.unpack_from("<II", data, 8)
            if version != _CACHE_VERSION:
                raise DataError(f"{path}: cache version {version}, expected {_CACHE_VERSION}")
            return json.loads(fh.read(hlen))

    @classmethod
    def load(cls, path) -> "PathEvidence":
        data = Path(path).read_bytes()
        header = cls.read_header(path)
        off = 16 + struct.unpack_from("<I", data, 12)[0]

        def read_path():
            nonlocal off
            (n,) = struct.unpack_from("<B", data, off)
            p = struct.unpack_from(f"<{n}i", data, off + 1)
            off += 1 + 4 * n
            return tuple(p)

        ev = cls(max_len=header["max_len"], eta=header["eta"], dataset_hash=header["dataset_hash"])
        (ntrip,) = struct.unpack_from("<Q", data, off)
        off += 8
        for _ in range(ntrip):
            h, r, t, k = struct.unpack_from("<iiiI", data, off)
            off += 16
            items = []
            for _ in range(k):
                p = read_path()
                (prob,) = struct.unpack_from("<d", data, off)
                off += 8
                items.append((p, prob))
            ev.triples[h, r, t] = items
        (ncooc,) = struct.unpack_from("<Q", data, off)
        off += 8
        for _ in range(ncooc):
            p = read_path()
            r, c = struct.unpack_from("<iQ", data, off)
            off += 12
            ev.cooc[p, r] = c
        (nmarg,) = struct.unpack_from("<Q", data, off)
        off += 8
        for _ in range(nmarg):
            p = read_path()
            (c,) = struct.unpack_from("<Q", data, off)
            off += 8
            ev.marginal[p] = c
        return ev


def mine_evidence(store: TripleStore, index: AdjacencyIndex | None = None, max_len: int = 2,
                  eta: float = 0.05) -> PathEvidence:
    """Reliable paths for every training triple and the co-occurrence table.

    A path p is reliable for a training pair (h, t) when P(t|h,p) >= eta.
    The single-relation path (r) is never evidence for a triple of r itself.
    Counting is over distinct training entity pairs.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    index = AdjacencyIndex.from_store(store) if index is None else index
    by_source: dict[int, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
    for h, r, t in store.train.tolist():
        by_source[h][t].append(r)

    ev = PathEvidence(max_len=max_len, eta=eta, dataset_hash=store.content_hash())
    cooc: dict = defaultdict(int)
    marginal: dict = defaultdict(int)
    for h in sorted(by_source):
        dists = path_distributions(h, max_len, index)
        targets = by_source[h]
        reach: dict[int, list[tuple[tuple, float]]] = defaultdict(list)
        for p in sorted(dists, key=lambda q: (len(q), q)):
            for t, prob in dists[p].items():
                if t in targets and prob >= eta:
                    reach[t].append((p, prob))
        for t in sorted(targets):
            reliable = reach.get(t, [])
            rels = sorted(set(targets[t]))
            for p, _ in reliable:
                marginal[p] += 1
                for r in rels:
                    if p != (r,):
                        cooc[p, r] += 1
            for r in rels:
                ev.triples[h, r, t] = [(p, prob) for p, prob in reliable if p != (r,)]
    ev.cooc = dict(sorted(cooc.items(), key=lambda kv: (len(kv[0][0]), kv[0][0], kv[0][1])))
    ev.marginal = dict(sorted(marginal.items(), key=lambda kv: (len(kv[0]), kv[0])))
    return ev


def path_relation_confidence(evidence: PathEvidence, r: int, path) -> float:
    """P_r(r | path): share of pairs reliably joined by ``path`` that also carry ``r``."""
    return evidence.confidence(r, path)


def top_paths_for_relation(evidence: PathEvidence, r: int, k: int) -> list[tuple[tuple, float]]:
    """The ``k`` paths most predictive of relation ``r``.

    Ties on confidence go to the path with the larger marginal count, then to
    the lexicographically smaller path.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [(p, c / evidence.marginal[p]) for (p, rr), c in evidence.cooc.items() if rr == r and c > 0]
    scored.sort(key=lambda pc: (-pc[1], -evidence.marginal[pc[0]], pc[0]))
    return scored[:k]


def pad_paths(paths, max_len: int) -> np.ndarray:
    """Stack variable-length paths into an int array padded with -1."""
    out = np.full((len(paths), max_len), -1, dtype=np.int64)
    for i, p in enumerate(paths):
        out[i, :len(p)] = p
    return out
