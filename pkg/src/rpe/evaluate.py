"""Link prediction and triple classification protocols."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .kb import CATEGORIES, DataError, TripleStore, TypeConstraintIndex, build_type_index, classify_relations
from .model import ModelParams, clip_unit, composition
from .paths import PathEvidence
from .kernels import Translation, compose_batch
from .trainer import evidence_rows_for

log = logging.getLogger(__name__)

TIE_RULES = ("optimistic", "pessimistic")


@dataclass
class RankResult:
    triple: tuple[int, int, int]
    side: str
    raw_rank: int
    filtered_rank: int


class Scorer:
    """Scores every candidate entity for a query with the model's final score.

    The final score of (h, r, t) is G(h, r, t) + G(t, r^-1, h). Candidate
    triples get their path terms from ``evidence`` when they were mined, and
    only the direct terms otherwise.
    """

    def __init__(self, params: ModelParams, evidence: PathEvidence | None = None):
        self.params = params
        self.evidence = evidence if params.lam != 0 else None
        self._proj_cache: dict[int, np.ndarray] = {}
        self._by_hr: dict[tuple[int, int], list[int]] = defaultdict(list)
        self._by_rt: dict[tuple[int, int], list[int]] = defaultdict(list)
        if self.evidence is not None:
            for (h, r, t), items in self.evidence.triples.items():
                if items:
                    self._by_hr[h, r].append(t)
                    self._by_rt[r, t].append(h)

    def projected(self, r: int) -> np.ndarray:
        """All entity vectors projected (and clipped) by relation r's matrix."""
        X = self._proj_cache.get(r)
        if X is None:
            M = self.params.matrix(r)
            X = clip_unit(self.params.entity @ M.T)
            if len(self._proj_cache) > 64:
                self._proj_cache.clear()
            self._proj_cache[r] = X
        return X

    def _direct(self, r, fixed, side):
        """Direct scores of (fixed, r, c) (side='tail') or (c, r, fixed) for all c."""
        X = self.projected(r)
        v = self.params.relation[r]
        d = X[fixed] + v - X if side == "tail" else X + v - X[fixed]
        return np.abs(d).sum(axis=1) if self.params.norm == 1 else np.sqrt((d * d).sum(axis=1))

    def _path_term(self, triples) -> np.ndarray:
        params = self.params
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        out = np.zeros(len(triples))
        if self.evidence is None or len(triples) == 0:
            return out
        ev = evidence_rows_for(triples, self.evidence, params.lam, self.evidence.max_len)
        if len(ev.owner) == 0:
            return out
        comp = composition(params.mode)
        upaths, uid = np.unique(ev.paths, axis=0, return_inverse=True)
        uid = uid.reshape(-1)
        Mp = None if comp is None else compose_batch(params, upaths, comp)[0]
        valid = upaths >= 0
        pstar = (params.relation[np.where(valid, upaths, 0)] * valid[:, :, None]).sum(axis=1)[uid]
        o = ev.owner
        tr = Translation(Mp, uid, params.entity[triples[o, 0]], params.entity[triples[o, 2]], pstar, params.norm)
        np.add.at(out, o, ev.coef * tr.score)
        return out

    def candidate_scores(self, triple, side: str) -> np.ndarray:
        """Final scores with the head (side='head') or tail replaced by every entity."""
        h, r, t = (int(x) for x in triple)
        ri = self.params.inverse(r)
        if side == "tail":
            scores = self._direct(r, h, "tail") + self._direct(ri, h, "head")
            cands = set(self._by_hr.get((h, r), ())) | set(self._by_rt.get((ri, h), ()))
            fwd = [(h, r, c) for c in sorted(cands)]
            rev = [(c, ri, h) for c in sorted(cands)]
        elif side == "head":
            scores = self._direct(r, t, "head") + self._direct(ri, t, "tail")
            cands = set(self._by_rt.get((r, t), ())) | set(self._by_hr.get((t, ri), ()))
            fwd = [(c, r, t) for c in sorted(cands)]
            rev = [(t, ri, c) for c in sorted(cands)]
        else:
            raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
        if cands:
            idx = np.asarray(sorted(cands), dtype=np.int64)
            scores[idx] += self._path_term(fwd) + self._path_term(rev)
        return scores

    def triple_scores(self, triples) -> np.ndarray:
        """Final scores of specific triples."""
        params = self.params
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        h, r, t = triples.T
        ri = params.inverse(r)
        out = np.zeros(len(triples))
        for rel in np.unique(np.concatenate([r, ri])):
            X = self.projected(int(rel))
            v = params.relation[rel]
            sel = r == rel
            d = X[h[sel]] + v - X[t[sel]]
            out[sel] += np.abs(d).sum(1) if params.norm == 1 else np.sqrt((d * d).sum(1))
            sel = ri == rel
            d = X[t[sel]] + v - X[h[sel]]
            out[sel] += np.abs(d).sum(1) if params.norm == 1 else np.sqrt((d * d).sum(1))
        rev = np.stack([t, ri, h], axis=1)
        return out + self._path_term(triples) + self._path_term(rev)


def rank_from_scores(scores: np.ndarray, target: int, filter_mask: np.ndarray | None,
                     tie: str = "optimistic") -> tuple[int, int]:
    """(raw, filtered) rank of ``target``; ``filter_mask`` marks known positives."""
    s = scores[target]
    worse = scores < s if tie == "optimistic" else scores <= s
    if tie == "pessimistic":
        worse = worse.copy()
        worse[target] = False
    raw = 1 + int(worse.sum())
    if filter_mask is None:
        return raw, raw
    keep = worse & ~filter_mask
    return raw, 1 + int(keep.sum())


class FilterIndex:
    """Known positive entities for (h, r, ?) and (?, r, t) queries."""

    def __init__(self, triples):
        self.tails = defaultdict(list)
        self.heads = defaultdict(list)
        for h, r, t in triples:
            self.tails[h, r].append(t)
            self.heads[r, t].append(h)

    def mask(self, triple, side, num_entities):
        h, r, t = triple
        m = np.zeros(num_entities, dtype=bool)
        known = self.tails.get((h, r), ()) if side == "tail" else self.heads.get((r, t), ())
        m[list(known)] = True
        m[t if side == "tail" else h] = False
        return m


def rank_entity(triple, side: str, params: ModelParams, evidence: PathEvidence | None, store: TripleStore,
                tie: str = "optimistic", scorer: Scorer | None = None, filt: FilterIndex | None = None) -> RankResult:
    if tie not in TIE_RULES:
        raise ValueError(f"tie must be one of {TIE_RULES}")
    triple = tuple(int(x) for x in triple)
    scorer = scorer or Scorer(params, evidence)
    filt = filt or FilterIndex(store.known_positives())
    scores = scorer.candidate_scores(triple, side)
    target = triple[2] if side == "tail" else triple[0]
    raw, fil = rank_from_scores(scores, target, filt.mask(triple, side, params.num_entities), tie)
    return RankResult(triple, side, raw, fil)


@dataclass
class LinkPredictionReport:
    mean_rank_raw: float
    mean_rank_filter: float
    hits10_raw: float
    hits10_filter: float
    num_queries: int
    by_category: dict = field(default_factory=dict)   # (category, side) -> hits@10 filter
    category_counts: dict = field(default_factory=dict)
    ranks: list = field(default_factory=list)

    def as_rows(self) -> list[tuple[str, str]]:
        rows = [("mean_rank_raw", f"{self.mean_rank_raw:.2f}"), ("mean_rank_filter", f"{self.mean_rank_filter:.2f}"),
                ("hits10_raw", f"{self.hits10_raw:.2f}"), ("hits10_filter", f"{self.hits10_filter:.2f}"),
                ("queries", str(self.num_queries))]
        for side in ("head", "tail"):
            for cat in CATEGORIES:
                if (cat, side) in self.by_category:
                    rows.append((f"hits10_filter_{side}_{cat}", f"{self.by_category[cat, side]:.2f}"))
        return rows

    def to_tsv(self) -> str:
        return "metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in self.as_rows())

    def pretty(self, setting: str = "both", by_category: bool = True) -> str:
        lines = ["            Mean Rank         Hits@10(%)", "            Raw     Filter    Raw     Filter"]
        mr_raw = f"{self.mean_rank_raw:<8.1f}" if setting in ("raw", "both") else "-       "
        mr_fil = f"{self.mean_rank_filter:<10.1f}" if setting in ("filter", "both") else "-         "
        h_raw = f"{self.hits10_raw:<8.1f}" if setting in ("raw", "both") else "-       "
        h_fil = f"{self.hits10_filter:.1f}" if setting in ("filter", "both") else "-"
        lines.append(f"model       {mr_raw}{mr_fil}{h_raw}{h_fil}")
        if by_category and self.by_category:
            lines.append("")
            lines.append("Hits@10 filter   " + "  ".join(f"{c:>6}" for c in CATEGORIES))
            for side in ("head", "tail"):
                vals = "  ".join(f"{self.by_category[c, side]:6.1f}" if (c, side) in self.by_category else f"{'-':>6}"
                                 for c in CATEGORIES)
                lines.append(f"predict {side:<8} {vals}")
        return "\n".join(lines)


def link_prediction(triples, params: ModelParams, store: TripleStore, evidence: PathEvidence | None = None,
                    categories: dict | None = None, tie: str = "optimistic") -> LinkPredictionReport:
    """Rank both sides of every triple against all entities."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if categories is None:
        categories = classify_relations(store)
    scorer = Scorer(params, evidence)
    filt = FilterIndex(store.known_positives())
    ranks = []
    hits = defaultdict(list)
    order = np.argsort(triples[:, 1], kind="stable")
    for tr in triples[order].tolist():
        for side in ("head", "tail"):
            res = rank_entity(tr, side, params, evidence, store, tie, scorer, filt)
            ranks.append(res)
            cat = categories.get(tr[1])
            if cat is not None:
                hits[cat, side].append(res.filtered_rank <= 10)
    if not ranks:
        raise DataError("no triples to evaluate")
    raw = np.array([x.raw_rank for x in ranks], dtype=float)
    fil = np.array([x.filtered_rank for x in ranks], dtype=float)
    return LinkPredictionReport(
        mean_rank_raw=float(raw.mean()), mean_rank_filter=float(fil.mean()),
        hits10_raw=100.0 * float((raw <= 10).mean()), hits10_filter=100.0 * float((fil <= 10).mean()),
        num_queries=len(ranks),
        by_category={k: 100.0 * float(np.mean(v)) for k, v in sorted(hits.items())},
        category_counts={k: len(v) for k, v in sorted(hits.items())},
        ranks=ranks,
    )


# triple classification --------------------------------------------------


@dataclass
class ThresholdSet:
    per_relation: dict[int, float]
    fallback: float

    def get(self, r: int) -> float:
        return self.per_relation.get(int(r), self.fallback)


def best_threshold(scores, labels) -> tuple[float, float]:
    """Accuracy-maximising threshold for 'positive iff score < delta'.

    Candidates are the smallest score, the midpoints between consecutive
    distinct scores and the next float above the largest score. Ties go to
    the smallest threshold. Returns (delta, accuracy).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels) == 1
    if len(scores) == 0:
        raise DataError("cannot tune a threshold on no triples")
    cands = candidate_thresholds(scores)
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    # predicted positive: scores strictly below delta
    below = np.searchsorted(s, cands, side="left")
    pos_below = np.concatenate([[0], np.cumsum(y)])[below]
    neg_total = int((~y).sum())
    neg_below = below - pos_below
    correct = pos_below + (neg_total - neg_below)
    best = int(np.argmax(correct))
    return float(cands[best]), float(correct[best]) / len(s)


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=float))
    return np.concatenate([[u[0]], (u[:-1] + u[1:]) / 2.0, [np.nextafter(u[-1], np.inf)]])


def accuracy_at(scores, labels, delta) -> float:
    scores, labels = np.asarray(scores), np.asarray(labels)
    return float(np.mean((scores < delta) == (labels == 1)))


def tune_thresholds(triples, labels, params: ModelParams, evidence: PathEvidence | None = None,
                    scores=None) -> ThresholdSet:
    """Per-relation thresholds maximising validation accuracy, plus a pooled fallback."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    labels = np.asarray(labels)
    if len(triples) == 0:
        raise DataError("validation split is empty")
    if scores is None:
        scores = Scorer(params, evidence).triple_scores(triples)
    fallback, _ = best_threshold(scores, labels)
    per = {}
    for r in np.unique(triples[:, 1]).tolist():
        sel = triples[:, 1] == r
        per[r], _ = best_threshold(scores[sel], labels[sel])
    return ThresholdSet(per, fallback)


def triple_classification(triples, labels, params: ModelParams, thresholds: ThresholdSet,
                          evidence: PathEvidence | None = None, scores=None) -> float:
    """Accuracy (percent) of 'positive iff score < delta_r'."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    labels = np.asarray(labels)
    if scores is None:
        scores = Scorer(params, evidence).triple_scores(triples)
    deltas = np.array([thresholds.get(r) for r in triples[:, 1].tolist()])
    return 100.0 * float(np.mean((scores < deltas) == (labels == 1)))


@dataclass
class NegativeRecord:
    positive: tuple[int, int, int]
    negative: tuple[int, int, int]
    side: str


def position_pools(store: TripleStore) -> tuple[np.ndarray, np.ndarray]:
    """Entities seen as a head / as a tail of some original training relation."""
    base = store.base_train()
    return np.unique(base[:, 0]), np.unique(base[:, 2])


def generate_classification_negatives(triples, store: TripleStore, type_index: TypeConstraintIndex | None = None,
                                      rng: np.random.Generator | None = None, seed: int = 0,
                                      sample_log: list | None = None):
    """One corrupted triple per positive, returned as (triples, labels).

    The corruption side is Bernoulli per relation; the replacement entity is
    drawn from the entities observed in that argument position and known
    positives are rejected. Positives that cannot be corrupted are dropped
    together with their would-be negative.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    rng = np.random.default_rng(seed) if rng is None else rng
    type_index = build_type_index(store) if type_index is None else type_index
    heads, tails = position_pools(store)
    known = store.known_positives()
    out, labels = [], []
    for tr in triples.tolist():
        h, r, t = tr
        p_head = type_index.head_replace_prob(r) if r in type_index else 0.5
        side = "head" if rng.random() < p_head else "tail"
        pool = heads if side == "head" else tails
        neg = None
        for _ in range(100):
            e = int(pool[rng.integers(len(pool))])
            cand = (e, r, t) if side == "head" else (h, r, e)
            if cand not in known:
                neg = cand
                break
        if neg is None:
            valid = [int(e) for e in pool if ((int(e), r, t) if side == "head" else (h, r, int(e))) not in known]
            if valid:
                e = valid[int(rng.integers(len(valid)))]
                neg = (e, r, t) if side == "head" else (h, r, e)
        if neg is None:
            log.warning("no negative available for %s; skipped", tr)
            continue
        if sample_log is not None:
            sample_log.append(NegativeRecord(tuple(tr), neg, side))
        out.extend([tuple(tr), neg])
        labels.extend([1, -1])
    return np.asarray(out, dtype=np.int64).reshape(-1, 3), np.asarray(labels, dtype=np.int64)
