"""Margin-based SGD training with path losses and constrained negative sampling."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kb import TripleStore, TypeConstraintIndex, build_type_index
from .model import MODES, ConfigError, ModelParams, composition, uses_type_constraints
from .kernels import Translation, compose_backward, compose_batch, scatter_add
from .paths import PathEvidence, pad_paths

log = logging.getLogger(__name__)

SAMPLING = ("uniform", "bernoulli", "type_constrained")
INITS = ("random", "transe_warmstart", "rpe_initial_warmstart")
MAX_REDRAWS = 100


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    n: int = 100
    m: int = 100
    margin_rel: float = 2.0
    margin_path: float = 5.0
    lr: float = 0.0001
    batch_size: int = 4800
    lam: float = 1.0
    eta: float = 0.05
    max_path_len: int = 2
    epochs: int = 500
    sampling: str = ""
    mode: str = "acom"
    seed: int = 0
    init: str = "random"
    warm_start: str = ""
    norm: int = 1
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.sampling:
            self.sampling = "type_constrained" if self.mode in MODES and uses_type_constraints(self.mode) else "bernoulli"

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n < 1 or self.m < 1:
            raise ConfigError("embedding dimensions must be positive")
        if composition(self.mode) == "mcom" and self.n != self.m:
            raise ConfigError(f"mcom requires n == m (got n={self.n}, m={self.m})")
        if self.margin_rel <= 0 or self.margin_path <= 0:
            raise ConfigError("margins must be positive")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lam < 0:
            raise ConfigError("balance factor must be non-negative")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if self.max_path_len < 1:
            raise ConfigError("max path length must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}")
        if self.init != "random" and not self.warm_start:
            raise ConfigError(f"init={self.init} needs a warm_start checkpoint path")
        if self.norm not in (1, 2):
            raise ConfigError("norm must be 1 or 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    # flat key = value files ---------------------------------------------

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            key, val = (x.strip() for x in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(types[key], val, key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())


def _coerce(typ, val, key):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return val


# negative sampling ------------------------------------------------------


@dataclass(frozen=True)
class CorruptedTriple:
    original: tuple[int, int, int]
    side: str
    replacement: int

    @property
    def triple(self) -> tuple[int, int, int]:
        h, r, t = self.original
        return (self.replacement, r, t) if self.side == "head" else (h, r, self.replacement)


def sample_negative(triple, strategy: str, type_index: TypeConstraintIndex | None, rng: np.random.Generator,
                    num_entities: int, positives: set) -> CorruptedTriple | None:
    """Corrupt the head or tail of ``triple``; None when no valid negative exists."""
    h, r, t = (int(x) for x in triple)
    if strategy == "uniform":
        p_head = 0.5
    else:
        if type_index is None:
            raise ValueError(f"{strategy} sampling needs a type index")
        p_head = type_index.head_replace_prob(r)
    side = "head" if rng.random() < p_head else "tail"
    if strategy == "type_constrained":
        pool = type_index.domain[r] if side == "head" else type_index.range[r]
        size = len(pool)
    else:
        pool, size = None, num_entities

    def make(e):
        return (e, r, t) if side == "head" else (h, r, e)

    for _ in range(MAX_REDRAWS):
        i = int(rng.integers(size))
        e = int(pool[i]) if pool is not None else i
        if make(e) not in positives:
            return CorruptedTriple((h, r, t), side, e)
    start = int(rng.integers(size))
    for k in range(size):
        i = (start + k) % size
        e = int(pool[i]) if pool is not None else i
        if make(e) not in positives:
            return CorruptedTriple((h, r, t), side, e)
    log.warning("no valid %s corruption for triple %s; skipped", side, (h, r, t))
    return None


def margin_loss(pos: float, neg: float, margin: float) -> float:
    return max(0.0, pos + margin - neg)


# batched objective ------------------------------------------------------


@dataclass
class EvidenceRows:
    """Flattened path evidence for a batch: one row per (triple, path)."""

    owner: np.ndarray      # index of the triple row each path belongs to
    paths: np.ndarray      # (K, L) relation ids padded with -1
    coef: np.ndarray       # lam / Z * P(t|h,p) * P_r(r|p)

    @classmethod
    def empty(cls, max_len=1):
        return cls(np.zeros(0, np.int64), np.zeros((0, max_len), np.int64), np.zeros(0))


class EvidenceTable:
    """Path evidence of every training triple, flattened for fast gathering."""

    def __init__(self, evidence: PathEvidence | None, triples: np.ndarray, max_len: int):
        self.max_len = max(1, max_len, evidence.max_len if evidence is not None else 1)
        starts, paths, weights = [0], [], []
        for tr in map(tuple, triples.tolist()):
            items = evidence.weighted(tr) if evidence is not None else []
            z = sum(prob for _, _, prob in items)
            for p, w, _ in items:
                paths.append(p)
                weights.append(w / z)
            starts.append(len(paths))
        self.start = np.asarray(starts, dtype=np.int64)
        self.paths = pad_paths(paths, self.max_len)
        self.weight = np.asarray(weights, dtype=float)

    def rows(self, triple_ids: np.ndarray, lam: float) -> EvidenceRows:
        if lam == 0 or len(self.weight) == 0:
            return EvidenceRows.empty(self.max_len)
        owner, flat = [], []
        for b, i in enumerate(triple_ids.tolist()):
            s, e = self.start[i], self.start[i + 1]
            if e > s:
                flat.append(np.arange(s, e))
                owner.append(np.full(e - s, b))
        if not flat:
            return EvidenceRows.empty(self.max_len)
        flat = np.concatenate(flat)
        return EvidenceRows(np.concatenate(owner), self.paths[flat], lam * self.weight[flat])


def evidence_rows_for(triples, evidence: PathEvidence | None, lam: float, max_len: int = 2) -> EvidenceRows:
    """EvidenceRows for arbitrary triples, looked up directly in ``evidence``."""
    owner, paths, coef = [], [], []
    if evidence is not None and lam != 0:
        for b, tr in enumerate(np.asarray(triples).reshape(-1, 3).tolist()):
            items = evidence.weighted(tr)
            z = sum(prob for _, _, prob in items)
            for p, w, _ in items:
                owner.append(b)
                paths.append(p)
                coef.append(lam * w / z)
    max_len = max([max_len] + [len(p) for p in paths])
    return EvidenceRows(np.asarray(owner, dtype=np.int64), pad_paths(paths, max_len), np.asarray(coef, dtype=float))


@dataclass
class Gradients:
    entity: np.ndarray
    relation: np.ndarray
    proj: np.ndarray | None


@dataclass
class BatchResult:
    loss: float
    grads: Gradients
    rel_losses: np.ndarray
    violations: int


def batch_objective(params: ModelParams, pos: np.ndarray, neg: np.ndarray, ev: EvidenceRows,
                    margin_rel: float, margin_path: float, need_grad: bool = True) -> BatchResult:
    """Summed margin loss over B positive/negative pairs and their path terms.

    Row b of ``pos`` is paired with row b of ``neg``; path losses of a triple
    reuse the same corrupted entities.
    """
    comp = composition(params.mode)
    E, Rv = params.entity, params.relation
    h, r, t = pos.T
    hn, tn = neg[:, 0], neg[:, 2]
    mats = None if comp is None else params.proj
    sp = Translation(mats, r, E[h], E[t], Rv[r], params.norm)
    sn = Translation(mats, r, E[hn], E[tn], Rv[r], params.norm)
    hinge = sp.score + margin_rel - sn.score
    act = (hinge > 0).astype(float)
    rel_losses = hinge * act
    loss = rel_losses.sum()
    violations = int(act.sum())

    K = len(ev.owner)
    if K:
        o = ev.owner
        upaths, uid = np.unique(ev.paths, axis=0, return_inverse=True)
        uid = uid.reshape(-1)
        Mp, cache = (None, None) if comp is None else compose_batch(params, upaths, comp)
        valid = upaths >= 0
        pstar = (Rv[np.where(valid, upaths, 0)] * valid[:, :, None]).sum(axis=1)[uid]
        pp = Translation(Mp, uid, E[h[o]], E[t[o]], pstar, params.norm)
        pn = Translation(Mp, uid, E[hn[o]], E[tn[o]], pstar, params.norm)
        phinge = pp.score + margin_path - pn.score
        pact = (phinge > 0).astype(float)
        loss += (ev.coef * phinge * pact).sum()

    if not need_grad:
        return BatchResult(float(loss), None, rel_losses, violations)

    gE = np.zeros_like(E)
    gR = np.zeros_like(Rv)
    gP = np.zeros_like(params.proj) if comp is not None else None

    for tr, ents, c in ((sp, (h, t), act), (sn, (hn, tn), -act)):
        geh, get, gv = tr.backward(c)
        scatter_add(gE, np.concatenate(ents), np.concatenate([geh, get]))
        scatter_add(gR, r, gv)
        if gP is not None:
            tr.matrix_grad_into(gP)

    if K:
        gMp = np.zeros_like(Mp) if comp is not None else None
        gpstar = np.zeros((len(upaths), params.m))
        for tr, ents, c in ((pp, (h[o], t[o]), ev.coef * pact), (pn, (hn[o], tn[o]), -ev.coef * pact)):
            geh, get, gv = tr.backward(c)
            scatter_add(gE, np.concatenate(ents), np.concatenate([geh, get]))
            scatter_add(gpstar, uid, gv)
            if gMp is not None:
                tr.matrix_grad_into(gMp)
        for j in range(upaths.shape[1]):
            sel = valid[:, j]
            scatter_add(gR, upaths[sel, j], gpstar[sel])
        if gP is not None:
            gP += compose_backward(gMp, upaths, cache, comp, params.num_relations)

    return BatchResult(float(loss), Gradients(gE, gR, gP), rel_losses, violations)


def triple_objective(triple, neg, evidence: PathEvidence | None, params: ModelParams,
                     config: TrainConfig) -> tuple[float, Gradients]:
    """Loss and exact subgradients for one positive triple and its corruption."""
    pos = np.asarray([triple], dtype=np.int64)
    negt = np.asarray([neg.triple if isinstance(neg, CorruptedTriple) else neg], dtype=np.int64)
    ev = evidence_rows_for(pos, evidence, params.lam, config.max_path_len)
    res = batch_objective(params, pos, negt, ev, config.margin_rel, config.margin_path)
    return res.loss, res.grads


def renormalize_rows(x: np.ndarray) -> None:
    nrm = np.linalg.norm(x, axis=1)
    over = nrm > 1.0
    x[over] /= nrm[over, None]


# initialisation ---------------------------------------------------------


def initialize(store: TripleStore, config: TrainConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Fresh parameters: uniform random vectors (renormalised) or a warm start.

    Projection matrices always start as the identity pattern.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    E, R2, n, m = store.num_entities, store.num_relations, config.n, config.m
    params = ModelParams.zeros(E, R2, n, m, config.mode, config.lam, config.norm)
    if config.init == "random":
        bn, bm = 6.0 / np.sqrt(n), 6.0 / np.sqrt(m)
        params.entity[:] = rng.uniform(-bn, bn, size=(E, n))
        params.relation[:] = rng.uniform(-bm, bm, size=(R2, m))
        renormalize_rows(params.entity)
        renormalize_rows(params.relation)
    else:
        warm = ModelParams.load(config.warm_start)
        if warm.entity.shape != params.entity.shape or warm.relation.shape != params.relation.shape:
            raise ConfigError(
                f"warm start {config.warm_start} has entity/relation shapes {warm.entity.shape}/"
                f"{warm.relation.shape}, expected {params.entity.shape}/{params.relation.shape}")
        params.entity[:] = warm.entity
        params.relation[:] = warm.relation
    return params


# training loop ----------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss: float
    violations: int
    skipped: int
    seconds: float
    max_entity_norm: float = 0.0
    max_relation_norm: float = 0.0


@dataclass
class Trainer:
    """SGD over the training triples; each visit trains both directions.

    ``store`` must be inverse-augmented. ``evidence`` may be None for pure
    TransE-style training (or lam = 0).
    """

    store: TripleStore
    config: TrainConfig
    evidence: PathEvidence | None = None
    params: ModelParams | None = None
    type_index: TypeConstraintIndex | None = None
    sample_log: list = field(default_factory=list)
    keep_sample_log: bool = False
    history: list = field(default_factory=list)
    on_batch: object = None

    def __post_init__(self):
        self.config.validate()
        if not self.store.augmented:
            raise ConfigError("trainer needs an inverse-augmented store")
        self.rng = np.random.default_rng(self.config.seed)
        if self.params is None:
            self.params = initialize(self.store, self.config, self.rng)
        if self.type_index is None and self.config.sampling != "uniform":
            self.type_index = build_type_index(self.store)
        self.positives = self.store.train_set()
        self.table = EvidenceTable(self.evidence, self.store.train, self.config.max_path_len)
        base = self.store.train[:, 1] < self.store.num_base_relations
        self.base_ids = np.flatnonzero(base)
        inv_index = {tr: i for i, tr in enumerate(map(tuple, self.store.train.tolist()))}
        rev = [inv_index[(t, r + self.store.num_base_relations, h)] for h, r, t in self.store.train[self.base_ids].tolist()]
        self.rev_ids = np.asarray(rev, dtype=np.int64)

    def _negatives(self, ids):
        keep, negs = [], []
        for i in ids.tolist():
            tr = tuple(self.store.train[i].tolist())
            c = sample_negative(tr, self.config.sampling, self.type_index, self.rng,
                                self.store.num_entities, self.positives)
            if c is None:
                continue
            if self.keep_sample_log:
                self.sample_log.append(c)
            keep.append(i)
            negs.append(c.triple)
        return np.asarray(keep, dtype=np.int64), np.asarray(negs, dtype=np.int64).reshape(-1, 3)

    def epoch(self) -> EpochStats:
        cfg, params = self.config, self.params
        t0 = time.perf_counter()
        order = self.rng.permutation(len(self.base_ids))
        total, violations, skipped = 0.0, 0, 0
        for s in range(0, len(order), cfg.batch_size):
            chunk = order[s:s + cfg.batch_size]
            ids = np.concatenate([self.base_ids[chunk], self.rev_ids[chunk]])
            keep, negs = self._negatives(ids)
            skipped += len(ids) - len(keep)
            if len(keep) == 0:
                continue
            ev = self.table.rows(keep, params.lam)
            res = batch_objective(params, self.store.train[keep], negs, ev, cfg.margin_rel, cfg.margin_path)
            if not np.isfinite(res.loss):
                raise NumericalError(
                    f"non-finite loss {res.loss} at epoch {len(self.history) + 1}, batch starting {s}; "
                    f"max |entity|={np.abs(params.entity).max()}, max |relation|={np.abs(params.relation).max()}")
            total += res.loss
            violations += res.violations
            if cfg.lr:
                params.entity -= cfg.lr * res.grads.entity
                params.relation -= cfg.lr * res.grads.relation
                if res.grads.proj is not None:
                    params.proj -= cfg.lr * res.grads.proj
                renormalize_rows(params.entity)
                renormalize_rows(params.relation)
            if self.on_batch is not None:
                self.on_batch(self)
        stats = EpochStats(len(self.history) + 1, total, violations, skipped, time.perf_counter() - t0,
                           float(np.linalg.norm(params.entity, axis=1).max(initial=0)),
                           float(np.linalg.norm(params.relation, axis=1).max(initial=0)))
        self.history.append(stats)
        return stats

    def fit(self, epochs: int | None = None, log_path=None, checkpoint_dir=None) -> ModelParams:
        epochs = self.config.epochs if epochs is None else epochs
        fh = None
        if log_path is not None:
            fh = open(log_path, "w", encoding="utf-8")
            fh.write("epoch\tloss\tviolations\twall_time\n")
        try:
            for _ in range(epochs):
                st = self.epoch()
                log.info("epoch %d loss %.6f violations %d", st.epoch, st.loss, st.violations)
                if fh is not None:
                    fh.write(f"{st.epoch}\t{st.loss:.6f}\t{st.violations}\t{st.seconds:.3f}\n")
                every = self.config.checkpoint_every
                if checkpoint_dir is not None and every and st.epoch % every == 0:
                    self.params.save(Path(checkpoint_dir) / f"epoch{st.epoch:04d}.ckpt", {"epoch": st.epoch})
        finally:
            if fh is not None:
                fh.close()
        return self.params


def sgd_epoch(store, evidence, params, config, rng=None) -> EpochStats:
    """Run one epoch in place on ``params``."""
    tr = Trainer(store, config, evidence, params=params)
    if rng is not None:
        tr.rng = rng
    return tr.epoch()
