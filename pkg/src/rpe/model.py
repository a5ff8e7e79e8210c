"""Model parameters and score functions for relation path embedding.

Entities live in an n-dimensional space and are projected into an
m-dimensional relation space by per-relation matrices ``M_r``. A path gets a
projection composed from the matrices of its relations (additively for
``acom``, multiplicatively for ``mcom``) and a translation equal to the sum of
its relation vectors. Lower scores mean more plausible triples.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODES = ("initial", "pc", "acom", "mcom", "pc+acom", "pc+mcom")

_CKPT_MAGIC = b"RPECKPT\x00"
_CKPT_VERSION = 1


class ConfigError(ValueError):
    """Invalid model or training configuration."""


def composition(mode: str) -> str | None:
    """``'acom'``, ``'mcom'`` or None for the unprojected modes."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode.rsplit("+", 1)[-1] if mode.endswith("com") else None


def uses_type_constraints(mode: str) -> bool:
    return mode.startswith("pc")


def identity_pattern(m: int, n: int) -> np.ndarray:
    return np.eye(m, n)


@dataclass
class ModelParams:
    entity: np.ndarray
    relation: np.ndarray
    proj: np.ndarray
    mode: str = "acom"
    lam: float = 1.0
    norm: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        comp = composition(self.mode)
        if comp == "mcom" and self.m != self.n:
            raise ConfigError(f"mcom needs square projections, got m={self.m}, n={self.n}")
        if self.norm not in (1, 2):
            raise ConfigError("norm must be 1 or 2")
        if self.relation.shape[0] % 2:
            raise ConfigError("relation table must hold base and inverse relations (even count)")

    @property
    def n(self) -> int:
        return self.entity.shape[1]

    @property
    def m(self) -> int:
        return self.relation.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation.shape[0]

    @property
    def projected(self) -> bool:
        return composition(self.mode) is not None

    def inverse(self, r):
        half = self.num_relations // 2
        return (r + half) % self.num_relations

    def matrix(self, r: int) -> np.ndarray:
        return self.proj[r] if self.projected else identity_pattern(self.m, self.n)

    def copy(self) -> "ModelParams":
        return ModelParams(self.entity.copy(), self.relation.copy(), self.proj.copy(),
                           self.mode, self.lam, self.norm, dict(self.meta))

    @classmethod
    def zeros(cls, num_entities, num_relations, n, m, mode="acom", lam=1.0, norm=1) -> "ModelParams":
        proj = np.broadcast_to(identity_pattern(m, n), (num_relations, m, n)).copy()
        return cls(np.zeros((num_entities, n)), np.zeros((num_relations, m)), proj, mode, lam, norm)

    # checkpoints --------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        """Binary checkpoint (little-endian float32) plus a JSON sidecar."""
        path = Path(path)
        mode = self.mode.encode("ascii").ljust(16, b"\x00")
        head = struct.pack("<IIIII16sdB", _CKPT_VERSION, self.n, self.m, self.num_entities,
                           self.num_relations, mode, self.lam, self.norm)
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC + head)
            for arr in (self.entity, self.relation, self.proj):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        meta = dict(self.meta)
        meta.update(metadata or {})
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        data = Path(path).read_bytes()
        if data[:8] != _CKPT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint")
        fmt = "<IIIII16sdB"
        version, n, m, E, R2, mode, lam, norm = struct.unpack_from(fmt, data, 8)
        if version != _CKPT_VERSION:
            raise ConfigError(f"{path}: checkpoint version {version}, expected {_CKPT_VERSION}")
        off = 8 + struct.calcsize(fmt)

        def take(shape):
            nonlocal off
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            return arr.astype(np.float64)

        ent, rel, proj = take((E, n)), take((R2, m)), take((R2, m, n))
        sidecar = Path(str(path) + ".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(ent, rel, proj, mode.rstrip(b"\x00").decode("ascii"), lam, norm, meta)


# primitives -------------------------------------------------------------


def clip_unit(x: np.ndarray) -> np.ndarray:
    """Rescale ``x`` (or each row of ``x``) to unit L2 norm when it exceeds 1."""
    nrm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(nrm > 1.0, x / np.where(nrm > 1.0, nrm, 1.0), x)


def project(v: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``M @ v``, rescaled to unit norm if longer than 1."""
    v = np.asarray(v, dtype=float)
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[1] != v.shape[-1]:
        raise ValueError(f"cannot project a {v.shape} vector with a {M.shape} matrix")
    return clip_unit(M @ v)


def normalize_matrix(A: np.ndarray) -> np.ndarray:
    """Cap the Frobenius norm of an m x n matrix at sqrt(m)."""
    cap = np.sqrt(A.shape[-2])
    f = np.linalg.norm(A, axis=(-2, -1), keepdims=True)
    return np.where(f > cap, A * (cap / np.where(f > cap, f, 1.0)), A)


def compose_projection(path, params: ModelParams, mode: str | None = None) -> np.ndarray:
    mode = composition(params.mode) if mode is None else mode.lower()
    mats = [params.proj[r] for r in path]
    if mode == "acom":
        A = np.sum(mats, axis=0)
    elif mode == "mcom":
        if params.m != params.n:
            raise ConfigError("mcom needs square projections")
        A = mats[0]
        for M in mats[1:]:
            A = A @ M
    else:
        raise ConfigError(f"no composition for mode {mode!r}")
    return normalize_matrix(A)


def path_representation(path, params: ModelParams) -> np.ndarray:
    return np.sum(params.relation[list(path)], axis=0)


def distance(d: np.ndarray, norm: int = 1) -> float:
    return float(np.abs(d).sum() if norm == 1 else np.sqrt(d @ d))


# scores -----------------------------------------------------------------


def score_relation(h: int, r: int, t: int, params: ModelParams) -> float:
    M = params.matrix(r)
    d = project(params.entity[h], M) + params.relation[r] - project(params.entity[t], M)
    return distance(d, params.norm)


def path_matrix(path, params: ModelParams) -> np.ndarray:
    if not params.projected:
        return identity_pattern(params.m, params.n)
    return compose_projection(path, params)


def score_path(h: int, path, t: int, params: ModelParams) -> float:
    M = path_matrix(path, params)
    d = project(params.entity[h], M) + path_representation(path, params) - project(params.entity[t], M)
    return distance(d, params.norm)


@dataclass
class ScoreBreakdown:
    direct: float
    path_terms: list = field(default_factory=list)
    combined: float = 0.0


def score_goal(h: int, r: int, t: int, evidence, params: ModelParams) -> ScoreBreakdown:
    """Direct score plus the reliability-weighted path scores.

    ``evidence`` is a PathEvidence (or None). With no reliable paths the path
    term is zero.
    """
    direct = score_relation(h, r, t, params)
    out = ScoreBreakdown(direct=direct, combined=direct)
    if evidence is None or params.lam == 0:
        return out
    items = evidence.weighted((h, r, t))
    z = sum(prob for _, _, prob in items)
    if z <= 0:
        return out
    acc = 0.0
    for p, w, _ in items:
        dist = score_path(h, p, t, params)
        out.path_terms.append((p, w, dist))
        acc += w * dist
    out.combined = direct + params.lam / z * acc
    return out


def score_final(h: int, r: int, t: int, evidence, params: ModelParams) -> float:
    """Forward goal score plus the goal score of the reversed triple."""
    fwd = score_goal(h, r, t, evidence, params).combined
    rev = score_goal(t, params.inverse(r), h, evidence, params).combined
    return fwd + rev
