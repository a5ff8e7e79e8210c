"""Vectorised forward/backward pieces shared by training and evaluation."""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .model import ModelParams


def scatter_add(target: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """``target[idx] += vals`` with repeated indices accumulated."""
    if len(idx) == 0:
        return
    flat = vals.reshape(len(idx), -1)
    S = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(target.shape[0], len(idx)))
    target += (S @ flat).reshape(target.shape)


def groups(idx: np.ndarray):
    """(value, row selector) pairs for each distinct value of ``idx``."""
    order = np.argsort(idx, kind="stable")
    vals, starts = np.unique(idx[order], return_index=True)
    bounds = np.append(starts, len(idx))
    return [(int(v), order[bounds[i]:bounds[i + 1]]) for i, v in enumerate(vals)]


class Translation:
    """Forward/backward of ||clip(M h) + v - clip(M t)|| over K rows.

    Row k is projected by ``mats[idx[k]]``; ``mats=None`` means the fixed
    identity pattern.
    """

    def __init__(self, mats, idx, eh, et, v, norm):
        self.mats, self.eh, self.et, self.norm = mats, eh, et, norm
        m = v.shape[1]
        if mats is None:
            self.groups = None
            self.xh, self.xt = _pad(eh, m), _pad(et, m)
        else:
            self.groups = groups(idx)
            self.xh = np.empty((len(eh), m))
            self.xt = np.empty((len(et), m))
            for i, sel in self.groups:
                Mt = mats[i].T
                self.xh[sel] = eh[sel] @ Mt
                self.xt[sel] = et[sel] @ Mt
        self.nh = np.linalg.norm(self.xh, axis=1)
        self.nt = np.linalg.norm(self.xt, axis=1)
        self.yh = self.xh / np.maximum(self.nh, 1.0)[:, None]
        self.yt = self.xt / np.maximum(self.nt, 1.0)[:, None]
        self.d = self.yh + v - self.yt
        if norm == 1:
            self.score = np.abs(self.d).sum(axis=1)
        else:
            self.score = np.sqrt((self.d ** 2).sum(axis=1))

    def backward(self, coef):
        """Gradients w.r.t. (eh, et, v) for loss = sum(coef * score).

        Matrix gradients are available afterwards via :meth:`matrix_grad_into`.
        """
        if self.norm == 1:
            gd = np.sign(self.d)
        else:
            gd = self.d / np.where(self.score > 0, self.score, np.inf)[:, None]
        gd = gd * coef[:, None]
        gxh = clip_backward(self.yh, self.nh, gd)
        gxt = clip_backward(self.yt, self.nt, -gd)
        self.gxh, self.gxt = gxh, gxt
        if self.mats is None:
            n = self.eh.shape[1]
            return _pad(gxh, n), _pad(gxt, n), gd
        geh = np.empty_like(self.eh)
        get = np.empty_like(self.et)
        for i, sel in self.groups:
            geh[sel] = gxh[sel] @ self.mats[i]
            get[sel] = gxt[sel] @ self.mats[i]
        return geh, get, gd

    def matrix_grad_into(self, target: np.ndarray) -> None:
        """Add the gradient w.r.t. each used matrix into ``target`` (shaped like ``mats``)."""
        for i, sel in self.groups:
            target[i] += self.gxh[sel].T @ self.eh[sel] + self.gxt[sel].T @ self.et[sel]


def _pad(x, width):
    """Apply the m x n identity pattern row-wise: truncate or zero-pad to ``width``."""
    k = x.shape[1]
    if k == width:
        return x
    if k > width:
        return x[:, :width]
    return np.concatenate([x, np.zeros((len(x), width - k))], axis=1)


def clip_backward(y, nrm, g):
    over = nrm > 1.0
    if not over.any():
        return g
    out = g.copy()
    yo, go = y[over], g[over]
    out[over] = (go - yo * np.sum(yo * go, axis=1, keepdims=True)) / nrm[over, None]
    return out


def compose_batch(params: ModelParams, paths: np.ndarray, comp: str):
    """Composed, normalised path matrices and what backward needs."""
    m = params.m
    valid = paths >= 0
    K, L = paths.shape
    mats = params.proj[np.where(valid, paths, 0)]               # (K, L, m, n)
    if comp == "acom":
        A = (mats * valid[:, :, None, None]).sum(axis=1)
        chain = None
    else:
        eye = np.eye(m)
        mats = np.where(valid[:, :, None, None], mats, eye)
        prefix = [np.broadcast_to(eye, (K, m, m))]
        for j in range(L):
            prefix.append(prefix[-1] @ mats[:, j])
        A = prefix[-1]
        chain = (mats, prefix)
    f = np.linalg.norm(A, axis=(1, 2))
    cap = np.sqrt(m)
    scale = np.where(f > cap, cap / np.where(f > 0, f, 1.0), 1.0)
    return A * scale[:, None, None], (A, f, scale, chain)


def compose_backward(gMp, paths, cache, comp, nrel):
    A, f, scale, chain = cache
    cap_hit = scale < 1.0
    gA = gMp * scale[:, None, None]
    if cap_hit.any():
        Ah = A[cap_hit] / f[cap_hit, None, None]
        inner = np.einsum("kmn,kmn->k", Ah, gMp[cap_hit])
        gA[cap_hit] = scale[cap_hit, None, None] * (gMp[cap_hit] - Ah * inner[:, None, None])
    valid = paths >= 0
    K, L = paths.shape
    gP = np.zeros((nrel,) + gMp.shape[1:])
    if comp == "acom":
        for j in range(L):
            sel = valid[:, j]
            scatter_add(gP, paths[sel, j], gA[sel])
        return gP
    mats, prefix = chain
    m = gMp.shape[1]
    suffix = np.broadcast_to(np.eye(m), (K, m, m))
    for j in range(L - 1, -1, -1):
        sel = valid[:, j]
        g = np.swapaxes(prefix[j], 1, 2) @ gA @ np.swapaxes(suffix, 1, 2)
        scatter_add(gP, paths[sel, j], g[sel])
        suffix = mats[:, j] @ suffix
    return gP
