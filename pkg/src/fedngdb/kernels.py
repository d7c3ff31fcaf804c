"""Batched loss/gradient kernels for the query-embedding model.

Union-free query trees compile to small instruction programs (anchor lookup,
relation translation, intersection mix) over a slot buffer; a whole training
batch flattens into contiguous index arrays so the hot loop is a single
interpreter pass. Two interchangeable implementations exist: a numba-compiled
one and a pure-numpy one. Set FEDNGDB_PURE_NUMPY=1 to force the numpy path;
it is also the automatic fallback when numba is unavailable.

Embedding conventions (d-dimensional float64 rows):
  anchor      -> entity row E[e]
  projection  -> input + R[r]
  intersection-> W2 @ relu(W1 @ m + b1) + b2 + m,  m = mean of inputs
  score(q, e) -> -||q - E[e]||_2, max over disjuncts for union queries
  sample loss -> (1/k) sum_j max(0, gamma - s_pos + s_neg_j), batch = mean
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, VocabularyError
from .queries import Anchor, Intersection, Projection, Query, to_dnf

OP_ANCHOR = 0
OP_PROJECT = 1
OP_INTERSECT = 2
MAX_ARITY = 8
INSTR_WIDTH = 2 + MAX_ARITY

_FORCE_NUMPY = os.environ.get("FEDNGDB_PURE_NUMPY", "") == "1"

if not _FORCE_NUMPY:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        _HAVE_NUMBA = False
else:
    _HAVE_NUMBA = False


def backend_name() -> str:
    return "numba" if _HAVE_NUMBA else "numpy"


def compile_disjunct(tree: Query, eidx: dict, ridx: dict) -> np.ndarray:
    """Emit one union-free tree as an int64 instruction matrix.

    Instruction i writes slot i; the last instruction produces the disjunct
    embedding. Rows: [OP_ANCHOR, local_entity, ...] | [OP_PROJECT, src_slot,
    local_relation, ...] | [OP_INTERSECT, arity, src_slot_1..arity, ...].
    """
    rows: list[list[int]] = []

    def local_entity(e: int) -> int:
        try:
            return eidx[e]
        except KeyError:
            raise VocabularyError(f"entity {e} not in local index") from None

    def local_relation(r: int) -> int:
        try:
            return ridx[r]
        except KeyError:
            raise VocabularyError(f"relation {r} not in local index") from None

    def emit(node: Query) -> int:
        if isinstance(node, Anchor):
            row = [OP_ANCHOR, local_entity(node.entity)]
        elif isinstance(node, Projection):
            src = emit(node.child)
            row = [OP_PROJECT, src, local_relation(node.relation)]
        elif isinstance(node, Intersection):
            if len(node.children) > MAX_ARITY:
                raise NumericError(f"intersection arity {len(node.children)} > {MAX_ARITY}")
            srcs = [emit(c) for c in node.children]
            row = [OP_INTERSECT, len(srcs)] + srcs
        else:
            raise NumericError(f"union node inside a disjunct: {node!r}")
        row = row + [0] * (INSTR_WIDTH - len(row))
        rows.append(row)
        return len(rows) - 1

    emit(tree)
    return np.array(rows, dtype=np.int64)


@dataclass
class CompiledBatch:
    """Flattened programs for a batch of samples.

    instr[instr_ptr[d]:instr_ptr[d+1]] are disjunct d's instructions;
    disjuncts disj_ptr[s]:disj_ptr[s+1] belong to sample s; pos[s] and
    negs[s, :] are local entity ids to score.
    """

    instr: np.ndarray
    instr_ptr: np.ndarray
    disj_ptr: np.ndarray
    pos: np.ndarray
    negs: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.pos)


def compile_batch(queries, positives, negatives, eidx: dict, ridx: dict) -> CompiledBatch:
    """DNF-rewrite and compile queries plus their scored entities."""
    instr_blocks: list[np.ndarray] = []
    instr_ptr = [0]
    disj_ptr = [0]
    for q in queries:
        for disjunct in to_dnf(q):
            block = compile_disjunct(disjunct, eidx, ridx)
            instr_blocks.append(block)
            instr_ptr.append(instr_ptr[-1] + len(block))
        disj_ptr.append(len(instr_ptr) - 1)
    negs = np.asarray(negatives, dtype=np.int64)
    if negs.ndim != 2:
        raise NumericError(f"negatives must be 2-d (samples x k), got shape {negs.shape}")
    return CompiledBatch(
        instr=np.concatenate(instr_blocks, axis=0),
        instr_ptr=np.array(instr_ptr, dtype=np.int64),
        disj_ptr=np.array(disj_ptr, dtype=np.int64),
        pos=np.asarray(positives, dtype=np.int64),
        negs=negs,
    )


def _loss_grad_numpy(instr, instr_ptr, disj_ptr, pos, negs, E, R, W1, b1, W2, b2, gamma):
    d = E.shape[1]
    S = pos.shape[0]
    k = negs.shape[1]
    dE = np.zeros_like(E)
    dR = np.zeros_like(R)
    dW1 = np.zeros_like(W1)
    db1 = np.zeros_like(b1)
    dW2 = np.zeros_like(W2)
    db2 = np.zeros_like(b2)
    loss = 0.0
    scale = 1.0 / (S * k)

    for s in range(S):
        d0, d1 = disj_ptr[s], disj_ptr[s + 1]
        nd = d1 - d0
        progs = []
        qvecs = np.empty((nd, d))
        for j in range(nd):
            base, end = instr_ptr[d0 + j], instr_ptr[d0 + j + 1]
            rows = instr[base:end]
            slots = np.empty((len(rows), d))
            msave = np.zeros((len(rows), d))
            presave = np.zeros((len(rows), d))
            for i, row in enumerate(rows):
                op = row[0]
                if op == OP_ANCHOR:
                    slots[i] = E[row[1]]
                elif op == OP_PROJECT:
                    slots[i] = slots[row[1]] + R[row[2]]
                else:
                    arity = row[1]
                    m = slots[row[2 : 2 + arity]].mean(axis=0)
                    pre = W1 @ m + b1
                    msave[i] = m
                    presave[i] = pre
                    slots[i] = W2 @ np.maximum(pre, 0.0) + b2 + m
            progs.append((rows, slots, msave, presave))
            qvecs[j] = slots[len(rows) - 1]

        def best(e):
            diff = qvecs - E[e]
            dist = np.sqrt((diff * diff).sum(axis=1))
            j = int(np.argmax(-dist))
            return j, -dist[j], dist[j]

        jp, s_pos, dist_p = best(pos[s])
        dq = np.zeros((nd, d))
        for t in range(k):
            jn, s_neg, dist_n = best(negs[s, t])
            term = gamma - s_pos + s_neg
            if term > 0.0:
                loss += term * scale
                if dist_p > 1e-12:
                    u = (qvecs[jp] - E[pos[s]]) / dist_p
                    dq[jp] += scale * u
                    dE[pos[s]] -= scale * u
                if dist_n > 1e-12:
                    u = (qvecs[jn] - E[negs[s, t]]) / dist_n
                    dq[jn] -= scale * u
                    dE[negs[s, t]] += scale * u

        for j in range(nd):
            if not dq[j].any():
                continue
            rows, slots, msave, presave = progs[j]
            gslot = np.zeros_like(slots)
            gslot[len(rows) - 1] = dq[j]
            for i in range(len(rows) - 1, -1, -1):
                g = gslot[i]
                if not g.any():
                    continue
                row = rows[i]
                op = row[0]
                if op == OP_ANCHOR:
                    dE[row[1]] += g
                elif op == OP_PROJECT:
                    gslot[row[1]] += g
                    dR[row[2]] += g
                else:
                    arity = row[1]
                    m = msave[i]
                    pre = presave[i]
                    h = np.maximum(pre, 0.0)
                    dW2 += np.outer(g, h)
                    db2 += g
                    dpre = (W2.T @ g) * (pre > 0.0)
                    dW1 += np.outer(dpre, m)
                    db1 += dpre
                    dm = W1.T @ dpre + g
                    share = dm / arity
                    for a in range(arity):
                        gslot[row[2 + a]] += share
    return loss, dE, dR, dW1, db1, dW2, db2


if _HAVE_NUMBA:

    @njit(cache=True)
    def _loss_grad_numba(instr, instr_ptr, disj_ptr, pos, negs, E, R, W1, b1, W2, b2, gamma):  # pragma: no cover - numba
        d = E.shape[1]
        S = pos.shape[0]
        k = negs.shape[1]
        dE = np.zeros_like(E)
        dR = np.zeros_like(R)
        dW1 = np.zeros_like(W1)
        db1 = np.zeros_like(b1)
        dW2 = np.zeros_like(W2)
        db2 = np.zeros_like(b2)
        loss = 0.0
        scale = 1.0 / (S * k)

        max_len = 0
        for j in range(len(instr_ptr) - 1):
            ln = instr_ptr[j + 1] - instr_ptr[j]
            if ln > max_len:
                max_len = ln
        max_nd = 0
        for s in range(S):
            nd = disj_ptr[s + 1] - disj_ptr[s]
            if nd > max_nd:
                max_nd = nd

        slots = np.zeros((max_nd, max_len, d))
        msave = np.zeros((max_nd, max_len, d))
        presave = np.zeros((max_nd, max_len, d))
        qvecs = np.zeros((max_nd, d))
        gslot = np.zeros((max_len, d))
        dq = np.zeros((max_nd, d))
        dpre = np.zeros(d)

        for s in range(S):
            d0 = disj_ptr[s]
            nd = disj_ptr[s + 1] - d0
            for j in range(nd):
                base = instr_ptr[d0 + j]
                n_rows = instr_ptr[d0 + j + 1] - base
                for i in range(n_rows):
                    op = instr[base + i, 0]
                    if op == OP_ANCHOR:
                        ent = instr[base + i, 1]
                        for c in range(d):
                            slots[j, i, c] = E[ent, c]
                    elif op == OP_PROJECT:
                        src = instr[base + i, 1]
                        rel = instr[base + i, 2]
                        for c in range(d):
                            slots[j, i, c] = slots[j, src, c] + R[rel, c]
                    else:
                        arity = instr[base + i, 1]
                        for c in range(d):
                            acc = 0.0
                            for a in range(arity):
                                acc += slots[j, instr[base + i, 2 + a], c]
                            msave[j, i, c] = acc / arity
                        for rr in range(d):
                            acc = b1[rr]
                            for c in range(d):
                                acc += W1[rr, c] * msave[j, i, c]
                            presave[j, i, rr] = acc
                        for rr in range(d):
                            acc = b2[rr] + msave[j, i, rr]
                            for c in range(d):
                                pc = presave[j, i, c]
                                if pc > 0.0:
                                    acc += W2[rr, c] * pc
                            slots[j, i, rr] = acc
                for c in range(d):
                    qvecs[j, c] = slots[j, n_rows - 1, c]

            # positive score: max over disjuncts of -distance
            jp = 0
            s_pos = -1e300
            dist_p = 0.0
            for j in range(nd):
                acc = 0.0
                for c in range(d):
                    diff = qvecs[j, c] - E[pos[s], c]
                    acc += diff * diff
                dist = np.sqrt(acc)
                if -dist > s_pos:
                    s_pos = -dist
                    jp = j
                    dist_p = dist

            for j in range(nd):
                for c in range(d):
                    dq[j, c] = 0.0

            for t in range(k):
                jn = 0
                s_neg = -1e300
                dist_n = 0.0
                for j in range(nd):
                    acc = 0.0
                    for c in range(d):
                        diff = qvecs[j, c] - E[negs[s, t], c]
                        acc += diff * diff
                    dist = np.sqrt(acc)
                    if -dist > s_neg:
                        s_neg = -dist
                        jn = j
                        dist_n = dist
                term = gamma - s_pos + s_neg
                if term > 0.0:
                    loss += term * scale
                    if dist_p > 1e-12:
                        for c in range(d):
                            u = (qvecs[jp, c] - E[pos[s], c]) / dist_p
                            dq[jp, c] += scale * u
                            dE[pos[s], c] -= scale * u
                    if dist_n > 1e-12:
                        for c in range(d):
                            u = (qvecs[jn, c] - E[negs[s, t], c]) / dist_n
                            dq[jn, c] -= scale * u
                            dE[negs[s, t], c] += scale * u

            for j in range(nd):
                nonzero = False
                for c in range(d):
                    if dq[j, c] != 0.0:
                        nonzero = True
                        break
                if not nonzero:
                    continue
                base = instr_ptr[d0 + j]
                n_rows = instr_ptr[d0 + j + 1] - base
                for i in range(n_rows):
                    for c in range(d):
                        gslot[i, c] = 0.0
                for c in range(d):
                    gslot[n_rows - 1, c] = dq[j, c]
                for i in range(n_rows - 1, -1, -1):
                    nonzero = False
                    for c in range(d):
                        if gslot[i, c] != 0.0:
                            nonzero = True
                            break
                    if not nonzero:
                        continue
                    op = instr[base + i, 0]
                    if op == OP_ANCHOR:
                        ent = instr[base + i, 1]
                        for c in range(d):
                            dE[ent, c] += gslot[i, c]
                    elif op == OP_PROJECT:
                        src = instr[base + i, 1]
                        rel = instr[base + i, 2]
                        for c in range(d):
                            gslot[src, c] += gslot[i, c]
                            dR[rel, c] += gslot[i, c]
                    else:
                        # out = W2 @ relu(pre) + b2 + m
                        arity = instr[base + i, 1]
                        for rr in range(d):
                            g = gslot[i, rr]
                            if g == 0.0:
                                continue
                            db2[rr] += g
                            for c in range(d):
                                pc = presave[j, i, c]
                                if pc > 0.0:
                                    dW2[rr, c] += g * pc
                        for c in range(d):
                            if presave[j, i, c] > 0.0:
                                acc = 0.0
                                for rr in range(d):
                                    acc += W2[rr, c] * gslot[i, rr]
                                dpre[c] = acc
                                db1[c] += acc
                                for cc in range(d):
                                    dW1[c, cc] += acc * msave[j, i, cc]
                            else:
                                dpre[c] = 0.0
                        for c in range(d):
                            acc = gslot[i, c]
                            for rr in range(d):
                                acc += W1[rr, c] * dpre[rr]
                            share = acc / arity
                            for a in range(arity):
                                gslot[instr[base + i, 2 + a], c] += share
        return loss, dE, dR, dW1, db1, dW2, db2


def batch_loss_grad(batch: CompiledBatch, E, R, W1, b1, W2, b2, gamma: float, backend: str | None = None):
    """Loss and full parameter gradients for one compiled batch.

    Returns (loss, dE, dR, dW1, db1, dW2, db2). ``backend`` overrides the
    module default ('numba' or 'numpy'); requesting numba without it
    installed raises NumericError.
    """
    if batch.n_samples == 0:
        raise NumericError("empty batch")
    args = (
        batch.instr,
        batch.instr_ptr,
        batch.disj_ptr,
        batch.pos,
        batch.negs,
        np.ascontiguousarray(E),
        np.ascontiguousarray(R),
        np.ascontiguousarray(W1),
        np.ascontiguousarray(b1),
        np.ascontiguousarray(W2),
        np.ascontiguousarray(b2),
        float(gamma),
    )
    chosen = backend or backend_name()
    if chosen == "numba":
        if not _HAVE_NUMBA:
            raise NumericError("numba backend requested but numba is unavailable")
        out = _loss_grad_numba(*args)
    elif chosen == "numpy":
        out = _loss_grad_numpy(*args)
    else:
        raise NumericError(f"unknown backend: {chosen!r}")
    if not np.isfinite(out[0]):
        raise NumericError(f"non-finite loss: {out[0]}")
    return out
