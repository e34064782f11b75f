"""Low-rank compression of per-entity embedding updates (FedE-SVD / FedE-SVD+)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..kge.model import AdamState, adam_rows, batch_scores, iter_batches, loss_from_scores, \
    sample_negatives, scatter_gradients

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60


@dataclass
class SvdFactors:
    U: np.ndarray  # (..., m, r)
    s: np.ndarray  # (..., r) descending
    V: np.ndarray  # (..., n, r)

    @property
    def param_count(self) -> int:
        m, r = self.U.shape[-2:]
        n = self.V.shape[-2]
        return m * r + r + n * r


def transmitted_params(m: int, n: int, r: int) -> int:
    return m * r + r + n * r


def _complete_columns(U, s):
    """Replace columns of U belonging to (numerically) zero singular values with an orthonormal completion."""
    m, n = U.shape[-2:]
    scale = np.maximum(s[..., :1], np.finfo(float).tiny)
    dead = s <= 1e-13 * scale
    dead |= (s[..., :1] == 0)
    if not dead.any():
        return U
    basis = np.broadcast_to(np.eye(m, n), U.shape)
    seed = np.where(dead[..., None, :], basis, U)
    Q, R = np.linalg.qr(seed)
    sign = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    sign[sign == 0] = 1.0
    Q = Q * sign[..., None, :]
    return np.where(dead[..., None, :], Q, U)


def jacobi_svd(A):
    """Thin SVD of a batch of tall matrices by one-sided (Hestenes) Jacobi rotations.

    ``A`` has shape (..., m, n) with m >= n.  Returns U (..., m, n), s (..., n)
    descending and V (..., n, n) with A = U diag(s) V^T.
    """
    A = np.array(A, dtype=float)
    squeeze = A.ndim == 2
    if squeeze:
        A = A[None]
    *batch, m, n = A.shape
    if m < n:
        raise ValueError(f"jacobi_svd expects m >= n, got {m}x{n}")
    W = A.reshape(-1, m, n).copy()
    V = np.broadcast_to(np.eye(n), (W.shape[0], n, n)).copy()
    for _ in range(MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi, wj = W[:, :, i], W[:, :, j]
                alpha = np.einsum("bk,bk->b", wi, wi)
                beta = np.einsum("bk,bk->b", wj, wj)
                gamma = np.einsum("bk,bk->b", wi, wj)
                act = np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha * beta)
                if not act.any():
                    continue
                rotated = True
                g = np.where(act, gamma, 1.0)
                # an infinite zeta (denormal gamma) gives t = 0, i.e. no rotation
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
                t = np.where(zeta == 0, 1.0, t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(act, c, 1.0)[:, None]
                s = np.where(act, s, 0.0)[:, None]
                W[:, :, i], W[:, :, j] = c * wi - s * wj, s * wi + c * wj
                vi, vj = V[:, :, i].copy(), V[:, :, j].copy()
                V[:, :, i], V[:, :, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    sv = np.linalg.norm(W, axis=1)
    order = np.argsort(-sv, axis=1, kind="stable")
    sv = np.take_along_axis(sv, order, axis=1)
    W = np.take_along_axis(W, order[:, None, :], axis=2)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    U = np.divide(W, sv[:, None, :], out=np.zeros_like(W), where=sv[:, None, :] > 0)
    U = _complete_columns(U, sv)
    U = U.reshape(*batch, m, n)
    sv = sv.reshape(*batch, n)
    V = V.reshape(*batch, n, n)
    if squeeze:
        return U[0], sv[0], V[0]
    return U, sv, V


def _check_shape(length, m, n):
    if m * n != length:
        raise ValueError(f"cannot reshape length {length} into {m}x{n}")


def svd_compress(update, m: int, n: int, r: int) -> SvdFactors:
    """Reshape row-major to m x n and keep the top ``r`` singular triples.

    Accepts a single vector (D_e,) or a batch (B, D_e).
    """
    update = np.asarray(update, dtype=float)
    _check_shape(update.shape[-1], m, n)
    if not 1 <= r <= n:
        raise ValueError(f"rank {r} must be in [1, {n}]")
    U, s, V = jacobi_svd(update.reshape(*update.shape[:-1], m, n))
    return SvdFactors(U[..., :r], s[..., :r], V[..., :r])


def svd_restore(factors: SvdFactors, m: int, n: int) -> np.ndarray:
    U, s, V = factors.U, factors.s, factors.V
    if U.shape[-2] != m or V.shape[-2] != n or U.shape[-1] != s.shape[-1] or V.shape[-1] != s.shape[-1]:
        raise ValueError("factor shapes are inconsistent with the requested m x n")
    mat = (U * s[..., None, :]) @ np.swapaxes(V, -1, -2)
    return mat.reshape(*mat.shape[:-2], m * n)


def orthogonality_regularizer(U, V, alpha: float) -> float:
    """alpha / n^2 * (||U^T U - I||_F^2 + ||V^T V - I||_F^2), summed over a leading batch axis if present."""
    n = U.shape[-1]
    eye = np.eye(n)
    gu = np.swapaxes(U, -1, -2) @ U - eye
    gv = np.swapaxes(V, -1, -2) @ V - np.eye(V.shape[-1])
    return float(alpha / n**2 * (np.sum(gu * gu) + np.sum(gv * gv)))


def orthogonality_regularizer_grad(U, V, alpha: float):
    n = U.shape[-1]
    gu = np.swapaxes(U, -1, -2) @ U - np.eye(n)
    gv = np.swapaxes(V, -1, -2) @ V - np.eye(V.shape[-1])
    k = 4.0 * alpha / n**2
    return k * (U @ gu), k * (V @ gv)


def svdplus_final_epoch(shard, table, state: AdamState, start: np.ndarray, hp, rng,
                        m: int, n: int, alpha: float = 0.05) -> list[float]:
    """One epoch training each entity's update through its SVD factors.

    The update accumulated so far (``table.entity - start``) is factored as
    U diag(s) V^T with full rank n; the epoch then optimises U, s, V (plus
    relations) under the KGE loss and the orthogonality penalty, averaged
    over the entities a batch touches.  On return ``table.entity`` holds
    ``start`` plus the trained low-rank update.
    """
    ent = table.entity
    n_ent, width = ent.shape
    _check_shape(width, m, n)
    U, s, V = jacobi_svd((ent - start).reshape(n_ent, m, n))
    Uf, Vf = U.reshape(n_ent, m * n), V.reshape(n_ent, n * n)
    moments = {k: (np.zeros_like(x), np.zeros_like(x)) for k, x in (("U", Uf), ("s", s), ("V", Vf))}
    losses = []
    step = 0
    for batch in iter_batches(shard.train, hp.batch_size, rng):
        neg_h, neg_t = sample_negatives(batch, shard.num_entities, hp.negatives, rng)
        touched = np.unique(np.concatenate([batch[:, 0], batch[:, 2], neg_h.ravel(), neg_t.ravel()]))
        Ut, st, Vt = Uf[touched].reshape(-1, m, n), s[touched], Vf[touched].reshape(-1, n, n)
        ent[touched] = start[touched] + ((Ut * st[:, None, :]) @ np.swapaxes(Vt, 1, 2)).reshape(-1, width)
        emb, pos, neg = batch_scores(ent, table.relation, table.method, batch, neg_h, neg_t)
        loss, d_pos, d_neg, _ = loss_from_scores(pos, neg, hp)
        grads = scatter_gradients(ent.shape, table.relation.shape, table.method, emb,
                                  batch, neg_h, neg_t, d_pos, d_neg)
        reg = orthogonality_regularizer(Ut, Vt, alpha) / len(touched)
        losses.append(loss + reg)
        # grads.entity_idx is exactly `touched` (both are sorted uniques of the same rows)
        G = grads.entity_grad.reshape(-1, m, n)
        gU = (G @ Vt) * st[:, None, :]
        gs = np.einsum("bmi,bmj,bji->bi", Ut, G, Vt)
        gV = (np.swapaxes(G, 1, 2) @ Ut) * st[:, None, :]
        rU, rV = orthogonality_regularizer_grad(Ut, Vt, alpha)
        gU += rU / len(touched)
        gV += rV / len(touched)
        step += 1
        state.step += 1
        for key, param, g in (("U", Uf, gU.reshape(len(touched), -1)), ("s", s, gs),
                              ("V", Vf, gV.reshape(len(touched), -1))):
            adam_rows(param, *moments[key], touched, g, step, hp.learning_rate)
        adam_rows(table.relation, state.m_relation, state.v_relation, grads.relation_idx,
                  grads.relation_grad, state.step, hp.learning_rate)
    recon = (Uf.reshape(n_ent, m, n) * s[:, None, :]) @ np.swapaxes(Vf.reshape(n_ent, n, n), 1, 2)
    table.entity[:] = start + recon.reshape(n_ent, width)
    return losses
