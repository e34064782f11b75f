"""Score functions for TransE, RotatE and ComplEx with hand-written backward passes.

Entity rows for the complex-space methods are laid out real-half then
imaginary-half, so an entity of dimension ``D`` occupies ``2D`` columns.
RotatE relations are stored as ``D`` phase angles; ComplEx relations as a
``2D`` real||imag vector.  All functions broadcast over leading axes.
"""

from __future__ import annotations

import numpy as np

METHODS = ("transe", "rotate", "complex")


def entity_width(method: str, dim: int) -> int:
    return dim if method == "transe" else 2 * dim


def relation_width(method: str, dim: int) -> int:
    return 2 * dim if method == "complex" else dim


def _check(method):
    if method not in METHODS:
        raise ValueError(f"unknown KGE method {method!r}; expected one of {METHODS}")


def _halves(x):
    d = x.shape[-1] // 2
    return x[..., :d], x[..., d:]


def _rotate_parts(h, phase, t):
    hre, him = _halves(h)
    tre, tim = _halves(t)
    c, s = np.cos(phase), np.sin(phase)
    rot_re = hre * c - him * s
    rot_im = hre * s + him * c
    return hre, him, c, s, rot_re, rot_im, rot_re - tre, rot_im - tim


def score(method: str, h, r, t) -> np.ndarray:
    _check(method)
    h, r, t = np.asarray(h, float), np.asarray(r, float), np.asarray(t, float)
    if method == "transe":
        d = h + r - t
        return -np.sqrt(np.sum(d * d, axis=-1))
    if method == "rotate":
        *_, dre, dim = _rotate_parts(h, r, t)
        return -np.sqrt(np.sum(dre * dre, axis=-1) + np.sum(dim * dim, axis=-1))
    hre, him = _halves(h)
    rre, rim = _halves(r)
    tre, tim = _halves(t)
    return np.sum(hre * rre * tre + him * rre * tim + hre * rim * tim - him * rim * tre, axis=-1)


def checked_score(method: str, h, r, t) -> np.ndarray:
    """:func:`score` that refuses non-finite inputs."""
    for name, x in (("head", h), ("relation", r), ("tail", t)):
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite {name} embedding")
    return score(method, h, r, t)


def rotation(phase) -> np.ndarray:
    """Unit-modulus complex relation vector used by RotatE scoring."""
    phase = np.asarray(phase, float)
    return np.cos(phase) + 1j * np.sin(phase)


def score_backward(method: str, h, r, t, upstream, diff=None):
    """Gradients of ``sum(upstream * score(h, r, t))`` w.r.t. h, r and t.

    Returned arrays have the broadcast shape of the inputs; callers reduce
    over broadcast axes themselves.  ``diff`` reuses a precomputed TransE
    residual ``h + r - t``.
    """
    _check(method)
    g = np.asarray(upstream, float)[..., None]
    if method == "transe":
        d = h + r - t if diff is None else diff
        norm = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
        unit = d / np.maximum(norm, 1e-30)
        gh = -g * unit
        return gh, gh, -gh
    if method == "rotate":
        hre, him, c, s, rot_re, rot_im, dre, dim = _rotate_parts(h, r, t)
        norm = np.sqrt(np.sum(dre * dre, axis=-1, keepdims=True) + np.sum(dim * dim, axis=-1, keepdims=True))
        inv = -g / np.maximum(norm, 1e-30)
        gre, gim = inv * dre, inv * dim
        gh = np.concatenate([gre * c + gim * s, -gre * s + gim * c], axis=-1)
        gr = -gre * rot_im + gim * rot_re
        gt = np.concatenate([-gre, -gim], axis=-1)
        return gh, gr, gt
    hre, him = _halves(h)
    rre, rim = _halves(r)
    tre, tim = _halves(t)
    gh = g * np.concatenate([rre * tre + rim * tim, rre * tim - rim * tre], axis=-1)
    gr = g * np.concatenate([hre * tre + him * tim, hre * tim - him * tre], axis=-1)
    gt = g * np.concatenate([hre * rre - him * rim, him * rre + hre * rim], axis=-1)
    return gh, gr, gt
