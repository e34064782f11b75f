"""Full-exchange rounds and the compressed FedE variants built on them."""

from __future__ import annotations

import math

import numpy as np

from ..ledger import CommLedger, record_message, theoretical_ratio
from ..protocol import UploadMessage, apply_sync, build_upload, full_sync_exchange
from .svd import svd_compress, svd_restore, transmitted_params


def fede_round(tables: dict, spec, t: int, ledger: CommLedger | None = None) -> dict:
    """Replace every shared row on every owner by the owner mean (full upload, full download)."""
    uploads = [build_upload(cid, t, tables[cid], 1.0, None, force_sync=True) for cid in sorted(tables)]
    downloads = full_sync_exchange(uploads, spec, t)
    for up in uploads:
        if ledger is not None:
            record_message(ledger, up)
    for cid in sorted(downloads):
        if ledger is not None:
            record_message(ledger, downloads[cid])
        apply_sync(tables[cid], downloads[cid])
    return tables


def fedepl_dimension(p: float, s: int, dim: int) -> int:
    """Dimension at which full exchange costs what sparsified exchange costs per cycle (rounded up)."""
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1) for a dimension reduction")
    if s < 1 or dim < 2:
        raise ValueError("need s >= 1 and dim >= 2")
    # guard the ceil against binary noise just above an integer
    return math.ceil(round(dim * theoretical_ratio(p, s, dim), 9))


def svd_exchange(tables: dict, starts: dict, spec, t: int, m: int, n: int, r: int,
                 ledger: CommLedger | None = None) -> dict:
    """Exchange rank-r factors of each shared entity's round update.

    Each client compresses ``entity - start`` per shared entity; the server
    restores them, averages over owners, compresses the mean and returns it;
    owners set ``entity = start + restored_mean``.
    """
    by_id = {s.client_id: s for s in spec.clients}
    per_entity = transmitted_params(m, n, r)
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for cid in sorted(tables):
        tbl, shard = tables[cid], by_id[cid]
        update = tbl.entity[tbl.shared] - starts[cid][tbl.shared]
        restored = svd_restore(svd_compress(update, m, n, r), m, n) if len(update) else update
        if ledger is not None:
            ledger.add(t, cid, "up", per_entity * len(update))
        for g, row in zip(shard.shared_global.tolist(), restored):
            if g in sums:
                sums[g] = sums[g] + row
                counts[g] += 1
            else:
                sums[g] = np.zeros(row.shape) + row
                counts[g] = 1
    gids = sorted(sums)
    if gids:
        mean = np.array([sums[g] / counts[g] for g in gids])
        back = dict(zip(gids, svd_restore(svd_compress(mean, m, n, r), m, n)))
    else:
        back = {}
    for cid in sorted(tables):
        tbl, shard = tables[cid], by_id[cid]
        gl = shard.shared_global.tolist()
        if ledger is not None:
            ledger.add(t, cid, "down", per_entity * len(gl))
        if gl:
            tbl.entity[tbl.shared] = starts[cid][tbl.shared] + np.array([back[g] for g in gl])
            tbl.history[:] = tbl.entity[tbl.shared]
    return tables
