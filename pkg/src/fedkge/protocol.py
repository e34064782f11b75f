"""Entity-wise Top-K sparsified exchange between clients and the server.

Clients score how far each shared embedding has drifted from the copy
last sent upstream and upload the K most changed rows.  The server sums
foreign uploads per entity for each client separately, ranks them by
how many clients contributed and sends back the top K together with
those counts.  Every ``s + 1`` rounds both sides fall back to a full
exchange that re-synchronises all owners.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class UploadMessage:
    client_id: int
    round: int
    sign: np.ndarray  # bool, length N_c
    payload: np.ndarray  # (popcount(sign), D_e), ascending shared-entity order
    sync: bool = False

    def __post_init__(self):
        if self.payload.shape[0] != int(self.sign.sum()):
            raise ValueError("payload rows must equal popcount of the sign vector")


@dataclass(frozen=True)
class DownloadMessage:
    client_id: int
    round: int
    sign: np.ndarray
    priority: np.ndarray  # int, aligned with payload rows
    payload: np.ndarray
    sync: bool = False

    def __post_init__(self):
        k = int(self.sign.sum())
        if self.payload.shape[0] != k or len(self.priority) != k:
            raise ValueError("payload rows, priority entries and popcount of the sign vector must agree")
        if k and int(np.min(self.priority)) < 1:
            raise ValueError("priority weights must be >= 1")


@dataclass(frozen=True)
class SyncSchedule:
    interval: int = 4

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("sync interval must be >= 1")

    @property
    def cycle(self) -> int:
        return self.interval + 1


def is_sync_round(t: int, schedule: SyncSchedule) -> bool:
    if t < 0:
        raise ValueError("round index must be >= 0")
    return t % schedule.cycle == 0


def topk_size(n_shared: int, p: float) -> int:
    if not 0 < p <= 1:
        raise ValueError(f"sparsity ratio must be in (0, 1], got {p}")
    if n_shared == 0:
        return 0
    return max(1, int(np.floor(n_shared * p)))


def compute_change_scores(current: np.ndarray, history: np.ndarray) -> np.ndarray:
    """One minus the rowwise cosine similarity; zero-norm rows count as unchanged."""
    if current.shape != history.shape:
        raise ValueError(f"shape mismatch: {current.shape} vs {history.shape}")
    dot = np.sum(current * history, axis=1)
    norms = np.linalg.norm(current, axis=1) * np.linalg.norm(history, axis=1)
    cos = np.divide(dot, norms, out=np.ones_like(dot), where=norms > 0)
    return 1.0 - np.clip(cos, -1.0, 1.0)


def select_topk_upload(change: np.ndarray, p: float) -> tuple[np.ndarray, int]:
    """Indices of the K largest change scores, ties to the smaller index, returned ascending."""
    k = topk_size(len(change), p)
    if k == 0:
        return np.zeros(0, dtype=np.int64), 0
    order = np.argsort(-np.asarray(change), kind="stable")
    return np.sort(order[:k]), k


def build_upload(client_id: int, t: int, table, p: float, schedule: SyncSchedule,
                 force_sync: bool | None = None) -> UploadMessage:
    """Pick the rows to send and refresh the history copy for every row sent."""
    sync = is_sync_round(t, schedule) if force_sync is None else force_sync
    current = table.shared_rows()
    n = len(current)
    if sync:
        idx = np.arange(n)
    else:
        idx, _ = select_topk_upload(compute_change_scores(current, table.history), p)
    sign = np.zeros(n, dtype=bool)
    sign[idx] = True
    payload = current[idx].copy()
    table.history[idx] = payload
    return UploadMessage(client_id, t, sign, payload, sync=sync)


def _check_uploads(uploads, clients):
    ids = [u.client_id for u in uploads]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate uploads from one client")
    rounds = {u.round for u in uploads}
    if len(rounds) > 1:
        raise ValueError(f"uploads from different rounds: {sorted(rounds)}")
    known = {c.client_id for c in clients}
    if not set(ids) <= known:
        raise ValueError(f"uploads from unknown clients {sorted(set(ids) - known)}")


def _upload_globals(upload, shard):
    return shard.shared_global[upload.sign]


def server_aggregate_personalized(uploads, target: int, spec, width: int | None = None):
    """Sum every foreign upload of each entity the target client owns.

    Returns ``(A, count)`` aligned with the target's shared entities; entries
    with ``count == 0`` received no foreign upload.  Sums run in ascending
    client_id order.
    """
    _check_uploads(uploads, spec.clients)
    by_id = {s.client_id: s for s in spec.clients}
    shard = by_id[target]
    n = shard.num_shared
    if width is None:
        width = next((u.payload.shape[1] for u in uploads if u.payload.size), 0)
    pos = {g: i for i, g in enumerate(shard.shared_global.tolist())}
    total = np.zeros((n, width))
    count = np.zeros(n, dtype=np.int64)
    for up in sorted(uploads, key=lambda u: u.client_id):
        if up.client_id == target or not up.payload.size:
            continue
        rows = _upload_globals(up, by_id[up.client_id]).tolist()
        mine = np.array([pos.get(g, -1) for g in rows], dtype=np.int64)
        hit = mine >= 0
        # each entity appears once per upload, so fancy-index add is safe
        total[mine[hit]] += up.payload[hit]
        count[mine[hit]] += 1
    return total, count


def server_select_topk_download(target: int, t: int, aggregate, count, p: float,
                                rng: np.random.Generator) -> DownloadMessage:
    """Send the K entities with the most foreign uploads; random choice among a tied boundary."""
    n = len(count)
    k = topk_size(n, p)
    available = np.flatnonzero(count > 0)
    if len(available) <= k:
        chosen = available
    else:
        c = count[available]
        boundary = np.sort(c)[::-1][k - 1]
        above = available[c > boundary]
        tied = available[c == boundary]
        pick = rng.choice(tied, size=k - len(above), replace=False)
        chosen = np.sort(np.concatenate([above, pick]))
    sign = np.zeros(n, dtype=bool)
    sign[chosen] = True
    return DownloadMessage(target, t, sign, count[chosen].copy(), aggregate[chosen].copy())


def client_merge(table, msg: DownloadMessage, t: int | None = None):
    """Average each flagged local row with the aggregate it received: (A + E) / (1 + P).

    The history copy is left alone.
    """
    if t is not None and msg.round != t:
        raise ValueError(f"download for round {msg.round} applied at round {t}")
    if len(msg.sign) != len(table.shared):
        raise ValueError("sign vector length does not match the client's shared entities")
    if msg.sync:
        return apply_sync(table, msg)
    if len(msg.priority) and int(np.min(msg.priority)) < 1:
        raise ValueError("priority weights must be >= 1")
    rows = table.shared[msg.sign]
    table.entity[rows] = (msg.payload + table.entity[rows]) / (1.0 + msg.priority[:, None])
    return table


def full_sync_exchange(uploads, spec, t: int | None = None):
    """Mean over all owners of every shared entity, broadcast back to each owner.

    Returns ``{client_id: DownloadMessage}``; the messages carry the owner
    counts as their priority entries and are flagged ``sync``.
    """
    _check_uploads(uploads, spec.clients)
    by_id = {s.client_id: s for s in spec.clients}
    if {u.client_id for u in uploads} != set(by_id):
        raise ValueError("a sync round needs one upload from every client")
    for u in uploads:
        if not u.sign.all():
            raise ValueError(f"client {u.client_id} sent a partial upload in a sync round")
    t = uploads[0].round if t is None else t
    width = next((u.payload.shape[1] for u in uploads if u.payload.size), 0)
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for up in sorted(uploads, key=lambda u: u.client_id):
        for g, row in zip(by_id[up.client_id].shared_global.tolist(), up.payload):
            if g in sums:
                sums[g] = sums[g] + row
                counts[g] += 1
            else:
                sums[g] = np.zeros(width) + row
                counts[g] = 1
    out = {}
    for cid, shard in sorted(by_id.items()):
        gl = shard.shared_global.tolist()
        n = len(gl)
        payload = np.array([sums[g] / counts[g] for g in gl]).reshape(n, width)
        prio = np.array([counts[g] for g in gl], dtype=np.int64)
        out[cid] = DownloadMessage(cid, t, np.ones(n, dtype=bool), prio, payload, sync=True)
    return out


def apply_sync(table, msg: DownloadMessage):
    """Overwrite local shared rows and the history copy with the synchronised values."""
    rows = table.shared[msg.sign]
    table.entity[rows] = msg.payload
    table.history[msg.sign] = msg.payload
    return table


_HEADER = struct.Struct("<IIII")


def encode_message(msg) -> bytes:
    """Binary record: u32 client_id, round, N_c, K; packed sign bits; u32 priorities; f32 rows."""
    sign = np.asarray(msg.sign, dtype=bool)
    k = int(sign.sum())
    out = [_HEADER.pack(msg.client_id, msg.round, len(sign), k), np.packbits(sign).tobytes()]
    if isinstance(msg, DownloadMessage):
        out.append(np.asarray(msg.priority, dtype="<u4").tobytes())
    out.append(np.asarray(msg.payload, dtype="<f4").tobytes())
    return b"".join(out)


def decode_message(data: bytes, direction: str):
    if direction not in ("up", "down"):
        raise ValueError("direction must be 'up' or 'down'")
    cid, rnd, n, k = _HEADER.unpack_from(data, 0)
    off = _HEADER.size
    nbytes = (n + 7) // 8
    sign = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, off), count=n).astype(bool)
    off += nbytes
    prio = None
    if direction == "down":
        prio = np.frombuffer(data, "<u4", k, off).astype(np.int64)
        off += 4 * k
    flat = np.frombuffer(data[off:], "<f4").astype(np.float64)
    width = len(flat) // k if k else 0
    payload = flat.reshape(k, width)
    if direction == "up":
        return UploadMessage(cid, rnd, sign, payload)
    return DownloadMessage(cid, rnd, sign, prio, payload)
