"""Triple ingestion, relation-wise federated partitioning and shared-entity bookkeeping."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class KGFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TripleStore:
    triples: list[tuple[str, str, str]]
    entities: list[str]
    relations: list[str]

    @property
    def entity_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.entities)}

    @property
    def relation_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.relations)}

    @classmethod
    def from_triples(cls, triples) -> "TripleStore":
        triples = [tuple(t) for t in triples]
        entities: dict[str, None] = {}
        relations: dict[str, None] = {}
        for h, r, t in triples:
            entities.setdefault(h)
            relations.setdefault(r)
            entities.setdefault(t)
        return cls(triples, list(entities), list(relations))


@dataclass
class ClientShard:
    """One client's view of the federation.

    Triples are int arrays of shape (n, 3) holding *local* indices
    (head, relation, tail).  ``local_to_global`` maps local entity index to
    the global entity index; ``shared_entities`` lists the local indices of
    entities owned by at least one other client, ascending.
    """

    client_id: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    local_to_global: np.ndarray
    relation_names: list[str]
    shared_entities: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_entities(self) -> int:
        return len(self.local_to_global)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def num_shared(self) -> int:
        return len(self.shared_entities)

    @property
    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    @property
    def shared_global(self) -> np.ndarray:
        return self.local_to_global[self.shared_entities]


@dataclass
class FederationSpec:
    clients: list[ClientShard]
    existence: dict[int, list[int]]
    entity_names: list[str]

    @property
    def num_global_entities(self) -> int:
        return len(self.entity_names)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for shard in self.clients:
            for arr in (shard.train, shard.valid, shard.test, shard.local_to_global):
                h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
            h.update("\x1f".join(shard.relation_names).encode())
        h.update("\x1f".join(self.entity_names).encode())
        return h.hexdigest()[:16]


def load_triples(path) -> TripleStore:
    path = Path(path)
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise KGFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            triples.append((parts[0], parts[1], parts[2]))
    if not triples:
        raise KGFormatError(f"{path}: no triples")
    return TripleStore.from_triples(triples)


def write_triples(path, triples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def _relation_groups(num_relations: int, num_clients: int, seed: int) -> list[list[int]]:
    order = np.random.default_rng(seed).permutation(num_relations)
    groups: list[list[int]] = [[] for _ in range(num_clients)]
    for i, rel in enumerate(order):
        groups[i % num_clients].append(int(rel))
    return [sorted(g) for g in groups]


def partition_by_relation(store: TripleStore, num_clients: int, seed: int) -> FederationSpec:
    """Deal relations round-robin (after a seeded shuffle) and hand each client its triples.

    Shards come back unsplit: every triple sits in ``train`` until
    :func:`split_shard` runs.  Shared entities are already computed.
    """
    if num_clients < 2:
        raise ValueError("num_clients must be >= 2")
    if num_clients > len(store.relations):
        raise ValueError(f"cannot deal {len(store.relations)} relations to {num_clients} clients")

    ent_idx = store.entity_index
    rel_idx = store.relation_index
    groups = _relation_groups(len(store.relations), num_clients, seed)
    owner = np.empty(len(store.relations), dtype=np.int64)
    for c, g in enumerate(groups):
        owner[g] = c

    per_client: list[list[tuple[int, int, int]]] = [[] for _ in range(num_clients)]
    for h, r, t in store.triples:
        ri = rel_idx[r]
        per_client[owner[ri]].append((ent_idx[h], ri, ent_idx[t]))

    clients = []
    for c in range(num_clients):
        rows = per_client[c]
        local_ent: dict[int, int] = {}
        for h, _, t in rows:
            local_ent.setdefault(h, len(local_ent))
            local_ent.setdefault(t, len(local_ent))
        local_rel = {g: i for i, g in enumerate(groups[c])}
        arr = np.array(
            [(local_ent[h], local_rel[r], local_ent[t]) for h, r, t in rows], dtype=np.int64
        ).reshape(-1, 3)
        clients.append(
            ClientShard(
                client_id=c,
                train=arr,
                valid=np.zeros((0, 3), dtype=np.int64),
                test=np.zeros((0, 3), dtype=np.int64),
                local_to_global=np.fromiter(local_ent, dtype=np.int64, count=len(local_ent)),
                relation_names=[store.relations[g] for g in groups[c]],
            )
        )
    spec = FederationSpec(clients, build_existence(clients), list(store.entities))
    return compute_shared_entities(spec)


def build_existence(clients) -> dict[int, list[int]]:
    existence: dict[int, list[int]] = {}
    for shard in sorted(clients, key=lambda s: s.client_id):
        for g in shard.local_to_global.tolist():
            existence.setdefault(g, []).append(shard.client_id)
    return dict(sorted(existence.items()))


def split_shard(shard: ClientShard, seed: int, ratios=(0.8, 0.1, 0.1)) -> ClientShard:
    """Shuffle all of the shard's triples and cut them into train/valid/test.

    Duplicate triples are dropped first; remainders from flooring go to test.
    """
    triples = shard.all_triples
    _, first = np.unique(triples, axis=0, return_index=True)
    triples = triples[np.sort(first)]
    n = len(triples)
    if n < 10:
        raise ValueError(f"client {shard.client_id} has {n} triples; need at least 10 to split")
    order = np.random.default_rng(seed).permutation(n)
    triples = triples[order]
    n_train = int(np.floor(round(ratios[0] * n, 9)))
    n_valid = int(np.floor(round(ratios[1] * n, 9)))
    return replace(
        shard,
        train=triples[:n_train],
        valid=triples[n_train : n_train + n_valid],
        test=triples[n_train + n_valid :],
    )


def split_federation(spec: FederationSpec, seed: int, ratios=(0.8, 0.1, 0.1)) -> FederationSpec:
    clients = [split_shard(s, seed + 7919 * s.client_id, ratios) for s in spec.clients]
    return replace(spec, clients=clients)


def compute_shared_entities(spec: FederationSpec) -> FederationSpec:
    clients = []
    for shard in spec.clients:
        owners = np.array([len(spec.existence[g]) for g in shard.local_to_global.tolist()], dtype=np.int64)
        shared = np.flatnonzero(owners >= 2).astype(np.int64)
        clients.append(replace(shard, shared_entities=shared))
    return replace(spec, clients=clients)


def save_federation(spec: FederationSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for shard in spec.clients:
        d = out / f"client_{shard.client_id}"
        d.mkdir(exist_ok=True)
        names = [spec.entity_names[g] for g in shard.local_to_global.tolist()]
        for split in ("train", "valid", "test"):
            arr = getattr(shard, split)
            write_triples(
                d / f"{split}.tsv",
                ((names[h], shard.relation_names[r], names[t]) for h, r, t in arr.tolist()),
            )
        with open(d / "entities.tsv", "w", encoding="utf-8") as fh:
            for g, name in zip(shard.local_to_global.tolist(), names):
                fh.write(f"{g}\t{name}\n")


def load_federation(in_dir) -> FederationSpec:
    """Read a directory written by :func:`save_federation`."""
    root = Path(in_dir)
    dirs = sorted(
        (p for p in root.iterdir() if p.is_dir() and p.name.startswith("client_")),
        key=lambda p: int(p.name.split("_", 1)[1]),
    )
    if len(dirs) < 2:
        raise KGFormatError(f"{root}: expected at least two client_* directories")
    global_names: dict[int, str] = {}
    clients = []
    for d in dirs:
        cid = int(d.name.split("_", 1)[1])
        local_names: list[str] = []
        l2g: list[int] = []
        with open(d / "entities.tsv", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise KGFormatError(f"{d / 'entities.tsv'}:{lineno}: expected global_id<TAB>name")
                g, name = int(parts[0]), parts[1]
                if global_names.setdefault(g, name) != name:
                    raise KGFormatError(f"global id {g} names both {global_names[g]!r} and {name!r}")
                l2g.append(g)
                local_names.append(name)
        ent = {name: i for i, name in enumerate(local_names)}
        rel: dict[str, int] = {}
        splits = {}
        for split in ("train", "valid", "test"):
            path = d / f"{split}.tsv"
            rows = []
            if path.exists() and os.path.getsize(path) > 0:
                for h, r, t in load_triples(path).triples:
                    rows.append((ent[h], rel.setdefault(r, len(rel)), ent[t]))
            splits[split] = np.array(rows, dtype=np.int64).reshape(-1, 3)
        clients.append(
            ClientShard(cid, splits["train"], splits["valid"], splits["test"],
                        np.array(l2g, dtype=np.int64), list(rel))
        )
    n_global = max(global_names) + 1
    if sorted(global_names) != list(range(n_global)):
        raise KGFormatError("global entity ids are not dense")
    spec = FederationSpec(clients, build_existence(clients), [global_names[g] for g in range(n_global)])
    return compute_shared_entities(spec)
