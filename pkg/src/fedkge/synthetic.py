"""Small synthetic knowledge graphs with translational structure.

Entities get latent positions around a handful of cluster centres and
every relation is a latent translation.  A triple's tail is drawn from the
few entities nearest to ``head + relation``, so the graph is learnable by
translational models and an entity's position is pinned down jointly by
all the relations it takes part in.  Heads follow a Zipf-like popularity
so a minority of entities co-occur across many relations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import TripleStore


@dataclass(frozen=True)
class SyntheticConfig:
    entities: int = 1200
    relations: int = 24
    triples: int = 10000
    latent_dim: int = 8
    clusters: int = 12
    cluster_spread: float = 0.35
    tail_pool: int = 3
    popularity: float = 0.6
    seed: int = 0


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> TripleStore:
    rng = np.random.default_rng(cfg.seed)
    centres = rng.normal(size=(cfg.clusters, cfg.latent_dim))
    member = rng.integers(0, cfg.clusters, size=cfg.entities)
    pos = centres[member] + cfg.cluster_spread * rng.normal(size=(cfg.entities, cfg.latent_dim))
    shift = rng.normal(size=(cfg.relations, cfg.latent_dim))

    weight = 1.0 / np.arange(1, cfg.entities + 1) ** cfg.popularity
    weight = weight[rng.permutation(cfg.entities)]
    weight /= weight.sum()

    seen: set[tuple[int, int, int]] = set()
    triples: list[tuple[str, str, str]] = []
    attempts = 0
    while len(triples) < cfg.triples:
        attempts += 1
        if attempts > 50 * cfg.triples:
            raise RuntimeError("synthetic generator could not reach the requested triple count")
        h = int(rng.choice(cfg.entities, p=weight))
        r = int(rng.integers(cfg.relations))
        target = pos[h] + shift[r]
        dist = np.sum((pos - target) ** 2, axis=1)
        dist[h] = np.inf
        pool = np.argpartition(dist, cfg.tail_pool)[: cfg.tail_pool]
        t = int(rng.choice(pool))
        if (h, r, t) in seen:
            continue
        seen.add((h, r, t))
        triples.append((f"e{h}", f"r{r}", f"e{t}"))
    return TripleStore.from_triples(triples)
