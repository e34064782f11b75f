"""Round loop, evaluation cadence, early stopping and run artifacts."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines.fede import fede_round, fedepl_dimension, svd_exchange
from .baselines.kd import DualEmbeddingTable, kd_local_train
from .baselines.svd import svdplus_final_epoch
from .config import ExperimentConfig
from .kg import load_federation, load_triples, partition_by_relation, split_federation
from .kge import AdamState, Hyperparams, evaluate_ranking, init_embeddings, local_train, weighted_metrics
from .kge.scoring import entity_width
from .ledger import CommLedger, RunLog, derive_metrics, record_message
from .protocol import (
    SyncSchedule,
    apply_sync,
    build_upload,
    client_merge,
    full_sync_exchange,
    is_sync_round,
    server_aggregate_personalized,
    server_select_topk_download,
)
from .synthetic import SyntheticConfig, generate

log = logging.getLogger(__name__)


def load_dataset(cfg: ExperimentConfig):
    """Federation for ``cfg.dataset``: a TSV file, a partition directory or ``synthetic[:k=v,...]``."""
    ds = cfg.dataset
    if ds == "synthetic" or ds.startswith("synthetic:"):
        opts = {}
        if ":" in ds:
            for item in filter(None, ds.split(":", 1)[1].split(",")):
                k, v = item.split("=", 1)
                opts[k.strip()] = float(v) if "." in v else int(v)
        store = generate(SyntheticConfig(**opts))
    else:
        path = Path(ds)
        if path.is_dir():
            return load_federation(path)
        if not path.is_file():
            raise FileNotFoundError(f"dataset not found: {ds}")
        store = load_triples(path)
    spec = partition_by_relation(store, cfg.num_clients, cfg.seed)
    return split_federation(spec, cfg.seed)


class EarlyStopping:
    """Stop after ``patience`` consecutive evaluations that fail to beat the best value so far."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_round: int | None = None
        self.declines = 0

    @property
    def should_stop(self) -> bool:
        return self.declines >= self.patience

    def update(self, value: float, rnd: int) -> bool:
        if value > self.best:
            self.best, self.best_round, self.declines = value, rnd, 0
            return True
        self.declines += 1
        return False


@dataclass
class ClientState:
    shard: object
    table: object
    adam: AdamState
    rng: np.random.Generator
    high: object = None
    high_adam: AdamState | None = None

    @property
    def eval_table(self):
        return self.high if self.high is not None else self.table


@dataclass
class RunResult:
    config: ExperimentConfig
    runlog: RunLog
    ledger: CommLedger
    summary: dict
    best_tables: dict = field(default_factory=dict)
    final_clients: list = field(default_factory=list)
    fingerprint: str = ""


def _hp(cfg: ExperimentConfig) -> Hyperparams:
    return Hyperparams(cfg.gamma, cfg.epsilon, cfg.alpha_adv, cfg.lr, cfg.batch_size, cfg.local_epochs, cfg.negatives)


def effective_dim(cfg: ExperimentConfig) -> int:
    if cfg.strategy == "fedepl":
        return fedepl_dimension(cfg.p, cfg.s, cfg.D)
    if cfg.strategy == "fede_kd":
        return cfg.low_dim
    return cfg.D


def make_clients(cfg: ExperimentConfig, spec) -> list[ClientState]:
    hp = _hp(cfg)
    dim = effective_dim(cfg)
    n_global = spec.num_global_entities
    clients = []
    for shard in spec.clients:
        table = init_embeddings(shard, hp, dim, cfg.seed, cfg.kge_method, n_global)
        st = ClientState(shard, table, AdamState.for_table(table), np.random.default_rng([cfg.seed, 2, shard.client_id]))
        if cfg.strategy == "fede_kd":
            st.high = init_embeddings(shard, hp, cfg.D, cfg.seed + 1_000_003, cfg.kge_method, n_global)
            st.high_adam = AdamState.for_table(st.high)
        clients.append(st)
    return clients


def evaluate_clients(clients, split: str):
    results, weights = [], []
    for c in clients:
        queries = getattr(c.shard, split)
        if len(queries) == 0:
            continue
        results.append(evaluate_ranking(c.eval_table, queries, c.shard.all_triples))
        weights.append(len(queries))
    return weighted_metrics(results, weights)


def train_round(cfg: ExperimentConfig, clients, hp):
    for c in clients:
        if cfg.strategy == "fede_kd":
            kd_local_train(c.shard, DualEmbeddingTable(c.table, c.high), hp, (c.adam, c.high_adam), c.rng,
                           distill=cfg.kd_distill)
        elif cfg.strategy == "fede_svdplus" and hp.local_epochs > 0:
            start = c.table.entity.copy()
            local_train(c.shard, c.table, hp, c.adam, c.rng, epochs=hp.local_epochs - 1)
            m = c.table.entity_width // cfg.svd_cols
            svdplus_final_epoch(c.shard, c.table, c.adam, start, hp, c.rng, m, cfg.svd_cols, cfg.svd_alpha)
        else:
            local_train(c.shard, c.table, hp, c.adam, c.rng)


def feds_exchange(clients, spec, t, p, schedule, server_rng, ledger):
    """One FedS round of communication: full re-sync or sparsified personalised exchange."""
    tables = {c.shard.client_id: c.table for c in clients}
    uploads = [build_upload(cid, t, tables[cid], p, schedule) for cid in sorted(tables)]
    for up in uploads:
        record_message(ledger, up)
    if is_sync_round(t, schedule):
        downloads = full_sync_exchange(uploads, spec, t)
        for cid in sorted(downloads):
            record_message(ledger, downloads[cid])
            apply_sync(tables[cid], downloads[cid])
        return
    downloads = {}
    for cid in sorted(tables):
        agg, count = server_aggregate_personalized(uploads, cid, spec, tables[cid].entity_width)
        downloads[cid] = server_select_topk_download(cid, t, agg, count, p, server_rng)
    for cid in sorted(downloads):
        record_message(ledger, downloads[cid])
        client_merge(tables[cid], downloads[cid], t)


def communicate(cfg, clients, spec, t, schedule, server_rng, ledger, starts):
    if cfg.strategy == "single":
        return
    if cfg.strategy == "feds":
        feds_exchange(clients, spec, t, cfg.p, schedule, server_rng, ledger)
    elif cfg.strategy in ("fede_svd", "fede_svdplus"):
        tables = {c.shard.client_id: c.table for c in clients}
        width = clients[0].table.entity_width
        svd_exchange(tables, starts, spec, t, width // cfg.svd_cols, cfg.svd_cols, cfg.svd_rank, ledger)
    else:  # fedep, fedepl, fede_kd (low tables only)
        fede_round({c.shard.client_id: c.table for c in clients}, spec, t, ledger)


def run_experiment(cfg: ExperimentConfig, spec=None) -> RunResult:
    """Train, communicate and evaluate until early stopping or ``max_rounds``."""
    spec = spec if spec is not None else load_dataset(cfg)
    hp = _hp(cfg)
    schedule = SyncSchedule(cfg.s)
    clients = make_clients(cfg, spec)
    server_rng = np.random.default_rng([cfg.seed, 3])
    ledger = CommLedger(cfg.counting_mode)
    runlog = RunLog()
    stopper = EarlyStopping(cfg.patience)
    best_test = (float("nan"), float("nan"))
    best_tables: dict = {}
    best_params = {"up": 0, "down": 0}
    rounds_run = 0
    for t in range(cfg.max_rounds):
        starts = {c.shard.client_id: c.table.entity.copy() for c in clients}
        train_round(cfg, clients, hp)
        rounds_run = t + 1
        if (t + 1) % cfg.eval_every == 0:
            mrr, hits = evaluate_clients(clients, "valid")
            test = evaluate_clients(clients, "test")
            runlog.append(t, mrr, hits, ledger.total(), *test)
            log.info("round %d  valid MRR %.4f  test MRR %.4f  params %d", t, mrr, test[0], ledger.total())
            if stopper.update(mrr, t):
                best_test = test
                best_tables = {c.shard.client_id: c.eval_table.copy() for c in clients}
                best_params = {"up": ledger.total("up"), "down": ledger.total("down")}
            elif stopper.should_stop:
                break
        communicate(cfg, clients, spec, t, schedule, server_rng, ledger, starts)
    if not runlog.rows:
        raise RuntimeError("run ended before the first evaluation; raise max_rounds or lower eval_every")
    best_row = runlog.rows[runlog.best_index()]
    summary = {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "config": cfg.as_dict(),
        "dataset_fingerprint": spec.fingerprint(),
        "kge_method": cfg.kge_method,
        "D": cfg.D,
        "effective_dim": effective_dim(cfg),
        "entity_width": entity_width(cfg.kge_method, effective_dim(cfg)),
        "MRR@CG": best_test[0],
        "Hits@10@CG": best_test[1],
        "valid_MRR@CG": best_row.mrr,
        "R@CG": best_row.round + 1,
        "rounds_run": rounds_run,
        "total_params_up": best_params["up"],
        "total_params_down": best_params["down"],
        "P@CG": None,
        "P@99": None,
        "P@98": None,
    }
    return RunResult(cfg, runlog, ledger, summary, best_tables, clients, spec.fingerprint())


def write_embeddings(path, tables: dict) -> None:
    with open(path, "wb") as fh:
        for cid in sorted(tables):
            ent = tables[cid].entity
            fh.write(struct.pack("<II", ent.shape[0], ent.shape[1]))
            fh.write(np.asarray(ent, dtype="<f4").tobytes())


def read_embeddings(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out, off = [], 0
    while off < len(data):
        n, w = struct.unpack_from("<II", data, off)
        off += 8
        out.append(np.frombuffer(data, "<f4", n * w, off).reshape(n, w).astype(np.float64))
        off += 4 * n * w
    return out


def write_run(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(result.config.to_text(), encoding="utf-8")
    result.runlog.to_csv(out / "runlog.csv")
    result.ledger.to_csv(out / "ledger.csv")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_embeddings(out / "best_embeddings.bin", result.best_tables)
    return out


def _fmt(v):
    if isinstance(v, str):
        return v
    return f"{v:.4f}x"


def compare_runs(summary_a, summary_b) -> dict:
    """Metrics of run ``a`` against baseline run ``b``; each argument is a summary.json path or run directory."""
    a_dir, b_dir = (Path(p) if Path(p).is_dir() else Path(p).parent for p in (summary_a, summary_b))
    sa = json.loads((a_dir / "summary.json").read_text())
    sb = json.loads((b_dir / "summary.json").read_text())
    for key in ("dataset_fingerprint", "kge_method", "D"):
        if sa.get(key) != sb.get(key):
            raise ValueError(f"runs differ in {key}: {sa.get(key)!r} vs {sb.get(key)!r}")
    dm = derive_metrics(RunLog.from_csv(a_dir / "runlog.csv"), RunLog.from_csv(b_dir / "runlog.csv"))
    rows = [
        ("MRR", sa["MRR@CG"], sb["MRR@CG"]),
        ("Hits@10", sa["Hits@10@CG"], sb["Hits@10@CG"]),
        ("P@CG", dm.p_at_cg, 1.0),
        ("P@99", dm.p_at_99, 1.0),
        ("P@98", dm.p_at_98, 1.0),
        ("R@CG", sa["R@CG"], sb["R@CG"]),
    ]
    return {
        "run": sa["strategy"],
        "baseline": sb["strategy"],
        "P@CG": dm.p_at_cg,
        "P@99": dm.p_at_99,
        "P@98": dm.p_at_98,
        "R@CG": dm.r_at_cg,
        "MRR@CG": sa["MRR@CG"],
        "baseline_MRR@CG": sb["MRR@CG"],
        "table": rows,
    }


def format_comparison(report: dict) -> str:
    lines = [f"{'metric':<10}{report['baseline']:>14}{report['run']:>14}"]
    for name, run_v, base_v in report["table"]:
        if name in ("MRR", "Hits@10"):
            lines.append(f"{name:<10}{base_v:>14.4f}{run_v:>14.4f}")
        elif name == "R@CG":
            lines.append(f"{name:<10}{base_v:>14d}{run_v:>14d}")
        else:
            lines.append(f"{name:<10}{_fmt(base_v):>14}{_fmt(run_v):>14}")
    return "\n".join(lines)
