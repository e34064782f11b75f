"""Transmitted-parameter accounting, the closed-form per-cycle ratio and convergence metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .protocol import DownloadMessage

WORST_CASE = "worst-case"
PACKED = "packed"


@dataclass(frozen=True)
class LedgerRecord:
    round: int
    client_id: int
    direction: str
    embedding_params: int
    sign_bits: int
    priority_params: int

    @property
    def total(self) -> int:
        return self.embedding_params + self.sign_bits + self.priority_params


@dataclass
class CommLedger:
    counting_mode: str = WORST_CASE
    records: list[LedgerRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.counting_mode not in (WORST_CASE, PACKED):
            raise ValueError(f"unknown counting mode {self.counting_mode!r}")

    def add(self, rnd, client_id, direction, embedding_params, sign_bits=0, priority_params=0):
        if min(embedding_params, sign_bits, priority_params) < 0:
            raise ValueError("ledger counts must be nonnegative")
        if self.records and rnd < self.records[-1].round:
            raise ValueError("ledger records must arrive in round order")
        rec = LedgerRecord(rnd, client_id, direction, int(embedding_params), int(sign_bits), int(priority_params))
        self.records.append(rec)
        return rec

    def total(self, direction=None, client_id=None, upto_round=None) -> int:
        return sum(
            r.total
            for r in self.records
            if (direction is None or r.direction == direction)
            and (client_id is None or r.client_id == client_id)
            and (upto_round is None or r.round <= upto_round)
        )

    def per_round(self, client_id=None) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.records:
            if client_id is None or r.client_id == client_id:
                out[r.round] = out.get(r.round, 0) + r.total
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "client_id", "direction", "embedding_params", "sign_bits", "priority_params"])
            for r in self.records:
                w.writerow([r.round, r.client_id, r.direction, r.embedding_params, r.sign_bits, r.priority_params])


def sign_cost(n_shared: int, mode: str) -> int:
    return n_shared if mode == WORST_CASE else math.ceil(n_shared / 32)


def record_message(ledger: CommLedger, msg) -> LedgerRecord:
    """Book one message: embeddings always, sign vector and priorities only outside sync rounds."""
    direction = "down" if isinstance(msg, DownloadMessage) else "up"
    k, width = msg.payload.shape if msg.payload.ndim == 2 else (0, 0)
    if msg.sync:
        return ledger.add(msg.round, msg.client_id, direction, k * width)
    prio = len(msg.priority) if direction == "down" else 0
    return ledger.add(msg.round, msg.client_id, direction, k * width,
                      sign_cost(len(msg.sign), ledger.counting_mode), prio)


def theoretical_ratio(p: float, s: int, dim: int) -> float:
    """Worst-case per-cycle traffic of sparsified exchange relative to full exchange."""
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if s < 1 or dim < 1:
        raise ValueError("s and dim must be >= 1")
    return (p * s + 1 + (2 + p) * s / (2 * dim)) / (s + 1)


@dataclass(frozen=True)
class RunLogRow:
    """One evaluation: validation metrics select the checkpoint, test metrics track quality."""

    round: int
    mrr: float
    hits_at_10: float
    cumulative_params: int
    test_mrr: float = math.nan
    test_hits_at_10: float = math.nan

    @property
    def quality(self) -> float:
        """MRR used for thresholded traffic metrics: test if recorded, else validation."""
        return self.mrr if math.isnan(self.test_mrr) else self.test_mrr


_COLUMNS = ["round", "mrr", "hits_at_10", "cumulative_params", "test_mrr", "test_hits_at_10"]


@dataclass
class RunLog:
    rows: list[RunLogRow] = field(default_factory=list)

    def append(self, rnd, mrr, hits, cumulative, test_mrr=math.nan, test_hits=math.nan):
        if self.rows and rnd <= self.rows[-1].round:
            raise ValueError("run log rounds must be strictly increasing")
        self.rows.append(RunLogRow(int(rnd), float(mrr), float(hits), int(cumulative),
                                   float(test_mrr), float(test_hits)))

    def best_index(self) -> int:
        if not self.rows:
            raise ValueError("empty run log")
        # first occurrence of the maximum validation MRR
        return int(np.argmax([r.mrr for r in self.rows]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_COLUMNS)
            for r in self.rows:
                w.writerow([r.round, repr(r.mrr), repr(r.hits_at_10), r.cumulative_params,
                            repr(r.test_mrr), repr(r.test_hits_at_10)])

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.append(int(row["round"]), float(row["mrr"]), float(row["hits_at_10"]),
                           int(row["cumulative_params"]), float(row.get("test_mrr", "nan")),
                           float(row.get("test_hits_at_10", "nan")))
        return log

    def as_dicts(self):
        return [asdict(r) for r in self.rows]


NOT_ATTAINED = "not attained"


@dataclass(frozen=True)
class DerivedMetrics:
    p_at_cg: float | str
    p_at_99: float | str
    p_at_98: float | str
    r_at_cg: int
    mrr_at_cg: float
    hits_at_cg: float


def _first_reach(log: RunLog, threshold: float):
    for r in log.rows:
        if r.quality >= threshold:
            return r
    return None


def _ratio(num, den):
    if num is None or den is None:
        return NOT_ATTAINED
    if den == 0:
        return NOT_ATTAINED if num else 1.0
    return num / den


def derive_metrics(run: RunLog, baseline: RunLog) -> DerivedMetrics:
    """Traffic of ``run`` relative to ``baseline`` at convergence and at 99%/98% of the baseline's best MRR.

    Convergence is the best-validation row, and MRR@CG is the test MRR
    recorded there.  The thresholds are fractions of the baseline's MRR@CG;
    each log's test curve is scanned for its own first attainment.  Logs
    without test columns fall back to validation MRR throughout.
    """
    best = run.rows[run.best_index()]
    base_best = baseline.rows[baseline.best_index()]
    out = {}
    for frac, key in ((0.99, "p_at_99"), (0.98, "p_at_98")):
        thr = frac * base_best.quality
        a, b = _first_reach(run, thr), _first_reach(baseline, thr)
        out[key] = _ratio(a and a.cumulative_params, b and b.cumulative_params)
    return DerivedMetrics(
        p_at_cg=_ratio(best.cumulative_params, base_best.cumulative_params),
        r_at_cg=best.round + 1,
        mrr_at_cg=best.quality,
        hits_at_cg=best.hits_at_10 if math.isnan(best.test_hits_at_10) else best.test_hits_at_10,
        **out,
    )
