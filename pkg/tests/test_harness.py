import json

import numpy as np
import pytest

from fedkge.baselines import fedepl_dimension
from fedkge.cli import main
from fedkge.config import ConfigError, ExperimentConfig, load_config, parse_config
from fedkge.experiment import (
    EarlyStopping,
    compare_runs,
    evaluate_clients,
    read_embeddings,
    run_experiment,
    write_run,
)
from fedkge.kge import evaluate_ranking, weighted_metrics
from fedkge.protocol import SyncSchedule, is_sync_round

TOY_DATASET = "synthetic:entities=150,relations=9,triples=1200,clusters=5,seed=3"
SMALL = ExperimentConfig(dataset=TOY_DATASET, D=8, batch_size=256, negatives=4, lr=0.01, local_epochs=1,
                         eval_every=2, patience=2, max_rounds=8, s=2)


# --- config ---------------------------------------------------------------------------


def test_parse_config_reads_values_and_comments():
    cfg = parse_config("# experiment\nstrategy = fedep  # baseline\nD = 64\np=0.5\nkd_distill = false\n")
    assert (cfg.strategy, cfg.D, cfg.p, cfg.kd_distill) == ("fedep", 64, 0.5, False)
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", ["bogus = 1", "D = many", "strategy", "strategy = fedx", "p = 1.5",
                                  "s = 0", "svd_rank = 9", "kd_distill = maybe"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.cfg")


def test_low_dim_default():
    assert ExperimentConfig().low_dim == 192
    assert ExperimentConfig(kd_low_dim=100).low_dim == 100


# --- early stopping ---------------------------------------------------------------------


def test_early_stopping_counts_non_improvements():
    stop = EarlyStopping(2)
    assert stop.update(0.1, 4)
    assert not stop.update(0.1, 9)
    assert not stop.should_stop
    assert stop.update(0.2, 14)
    assert not stop.update(0.15, 19)
    assert not stop.update(0.19, 24)
    assert stop.should_stop and stop.best_round == 14


# --- runs -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def feds_run():
    return run_experiment(SMALL)


def test_runlog_matches_eval_cadence(feds_run):
    rounds = [r.round for r in feds_run.runlog.rows]
    assert rounds == list(range(SMALL.eval_every - 1, feds_run.summary["rounds_run"], SMALL.eval_every))


def test_best_checkpoint_reproduces_best_validation(feds_run):
    best = feds_run.runlog.rows[feds_run.runlog.best_index()]
    results, weights = [], []
    for c in feds_run.final_clients:
        table = feds_run.best_tables[c.shard.client_id]
        results.append(evaluate_ranking(table, c.shard.valid, c.shard.all_triples))
        weights.append(len(c.shard.valid))
    assert weighted_metrics(results, weights)[0] == pytest.approx(best.mrr, abs=1e-12)
    assert feds_run.summary["R@CG"] == best.round + 1


def test_feds_ledger_follows_sync_schedule(feds_run):
    schedule = SyncSchedule(SMALL.s)
    seen = set()
    for rec in feds_run.ledger.records:
        seen.add(rec.round)
        if is_sync_round(rec.round, schedule):
            assert rec.sign_bits == 0 and rec.priority_params == 0
        else:
            assert rec.sign_bits > 0
    assert 0 in seen and SMALL.s + 1 in seen


def test_fedep_counts_full_exchange_per_round():
    res = run_experiment(SMALL.with_overrides(strategy="fedep", max_rounds=4, eval_every=4))
    n_shared = {c.shard.client_id: c.shard.num_shared for c in res.final_clients}
    for cid, n in n_shared.items():
        per_round = res.ledger.per_round(cid)
        assert set(per_round.values()) == {2 * n * 8}


def test_single_sends_nothing():
    res = run_experiment(SMALL.with_overrides(strategy="single", max_rounds=4))
    assert res.ledger.total() == 0 and res.summary["total_params_up"] == 0


@pytest.mark.parametrize("overrides", [
    dict(strategy="fedepl"),
    dict(strategy="fede_kd", kd_low_dim=6),
    dict(strategy="fede_svd", svd_cols=2, svd_rank=1),
    dict(strategy="fede_svdplus", svd_cols=2, svd_rank=1, local_epochs=2),
    dict(strategy="feds", kge_method="rotate"),
    dict(strategy="feds", kge_method="complex", counting_mode="packed"),
], ids=lambda o: "-".join(str(v) for v in o.values()))
def test_strategies_run(overrides):
    res = run_experiment(SMALL.with_overrides(max_rounds=4, **overrides))
    assert np.isfinite(res.summary["MRR@CG"]) and 0 < res.summary["MRR@CG"] <= 1
    assert res.ledger.total() > 0


def test_kd_evaluates_high_table():
    res = run_experiment(SMALL.with_overrides(strategy="fede_kd", kd_low_dim=6, max_rounds=2))
    assert res.summary["effective_dim"] == 6
    assert {t.dim for t in res.best_tables.values()} == {8}


def test_fedepl_uses_matched_dimension():
    res = run_experiment(SMALL.with_overrides(strategy="fedepl", D=256, max_rounds=2, eval_every=2))
    dim = fedepl_dimension(SMALL.p, SMALL.s, 256)
    assert dim == 155
    assert res.summary["effective_dim"] == dim
    assert res.final_clients[0].table.dim == dim


def test_run_before_first_evaluation_fails():
    with pytest.raises(RuntimeError):
        run_experiment(SMALL.with_overrides(max_rounds=1, eval_every=2))


def test_missing_dataset():
    with pytest.raises(FileNotFoundError):
        run_experiment(SMALL.with_overrides(dataset="/nonexistent/kg.tsv"))


# --- artifacts and CLI ------------------------------------------------------------------


def _write_cfg(path, cfg):
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path


def test_cli_run_is_byte_deterministic(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "feds.cfg", SMALL.with_overrides(max_rounds=4))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("runlog.csv", "ledger.csv", "summary.json", "best_embeddings.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "MRR@CG" in capsys.readouterr().out


def test_seed_override_changes_run(tmp_path):
    cfg = _write_cfg(tmp_path / "feds.cfg", SMALL.with_overrides(max_rounds=2))
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["seed"] == 5
    assert (tmp_path / "a" / "runlog.csv").read_bytes() != (tmp_path / "b" / "runlog.csv").read_bytes()


def test_embeddings_file_round_trip(tmp_path, feds_run):
    write_run(feds_run, tmp_path / "run")
    back = read_embeddings(tmp_path / "run" / "best_embeddings.bin")
    for arr, cid in zip(back, sorted(feds_run.best_tables)):
        np.testing.assert_allclose(arr, feds_run.best_tables[cid].entity, rtol=1e-6, atol=1e-7)


def test_compare_runs(tmp_path, feds_run, capsys):
    base = run_experiment(SMALL.with_overrides(strategy="fedep"))
    write_run(feds_run, tmp_path / "feds")
    write_run(base, tmp_path / "fedep")
    report = compare_runs(tmp_path / "feds", tmp_path / "fedep" / "summary.json")
    assert report["run"] == "feds" and report["baseline"] == "fedep"
    assert main(["compare", str(tmp_path / "feds"), str(tmp_path / "fedep")]) == 0
    out = capsys.readouterr().out
    assert "P@CG" in out and "P@99" in out
    assert main(["compare", "--json", str(tmp_path / "fedep"), str(tmp_path / "fedep")]) == 0
    assert json.loads(capsys.readouterr().out)["P@CG"] == 1.0


def test_compare_refuses_mismatched_runs(tmp_path, feds_run, capsys):
    other = run_experiment(SMALL.with_overrides(strategy="fedep", D=10, max_rounds=2))
    write_run(feds_run, tmp_path / "a")
    write_run(other, tmp_path / "b")
    with pytest.raises(ValueError, match="D"):
        compare_runs(tmp_path / "a", tmp_path / "b")
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 1
    assert "differ in D" in capsys.readouterr().err


def test_cli_formulas(capsys):
    assert main(["ratio", "0.7", "4", "256"]) == 0
    assert main(["fedepl-dim", "0.4", "4", "256"]) == 0
    assert capsys.readouterr().out.split() == ["0.7642", "135"]
    assert main(["fedepl-dim", "1.0", "4", "256"]) == 1


def test_cli_synth_and_partition(tmp_path, capsys):
    kg = tmp_path / "kg.tsv"
    assert main(["synth", "--out", str(kg), "--entities", "120", "--relations", "6", "--triples", "900"]) == 0
    assert main(["partition", str(kg), "--clients", "3", "--out", str(tmp_path / "fed")]) == 0
    assert sorted(p.name for p in (tmp_path / "fed").iterdir()) == ["client_0", "client_1", "client_2"]
    cfg = _write_cfg(tmp_path / "run.cfg", SMALL.with_overrides(dataset=str(tmp_path / "fed"), max_rounds=2))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "ledger.csv").exists()


def test_cli_errors(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert "config file not found" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("strategy = nope\n")
    assert main(["run", "--config", str(bad)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
