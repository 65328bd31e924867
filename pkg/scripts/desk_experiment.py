#!/usr/bin/env python3
"""Desk-scale synthetic experiment: COMBO vs model-free on a sub-optimal clinician's logs,
and reward learning (omgrl mode) on noisy demonstrations. Writes per-run metric CSVs, a summary and a long-format
CSV ready for plotting.

    python3 scripts/desk_experiment.py --seeds 3 --epochs 200 --out desk_out
"""

import argparse
import logging
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from omgrl.evaluate import (EvalReport, agreement_matrix, fit_behavior_policy, minmax_normalize,
                            true_reward_pairs, wis_estimate, write_long, write_reports)
from omgrl.experiment import (batch_scenario, build_data, desk_train_config, expert_scenario, fit_ensemble,
                              policy_return, run_training)
from omgrl.train import write_metrics


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--patients", type=int, default=300)
    ap.add_argument("--out", default="desk_out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    reports, long_rows, wis_by_mode = [], [], {}

    batch = batch_scenario(args.patients)
    data = build_data(batch)
    ens = fit_ensemble(data, batch)
    behavior = fit_behavior_policy(data.train, seed=0)
    logging.info("behaviour policy held-out accuracy %.3f", behavior.accuracy)
    for mode in ("combo", "modelfree"):
        runs = []
        for seed in range(args.seeds):
            tr = run_training(data, ens if mode == "combo" else None, desk_train_config(mode, seed, args.epochs))
            write_metrics(out / f"metrics_{mode}_seed{seed}.csv", tr.state.history)
            long_rows += [("eval_rp", r.epoch, r.eval_rp, f"{mode}/{seed}") for r in tr.state.history
                          if r.eval_rp is not None]
            runs.append(tr.state.agent)
        reports.append(EvalReport.merge_seeds([
            EvalReport.from_values(f"return_rp_{mode}", [policy_return(a, data, seed=s)], 200, 36)
            for s, a in enumerate(runs)]))
        wis = [wis_estimate(a, behavior, data.test) for a in runs]
        reports.append(EvalReport.merge_seeds([EvalReport.from_values(f"wis_{mode}", [w], len(data.test), 0)
                                               for w in wis]))
        wis_by_mode[mode] = float(np.mean(wis))
        agree = agreement_matrix(runs[0], data.test)
        long_rows += [("agreement", f"{i}->{j}", agree.matrix[i, j] if agree.support[i] else None, mode)
                      for i in range(6) for j in range(6)]
    wis_by_mode["clinician"] = float(np.mean([tr.discounted_return(0.99) for tr in data.test]))
    long_rows += [("wis_normalized", k, v, "wis") for k, v in minmax_normalize(wis_by_mode).items()]

    expert = expert_scenario(args.patients)
    edata = build_data(expert)
    eens = fit_ensemble(edata, expert)
    s, a, r = true_reward_pairs(edata.env, edata.raw_test, edata.normalizer, 2000, np.random.default_rng(5))
    bc = policy_return(fit_behavior_policy(edata.train, seed=0), edata)
    rhos, rets = [], []
    for seed in range(args.seeds):
        tr = run_training(edata, eens, desk_train_config("omgrl", seed, args.epochs))
        write_metrics(out / f"metrics_omgrl_seed{seed}.csv", tr.state.history)
        long_rows += [(m, row.epoch, getattr(row, m), f"omgrl/{seed}") for row in tr.state.history
                      for m in ("eval_rp", "eval_rpsi") if getattr(row, m) is not None]
        rhos.append(float(spearmanr(tr.state.reward_net(s, a), r).statistic))
        rets.append(policy_return(tr.state.agent, edata, seed=seed))
    reports.append(EvalReport.merge_seeds([EvalReport.from_values("spearman_rpsi", [x], 2000, 1) for x in rhos]))
    reports.append(EvalReport.merge_seeds([EvalReport.from_values("return_rp_omgrl", [x], 200, 36) for x in rets]))
    reports.append(EvalReport.from_values("return_rp_behavior_cloning", [bc], 200, 36))

    write_reports(out / "summary.csv", reports)
    write_long(out / "report_long.csv", long_rows)
    for rep in reports:
        print(f"{rep.metric:28s} mean {rep.mean:8.3f}  std {rep.std:7.3f}  per seed {np.round(rep.values, 2).tolist()}")


if __name__ == "__main__":
    main()
