"""Command-line entry point: ``omgrl VERB [--config PATH] [--set K=V ...] [--seed N] [--strict] [--out DIR]``.

Verbs share one output directory; each reads what earlier verbs wrote there:

    gen-data        synth.cfg, data.csv
    ingest          train.csv, test.csv, normalizer.kv, edges.kv
    train-dynamics  dynamics.ckpt, dynamics_nll.csv
    train           run_<mode>.ckpt, metrics_<mode>.csv
    evaluate        eval_<mode>.csv, agreement_<mode>.csv, tendency_<mode>.csv
    report          report_long.csv

Exit codes: 0 success, 1 validation error, 2 numeric abort.
"""

from __future__ import annotations

import os
import sys

if "--strict" in sys.argv:  # must precede the numpy import to pin BLAS threads
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"

import argparse
import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import (Normalizer, apply_normalizer, fit_normalizer, load_edges, load_trajectories, save_edges,
                   split_train_test, stack_transitions, write_trajectories)
from .dynamics import DynamicsEnsemble, select_top, train_dynamics
from .errors import NumericError, OmgrlError
from .evaluate import (EvalReport, ModelSimulator, SynthSimulator, agreement_matrix, dosing_tendency,
                       evaluate_return, fit_behavior_policy, success_rate, wis_estimate, write_long,
                       write_reports)
from .synth import SynthConfig, SynthEnv, generate_expert_dataset
from .train import Trainer, load_state, make_evaluator, read_metrics, write_metrics

log = logging.getLogger("omgrl")

VERBS = ("gen-data", "ingest", "train-dynamics", "train", "evaluate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="omgrl", description="Learn dosing policies and rewards from logged treatment data.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. agent.hidden=32")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--strict", action="store_true", help="single-threaded, bitwise-reproducible execution")
    p.add_argument("--out", help="output directory (default: $OMGRL_OUT or ./omgrl_out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, verb: str, config: RunConfig, artifacts: list[Path], strict: bool):
    manifest = {"verb": verb, "version": __version__, "seed": config.seed, "strict": strict,
                "config_fingerprint": config.fingerprint(), "config": config.to_text(),
                "artifacts": {p.name: _sha(p) for p in artifacts if p.exists()}}
    (out / f"manifest_{verb}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _need(path: Path, verb: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `omgrl {verb}` first")
    return path


def _load_split(out: Path, config: RunConfig):
    edges = load_edges(_need(out / "edges.kv", "ingest"))
    norm = Normalizer.load(_need(out / "normalizer.kv", "ingest"))
    train = load_trajectories(out / "train.csv", edges, config.data.min_horizon).trajectories
    test = load_trajectories(out / "test.csv", edges, config.data.min_horizon).trajectories
    return train, test, norm


def _simulator_factory(out: Path, config: RunConfig, raw_test, norm, ensemble):
    """True synthetic environment when the data came from gen-data, else the learned ensemble."""
    if (out / "synth.cfg").exists():
        env = SynthEnv(SynthConfig.load(out / "synth.cfg"))
        return lambda: SynthSimulator.from_trajectories(env, raw_test, norm)
    if ensemble is not None:
        test = apply_normalizer(raw_test, norm)
        return lambda: ModelSimulator.from_trajectories(ensemble, test)
    return None


# --- verbs ----------------------------------------------------------------------------

def cmd_gen_data(out: Path, config: RunConfig):
    synth = SynthConfig(**{**vars(config.synth), "seed": config.seed})
    trajs = generate_expert_dataset(synth, config.data.n_patients)
    synth.save(out / "synth.cfg")
    write_trajectories(out / "data.csv", trajs)
    return [out / "synth.cfg", out / "data.csv"]


def cmd_ingest(out: Path, config: RunConfig):
    src = Path(config.data.csv) if config.data.csv else _need(out / "data.csv", "gen-data")
    edges = None
    if (out / "synth.cfg").exists() and not config.data.csv:
        # synthetic doses are drawn around the generator's class edges
        edges = np.array(SynthConfig.load(out / "synth.cfg").dose_edges)
    res = load_trajectories(src, edges, config.data.min_horizon)
    if res.n_excluded:
        log.info("excluded %d short trajectories", res.n_excluded)
    train, test = split_train_test(res.trajectories, config.data.train_ratio, config.seed)
    norm = fit_normalizer(train)
    write_trajectories(out / "train.csv", train)
    write_trajectories(out / "test.csv", test)
    norm.save(out / "normalizer.kv")
    save_edges(out / "edges.kv", res.edges)
    return [out / n for n in ("train.csv", "test.csv", "normalizer.kv", "edges.kv")]


def cmd_train_dynamics(out: Path, config: RunConfig):
    raw_train, _, norm = _load_split(out, config)
    train = apply_normalizer(raw_train, norm)
    fit, val = split_train_test(train, config.data.val_ratio, config.seed + 1)
    members = train_dynamics(stack_transitions(fit), stack_transitions(val), config.dynamics, config.seed)
    with open(out / "dynamics_nll.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member", "epoch", "train_nll", "val_nll"])
        for m in members:
            for e, (tr, va) in enumerate(m.history):
                w.writerow([m.index, e, repr(tr), repr(va)])
    ens = select_top(members, config.dynamics.n_keep, norm.fingerprint())
    ens.save(out / "dynamics.ckpt")
    return [out / "dynamics.ckpt", out / "dynamics_nll.csv"]


def cmd_train(out: Path, config: RunConfig, strict: bool):
    raw_train, raw_test, norm = _load_split(out, config)
    tc = config.train_config(strict)
    ensemble = None
    if tc.rollout.batch_size > 0:
        ensemble = DynamicsEnsemble.load(_need(out / "dynamics.ckpt", "train-dynamics"))
        if ensemble.normalizer_fingerprint != norm.fingerprint():
            raise ValueError("dynamics checkpoint was trained under a different normalizer")
    factory = _simulator_factory(out, config, raw_test, norm, ensemble)
    evaluator = make_evaluator(factory, tc) if factory is not None else None
    ckpt = out / f"run_{tc.mode}.ckpt"
    state = None
    if config.orchestrator.resume and ckpt.exists():
        state, saved = load_state(ckpt)
        tc = saved.__class__(**{**vars(saved), "epochs": tc.epochs})
    trainer = Trainer(tc, apply_normalizer(raw_train, norm), ensemble, evaluator, state)
    trainer.state.provenance.update({"train_csv_sha256": _sha(out / "train.csv")})
    try:
        trainer.train(checkpoint_path=ckpt, checkpoint_every=config.orchestrator.checkpoint_every)
    finally:
        write_metrics(out / f"metrics_{tc.mode}.csv", trainer.state.history)
    return [ckpt, out / f"metrics_{tc.mode}.csv"]


def cmd_evaluate(out: Path, config: RunConfig):
    raw_train, raw_test, norm = _load_split(out, config)
    mode = config.orchestrator.mode
    state, tc = load_state(_need(out / f"run_{mode}.ckpt", "train"))
    ensemble = DynamicsEnsemble.load(out / "dynamics.ckpt") if (out / "dynamics.ckpt").exists() else None
    factory = _simulator_factory(out, config, raw_test, norm, ensemble)
    if factory is None:
        raise ValueError("no environment to evaluate in: generate synthetic data or train dynamics first")
    ev = config.eval
    test = apply_normalizer(raw_test, norm)
    fp = config.fingerprint()
    rng = lambda tag: np.random.default_rng([config.seed, tag])  # noqa: E731
    reports = [evaluate_return(state.agent, factory(), ev.episodes, ev.steps, "rp", rng(1))]
    if state.reward_net is not None:
        reports.append(evaluate_return(state.agent, factory(), ev.episodes, ev.steps, state.reward_net, rng(1)))
    behavior = fit_behavior_policy(apply_normalizer(raw_train, norm), epochs=ev.behavior_epochs, seed=config.seed)
    wis = wis_estimate(state.agent, behavior, test, ev.gamma)
    reports.append(EvalReport.from_values("wis", [wis], len(test), 0))
    reports.append(success_rate(state.agent, factory(), ev.success_episodes, ev.success_steps, ev.threshold,
                                ev.duration, rng(2)))
    for r in reports:
        r.fingerprint = fp
    write_reports(out / f"eval_{mode}.csv", reports)
    agree = agreement_matrix(state.agent, test)
    rows = [("agreement", f"{i}->{j}", agree.matrix[i, j] if agree.support[i] else None, mode)
            for i in range(agree.matrix.shape[0]) for j in range(agree.matrix.shape[1])]
    write_long(out / f"agreement_{mode}.csv", rows)
    trows = []
    for ind in ("pt", "inr"):
        t = dosing_tendency(state.agent, raw_test, ind, ev.bins, norm)
        centers = 0.5 * (t.edges[:-1] + t.edges[1:])
        for c, p, q in zip(centers, t.policy_mean, t.clinician_mean):
            trows.append((f"tendency_{ind}", repr(float(c)), p, "policy"))
            trows.append((f"tendency_{ind}", repr(float(c)), q, "clinician"))
    write_long(out / f"tendency_{mode}.csv", trows)
    return [out / f"eval_{mode}.csv", out / f"agreement_{mode}.csv", out / f"tendency_{mode}.csv"]


def cmd_report(out: Path, config: RunConfig):
    rows = []
    for path in sorted(out.glob("metrics_*.csv")):
        series = path.stem.split("_", 1)[1]
        for r in read_metrics(path):
            for col in ("bellman_loss", "cql_penalty", "policy_loss", "reward_loss", "eval_rp", "eval_rpsi"):
                v = getattr(r, col)
                if v is not None:
                    rows.append((col, r.epoch, v, series))
    for path in sorted(out.glob("agreement_*.csv")) + sorted(out.glob("tendency_*.csv")):
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append((r["metric"], r["x"], float(r["y"]) if r["y"] else None, r["series"]))
    if not rows:
        raise FileNotFoundError(f"nothing to report in {out}")
    write_long(out / "report_long.csv", rows)
    return [out / "report_long.csv"]


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"omgrl: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    out = Path(args.out or os.environ.get("OMGRL_OUT", "omgrl_out"))
    try:
        if args.config and not Path(args.config).exists():
            raise FileNotFoundError(f"config file {args.config} does not exist")
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        config = load_config(args.config, overrides)
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "gen-data":
            artifacts = cmd_gen_data(out, config)
        elif args.verb == "ingest":
            artifacts = cmd_ingest(out, config)
        elif args.verb == "train-dynamics":
            artifacts = cmd_train_dynamics(out, config)
        elif args.verb == "train":
            artifacts = cmd_train(out, config, args.strict)
        elif args.verb == "evaluate":
            artifacts = cmd_evaluate(out, config)
        else:
            artifacts = cmd_report(out, config)
        config.save(out / f"config_{args.verb}.cfg")
        _write_manifest(out, args.verb, config, artifacts, args.strict)
    except NumericError as exc:
        print(f"omgrl: numeric abort: {exc}", file=sys.stderr)
        return 2
    except (OmgrlError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"omgrl: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
