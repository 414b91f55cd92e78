"""Command-line entry point: ``emc2 <subcommand> [options]``.

Every subcommand reads an experiment config (``--config`` or ``--preset``),
takes ``--seed`` and ``--out`` and writes its results into the output
directory. Exit status is 0 on success, 1 when a diagnostic check fails and
2 on bad input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .checkpoint import load_checkpoint
from .config import DatasetSpec, ExperimentConfig, fig7_preset, load_config
from .data import synth_dataset, write_dataset_csv
from .errors import EMC2Error
from .experiment import build, emit_report, run_experiment
from .loss import exact_grad, global_loss, infonce_grad, infonce_loss, softmax_neg_dist
from .encoders import fd_grad_similarity, grad_similarity
from .rng import INIT_PARAMS, PROBE, RandomStream

log = logging.getLogger("emc2")

PRESETS = {"fig7": fig7_preset}


def _common(p, needs_config=True):
    p.add_argument("--config", help="experiment config JSON")
    if needs_config:
        p.add_argument("--preset", choices=sorted(PRESETS), help="built-in config instead of --config")
    p.add_argument("--seed", type=int, help="override the seed (64-bit unsigned)")
    p.add_argument("--out", help="output directory")


def _parser():
    ap = argparse.ArgumentParser(prog="emc2", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write the configured synthetic dataset as CSV")
    _common(p, needs_config=False)

    p = sub.add_parser("train", help="run one training experiment")
    _common(p)
    p.add_argument("--algorithm", choices=["emc2", "simclr", "exact-gd"])
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    p = sub.add_parser("diag-mixing", help="TV-distance mixing curve against the rate bound")
    _common(p)
    p.add_argument("--checkpoint", help="take parameters from a checkpoint instead of the initialization")
    p.add_argument("--anchor", type=int, default=0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--replicas", type=int, default=diag.MIN_REPLICAS)
    p.add_argument("--sampled", action="store_true", help="force histogram mode")

    p = sub.add_parser("diag-kernel", help="exact kernel identities and perturbation bound")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--anchors", type=int, default=20)
    p.add_argument("--R", type=int, nargs="+", default=[1, 2, 4])
    p.add_argument("--delta", type=float, default=1e-3, help="perturbation size ||theta - theta'||")
    p.add_argument("--lipschitz-pairs", type=int, default=10_000)
    p.add_argument("--safety", type=float, default=1.5)

    p = sub.add_parser("diag-bias", help="gradient bias at frozen parameters plus range checks")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--n-estimates", type=int, default=10_000)
    p.add_argument("--negatives", choices=["mcmc", "exact"], default="mcmc")

    p = sub.add_parser("grad-check", help="analytic gradients against central differences")
    _common(p)
    p.add_argument("--probes", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-6)

    p = sub.add_parser("report", help="merge run logs into a tidy CSV")
    p.add_argument("runs", nargs="+", help="run.jsonl files or run directories, optionally LABEL=PATH")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--out", help="output CSV file or directory")
    return ap


def _experiment(args) -> ExperimentConfig:
    if args.config and getattr(args, "preset", None):
        raise SystemExit("error: give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = PRESETS[args.preset](seed=args.seed or 0)
    else:
        raise SystemExit("error: --config or --preset is required")
    upd = {}
    if args.seed is not None:
        upd["train"] = cfg.train.model_copy(update={"seed": args.seed})
        upd["dataset"] = cfg.dataset.model_copy(update={"seed": args.seed})
    if getattr(args, "algorithm", None):
        train = upd.get("train", cfg.train)
        upd["train"] = train.model_copy(update={
            "algorithm": args.algorithm, "in_batch": train.in_batch and args.algorithm == "emc2"})
    if upd:
        # revalidate so overrides obey the same rules as a config file
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **{k: v.model_dump() for k, v in upd.items()}})
    return cfg


def _out(args, cfg=None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir if cfg else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _theta(args, cfg, encoder):
    if getattr(args, "checkpoint", None):
        state, _ = load_checkpoint(args.checkpoint)
        return encoder.check_params(state.theta)
    return encoder.init_params(RandomStream(cfg.train.seed).generator(INIT_PARAMS))


def _finish(out, name, entries):
    diag.write_report(out / f"{name}.json", entries)
    ok = all(e["pass"] for e in entries)
    for e in entries:
        print(f"{'PASS' if e['pass'] else 'FAIL'}  {e['name']}: measured={_short(e['measured'])} bound={_short(e['bound'])}")
    return 0 if ok else 1


def _short(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list) and len(v) > 4:
        return f"[{len(v)} values]"
    return v


def cmd_synth_data(args):
    spec = load_config(args.config).dataset if args.config else DatasetSpec()
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    data = synth_dataset(spec)
    out = _out(args) / "dataset.csv"
    write_dataset_csv(data, out)
    print(f"wrote {data.n_items} items over {data.m} base items to {out}")
    return 0


def cmd_train(args):
    cfg = _experiment(args)
    summary = run_experiment(cfg, _out(args, cfg), resume=args.resume)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_diag_mixing(args):
    cfg = _experiment(args)
    data, enc = build(cfg)
    theta = _theta(args, cfg, enc)
    rng = RandomStream(cfg.train.seed).generator(PROBE)
    curve = diag.empirical_mixing_curve(args.anchor, theta, enc, data, cfg.train.beta, args.steps,
                                        args.replicas, rng, exact=False if args.sampled else None)
    entry = diag.report_entry(
        "mixing-dominance",
        {"anchor": args.anchor, "beta": cfg.train.beta, "m_neg": data.m_neg, "mode": curve.mode, "rate": curve.rate},
        [r[1] for r in curve.rows], [r[2] for r in curve.rows],
        # histogram noise is ~ sqrt(m_neg / replicas), so sampled mode gets that slack
        curve.dominated(0.0 if curve.mode == "exact" else 3 * np.sqrt(data.m_neg / args.replicas)),
    )
    return _finish(_out(args, cfg), "diag-mixing", [entry])


def cmd_diag_kernel(args):
    cfg = _experiment(args)
    data, enc = build(cfg)
    theta = _theta(args, cfg, enc)
    beta = cfg.train.beta
    gen = RandomStream(cfg.train.seed).generator(PROBE, 1)
    anchors = gen.choice(data.n_items, size=min(args.anchors, data.n_items), replace=False)
    col = bal = stat = 0.0
    for a in anchors:
        K = diag.build_exact_kernel(int(a), theta, enc, data, beta).entries
        p = softmax_neg_dist(int(a), theta, enc, data, beta)
        col = max(col, float(np.abs(K.sum(axis=0) - 1).max()))
        flow = K * p[None, :]
        bal = max(bal, float(np.abs(flow - flow.T).max()))
        stat = max(stat, float(np.abs(K @ p - p).max()))
    inputs = {"anchors": anchors.tolist(), "beta": beta, "m_neg": data.m_neg}
    entries = [
        diag.report_entry("kernel-column-sums", inputs, col, 1e-12, col <= 1e-12),
        diag.report_entry("kernel-detailed-balance", inputs, bal, 1e-12, bal <= 1e-12),
        diag.report_entry("kernel-stationarity", inputs, stat, 1e-10, stat <= 1e-10),
    ]
    L_P = args.safety * diag.estimate_similarity_lipschitz(enc, data, [theta], args.lipschitz_pairs, gen)
    for R in args.R:
        worst, bound = 0.0, 0.0
        ok = True
        for a in anchors:
            d = gen.standard_normal(theta.size)
            other = theta + args.delta * d / np.linalg.norm(d)
            measured, b = diag.kernel_perturbation_probe(int(a), theta, other, enc, data, beta, R, L_P)
            ok &= measured <= b
            if measured >= worst:
                worst, bound = measured, b
        entries.append(diag.report_entry(f"kernel-perturbation-R{R}", {**inputs, "R": R, "L_P": L_P}, worst, bound, ok))
    return _finish(_out(args, cfg), "diag-kernel", entries)


def cmd_diag_bias(args):
    cfg = _experiment(args)
    data, enc = build(cfg)
    theta = _theta(args, cfg, enc)
    beta = cfg.train.beta
    train = cfg.train
    if train.algorithm != "emc2" or train.in_batch:
        # the probe uses standalone chains; keep the configured lengths when given
        train = train.model_copy(update={"algorithm": "emc2", "in_batch": False})
    rng = RandomStream(cfg.train.seed).generator(PROBE, 2)
    res = diag.grad_bias_study(theta, enc, data, train, args.n_estimates, rng, args.negatives)
    loss, lo, hi = diag.loss_range(theta, enc, data, beta)
    q, qb = diag.min_acceptance_check(theta, enc, data, beta)
    inputs = {"beta": beta, "R": train.R, "P": train.P, "negatives": args.negatives, "n_estimates": args.n_estimates}
    entries = [
        diag.report_entry("gradient-bias", inputs, res.bias_norm, 3 * res.std_error,
                          res.bias_norm <= 3 * res.std_error),
        diag.report_entry("loss-range", {"beta": beta}, loss, [lo, hi], lo <= loss <= hi),
        diag.report_entry("min-acceptance", {"beta": beta}, q, qb, q >= qb),
    ]
    return _finish(_out(args, cfg), "diag-bias", entries)


def cmd_grad_check(args):
    cfg = _experiment(args)
    data, enc = build(cfg)
    beta = cfg.train.beta
    stream = RandomStream(cfg.train.seed)
    payload = data.payloads(np.arange(data.n_items), enc)
    worst = {"exact_grad": 0.0, "infonce_grad": 0.0, "grad_similarity": 0.0}
    for k in range(args.probes):
        g = stream.generator(PROBE, 3, k)
        theta = enc.init_params(g)
        fd = diag.finite_difference_grad(lambda t: global_loss(t, enc, data, beta), theta, args.h)
        worst["exact_grad"] = max(worst["exact_grad"], diag.relative_error(exact_grad(theta, enc, data, beta), fd))
        rows = g.choice(data.n_pairs, size=min(4, data.n_pairs), replace=False)
        pairs = data.pairs[rows, 1:]
        negs = data.neg[data.pairs[rows, 0]][:, : min(4, data.m_neg)]
        fd = diag.finite_difference_grad(lambda t: infonce_loss(t, enc, data, pairs, negs, beta), theta, args.h)
        worst["infonce_grad"] = max(worst["infonce_grad"],
                                    diag.relative_error(infonce_grad(theta, enc, data, pairs, negs, beta), fd))
        x, y = g.integers(data.n_items, size=2)
        h = grad_similarity(payload[x], payload[y], theta, enc)
        fd = fd_grad_similarity(payload[x], payload[y], theta, enc, args.h)
        worst["grad_similarity"] = max(worst["grad_similarity"], diag.relative_error(h, fd))
    entries = [diag.report_entry(f"grad-check-{name}", {"probes": args.probes, "h": args.h, "kind": enc.spec.kind},
                                 err, args.tol, err < args.tol) for name, err in worst.items()]
    return _finish(_out(args, cfg), "grad-check", entries)


def cmd_report(args):
    out = Path(args.out) if args.out else Path("report.csv")
    if out.suffix.lower() != ".csv":
        out = out / "report.csv"
    n = emit_report(args.runs, out)
    print(f"wrote {n} rows to {out}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "diag-mixing": cmd_diag_mixing,
    "diag-kernel": cmd_diag_kernel,
    "diag-bias": cmd_diag_bias,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be a 64-bit unsigned integer", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except EMC2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, ArithmeticError) else 2
    except ValueError as exc:
        # pydantic validation of command-line overrides
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
