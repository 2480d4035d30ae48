"""``gluestick`` command line: prune, prime corrections, apply, evaluate, analyse.

Exit codes: 0 ok, 1 usage, 2 I/O or file format, 3 numeric, 4 validation.
"""

from __future__ import annotations

import argparse
import csv
import fnmatch
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, harness, plotting, spectra
from .errors import GlueError, StorageError, ValidationError
from .gluecore import load_corrections, prime_model, save_corrections
from .pruner import PruneSpec, collect_calibration_stats, prune_checkpoint
from .runtime import Model, apply_corrections, cost_report
from .weightstore import NMSparseMatrix, read_checkpoint, storage_bytes, write_checkpoint

log = logging.getLogger("gluestick")

EXIT_USAGE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _nm(text: str) -> tuple[int, int]:
    try:
        n, m = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N:M, got {text!r}") from None
    if (n, m) not in ((2, 4), (4, 8)):
        raise argparse.ArgumentTypeError(f"supported patterns are 2:4 and 4:8, got {text}")
    return n, m


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise StorageError(f"no such file: {p}")


def _select_layers(ckpt, globs, default_exclude_tags=("head",)) -> list[str]:
    linear = ckpt.linear_layers()
    if not globs:
        return [rec.name for rec in linear if rec.tag not in default_exclude_tags]
    chosen = [rec.name for rec in linear if any(fnmatch.fnmatchcase(rec.name, g) for g in globs)]
    if not chosen:
        raise ValidationError(f"no linear layer matches {' '.join(globs)}")
    return chosen


def _load_model(path, corrections=None, dense=None) -> Model:
    ckpt = read_checkpoint(path)
    model = Model.from_checkpoint(ckpt)
    if corrections:
        cs = load_corrections(corrections, read_checkpoint(dense) if dense else None, ckpt)
        model = apply_corrections(model, cs)
    return model


# ------------------------------------------------------------ subcommands

def cmd_prune(args) -> int:
    _require_files(args.input, args.calib)
    if args.method == "wanda" and not args.calib:
        raise UsageError("--method wanda needs --calib")
    ckpt = read_checkpoint(args.input)
    names = _select_layers(ckpt, args.layers)
    stats = None
    if args.method == "wanda":
        x, codes = harness.samples_from_checkpoint(read_checkpoint(args.calib))
        stats = collect_calibration_stats(Model.from_checkpoint(ckpt), x, codes)
    n, m = args.nm
    pruned = prune_checkpoint(ckpt, PruneSpec(args.method, n, m, frozenset(names)), stats)
    write_checkpoint(pruned, args.out)
    print("layer,sparsity_pct,dense_bytes,sparse_bytes,bytes_saved")
    total = 0
    for name in names:
        d, s = storage_bytes(ckpt.tensors[name]), storage_bytes(pruned.tensors[name])
        t = pruned.tensors[name]
        zeros = 1.0 - t.values.size / (t.rows * t.cols)
        print(f"{name},{100 * zeros:.1f},{d},{s},{d - s}")
        total += d - s
    print(f"TOTAL,,,,{total}")
    return 0


def cmd_glue(args) -> int:
    _require_files(args.dense, args.pruned)
    dense, pruned = read_checkpoint(args.dense), read_checkpoint(args.pruned)
    selection = "top_r" if args.selection == "top" else "random_r"
    if selection == "random_r" and args.seed is None:
        raise UsageError("--selection random needs --seed")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cs = prime_model(dense, pruned, args.r, selection, args.seed)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if not len(cs):
        raise ValidationError("pruned checkpoint has no pruned linear layers")
    save_corrections(cs, args.out)
    print("layer,r,d_out,d_in,extra_params")
    for c in cs:
        print(f"{c.layer},{c.r},{c.d_out},{c.d_in},{c.n_params}")
    return 0


def cmd_apply(args) -> int:
    _require_files(args.pruned, args.corrections, args.dense, args.inputs)
    model = _load_model(args.pruned, args.corrections, args.dense)
    if args.cost:
        cost_report(model).to_csv(args.cost)
    if args.inputs:
        x, codes = harness.samples_from_checkpoint(read_checkpoint(args.inputs))
        y = model.forward(x.T, codes).T
        out = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            w = csv.writer(out, lineterminator="\n")
            w.writerow([f"y{i}" for i in range(y.shape[1])])
            for row in y:
                w.writerow([repr(float(v)) for v in row])
        finally:
            if args.out:
                out.close()
    elif not args.cost:
        t = cost_report(model).total
        print(f"macs_per_input,{t.macs}")
        print(f"weight_bytes,{t.param_bytes}")
    return 0


def cmd_eval(args) -> int:
    _require_files(args.model, args.corrections, args.dense, args.tasks_config)
    model = _load_model(args.model, args.corrections, args.dense)
    cfg = harness.load_config(args.tasks_config) if args.tasks_config else harness.ExperimentConfig()
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    log_fh = open(out / "episodes.jsonl", "w") if out else None
    try:
        for seed in cfg.seeds:
            tasks = harness.generate_tasks(10_000 + seed, cfg.eval_tasks, cfg.grid, cfg.obstacles, cfg.codes,
                                           cfg.max_steps)
            res, summary = harness.evaluate(model, tasks)
            rows.append((seed, summary))
            if log_fh:
                for e in res:
                    log_fh.write(json.dumps({"seed": seed, **e.summary()}) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    lines = ["seed,n,success,unsafe,path_length,dist_to_goal"]
    for seed, s in rows:
        lines.append(f"{seed},{s.n},{s.success_rate:.6g},{s.unsafe_rate:.6g},{s.mean_path_length:.6g},"
                     f"{s.mean_dist_to_goal:.6g}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        (out / "eval.csv").write_text(text)
    return 0


def _dense_weight(t) -> np.ndarray:
    return t.to_dense() if isinstance(t, NMSparseMatrix) else np.asarray(t)


def cmd_analyze(args) -> int:
    _require_files(args.ckpt)
    ckpt = read_checkpoint(args.ckpt)
    names = _select_layers(ckpt, args.layers, default_exclude_tags=())
    reports = [spectra.spectrum(_dense_weight(ckpt.tensors[n]), n) for n in names]
    spectra.export_spectra(reports, args.out)
    if args.figure:
        plotting.plot_spectra(reports, args.figure)
    print("layer,stable_rank,spectral_entropy,energy_at_k,k")
    for rep in reports:
        k = rep.default_k()
        print(f"{rep.layer},{rep.stable_rank:.6g},{rep.spectral_entropy:.6g},{rep.energy_at(k):.6g},{k}")
    return 0


def _write_layer_errors(result, path) -> None:
    if not result.layer_errors:
        return
    cols = list(result.layer_errors[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in result.layer_errors:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def cmd_experiment(args) -> int:
    _require_files(args.config)
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    out = args.out or cfg.output_dir
    if not out:
        raise UsageError("no output directory: pass --out or set output_dir in the config")
    result = harness.run_with_escalation(cfg) if args.escalate else harness.run_experiment_matrix(cfg)
    paths = harness.write_results(result, out)
    _write_layer_errors(result, Path(out) / "layer_errors.csv")
    if not args.no_figures:
        plotting.plot_rank_tradeoff(result.rows, Path(out) / "rank_tradeoff.png")
        plotting.plot_component_sensitivity(result.rows, Path(out) / "component_sensitivity.png")
    if args.save_policy:
        write_checkpoint(result.policy, Path(out) / "policy.glue")
    with open(paths["results"]) as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_train(args) -> int:
    _require_files(args.config)
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    seed = cfg.train_seed if args.seed is None else args.seed
    tasks = harness.generate_tasks(seed, cfg.train_tasks, cfg.grid, cfg.obstacles, cfg.codes, cfg.max_steps)
    policy = harness.train_policy(tasks, seed, cfg.train_config())
    write_checkpoint(policy, args.out)
    if args.calib_out:
        calib = harness.generate_tasks(seed + 5000, cfg.calib_tasks, cfg.grid, cfg.obstacles, cfg.codes,
                                       cfg.max_steps)
        x, c, _ = harness.calibration_window(harness.expert_trajectories(calib), args.calib_fraction)
        write_checkpoint(harness.samples_to_checkpoint(x, c), args.calib_out)
    print(f"final_loss,{harness.loss_trace(policy)[-1]:.6g}")
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gluestick", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("prune", help="N:M-prune linear layers of a checkpoint")
    s.add_argument("--in", dest="input", required=True, help="dense GLUE checkpoint")
    s.add_argument("--out", required=True, help="pruned checkpoint to write")
    s.add_argument("--method", choices=("magnitude", "wanda"), default="wanda", help="scoring rule (default wanda)")
    s.add_argument("--nm", type=_nm, default=(2, 4), metavar="N:M", help="sparsity pattern, 2:4 or 4:8")
    s.add_argument("--calib", help="calibration samples (GLUE file with an 'inputs' tensor); needed for wanda")
    s.add_argument("--layers", nargs="*", metavar="GLOB",
                   help="layer name globs to prune (default: every linear layer except the head)")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("glue", help="prime low-rank corrections from dense and pruned checkpoints")
    s.add_argument("--dense", required=True, help="dense checkpoint")
    s.add_argument("--pruned", required=True, help="pruned checkpoint with the same topology")
    s.add_argument("--r", type=_positive, required=True, help="correction rank per layer")
    s.add_argument("--selection", choices=("top", "random"), default="top",
                   help="keep the leading singular triplets (top) or r random ones")
    s.add_argument("--seed", type=int, help="seed for --selection random")
    s.add_argument("--out", required=True, help="correction file to write")
    s.set_defaults(func=cmd_glue)

    s = sub.add_parser("apply", help="run a pruned model with corrections on stored inputs")
    s.add_argument("--pruned", required=True, help="pruned checkpoint")
    s.add_argument("--corrections", help="correction file from 'glue'")
    s.add_argument("--dense", help="dense checkpoint, to verify the correction provenance")
    s.add_argument("--inputs", help="GLUE file with an 'inputs' tensor (one sample per row)")
    s.add_argument("--out", help="CSV of outputs (default stdout)")
    s.add_argument("--cost", metavar="CSV", help="write the per-layer cost report here")
    s.set_defaults(func=cmd_apply)

    s = sub.add_parser("eval", help="evaluate a navigation policy on generated tasks")
    s.add_argument("--model", required=True, help="policy checkpoint (dense or pruned)")
    s.add_argument("--corrections", help="correction file to apply first")
    s.add_argument("--dense", help="dense checkpoint, to verify the correction provenance")
    s.add_argument("--tasks-config", help="key=value config (seeds, grid, eval_tasks, ...)")
    s.add_argument("--out", help="directory for eval.csv and episodes.jsonl")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="export singular-value spectra of weight matrices")
    s.add_argument("--ckpt", required=True, help="checkpoint to analyse")
    s.add_argument("--layers", nargs="*", metavar="GLOB", help="layer name globs (default: all linear)")
    s.add_argument("--out", required=True, help="spectra CSV (layer,index,sigma,cum_energy)")
    s.add_argument("--figure", help="optional PNG of the spectra")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("experiment", help="run the harness experiment matrix")
    s.add_argument("--config", help="key=value config file (defaults apply when omitted)")
    s.add_argument("--out", help="output directory (overrides output_dir)")
    s.add_argument("--escalate", action="store_true",
                   help="widen the policy (64, 96, 128) until full pruning costs >= 20 points of success")
    s.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    s.add_argument("--save-policy", action="store_true", help="also write the trained policy checkpoint")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("train", help="train a dense navigation policy")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--seed", type=int, help="training seed (default: train_seed from the config)")
    s.add_argument("--out", required=True, help="policy checkpoint to write")
    s.add_argument("--calib-out", help="also write expert calibration samples here")
    s.add_argument("--calib-fraction", type=float, default=1.0, help="window fraction for --calib-out")
    s.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except GlueError as exc:
        print(f"gluestick: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"gluestick: {exc}", file=sys.stderr)
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
