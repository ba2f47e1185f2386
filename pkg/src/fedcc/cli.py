"""``fedcc`` command line: generate, train, eval, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import glob
import json
import os
import sys

from . import config as config_mod
from ._accel import backend_name
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FeatureFileError, generate, load_feature_file, save_feature_file
from .evaluation import macro_average, write_ranklists
from .federation import PRESETS, EvalSet, TrainingError, dump_record, evaluate_client, run_training
from .model import ModelError


class UsageError(Exception):
    """Bad input from the user: exit code 2."""


def _load_config(path):
    if path is None:
        return config_mod.from_dict({})
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    return config_mod.load(path)


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory is not writable: {path}")


def _dataset_files(spec):
    paths = []
    for s in spec:
        if os.path.isdir(s):
            paths += sorted(glob.glob(os.path.join(s, "client_*.csv")))
        elif os.path.isfile(s):
            paths.append(s)
        else:
            raise UsageError(f"dataset not found: {s}")
    if not paths:
        raise UsageError(f"no client_*.csv files in {' '.join(spec)}")
    return paths


def _load_datasets(spec, n_parts):
    out = [load_feature_file(p, n_parts=n_parts) for p in _dataset_files(spec)]
    ids = [d.client_id for d in out]
    if len(set(ids)) != len(ids):
        raise UsageError(f"duplicate client ids across dataset files: {ids}")
    return sorted(out, key=lambda d: d.client_id)


def _write_datasets(datasets, out_dir):
    _makedirs(out_dir)
    for ds in datasets:
        save_feature_file(ds, os.path.join(out_dir, f"client_{ds.client_id}.csv"))


def summary_table(metrics, client_ids):
    lines = [f"{'client':>8} {'R1':>7} {'R5':>7} {'R10':>7} {'mAP':>7}"]
    for cid, m in zip(client_ids, metrics):
        lines.append(f"{cid:>8} {m['rank1']:7.3f} {m['rank5']:7.3f} {m['rank10']:7.3f} {m['mAP']:7.3f}")
    avg = macro_average(metrics)
    lines.append(f"{'avg':>8} {avg['rank1']:7.3f} {avg['rank5']:7.3f} {avg['rank10']:7.3f} {avg['mAP']:7.3f}")
    return "\n".join(lines)


# --------------------------------------------------------------- subcommands

def cmd_generate(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    datasets = generate(cfg.synthetic())
    _write_datasets(datasets, args.out)
    config_mod.dump(cfg, os.path.join(args.out, "config.yaml"))
    print(f"wrote {len(datasets)} client files to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.ablation is not None:
        cfg.schedule = config_mod.ScheduleConfig(preset=args.ablation,
                                                 rounds_override=cfg.schedule.rounds_override)
    if args.rounds_override is not None:
        if args.rounds_override < 1:
            raise UsageError("--rounds-override must be >= 1")
        cfg.schedule.rounds_override = args.rounds_override
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if cfg.workers < 1:
        raise UsageError("--workers must be >= 1")
    schedule = cfg.stages()
    arch = cfg.architecture()

    if args.data:
        datasets = _load_datasets(args.data, arch.n_parts)
        if datasets[0].d_in != arch.d_in:
            raise UsageError(f"dataset has d_in={datasets[0].d_in}, config says {arch.d_in}")
    else:
        datasets = generate(cfg.synthetic())

    out = cfg.output_dir
    ckpt_dir = os.path.join(out, "checkpoints")
    _makedirs(ckpt_dir)
    config_mod.dump(cfg, os.path.join(out, "config.yaml"))
    log_path = os.path.join(out, "metrics.jsonl")

    def on_stage_end(s_idx, spec, clients, generic):
        path = os.path.join(ckpt_dir, f"stage{s_idx}_{spec.stage}.npz")
        save_checkpoint(path, s_idx, spec, clients, generic)
        if not args.quiet:
            print(f"checkpoint {path}", file=sys.stderr)

    with open(log_path, "w") as fh:
        def log(rec):
            fh.write(dump_record(rec) + "\n")
            if rec["kind"] == "server" and rec["macro"] is not None and not args.quiet:
                print(f"stage {rec['stage']:>3} round {rec['round']:>3}  "
                      f"R1 {rec['macro']['rank1']:.3f}  mAP {rec['macro']['mAP']:.3f}",
                      file=sys.stderr)

        result = run_training(datasets, schedule, arch, cfg.train_options(), seed=cfg.seed,
                              workers=cfg.workers, log=log, on_stage_end=on_stage_end)

    ids = [d.client_id for d in datasets]
    table = summary_table(result.final_metrics, ids)
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(table + "\n")
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump({"clients": dict(zip(map(str, ids), result.final_metrics)),
                   "macro": macro_average(result.final_metrics)}, fh, indent=2, sort_keys=True)
    print(table)
    return 0


def cmd_eval(args):
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    datasets = _load_datasets(args.data, ckpt.arch.n_parts)
    metrics = []
    if args.export_ranklists:
        _makedirs(args.export_ranklists)
    for ds in datasets:
        params = ckpt.params_for(ds.client_id)
        m, ranking = evaluate_client(params, EvalSet.from_dataset(ds), ckpt.concat, return_ranking=True)
        metrics.append(m)
        if args.export_ranklists:
            write_ranklists(ranking, os.path.join(args.export_ranklists, f"ranklist_client_{ds.client_id}.csv"))
    ids = [d.client_id for d in datasets]
    print(summary_table(metrics, ids))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"checkpoint": args.checkpoint, "clients": dict(zip(map(str, ids), metrics)),
                       "macro": macro_average(metrics)}, fh, indent=2, sort_keys=True)
    return 0


def cmd_inspect(args):
    if not os.path.isfile(args.log):
        raise UsageError(f"metrics log not found: {args.log}")
    clients, servers = [], []
    with open(args.log) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.log}:{lineno}: bad JSON: {exc.msg}") from None
            (clients if rec.get("kind") == "client" else servers).append(rec)
    ids = sorted({r["client"] for r in clients})
    by_round = {}
    for r in clients:
        by_round.setdefault(r["global_round"], {})[r["client"]] = r
    macro = {r["global_round"]: r.get("macro") for r in servers}

    head = f"{'round':>5} {'stage':>5} " + " ".join(f"{'m' + str(k):>5} {'loss' + str(k):>7}" for k in ids) + f" {'R1':>6}"
    print(head)
    for g in sorted(by_round):
        row = by_round[g]
        first = next(iter(row.values()))
        cells = []
        for k in ids:
            r = row.get(k)
            if r is None:
                cells.append(f"{'-':>5} {'-':>7}")
            else:
                loss = "-" if r["loss"] is None else f"{r['loss']:.4f}"
                cells.append(f"{r['n_clusters']:>5} {loss:>7}")
        m = macro.get(g)
        r1 = "-" if not m else f"{m['rank1']:.3f}"
        print(f"{g:>5} {first['stage']:>5} " + " ".join(cells) + f" {r1:>6}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="fedcc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedcc 0.1.0 ({backend_name()} kernels)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic client CSV files")
    g.add_argument("config", nargs="?", help="run config (YAML); defaults if omitted")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the federated schedule")
    t.add_argument("config", nargs="?", help="run config (YAML); defaults if omitted")
    t.add_argument("--ablation", choices=sorted(PRESETS), help="override the schedule with a preset")
    t.add_argument("--rounds-override", type=int, help="set every stage's round count")
    t.add_argument("--workers", type=int, help="clients trained in parallel")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", nargs="+", help="client CSV files or directories instead of generating")
    t.add_argument("--output-dir")
    t.add_argument("-q", "--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on client datasets")
    e.add_argument("checkpoint")
    e.add_argument("data", nargs="+", help="client CSV files or directories")
    e.add_argument("--export-ranklists", metavar="DIR", help="write top-10 ranked lists per client")
    e.add_argument("--out", help="write metrics as JSON here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="cluster-count and loss trajectories from a metrics log")
    i.add_argument("log")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError, FeatureFileError, ModelError) as exc:
        print(f"fedcc: error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"fedcc: training failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fedcc: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
