"""Command line: ``chreode simulate|train|eval|ablate|fate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Every command writes ``config.yaml`` (the effective configuration)
into its output directory; rerunning from that echo with
``--deterministic`` reproduces the outputs byte for byte.
"""

import argparse
import json
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATION_VARIANTS, RunConfig
from .evaluation import (
    IdentityPredictor,
    OperatorPredictor,
    aggregate,
    clone_fate_scores,
    evaluate_dataset,
)
from .exceptions import ChreodeError, ConfigError
from .landscape import CloneBenchmark, read_dataset, simulate_clones, simulate_dataset, write_dataset
from .trainer import finetune, set_deterministic, train

DATASET_FILE = "dataset.chds"
CLONES_FILE = "clones.chds"
CHECKPOINT_FILE = "model.ckpt"


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dump_jsonl(path, records):
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


class _Staging:
    """Write into a temporary directory and move the files into ``out`` only on success."""

    def __init__(self, out):
        self.out = Path(out)

    def __enter__(self):
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.out.mkdir(parents=True, exist_ok=True)
            for item in sorted(self.tmp.iterdir()):
                target = self.out / item.name
                if target.is_dir():
                    shutil.rmtree(target)
                item.replace(target)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    overrides = {"seed": cfg.seed}
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "pair_mode", None):
        overrides["pair_mode"] = args.pair_mode
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    cfg.train = replace(cfg.train, **overrides)
    if getattr(args, "seeds", None) is not None:
        cfg.eval = replace(cfg.eval, seeds=args.seeds)
        cfg.ablate = replace(cfg.ablate, seeds=args.seeds)
    if getattr(args, "K", None) is not None:
        cfg.eval = replace(cfg.eval, k_eval=args.K, fate_k=args.K)
    return cfg


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


# ------------------------------------------------------------ commands
def cmd_simulate(args):
    cfg = _config(args)
    sim = cfg.simulate
    with _Staging(args.out) as tmp:
        ds = simulate_dataset(sim.landscape, sim.times, sim.n_per_time, cfg.seed, sim.dt, test_frac=sim.test_frac)
        write_dataset(ds, tmp / DATASET_FILE)
        if sim.clones is not None:
            c = sim.clones
            bench = simulate_clones(sim.landscape, c.t_source, c.t_end, c.n_clones, c.daughters_per_clone, cfg.seed, sim.dt)
            prov = {"kind": "clone_benchmark", "landscape": sim.landscape.to_dict(), "seed": cfg.seed, "dt": sim.dt}
            write_dataset(bench.to_dataset(prov), tmp / CLONES_FILE)
        cfg.dump(tmp / "config.yaml")
    return 0


def cmd_train(args):
    cfg = _config(args)
    ds = read_dataset(_require_file(args.dataset, "dataset"))
    with _Staging(args.out) as tmp:
        if args.init:
            model, history = finetune(_require_file(args.init, "initial checkpoint"), ds, cfg.train, out_dir=tmp)
        else:
            model, history = train(ds, cfg.train, out_dir=tmp)
        save_checkpoint(model, tmp / CHECKPOINT_FILE, extra={"tau_init": history.tau_init, "steps": cfg.train.steps})
        history.write(tmp)
        cfg.dump(tmp / "config.yaml")
    return 0


def _predictor(path):
    model, _ = load_checkpoint(_require_file(path, "checkpoint"))
    return IdentityPredictor() if model is None else OperatorPredictor(model)


def cmd_eval(args):
    cfg = _config(args)
    predictor = _predictor(args.checkpoint)
    ds = read_dataset(_require_file(args.dataset, "dataset"))
    records = evaluate_dataset(predictor, ds, seeds=tuple(range(cfg.eval.seeds)), k_eval=cfg.eval.k_eval)
    with _Staging(args.out) as tmp:
        _dump_jsonl(tmp / "metrics.jsonl", [r.to_record() for r in records])
        _dump_json(tmp / "metrics_aggregate.json", aggregate(records))
        cfg.dump(tmp / "config.yaml")
    return 0


def cmd_fate(args):
    cfg = _config(args)
    predictor = _predictor(args.checkpoint)
    bench = CloneBenchmark.from_dataset(read_dataset(_require_file(args.dataset, "clone benchmark")))
    report = clone_fate_scores(predictor, bench, k=cfg.eval.fate_k, knn=cfg.eval.knn, seed=cfg.seed)
    with _Staging(args.out) as tmp:
        _dump_json(tmp / "fate.json", report.to_record())
        cfg.dump(tmp / "config.yaml")
    return 0


def ablation_train_config(base, variant, seed):
    """TrainConfig for one row of the ablation grid (one component swapped)."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    cfg = replace(base, seed=seed, variant="selected", pair_mode="all_ordered", drift_on=True, down_on=True)
    if variant in ("unconstrained", "tied_time2vec", "tied_fourier"):
        return replace(cfg, variant=variant)
    if variant == "single_delta":
        return replace(cfg, pair_mode="endpoint_only")
    if variant == "no_drift":
        return replace(cfg, drift_on=False)
    if variant == "no_down":
        return replace(cfg, down_on=False)
    return cfg


def rank_table(results, variants):
    """Mean held-out W2 per (variant, target) and the average rank over targets (1 = best)."""
    targets = sorted({r["target_t"] for recs in results.values() for r in recs})
    means = {v: {t: float(np.mean([r["w2"] for r in results[v] if r["target_t"] == t])) for t in targets} for v in variants}
    ranks = {v: [] for v in variants}
    for t in targets:
        order = sorted(variants, key=lambda v: (means[v][t], variants.index(v)))
        for pos, v in enumerate(order, start=1):
            ranks[v].append(pos)
    rows = [
        {"variant": v, "w2": {str(t): means[v][t] for t in targets}, "avg_rank": float(np.mean(ranks[v]))}
        for v in variants
    ]
    return {"metric": "w2", "targets": targets, "rows": rows}


def _table_text(table):
    head = ["variant"] + [f"W2@t={t:g}" for t in table["targets"]] + ["avg_rank"]
    lines = ["\t".join(head)]
    for row in table["rows"]:
        cells = [row["variant"]] + [f"{row['w2'][str(t)]:.4f}" for t in table["targets"]] + [f"{row['avg_rank']:.2f}"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    cfg = _config(args)
    ds = read_dataset(_require_file(args.dataset, "dataset"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    variants = list(cfg.ablate.variants)
    seeds = [cfg.seed + s for s in range(cfg.ablate.seeds)]
    results = {}
    for variant in variants:
        results[variant] = []
        for seed in seeds:
            run_dir = out / "runs" / variant / f"seed{seed}"
            done = run_dir / "DONE"
            if not done.exists():
                with _Staging(run_dir) as tmp:
                    tcfg = ablation_train_config(cfg.train, variant, seed)
                    model, history = train(ds, tcfg)
                    save_checkpoint(model, tmp / CHECKPOINT_FILE, extra={"variant": variant, "seed": seed})
                    history.write(tmp)
                    recs = evaluate_dataset(OperatorPredictor(model), ds, seeds=(seed,), k_eval=cfg.eval.k_eval)
                    _dump_jsonl(tmp / "metrics.jsonl", [r.to_record() for r in recs])
                    (tmp / "DONE").write_text("ok\n")
            results[variant].extend(json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines())
    table = rank_table(results, variants)
    _dump_json(out / "ablation_table.json", table)
    (out / "ablation_table.tsv").write_text(_table_text(table))
    return 0


# ------------------------------------------------------------ parser
def build_parser():
    parser = argparse.ArgumentParser(prog="chreode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True, checkpoint=False):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
        if dataset:
            p.add_argument("--dataset", required=True, help="CHREODE-DS v1 file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")

    common(sub.add_parser("simulate", help="simulate a snapshot dataset and a clone benchmark"), dataset=False)
    p = sub.add_parser("train", help="train a transition operator")
    common(p)
    p.add_argument("--variant", choices=("selected", "unconstrained", "tied_time2vec", "tied_fourier"))
    p.add_argument("--pair-mode", dest="pair_mode", choices=("all_ordered", "endpoint_only"))
    p.add_argument("--steps", type=int)
    p.add_argument("--init", help="fine-tune from this checkpoint instead of a fresh model")
    p = sub.add_parser("eval", help="held-out transition metrics")
    common(p, checkpoint=True)
    p.add_argument("--seeds", type=int)
    p.add_argument("--K", type=int, help="samples per source cell")
    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    common(p)
    p.add_argument("--seeds", type=int)
    p.add_argument("--steps", type=int)
    p = sub.add_parser("fate", help="clonal fate scores on a clone benchmark")
    common(p, checkpoint=True)
    p.add_argument("--K", type=int, help="endpoint predictions per source")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "fate": cmd_fate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.deterministic:
        set_deterministic(True)
    try:
        return COMMANDS[args.command](args)
    except ChreodeError as exc:
        print(f"chreode {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
