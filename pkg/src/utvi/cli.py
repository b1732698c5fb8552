"""Command-line entry point: ``utvi {gen,train,eval,bench,maps,sweep}``.

Exit codes: 0 ok, 1 I/O failure, 2 usage or invalid configuration,
3 numerical failure during training, 4 checkpoint/data mismatch.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evalbench
from .datagen import (
    SimParams, gen_regression_batch, localization_header, read_localization_csv, read_regression_csv,
    simulate_batch, write_localization_csv, write_regression_csv,
)
from .errors import ArtifactMismatch, NumericalFailure, ParameterError
from .training import (
    Checkpoint, LocalizationSource, RegressionSource, TrainConfig, build_localizer_model,
    build_regression_model, train,
)

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3, 4
THREADS_ENV = "UTVI_NUM_THREADS"

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed", "record_wall_time"}
_SIM_KEYS = {f.name for f in fields(SimParams)}


@dataclass
class RunConfig:
    """Everything a command needs; serialized as one flat JSON object."""

    task: str = "regression"
    mode: str = "utvi"
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    heads: bool = True
    n: int = 1000
    per_pixel: int = 1024
    bench_batch: int = 1024
    bench_samples: list = field(default_factory=lambda: [3, 8, 32, 128])
    bench_repeats: int = 10
    # training
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 50
    batches_per_epoch: int = 100
    batch_size: int = 128
    kappa: float = 2.0
    mc_samples: int = 3
    prior_sigma: float = 1.0
    val_size: int = 1024
    val_seed: int = 2024
    eval_chunk: int = 512
    # simulation
    N: float = 100.0
    L: int = 8
    sigma_b: float = 1.05
    sigma_r: float = 2.0
    wavelength: float = 6.0
    na: float = 1.2

    def __post_init__(self):
        if self.task not in ("regression", "localization"):
            raise ParameterError(f"unknown task {self.task!r}")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ParameterError("seeds must be a non-empty list of non-negative integers")
        for name in ("n", "per_pixel", "bench_batch", "bench_repeats"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if any(int(s) < 2 for s in self.bench_samples):
            raise ParameterError("bench_samples entries must be >= 2")
        # validate the nested configs up front so no work starts on bad input
        self.train_config(self.seeds[0])
        self.sim()

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParameterError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ParameterError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def train_config(self, seed):
        d = {k: getattr(self, k) for k in _TRAIN_KEYS}
        return TrainConfig(**d, seed=seed, record_wall_time=False)

    def sim(self):
        return SimParams(**{k: getattr(self, k) for k in _SIM_KEYS})

    def source(self):
        return RegressionSource() if self.task == "regression" else LocalizationSource(self.sim())

    def build_model(self):
        if self.task == "regression":
            return build_regression_model()
        return build_localizer_model(self.sim(), heads=self.heads)


# -- argument parsing ------------------------------------------------------------

def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    p = argparse.ArgumentParser(prog="utvi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed list with one seed")
        sp.add_argument("--out", type=Path, help=out_help)

    g = sub.add_parser("gen", help="write a synthetic dataset CSV")
    common(g, "CSV path to write")
    g.add_argument("--task", choices=["regression", "localization"])
    g.add_argument("--n", type=int, help="number of rows")

    t = sub.add_parser("train", help="train a model; writes checkpoints, log and config echo")
    common(t, "output directory")
    t.add_argument("--task", choices=["regression", "localization"])
    t.add_argument("--mode", choices=["smp", "utvi", "mcvi"])
    t.add_argument("--samples", type=int, dest="mc_samples", help="MCVI samples per nonlinearity")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batches-per-epoch", type=int, dest="batches_per_epoch")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--no-heads", action="store_false", dest="heads", default=None,
                   help="localizer without the inverse-CDF output heads")

    e = sub.add_parser("eval", help="NLL of one or more checkpoints on a dataset CSV")
    common(e, "metrics JSON path")
    e.add_argument("--model", type=Path, nargs="+", required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--mode", choices=["smp", "utvi", "mcvi"])
    e.add_argument("--samples", type=int, dest="mc_samples")

    b = sub.add_parser("bench", help="single-threaded forward-pass timing")
    common(b, "timing CSV path")
    b.add_argument("--model", type=Path, required=True)
    b.add_argument("--batch", type=int, dest="bench_batch")
    b.add_argument("--samples", type=_int_list, dest="bench_samples", help="MCVI sample counts, e.g. 3,8,32,128")
    b.add_argument("--repeats", type=int, dest="bench_repeats")

    m = sub.add_parser("maps", help="predicted-variance and CRB maps for localizers")
    common(m, "output directory")
    m.add_argument("--model", type=Path, nargs="+", required=True)
    m.add_argument("--per-pixel", type=int, dest="per_pixel")
    m.add_argument("--mode", choices=["smp", "utvi", "mcvi"])
    m.add_argument("--svg", action="store_true", help="also write SVG heatmaps")

    s = sub.add_parser("sweep", help="best validation NLL against MCVI sample count")
    common(s, "output directory")
    s.add_argument("--task", choices=["regression", "localization"])
    s.add_argument("--samples", type=_int_list, dest="bench_samples")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batches-per-epoch", type=int, dest="batches_per_epoch")
    return p


_NOT_CONFIG = {"command", "config", "seed", "out", "model", "data", "svg"}


def resolve_config(args):
    """File values, then command-line overrides; validated before returning."""
    doc = RunConfig.load(args.config).to_dict() if args.config else {}
    for k, v in vars(args).items():
        if k not in _NOT_CONFIG and v is not None:
            doc[k] = v
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    if args.out is not None:
        doc["out"] = str(args.out)
    return RunConfig.from_dict(doc)


# -- commands ----------------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig):
    if args.task is None and args.config is None:
        raise ParameterError("gen needs --task (or a --config naming one)")
    seed = cfg.seeds[0]
    rng = np.random.default_rng(seed)
    out = Path(cfg.out)
    if cfg.task == "regression":
        write_regression_csv(out, gen_regression_batch(cfg.n, rng))
    else:
        write_localization_csv(out, simulate_batch(rng, cfg.n, cfg.sim()), cfg.sim())
    print(f"wrote {cfg.n} rows to {out} (task={cfg.task}, seed={seed})")


def _run_dir(cfg, seed):
    base = Path(cfg.out)
    return base if len(cfg.seeds) == 1 else base / f"seed_{seed}"


def cmd_train(args, cfg: RunConfig):
    base = Path(cfg.out)
    base.mkdir(parents=True, exist_ok=True)
    (base / "config.json").write_text(cfg.to_json())
    for seed in cfg.seeds:
        out = _run_dir(cfg, seed)
        out.mkdir(parents=True, exist_ok=True)
        try:
            res = train(cfg.build_model(), cfg.source(), cfg.train_config(seed))
        except NumericalFailure as exc:
            diag = {**exc.diagnostics(), "seed": seed, "mode": cfg.mode, "task": cfg.task}
            (out / "diagnostics.json").write_text(json.dumps(diag, indent=1, sort_keys=True) + "\n")
            raise
        res.best.save(out / "best.json")
        res.final.save(out / "final.json")
        (out / "log.csv").write_text(res.log_csv())
        print(f"seed {seed}: best val NLL {res.best_val_nll:.6f} at epoch {res.best.epoch} -> {out}")


def _load_models(paths):
    models = []
    for p in paths:
        try:
            ckpt = Checkpoint.load(p)
            models.append(ckpt.model())
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ArtifactMismatch):
                raise
            raise ArtifactMismatch(f"{p}: unreadable checkpoint ({exc})") from exc
    tasks = {"regression" if m.name == "regression" else "localization" for m in models}
    if len(tasks) > 1:
        raise ArtifactMismatch("checkpoints mix regression and localization models")
    return models, tasks.pop()


def _load_data(path, task, sim):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if task == "regression":
        if header != ["x", "y"]:
            raise ArtifactMismatch(f"{path}: regression model needs an x,y dataset")
        b = read_regression_csv(path)
        return b.x[:, None], b.y[:, None]
    if header != localization_header(sim):
        raise ArtifactMismatch(f"{path}: localization model needs a px_0..n_detected dataset")
    return LocalizationSource.arrays(read_localization_csv(path, sim))


def cmd_eval(args, cfg: RunConfig):
    models, task = _load_models(args.model)
    x, y = _load_data(args.data, task, cfg.sim())
    try:
        report = evalbench.evaluate_nll(models, x, y, cfg.mode, cfg.mc_samples, seed=cfg.seeds[0])
    except ValueError as exc:
        raise ArtifactMismatch(f"model and data do not fit together: {exc}") from exc
    doc = {**report.to_dict(), "n": int(len(x)), "models": [str(p) for p in args.model],
           "data": str(args.data), "seed": cfg.seeds[0], "nll": f"{report.nll:.17g}"}
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        print(f"NLL {report.nll:.6f} ({report.mode}) -> {args.out}")


def cmd_bench(args, cfg: RunConfig):
    models, task = _load_models([args.model])
    source = RegressionSource() if task == "regression" else LocalizationSource(cfg.sim())
    x, _ = source.batch(np.random.default_rng(cfg.seeds[0]), cfg.bench_batch)
    reports = evalbench.timing_sweep(models[0], x, cfg.bench_samples, cfg.bench_repeats, seed=cfg.seeds[0])
    out = Path(args.out) if args.out is not None else Path(cfg.out) / "timing.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    evalbench.write_timing_csv(out, reports, cfg.bench_batch)
    for r in reports:
        print(f"{r.mode:>10}  median {r.median_ms:9.3f} ms  iqr {r.iqr_ms:8.3f} ms")


def cmd_maps(args, cfg: RunConfig):
    models, task = _load_models(args.model)
    if task != "localization":
        raise ArtifactMismatch("maps needs localizer checkpoints")
    sim = cfg.sim()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    vmap = evalbench.variance_map(models, sim, cfg.per_pixel, seed=cfg.seeds[0], mode=cfg.mode)
    crb = evalbench.crb_map(sim, cfg.per_pixel)
    evalbench.write_map_csv(out / "varmap.csv", vmap.values, vmap.counts)
    evalbench.write_map_csv(out / "crbmap.csv", crb, vmap.counts)
    if args.svg:
        (out / "varmap.svg").write_text(evalbench.heatmap_svg(vmap.values, "predicted position variance"))
        (out / "crbmap.svg").write_text(evalbench.heatmap_svg(crb, "CRB"))
    edge, inner = vmap.ring_means()
    print(f"variance edge/interior {edge:.5f}/{inner:.5f}; CRB center {crb[sim.L // 2, sim.L // 2]:.5f} -> {out}")


def cmd_sweep(args, cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    base = cfg.train_config(cfg.seeds[0])
    rows = evalbench.nll_vs_samples_sweep(
        cfg.build_model, cfg.source(), base, cfg.bench_samples, cfg.seeds,
        on_row=lambda r: print(f"{r.mode}@{r.samples} seed {r.seed}: {r.best_val_nll:.6f}", flush=True))
    evalbench.write_nll_sweep_csv(out / "nll_sweep.csv", rows)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "maps": cmd_maps, "sweep": cmd_sweep}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise ParameterError(f"{THREADS_ENV} must be >= 1")
    return n


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        limit = _thread_limit()
        with threadpool_limits(limits=limit):
            COMMANDS[args.command](args, cfg)
    except ParameterError as exc:
        print(f"utvi {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"utvi {args.command}: numerical failure: {exc} {exc.diagnostics()}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactMismatch as exc:
        print(f"utvi {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"utvi {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
