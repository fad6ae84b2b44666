"""Command-line entry point: ``edsdiff <subcommand> [flags]``.

Precedence for every setting: command-line flag > config file > built-in default.
Each run directory receives ``config.json`` (the fully resolved configuration)
so the run can be repeated with ``--config <out>/config.json``.

On failure the process exits nonzero and prints one line to stderr::

    error: <category>: <message>
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    CheckpointError,
    ConfigError,
    CsvFormatError,
    ExperimentConfig,
    config_from_dict,
    load_checkpoint,
    make_mixture,
    save_checkpoint,
)
from .guidance import make_scheme
from .metrics import REPORT_COLUMNS, evaluate, vanishing_analysis, write_histogram, write_report
from .numerics import derive_seed
from .samplers import SamplerConfig, read_samples, read_trajectories, sample_batch, write_samples, write_trajectories
from .schedule import build_linear
from .training import (
    CLASSIFIER_COLUMNS,
    EPSILON_COLUMNS,
    TrainConfig,
    train_classifier,
    train_epsilon,
    write_telemetry,
)

log = logging.getLogger("edsdiff")

DONE_MARKER = ".complete"

EXIT_CODES = {
    "error": 1,
    "config": 2,
    "checkpoint": 3,
    "schedule_mismatch": 3,
    "input": 4,
    "run_exists": 5,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------- helpers


def resolve_config(config_path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Config file (or {}) with dotted-key overrides applied, validated."""
    data: dict = {}
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"<root>: invalid JSON at line {e.lineno}: {e.msg}") from None
        except FileNotFoundError:
            raise ConfigError(f"<root>: config file {config_path} not found") from None
        if not isinstance(data, dict):
            raise ConfigError("<root>: config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, name = key.split(".")
        data.setdefault(section, {})[name] = value
    return config_from_dict(data)


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if (out / DONE_MARKER).exists() and not force:
        raise CliError("run_exists", f"{out} holds a completed run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / DONE_MARKER).unlink(missing_ok=True)
    return out


def finish(out: Path, cfg: ExperimentConfig) -> None:
    (out / "config.json").write_text(cfg.echo())
    (out / DONE_MARKER).write_text("")


def schedule_of(cfg: ExperimentConfig):
    s = cfg.schedule
    return build_linear(s.T, s.beta_start, s.beta_end)


def schedule_meta(cfg: ExperimentConfig) -> dict:
    sch = schedule_of(cfg)
    return {**sch.params(), "sigma_variant": cfg.schedule.sigma_variant}


def _check_schedule(meta: dict, cfg: ExperimentConfig, path) -> None:
    want = schedule_meta(cfg)
    have = meta.get("schedule", {})
    for k in ("T", "beta_start", "beta_end"):
        if have.get(k) != want[k]:
            raise CliError("schedule_mismatch",
                           f"{path}: checkpoint schedule {k}={have.get(k)!r} but config gives {want[k]!r}")


def scheme_from(cfg: ExperimentConfig):
    g = cfg.guidance
    params = {
        "none": {},
        "fixed": {"s": g.s},
        "range": {"C": g.C, "t_cut": g.t_cut if g.t_cut is not None else round(0.7 * cfg.schedule.T)},
        "time": {"C": g.C},
        "gradnorm": {"C": g.C, "M": g.M},
        "eds": {"gamma": g.gamma, "entropy_floor": g.entropy_floor, "s_max": g.s_max},
    }[g.scheme]
    return make_scheme(g.scheme, **params)


def sample_labels(n: int, K: int) -> np.ndarray:
    """Conditioning labels cycle through the classes: 0, 1, ..., K-1, 0, ..."""
    return np.arange(n) % K


def real_reference(cfg: ExperimentConfig):
    """Held-out real draw: n_real points split evenly over classes, seeded by metrics.real_seed."""
    d = cfg.dataset
    per = max(cfg.metrics.n_real // d.K, 2)
    spec = d.model_copy(update={"n_per_class": per, "seed": cfg.metrics.real_seed}).spec()
    return make_mixture(spec), spec.component_means()


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> None:
    x, y = make_mixture(cfg.dataset.spec())
    write_samples(out / "data.csv", x, y)
    log.info("wrote %d points to %s", len(x), out / "data.csv")


def _train_config(cfg: ExperimentConfig, hidden, steps) -> TrainConfig:
    t = cfg.training
    return TrainConfig(eta=t.eta, learning_rate=t.learning_rate, batch_size=t.batch_size, total_steps=steps,
                       seed=t.seed, eval_interval=t.eval_interval, hidden=list(hidden),
                       activation=cfg.models.activation, val_fraction=t.val_fraction)


def cmd_train_eps(cfg: ExperimentConfig, out: Path) -> None:
    x, _ = make_mixture(cfg.dataset.spec())
    tel: list = []
    tc = _train_config(cfg, cfg.models.eps_hidden, cfg.training.eps_steps)
    model = train_epsilon(x, schedule_of(cfg), tc, telemetry=tel)
    write_telemetry(out / "train_eps.csv", EPSILON_COLUMNS, tel)
    save_checkpoint(model, {"kind": "epsilon", "schedule": schedule_meta(cfg), "seed": cfg.training.seed},
                    out / "eps.ckpt")


def cmd_train_clf(cfg: ExperimentConfig, out: Path) -> None:
    x, y = make_mixture(cfg.dataset.spec())
    tel: list = []
    tc = _train_config(cfg, cfg.models.clf_hidden, cfg.training.clf_steps)
    model = train_classifier(x, y, schedule_of(cfg), tc, n_classes=cfg.dataset.K, telemetry=tel)
    write_telemetry(out / "train_clf.csv", CLASSIFIER_COLUMNS, tel)
    save_checkpoint(model, {"kind": "classifier", "schedule": schedule_meta(cfg), "seed": cfg.training.seed,
                            "eta": cfg.training.eta, "n_classes": cfg.dataset.K}, out / "clf.ckpt")


def _load_models(cfg, eps_ckpt, clf_ckpt):
    try:
        eps, meta = load_checkpoint(eps_ckpt, kind="epsilon")
        _check_schedule(meta, cfg, eps_ckpt)
        clf = None
        if clf_ckpt is not None:
            clf, cmeta = load_checkpoint(clf_ckpt, kind="classifier")
            _check_schedule(cmeta, cfg, clf_ckpt)
            if clf.layer_dims[-1] != cfg.dataset.K:
                raise CliError("checkpoint", f"{clf_ckpt}: classifier has {clf.layer_dims[-1]} classes, config K={cfg.dataset.K}")
    except FileNotFoundError as e:
        raise CliError("input", f"{e.filename}: no such file") from None
    return eps, clf


def run_sampling(cfg: ExperimentConfig, eps, clf):
    scheme = scheme_from(cfg)
    s = cfg.sampler
    sc = SamplerConfig(method=s.method, steps=s.steps, sigma_variant=cfg.schedule.sigma_variant,
                       ddim_eta=s.ddim_eta, scheme=scheme, seed=s.seed, n_samples=s.n_samples,
                       chunk_size=s.chunk_size, workers=s.workers)
    labels = sample_labels(s.n_samples, cfg.dataset.K) if clf is not None else None
    if scheme.tag != "none" and clf is None:
        raise CliError("config", f"guidance.scheme: {scheme.tag!r} needs --clf-ckpt")
    samples, trajs = sample_batch(eps, clf, schedule_of(cfg), sc, labels)
    return samples, labels, trajs


def cmd_sample(cfg: ExperimentConfig, out: Path, eps_ckpt, clf_ckpt=None) -> None:
    eps, clf = _load_models(cfg, eps_ckpt, clf_ckpt)
    samples, labels, trajs = run_sampling(cfg, eps, clf)
    write_samples(out / "samples.csv", samples, labels)
    write_trajectories(out / "trajectories.csv", trajs)


def evaluate_samples(cfg: ExperimentConfig, samples, labels):
    (xr, yr), means = real_reference(cfg)
    return evaluate(xr, yr, samples, labels, means, k=cfg.metrics.k)


def cmd_eval(cfg: ExperimentConfig, out: Path, samples_path) -> None:
    try:
        samples, labels = read_samples(samples_path)
    except FileNotFoundError:
        raise CliError("input", f"{samples_path}: no such file") from None
    report = evaluate_samples(cfg, samples, labels)
    write_report(report, out / "metrics.json", out / "metrics.csv")
    log.info("frechet=%.5f precision=%.3f recall=%.3f", report.frechet, report.precision, report.recall)


def cmd_analyze(cfg: ExperimentConfig, out: Path, traj_path) -> dict:
    try:
        trajs = read_trajectories(traj_path)
    except FileNotFoundError:
        raise CliError("input", f"{traj_path}: no such file") from None
    m = cfg.metrics
    ana = vanishing_analysis(trajs, m.threshold_fraction, cfg.dataset.K, cfg.schedule.T, m.n_bins, m.crossing_mode)
    write_histogram(ana, out / "vanishing_hist.csv")
    with open(out / "crossings.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "label", "crossing_t"])
        for tr, c in zip(trajs, ana.crossings):
            w.writerow([tr.sample_id, "" if tr.label is None else tr.label, "" if c is None else c])
    summary = ana.summary()
    (out / "vanishing_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


SWEEP_PARAMS = {"gamma", "s", "C", "M", "t_cut", "entropy_floor", "s_max"}


def cmd_sweep(cfg: ExperimentConfig, out: Path, eps_ckpt, clf_ckpt, param: str, grid, sort_by: str = "frechet"):
    """One sample+eval run per grid value; writes sweep.csv sorted by ``sort_by``."""
    if param not in SWEEP_PARAMS:
        raise CliError("config", f"--param: expected one of {sorted(SWEEP_PARAMS)}, got {param!r}")
    if sort_by not in REPORT_COLUMNS:
        raise CliError("config", f"--sort-by: expected one of {REPORT_COLUMNS}")
    eps, clf = _load_models(cfg, eps_ckpt, clf_ckpt)
    rows = []
    for i, value in enumerate(grid):
        value = int(value) if param == "t_cut" else float(value)
        point_cfg = cfg.model_copy(deep=True)
        setattr(point_cfg.guidance, param, value)
        point_cfg.sampler.seed = derive_seed(cfg.sampler.seed, i)
        point_cfg = config_from_dict(point_cfg.model_dump())
        samples, labels, _ = run_sampling(point_cfg, eps, clf)
        report = evaluate_samples(point_cfg, samples, labels)
        point_dir = out / f"point_{i:03d}"
        point_dir.mkdir(exist_ok=True)
        write_samples(point_dir / "samples.csv", samples, labels)
        write_report(report, point_dir / "metrics.json", point_dir / "metrics.csv")
        (point_dir / "config.json").write_text(point_cfg.echo())
        rows.append([i, param, value] + report.csv_row())
        log.info("%s=%s frechet=%.5f", param, value, report.frechet)
    key = 3 + REPORT_COLUMNS.index(sort_by)
    rows.sort(key=lambda r: (np.inf if r[key] is None else r[key], r[0]))
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["grid_index", "param", "value"] + REPORT_COLUMNS)
        w.writerows(rows)
    return rows


# ---------------------------------------------------------------- argument parsing


def _grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edsdiff", description="Entropy-driven classifier guidance on toy diffusion models")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="overwrite a completed run directory")
        sp.add_argument("--T", type=int, help="diffusion length (schedule.T)")
        sp.add_argument("-v", "--verbose", action="store_true")

    def sampling(sp):
        sp.add_argument("--eps-ckpt", required=True)
        sp.add_argument("--clf-ckpt")
        sp.add_argument("--method", choices=["ddpm", "ddim"])
        sp.add_argument("--steps", type=int)
        sp.add_argument("--n-samples", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--scheme", choices=["none", "fixed", "range", "time", "gradnorm", "eds"])
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--s", type=float, dest="scale")
        sp.add_argument("--C", type=float)
        sp.add_argument("--M", type=float)
        sp.add_argument("--t-cut", type=int)

    sp = sub.add_parser("gen-data", help="write the toy mixture dataset")
    common(sp)
    for name in ("train-eps", "train-clf"):
        sp = sub.add_parser(name, help=f"train the {'noise predictor' if name == 'train-eps' else 'classifier'}")
        common(sp)
        sp.add_argument("--steps", type=int)
        if name == "train-clf":
            sp.add_argument("--eta", type=float, help="entropy-constraint weight (0 disables)")
    sp = sub.add_parser("sample", help="generate samples with optional guidance")
    common(sp)
    sampling(sp)
    sp = sub.add_parser("eval", help="score a samples CSV against a real draw")
    common(sp)
    sp.add_argument("--samples", required=True)
    sp = sub.add_parser("analyze", help="vanishing-point analysis of a trajectory CSV")
    common(sp)
    sp.add_argument("--trajectories", required=True)
    sp.add_argument("--threshold", type=float, help="fraction of ln K")
    sp.add_argument("--mode", choices=["sustained", "first"])
    sp.add_argument("--K", type=int, help="class count (dataset.K)")
    sp = sub.add_parser("sweep", help="sample+eval over a grid of one guidance hyperparameter")
    common(sp)
    sampling(sp)
    sp.add_argument("--param", required=True)
    sp.add_argument("--grid", required=True, type=_grid)
    sp.add_argument("--sort-by", default="frechet")
    return p


def _overrides(args) -> dict:
    o = {"schedule.T": args.T}
    cmd = args.command
    if cmd == "gen-data":
        o["dataset.seed"] = args.seed
    elif cmd in ("train-eps", "train-clf"):
        o["training.seed"] = args.seed
        o["training.eps_steps" if cmd == "train-eps" else "training.clf_steps"] = args.steps
        if cmd == "train-clf":
            o["training.eta"] = args.eta
    elif cmd in ("sample", "sweep"):
        o.update({
            "sampler.seed": args.seed, "sampler.method": args.method, "sampler.steps": args.steps,
            "sampler.n_samples": args.n_samples, "sampler.workers": args.workers,
            "guidance.scheme": args.scheme, "guidance.gamma": args.gamma, "guidance.s": args.scale,
            "guidance.C": args.C, "guidance.M": args.M, "guidance.t_cut": args.t_cut,
        })
    elif cmd == "eval":
        o["metrics.real_seed"] = args.seed
    elif cmd == "analyze":
        o.update({"metrics.threshold_fraction": args.threshold, "metrics.crossing_mode": args.mode,
                  "dataset.K": args.K})
    return o


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = resolve_config(args.config, _overrides(args))
    out = prepare_out(args.out, args.force)
    cmd = args.command
    if cmd == "gen-data":
        cmd_gen_data(cfg, out)
    elif cmd == "train-eps":
        cmd_train_eps(cfg, out)
    elif cmd == "train-clf":
        cmd_train_clf(cfg, out)
    elif cmd == "sample":
        cmd_sample(cfg, out, args.eps_ckpt, args.clf_ckpt)
    elif cmd == "eval":
        cmd_eval(cfg, out, args.samples)
    elif cmd == "analyze":
        summary = cmd_analyze(cfg, out, args.trajectories)
        print(json.dumps(summary))
    elif cmd == "sweep":
        cmd_sweep(cfg, out, args.eps_ckpt, args.clf_ckpt, args.param, args.grid, args.sort_by)
    finish(out, cfg)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except CliError as e:
        category, msg = e.category, str(e)
    except ConfigError as e:
        category, msg = "config", str(e)
    except CheckpointError as e:
        category, msg = "checkpoint", str(e)
    except CsvFormatError as e:
        category, msg = "input", str(e)
    except (ValueError, OSError) as e:
        category, msg = "error", str(e)
    print(f"error: {category}: {msg}".replace("\n", " "), file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
