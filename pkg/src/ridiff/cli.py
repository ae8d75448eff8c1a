"""Command line entry point: ``ridiff pretrain|run|eval|soup|report``.

Exit status: 0 success, 1 invalid input or configuration, 2 file system
failure, 3 training or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import io as rio
from .config import Config, default_config, parse_config
from .corpus import generate_corpus
from .diffusion import PretrainConfig, build_schedule, pretrain
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .metrics import METRICS, EvalContext, MetricsHistory, evaluate, forgetting
from .rewards import JpegPipelineConfig, make_reward_tasks
from .ril import model_soup, run_sequence

log = logging.getLogger("ridiff")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_FAILED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- shared setup -------------------------------------------------------
def load_config(args) -> Config:
    cfg = parse_config(args.config) if getattr(args, "config", None) else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def build_world(cfg: Config):
    """Corpus, schedule, reward tasks and evaluation context described by ``cfg``."""
    c = cfg["corpus"]
    corpus = generate_corpus(c["seed"], c["K"], c["styles_per_class"], c["images_per_condition"], c["test_fraction"])
    d = cfg["diffusion"]
    schedule = build_schedule(d["ddim_steps"], d["beta_min"], d["beta_max"])
    r = cfg["rewards"]
    jpeg = JpegPipelineConfig(quality=r["quality"], temperature=r["temperature"])
    rewards = make_reward_tasks(r["scorer_seed"], jpeg, r["scales"])
    e = cfg["eval"]
    ctx = EvalContext.build(corpus, rewards, schedule, e["n_reference"], e["quality"], seed=c["seed"])
    return corpus, schedule, rewards, ctx


def pretrain_config(cfg: Config) -> PretrainConfig:
    p = cfg["pretrain"]
    return PretrainConfig(epochs=p["epochs"], batch=p["batch"], lr=p["lr"], seed=cfg.seed,
                          hidden=p["hidden"], n_hidden=p["n_hidden"])


def prepare_out(path, force: bool):
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise ContractError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def manifest(cfg: Config, out: str) -> dict:
    return {"name": cfg.name, "config": cfg.to_dict(), "corpus_seed": cfg["corpus"]["seed"],
            "config_hash": cfg.content_hash(), "out": os.path.abspath(out)}


def build_report(history: MetricsHistory) -> dict:
    metrics = {}
    for m in METRICS:
        metrics[m] = {
            "values": history.values(m),
            "direction": "higher" if history.directions[m] else "lower",
            "active_from": history.active_from.get(m),
            "forgetting": forgetting(history, m),
        }
    return {"tasks": [r.task_index for r in history.records], "metrics": metrics}


def _fmt(v):
    return "-" if v is None else f"{v:.4g}"


def render_table(history: MetricsHistory) -> str:
    """Per-checkpoint metric table; the last line shows final values with forgetting in parentheses."""
    width = 20
    lines = ["task".ljust(6) + "".join(m.rjust(width) for m in METRICS)]
    for rec in history.records:
        cells = []
        for m in METRICS:
            act = history.active_from.get(m)
            shown = act is not None and rec.task_index >= act or rec.task_index == 0
            cells.append((_fmt(rec.values[m]) if shown else "-").rjust(width))
        lines.append(str(rec.task_index).ljust(6) + "".join(cells))
    final = []
    for m in METRICS:
        f = forgetting(history, m)
        v = history.records[-1].values[m]
        final.append((f"{_fmt(v)} ({_fmt(f)})" if f is not None else f"{_fmt(v)} (-)").rjust(width))
    lines.append("final".ljust(6) + "".join(final))
    return "\n".join(lines)


def write_curves(path, history: MetricsHistory):
    with open(path, "w") as f:
        f.write("task_index," + ",".join(METRICS) + "\n")
        for rec in history.records:
            f.write(f"{rec.task_index}," + ",".join(repr(float(rec.values[m])) for m in METRICS) + "\n")


# -- commands -----------------------------------------------------------
def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    out = args.out or "pretrain-out"
    prepare_out(out, args.force)
    corpus, schedule, _, _ = build_world(cfg)
    res = pretrain(corpus, pretrain_config(cfg), schedule)
    rio.save_model(os.path.join(out, "pretrained.rid"), res.model)
    write_json(os.path.join(out, "manifest.json"), {**manifest(cfg, out), "final_loss": res.final_loss})
    print(f"pretrained model written to {os.path.join(out, 'pretrained.rid')} (final loss {res.final_loss:.4f})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = args.out or "run-out"
    tasks = cfg.task_configs()
    prepare_out(out, args.force)
    corpus, schedule, rewards, ctx = build_world(cfg)
    if args.pretrained:
        model = rio.load_model(args.pretrained)
    else:
        model = pretrain(corpus, pretrain_config(cfg), schedule).model
        rio.save_model(os.path.join(out, "pretrained.rid"), model)
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    n_cond = len(corpus.test_conditions)

    def save_grid(t, samples):
        d = os.path.join(out, "samples", f"task_{t}")
        os.makedirs(d, exist_ok=True)
        rio.write_pgm(os.path.join(d, "grid.pgm"), rio.sample_grid(samples, n_cond))

    def on_checkpoint(t, m, rec):
        rio.save_model(os.path.join(out, "checkpoints", f"task_{t}.rid"), m)
        save_grid(t, rec.samples)
        log.info("task %d metrics %s", t, rec.values)

    e = cfg["eval"]
    res = run_sequence(tasks, model, corpus, rewards, schedule, ctx, seed=cfg.seed, rank=cfg["ril"]["lora_rank"],
                       eval_samples=e["samples_per_condition"], eval_seed=e["seed"], on_checkpoint=on_checkpoint)
    save_grid(0, res.history.records[0].samples)
    rio.write_metrics_csv(os.path.join(out, "metrics.csv"), res.history)
    report = build_report(res.history)
    report["noise_hashes"] = [r.noise_hash for r in res.history.records]
    write_json(os.path.join(out, "report.json"), report)
    write_json(os.path.join(out, "manifest.json"), manifest(cfg, out))
    print(render_table(res.history))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    model = rio.load_model(args.checkpoint)
    corpus, _, _, ctx = build_world(cfg)
    e = cfg["eval"]
    rec = evaluate(model, corpus.test_conditions, ctx, e["samples_per_condition"], e["seed"])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rio.write_metrics_csv(os.path.join(args.out, "metrics.csv"), MetricsHistory(records=[rec]))
    print(json.dumps(rec.values, indent=2, sort_keys=True))
    return EXIT_OK


def parse_coefficients(text: str):
    try:
        return [float(x) for x in text.split(",")]
    except ValueError as e:
        raise ConfigError(f"--coefficients: {e}", "coefficients") from e


def cmd_soup(args) -> int:
    cfg = load_config(args)
    if args.coefficients:
        coef = parse_coefficients(args.coefficients)
    elif len(args.checkpoints) == 3:
        coef = list(cfg.soup_coefficients())
    else:
        raise ConfigError("--coefficients is required unless exactly three checkpoints are given", "coefficients")
    models = [rio.load_model(p) for p in args.checkpoints]
    soup = model_soup(models, coef)
    out = args.out or "soup.rid"
    rio.save_model(out, soup)
    print(json.dumps({"coefficients": coef, "soup_alpha": cfg["soup"]["alpha"], "soup_beta": cfg["soup"]["beta"],
                      "out": out}))
    return EXIT_OK


def cmd_report(args) -> int:
    history = rio.read_metrics_csv(os.path.join(args.run_dir, "metrics.csv"))
    if not history.records:
        raise ContractError("metrics.csv holds no records")
    print(render_table(history))
    write_curves(os.path.join(args.run_dir, "curves.csv"), history)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ridiff", description="Reward fine-tuning of a small diffusion model across task sequences.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int, help="override the run seed")
        if out:
            sp.add_argument("--out", help="output location")
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("pretrain", help="train the task-0 model")
    common(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("run", help="fine-tune across the configured task sequence")
    common(sp)
    sp.add_argument("--pretrained", help="reuse a pretrained checkpoint instead of training one")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("eval", help="evaluate one checkpoint on the held-out conditions")
    sp.add_argument("checkpoint")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("soup", help="convex combination of checkpoints")
    sp.add_argument("checkpoints", nargs="+")
    sp.add_argument("--coefficients", help="comma-separated weights summing to 1")
    common(sp)
    sp.set_defaults(fn=cmd_soup)

    sp = sub.add_parser("report", help="render the metric table of a finished run")
    sp.add_argument("run_dir")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"ridiff: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("RID_THREADS")
    if threads is not None and not (threads.isdigit() and int(threads) >= 1):
        print(f"ridiff: RID_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as e:
        print(f"ridiff: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"ridiff: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, NumericError) as e:
        print(f"ridiff: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
