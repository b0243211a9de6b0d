import argparse
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime
from logging.handlers import RotatingFileHandler

from config import load_configs, parse_overrides, write_config_file
from dataset import (Domain, filter_and_split, format_statistics, ingest_log, load_split,
                     save_split, split_statistics)
from evaluation import EvalConfig, evaluate
from experiments import noise_robustness, run_ablations, step_sweep
from manifest import start_manifest, write_manifest
from network import VARIANTS, ModelConfig
from reports import (format_report, write_ablation, write_metrics_csv, write_report_text,
                     write_robustness, write_sweep)
from synthetic import (SyntheticConfig, generate_synthetic, interest_agreement,
                       off_cluster_fraction, save_ground_truth, write_events)
from trainer import TrainConfig, fit, load_model

LOG_FILE = "./dpg-diff.log"

# Log Rotation
max_log_size = 5 * 1024 * 1024  # 5MB
backup_count = 3  # Keep 3 logs
logger = logging.getLogger("dpgdiff_logger")


def setup_logging(log_file=LOG_FILE):
    for handler in list(logger.handlers):
        if isinstance(handler, RotatingFileHandler):
            logger.removeHandler(handler)
            handler.close()
    handler = RotatingFileHandler(log_file, maxBytes=max_log_size, backupCount=backup_count)
    handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(message)s"))
    logger.setLevel(logging.DEBUG)
    logger.addHandler(handler)


CSV_SCHEMAS = """output files:
  metrics.csv       domain, metric, value, value_x100, n_users  (one row per domain x metric)
  robustness.csv    rate, domain, metric, value  (domain ALL rows: retained_fraction, edit_fraction)
  sweep.csv         n_steps, domain, metric, value
  sweep_seconds.csv n_steps, seconds
  ablation.csv      variant, domain, metric, value, value_x100, n_seeds
metrics: MRR (cut at 10), N@5, N@10, H@5, H@10"""


def _csv_list(text, cast):
    return [cast(part) for part in text.split(",") if part.strip()]


def _configs(args, defaults):
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        seed_key = "rng_seed" if isinstance(defaults[0], SyntheticConfig) else "seed"
        overrides[seed_key] = str(args.seed)
    return load_configs(defaults, args.config, overrides)


# ----------------- Commands -----------------
def cmd_prepare(args):
    labels = {args.domain_x_label: Domain.X, args.domain_y_label: Domain.Y}
    events, errors = ingest_log(args.input, args.format, labels)
    if errors:
        print(f"Skipped {len(errors)} malformed rows (see {LOG_FILE})")
    split = filter_and_split(events, args.min_interactions, args.min_per_domain, args.max_seq_len,
                             args.min_item_interactions)
    save_split(split, args.out)
    print(format_statistics(split_statistics(split)))
    print(f"Split written to {args.out}")
    outputs = [os.path.join(args.out, name) for name in ("train.tsv", "valid.tsv", "test.tsv", "vocab.tsv")]
    return outputs, [], [args.input]


def cmd_synth(args):
    (cfg,) = _configs(args, [SyntheticConfig()])
    events, truth = generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    events_path = os.path.join(args.out, "events.csv")
    truth_path = os.path.join(args.out, "ground_truth.json")
    config_path = os.path.join(args.out, "synthetic.cfg")
    write_events(events, events_path)
    save_ground_truth(truth, truth_path)
    write_config_file(config_path, cfg)
    agreement, chance = interest_agreement(events, truth)
    print(f"Wrote {len(events)} events for {cfg.n_users} users to {events_path}")
    print(f"Off-cluster fraction {off_cluster_fraction(events, truth):.3f} (noise_rate {cfg.noise_rate}), "
          f"cross-domain interest agreement {agreement:.3f} (chance {chance:.3f})")
    return [events_path, truth_path, config_path], [cfg], []


def cmd_train(args):
    mcfg, tcfg, ecfg = _configs(args, [ModelConfig(), TrainConfig(), EvalConfig()])
    split = load_split(args.data)
    os.makedirs(args.out, exist_ok=True)
    config_path = os.path.join(args.out, "train.cfg")
    write_config_file(config_path, mcfg, tcfg, ecfg)
    state = fit(split, mcfg, tcfg, ecfg, out_dir=args.out, resume_dir=args.resume)
    if state.best_metric is not None:
        print(f"Best validation N@10 {state.best_metric:.4f} at epoch {state.best_epoch + 1}")
    outputs = [config_path, os.path.join(args.out, "checkpoint"), os.path.join(args.out, "best"),
               os.path.join(args.out, "history.json")]
    return outputs, [mcfg, tcfg, ecfg], [args.data]


def _held_out(split, name):
    held = split.test if name == "test" else split.validation
    if not held:
        raise ValueError(f"The {name} split is empty")
    return held


def cmd_eval(args):
    _, _, ecfg = _configs(args, [ModelConfig(), TrainConfig(), EvalConfig()])
    if args.n_steps is not None:
        ecfg = replace(ecfg, n_steps=args.n_steps)
    model = load_model(args.ckpt)
    split = load_split(args.data)
    report = evaluate(_held_out(split, args.split), model, ecfg)
    os.makedirs(args.out, exist_ok=True)
    title = f"{model.cfg.variant} on {args.split} (x100)"
    print(format_report(report, title))
    outputs = [write_metrics_csv(os.path.join(args.out, "metrics.csv"), report),
               write_report_text(os.path.join(args.out, "report.txt"), report, title)]
    return outputs, [ecfg], [args.ckpt, args.data]


def cmd_ablate(args):
    mcfg, tcfg, ecfg = _configs(args, [ModelConfig(), TrainConfig(), EvalConfig()])
    variants = _csv_list(args.variants, str)
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"Unknown variant {variant!r}, expected one of {VARIANTS}")
    seeds = _csv_list(args.seeds, int) if args.seeds else [tcfg.seed]
    split = load_split(args.data)
    results = run_ablations(variants, seeds, split, mcfg, tcfg, ecfg,
                            out_dir=os.path.join(args.out, "runs"))
    for variant, reports in results.items():
        mean = sum(r.mean("N@10") for r in reports) / len(reports)
        print(f"{variant:<16} N@10 {100 * mean:.2f} over seeds {seeds}")
    path = write_ablation(os.path.join(args.out, "ablation.csv"), results)
    return [path], [mcfg, tcfg, ecfg], [args.data]


def cmd_robust(args):
    _, _, ecfg = _configs(args, [ModelConfig(), TrainConfig(), EvalConfig()])
    model = load_model(args.ckpt)
    split = load_split(args.data)
    rows = noise_robustness(_held_out(split, args.split), model, _csv_list(args.rates, float), ecfg)
    return list(write_robustness(args.out, rows)), [ecfg], [args.ckpt, args.data]


def cmd_sweep(args):
    _, _, ecfg = _configs(args, [ModelConfig(), TrainConfig(), EvalConfig()])
    model = load_model(args.ckpt)
    split = load_split(args.data)
    rows = step_sweep(_held_out(split, args.split), model, _csv_list(args.steps, int), ecfg)
    csv_path, png_path = write_sweep(args.out, rows)
    return [csv_path, png_path, os.path.join(args.out, "sweep_seconds.csv")], [ecfg], [args.ckpt, args.data]


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robust": cmd_robust,
    "sweep": cmd_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dpg-diff",
        description="Diffusion-based cross-domain sequential recommendation.",
        epilog=CSV_SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--log-file", default=LOG_FILE, help="Rotating log file location")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="Flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="Override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="Seed for every random stream")
        return p

    p = sub.add_parser("prepare", help="Ingest a log, filter users and write a leave-one-out split")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "tsv"], default="csv")
    p.add_argument("--out", required=True)
    p.add_argument("--min-interactions", type=int, default=10)
    p.add_argument("--min-per-domain", type=int, default=3)
    p.add_argument("--min-item-interactions", type=int, default=0)
    p.add_argument("--max-seq-len", type=int, default=15)
    p.add_argument("--domain-x-label", default="X")
    p.add_argument("--domain-y-label", default="Y")

    p = with_config(sub.add_parser("synth", help="Generate a synthetic cross-domain log"))
    p.add_argument("--out", required=True)

    p = with_config(sub.add_parser("train", help="Train a model on a prepared split"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="Checkpoint directory to continue from")

    for name, help_text in (("eval", "Evaluate a checkpoint"),
                            ("robust", "Evaluate under injected noise"),
                            ("sweep", "Evaluate with fewer inference steps")):
        p = with_config(sub.add_parser(name, help=help_text))
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", choices=["test", "valid"], default="test")
        if name == "eval":
            p.add_argument("--n-steps", type=int)
        if name == "robust":
            p.add_argument("--rates", default="0,0.1,0.2,0.3")
        if name == "sweep":
            p.add_argument("--steps", default="1,2,5,10,20,50")

    p = with_config(sub.add_parser("ablate", help="Train and evaluate model variants"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seeds", help="Comma-separated seeds (default: the configured seed)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_file)
    logger.info(f"Starting {args.command}")
    started = datetime.now()
    try:
        outputs, configs, data_paths = COMMANDS[args.command](args)
        missing = [p for p in outputs if not os.path.exists(p)]
        if missing:
            raise FileNotFoundError(f"Expected outputs were not written: {', '.join(missing)}")
        seeds = sorted({getattr(c, "seed", getattr(c, "rng_seed", None)) for c in configs} - {None})
        manifest = start_manifest(args.command, configs, data_paths, seeds, started)
        write_manifest(args.out, manifest, outputs)
        return 0
    except KeyboardInterrupt:
        logger.info("Process interrupted by user")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return 1
    finally:
        logger.info("Process Exiting")


if __name__ == "__main__":
    sys.exit(main())
