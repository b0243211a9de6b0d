"""Experiment harnesses: noise robustness, inference-step sweep, ablations."""

import logging
import os
import time
from dataclasses import dataclass, replace

from augment import perturb_sequence
from config import STREAM_NOISE, stream
from dataset import Domain, HeldOut
from evaluation import EvalConfig, domain_histories, evaluate
from network import VARIANTS
from trainer import best_model, fit

logger = logging.getLogger("dpgdiff_logger")

REFERENCE_RETAINED_AT_30 = 0.85


@dataclass
class RobustnessRow:
    rate: float
    report: object
    retained_fraction: float
    edit_fraction: float


@dataclass
class SweepRow:
    n_steps: int
    report: object
    seconds: float


def retained_fraction(value, baseline):
    if value == baseline:
        return 1.0
    return value / baseline if baseline > 0 else float("nan")


def perturb_held_out(held_out, rate, vocab_sizes, seed, max_seq_len):
    """Insert/Substitute noise on every input sequence; returns (held_out, edit_fraction)."""
    rate_key = int(round(rate * 1_000_000))
    perturbed, edits, positions = [], 0, 0
    for h in held_out:
        rng = stream(seed, STREAM_NOISE, rate_key, h.sequence.user_index)
        seq, n_edits = perturb_sequence(h.sequence, rate, rng, vocab_sizes, max_seq_len)
        perturbed.append(HeldOut(seq, h.target_item, h.target_domain))
        edits += n_edits
        positions += len(h.sequence)
    return perturbed, (edits / positions if positions else 0.0)


def noise_robustness(held_out, model, rates, cfg=None):
    """Evaluate under increasing noise; negatives always exclude the clean history."""
    cfg = cfg or EvalConfig()
    for rate in rates:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"Noise rate must be in [0, 1), got {rate}")
    vocab_sizes = {Domain.X: model.cfg.n_items_x, Domain.Y: model.cfg.n_items_y}
    histories = domain_histories(held_out)
    baseline = evaluate(held_out, model, cfg, histories=histories)
    base_ndcg = baseline.mean("N@10")

    rows = []
    for rate in rates:
        if rate == 0.0:
            report, edit_fraction = baseline, 0.0
        else:
            noisy, edit_fraction = perturb_held_out(held_out, rate, vocab_sizes, cfg.seed,
                                                    model.cfg.max_seq_len)
            report = evaluate(noisy, model, cfg, histories=histories)
        rows.append(RobustnessRow(rate, report, retained_fraction(report.mean("N@10"), base_ndcg),
                                  edit_fraction))
        print(f"Noise {rate:.2f}: N@10={report.mean('N@10'):.4f} retained={rows[-1].retained_fraction:.3f}")
    for row in rows:
        if abs(row.rate - 0.3) < 1e-9:
            logger.info(f"Retained fraction at 30% noise: {row.retained_fraction:.3f} "
                        f"(reference {REFERENCE_RETAINED_AT_30:.2f})")
    return rows


def step_sweep(held_out, model, step_counts, cfg=None):
    """Evaluate with strided reverse chains of each length in ``step_counts``."""
    cfg = cfg or EvalConfig()
    for n_steps in step_counts:
        if not 1 <= n_steps <= model.cfg.T:
            raise ValueError(f"n_steps must be in [1, {model.cfg.T}], got {n_steps}")
    rows = []
    for n_steps in step_counts:
        started = time.perf_counter()
        report = evaluate(held_out, model, replace(cfg, n_steps=n_steps))
        seconds = time.perf_counter() - started
        rows.append(SweepRow(n_steps, report, seconds))
        print(f"Steps {n_steps}: N@10={report.mean('N@10'):.4f} ({seconds:.2f}s)")
    return rows


def run_ablation(variant, split, mcfg, tcfg, ecfg=None, out_dir=None):
    """Train one variant and evaluate its best checkpoint on the test split."""
    if variant not in VARIANTS:
        raise ValueError(f"Unknown variant {variant!r}, expected one of {VARIANTS}")
    ecfg = ecfg or EvalConfig(seed=tcfg.seed)
    print(f"Ablation: training {variant} (seed {tcfg.seed})")
    state = fit(split, replace(mcfg, variant=variant), tcfg, ecfg, out_dir)
    report = evaluate(split.test, best_model(state), ecfg)
    logger.info(f"Ablation {variant} seed {tcfg.seed}: N@10={report.mean('N@10'):.4f}")
    return report


def run_ablations(variants, seeds, split, mcfg, tcfg, ecfg=None, out_dir=None):
    """``{variant: [report per seed]}``; every variant sees the same seeds and split."""
    ecfg = ecfg or EvalConfig()
    results = {}
    for variant in variants:
        results[variant] = []
        for seed in seeds:
            run_dir = os.path.join(out_dir, variant, f"seed{seed}") if out_dir else None
            results[variant].append(run_ablation(variant, split, mcfg, replace(tcfg, seed=seed),
                                                 replace(ecfg, seed=seed), run_dir))
    return results
