from dataclasses import replace

import pytest

from dataset import filter_and_split
from diffusion import build_schedule
from evaluation import EvalConfig, evaluate
from experiments import (noise_robustness, perturb_held_out, retained_fraction, run_ablations,
                         step_sweep)
from network import Model, ModelConfig, init_parameters
from synthetic import SyntheticConfig, generate_synthetic
from trainer import TrainConfig, best_model, fit


@pytest.fixture
def untrained(synthetic_split, small_model_cfg):
    cfg = replace(small_model_cfg, n_items_x=synthetic_split.vocab_x.size,
                  n_items_y=synthetic_split.vocab_y.size)
    return Model(cfg, init_parameters(cfg, 0), build_schedule(cfg.T))


def test_retained_fraction_edges():
    assert retained_fraction(0.25, 0.25) == 1.0
    assert retained_fraction(0.0, 0.0) == 1.0
    assert retained_fraction(0.1, 0.4) == pytest.approx(0.25)


def test_perturbation_is_seeded_and_sized(synthetic_split):
    sizes = synthetic_split.vocab_sizes()
    a, fraction = perturb_held_out(synthetic_split.test, 0.3, sizes, seed=1, max_seq_len=15)
    b, _ = perturb_held_out(synthetic_split.test, 0.3, sizes, seed=1, max_seq_len=15)
    assert a == b
    assert fraction == pytest.approx(0.3, abs=0.05)
    assert [h.target_item for h in a] == [h.target_item for h in synthetic_split.test]
    assert any(p.sequence != h.sequence for p, h in zip(a, synthetic_split.test))


def test_robustness_at_zero_rate_retains_everything(synthetic_split, untrained, small_eval_cfg):
    rows = noise_robustness(synthetic_split.test, untrained, [0.0, 0.3], small_eval_cfg)
    assert [r.rate for r in rows] == [0.0, 0.3]
    assert rows[0].retained_fraction == 1.0
    assert rows[0].edit_fraction == 0.0
    assert rows[1].edit_fraction == pytest.approx(0.3, abs=0.05)
    with pytest.raises(ValueError, match=r"\[0, 1\)"):
        noise_robustness(synthetic_split.test, untrained, [1.0], small_eval_cfg)


def test_sweep_rows_and_full_schedule_equivalence(synthetic_split, untrained, small_eval_cfg):
    rows = step_sweep(synthetic_split.test, untrained, [1, 5, 10], small_eval_cfg)
    assert [r.n_steps for r in rows] == [1, 5, 10]
    assert all(r.seconds >= 0 for r in rows)
    full = evaluate(synthetic_split.test, untrained, small_eval_cfg)
    assert rows[-1].report.domains == full.domains
    with pytest.raises(ValueError, match="n_steps"):
        step_sweep(synthetic_split.test, untrained, [11], small_eval_cfg)


def test_ablation_variants_share_data_and_seeds(tmp_path, synthetic_split, small_model_cfg, small_eval_cfg):
    tcfg = TrainConfig(lr=5e-3, batch_size=64, epochs=2, warmup_epochs=1, validate_every=0)
    results = run_ablations(["diff", "full"], [0, 1], synthetic_split, small_model_cfg, tcfg,
                            small_eval_cfg, out_dir=str(tmp_path))
    assert list(results) == ["diff", "full"]
    for seed_index in range(2):
        diff, full = results["diff"][seed_index], results["full"][seed_index]
        assert diff.fingerprint["data"] == full.fingerprint["data"]
        assert diff.fingerprint["seed"] == full.fingerprint["seed"] == seed_index
        assert (diff.fingerprint["variant"], full.fingerprint["variant"]) == ("diff", "full")
    assert (tmp_path / "full" / "seed1" / "checkpoint" / "manifest.json").exists()
    with pytest.raises(ValueError, match="Unknown variant"):
        run_ablations(["everything"], [0], synthetic_split, small_model_cfg, tcfg, small_eval_cfg)


# ----------------- Desk-scale directional runs -----------------
@pytest.fixture(scope="module")
def benchmark():
    events, _ = generate_synthetic(SyntheticConfig(n_users=200, noise_rate=0.2, rng_seed=0))
    return filter_and_split(events)


BENCH_MODEL = dict(d=32, n_heads=2, enc_layers=1, dec_layers=1, T=20)
BENCH_TRAIN = dict(lr=3e-3, batch_size=128, epochs=15, warmup_epochs=1)
BENCH_EVAL = EvalConfig(n_negatives=50)


@pytest.mark.slow
def test_fused_guidance_beats_unguided(benchmark):
    results = run_ablations(["diff", "diff+de+g", "full"], [0, 1, 2], benchmark,
                            ModelConfig(**BENCH_MODEL), TrainConfig(**BENCH_TRAIN), BENCH_EVAL)
    mean = {v: sum(r.mean("N@10") for r in reports) / len(reports) for v, reports in results.items()}
    assert mean["full"] >= 1.1 * mean["diff"]
    assert mean["diff+de+g"] >= mean["diff"]


@pytest.fixture(scope="module")
def trained_benchmark(benchmark):
    state = fit(benchmark, ModelConfig(**BENCH_MODEL), TrainConfig(**BENCH_TRAIN), BENCH_EVAL)
    return best_model(state)


@pytest.mark.slow
def test_noise_degrades_gracefully(benchmark, trained_benchmark):
    rows = noise_robustness(benchmark.test, trained_benchmark, [0.0, 0.1, 0.2, 0.3], BENCH_EVAL)
    kept = [r.retained_fraction for r in rows]
    assert kept[0] == 1.0
    assert all(b <= a + 0.03 for a, b in zip(kept, kept[1:]))


@pytest.mark.slow
def test_few_steps_stay_close_to_full_schedule(benchmark, trained_benchmark):
    rows = step_sweep(benchmark.test, trained_benchmark, [5, 10, 20], BENCH_EVAL)
    full = rows[-1].report.mean("N@10")
    for row in rows[:-1]:
        assert row.report.mean("N@10") >= 0.9 * full
