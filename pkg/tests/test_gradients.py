from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import X, Y, seq
from diffusion import build_schedule
from network import VARIANTS, init_parameters
from objectives import total_loss
from tensor import no_grad
from trainer import TrainConfig, build_examples, compute_losses

# attention weights that must carry signal in each variant
ATTENDING = {
    "diff": ["enc_m.0.attn.wq", "enc_m.0.attn.wk", "dec.0.cross.wq", "dec.0.cross.wk"],
    "diff+de": ["enc_x.0.attn.wq", "enc_y.0.attn.wk", "enc_m.0.attn.wq"],
    "diff+de+g": ["enc_x.0.attn.wq", "enc_y.0.attn.wk", "dec.0.cross.wq", "dec.0.cross.wk"],
    "diff+de+tricl": ["enc_x.0.attn.wq", "enc_y.0.attn.wk", "enc_m.0.attn.wq", "enc_c.0.attn.wq"],
    "full": ["enc_x.0.attn.wq", "enc_y.0.attn.wk", "enc_c.0.attn.wq", "dec.0.cross.wq",
             "dec.0.cross.wk", "fuse.w"],
}


@pytest.fixture
def setup():
    # three-item histories with two items of one domain, so self-attention sees several rows
    sequences = [
        seq(0, (2, X), (4, X), (3, Y), (5, Y)),
        seq(1, (5, Y), (6, Y), (7, X), (8, X)),
        seq(2, (7, X), (6, Y), (9, Y), (3, X)),
        seq(3, (3, Y), (8, X), (9, X), (4, Y)),
    ]
    tcfg = TrainConfig(epochs=3, warmup_epochs=1, seed=0)
    examples = build_examples(sequences, prefixes=False)
    assert [len(e.sequence) for e in examples] == [3, 3, 3, 3]
    return tcfg, examples


def loss_fn(examples, params, mcfg, tcfg, schedule, warmup=False):
    parts = compute_losses(examples, params, mcfg, tcfg, schedule, global_step=3, warmup=warmup)
    return total_loss(parts, tcfg.weights, warmup)


@pytest.mark.parametrize("variant", VARIANTS)
def test_backprop_matches_central_differences(tiny_cfg, setup, variant):
    tcfg, examples = setup
    mcfg = replace(tiny_cfg, variant=variant)
    params = init_parameters(mcfg, 0)
    schedule = build_schedule(mcfg.T)

    loss_fn(examples, params, mcfg, tcfg, schedule).total.backward()

    def value():
        with no_grad():
            return loss_fn(examples, params, mcfg, tcfg, schedule).l_total

    rng = np.random.default_rng(7)
    h = 1e-5
    for name, p in params.items():
        assert p.grad is not None, f"{variant}: {name} is not reached by the loss"
        picks = min(4, p.data.size)
        for flat in rng.choice(p.data.size, size=picks, replace=False):
            idx = np.unravel_index(int(flat), p.data.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            plus = value()
            p.data[idx] = old - h
            minus = value()
            p.data[idx] = old
            assert_allclose(p.grad[idx], (plus - minus) / (2 * h), rtol=1e-4, atol=1e-7,
                            err_msg=f"{variant}: d loss / d {name}{list(idx)}")

    for name in ATTENDING[variant]:
        assert np.any(params[name].grad), f"{variant}: {name} has a zero gradient"


@pytest.mark.parametrize("variant", ["full", "diff+de"])
def test_warmup_leaves_denoiser_untouched(tiny_cfg, setup, variant):
    tcfg, examples = setup
    mcfg = replace(tiny_cfg, variant=variant)
    params = init_parameters(mcfg, 0)
    losses = loss_fn(examples, params, mcfg, tcfg, build_schedule(mcfg.T), warmup=True)
    assert losses.l_diff == 0.0 and losses.l_tri_cl == 0.0
    assert losses.l_total == pytest.approx(losses.l_rec)
    losses.total.backward()
    for name in ("step_emb", "enc_c.0.attn.wq", "dec.0.cross.wv", "dec.head.w"):
        grad = params[name].grad
        assert grad is None or not np.any(grad)
    assert np.any(params["enc_x.0.attn.wq"].grad)
    assert np.any(params["enc_y.0.attn.wq"].grad)
