"""Mini-batch training: warm-up then cosine-annealed full-loss training,
Adam updates, per-step metrics log, validation, checkpoints and resume.

All randomness comes from ``config.stream``: shuffling from (seed, epoch),
timesteps/noise from (seed, global_step) and augmentation from
(seed, global_step, row). Resuming from a checkpoint therefore replays the
uninterrupted run exactly without storing generator state.
"""

import json
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import psutil

from augment import random_augmentation
from checkpoint import load_checkpoint, save_checkpoint
from config import STREAM_AUGMENT, STREAM_SHUFFLE, STREAM_STEP, stream
from dataset import PAD, DataError, Domain, UserSequence
from diffusion import build_schedule, forward_diffuse, schedule_from_spec
from evaluation import EvalConfig, evaluate
from network import (Model, ModelConfig, collate, denoise, encode_aug, encode_guidance,
                     init_parameters, lookup_items, restore, snapshot)
from objectives import (ABSENT, NonFiniteLossError, diffusion_loss, rec_loss, total_loss,
                        tri_view_cl_loss)
from tensor import Tensor

logger = logging.getLogger("dpgdiff_logger")

METRICS_FILE = "metrics.jsonl"
HISTORY_FILE = "history.json"
OPTIMIZERS = ("adam",)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 512
    epochs: int = 100
    warmup_epochs: int = 2
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    seed: int = 0
    w_diff: float = 1.0
    w_rec: float = 1.0
    w_tri_cl: float = 1.0
    aug_rate: float = 0.2
    normalize_views: bool = True
    train_prefixes: bool = True
    validate_every: int = 1  # epochs; 0 disables validation
    checkpoint_every: int = 1

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}")
        if not 0.0 < self.aug_rate < 1.0:
            raise ValueError(f"aug_rate must be in (0, 1), got {self.aug_rate}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive or none, got {self.grad_clip}")

    @property
    def weights(self):
        return (self.w_diff, self.w_rec, self.w_tri_cl)


@dataclass(frozen=True)
class TrainExample:
    sequence: UserSequence
    next_item: int
    next_domain: Domain
    targets: dict  # Domain -> item index or ABSENT


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items())
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (p.grad ** 2)
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {"step": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        for name in self.params:
            if self.m[name].shape != state["m"][name].shape:
                raise ValueError(f"Optimizer moment shape mismatch for {name}")
        self.t = int(state["step"])
        self.m = OrderedDict((n, np.array(state["m"][n])) for n in self.params)
        self.v = OrderedDict((n, np.array(state["v"][n])) for n in self.params)


@dataclass
class TrainState:
    model: Model
    optimizer: Adam
    global_step: int = 0
    epoch: int = 0
    best_metric: Optional[float] = None
    best_epoch: int = -1
    best_params: Optional[OrderedDict] = None
    history: list = field(default_factory=list)

    @property
    def params(self):
        return self.model.params


# ----------------- Schedule -----------------
def lr_at(step, cfg, steps_per_epoch):
    """Linear warm-up over ``warmup_epochs``, then cosine decay to 0 at the last step."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.epochs * steps_per_epoch
    if step < warmup_steps:
        return cfg.lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return cfg.lr
    progress = min(max((step - warmup_steps + 1) / (total_steps - warmup_steps), 0.0), 1.0)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


# ----------------- Examples and batches -----------------
def build_examples(sequences, prefixes=True):
    """Next-item examples from training sequences.

    Targets are the next item (its own domain) plus, when one exists, the
    first later item of the other domain.
    """
    examples = []
    for seq in sequences:
        items = seq.items
        cuts = range(1, len(items)) if prefixes else ([len(items) - 1] if len(items) > 1 else [])
        for k in cuts:
            item, domain = items[k]
            later = next((i for i, d in items[k + 1:] if d is domain.other), ABSENT)
            examples.append(TrainExample(UserSequence(seq.user_index, items[:k]), item, domain,
                                         {domain: item, domain.other: later}))
    return examples


def epoch_batches(examples, batch_size, seed, epoch):
    """Shuffle, bucket by length, cut into batches, shuffle batch order."""
    rng = stream(seed, STREAM_SHUFFLE, epoch)
    order = rng.permutation(len(examples))
    order = sorted(order, key=lambda i: len(examples[i].sequence))
    batches = [[examples[i] for i in order[s:s + batch_size]]
               for s in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def steps_per_epoch(n_examples, batch_size):
    return max(1, math.ceil(n_examples / batch_size))


# ----------------- One step -----------------
def compute_losses(examples, params, mcfg, tcfg, schedule, global_step, warmup=False):
    """``(l_diff, l_rec, l_tri_cl)`` as Tensors for one batch.

    Warm-up skips the denoiser: only single-domain recommendation terms.
    """
    batch = collate([e.sequence for e in examples])
    guidance = encode_guidance(batch, params, mcfg)
    targets = {d: np.array([e.targets[d] for e in examples], dtype=np.int64) for d in Domain}
    single = {Domain.X: guidance.g_x_last, Domain.Y: guidance.g_y_last}
    zero = Tensor(0.0)
    if warmup:
        return zero, rec_loss(None, single, targets, params["E_x"], params["E_y"]), zero

    B = len(examples)
    rng = stream(tcfg.seed, STREAM_STEP, global_step)
    t = rng.integers(1, mcfg.T + 1, size=B)
    eps = rng.standard_normal((B, mcfg.d))
    x0 = lookup_items([e.next_item for e in examples],
                      [e.next_domain is Domain.Y for e in examples], params)
    noisy = forward_diffuse(x0, t, eps, schedule)
    out = denoise(noisy.x_t, t, guidance, params, mcfg)

    l_diff = diffusion_loss(x0, out.x0_hat)
    l_rec = rec_loss(out.x0_hat, single, targets, params["E_x"], params["E_y"])
    l_tri = zero
    if mcfg.contrastive and B >= 2:
        sizes = {Domain.X: mcfg.n_items_x, Domain.Y: mcfg.n_items_y}
        augmented = [random_augmentation(e.sequence, stream(tcfg.seed, STREAM_AUGMENT, global_step, row),
                                         sizes, tcfg.aug_rate, mcfg.max_seq_len)
                     for row, e in enumerate(examples)]
        h_aug = encode_aug(collate(augmented), params, mcfg)
        l_tri = tri_view_cl_loss(out.h_c, guidance.g_d_pooled, h_aug, tcfg.normalize_views)
    return l_diff, l_rec, l_tri


def clip_gradients(params, max_norm):
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def _write_diagnostic(run_dir, state, examples, lr, error):
    path = os.path.join(run_dir, f"nonfinite_step{state.global_step}.json")
    payload = {
        "error": str(error),
        "step": state.global_step,
        "epoch": state.epoch,
        "lr": lr,
        "users": [e.sequence.user_index for e in examples],
        "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in state.params.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path


def append_metrics(path, record):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


def train_step(examples, state, tcfg, n_steps_per_epoch, run_dir=None):
    """One optimizer update. Returns the LossBreakdown."""
    if not examples:
        raise ValueError("train_step needs a non-empty batch")
    model = state.model
    lr = lr_at(state.global_step, tcfg, n_steps_per_epoch)
    warmup = state.epoch < tcfg.warmup_epochs

    state.optimizer.zero_grad()
    try:
        parts = compute_losses(examples, model.params, model.cfg, tcfg, model.schedule,
                               state.global_step, warmup)
        losses = total_loss(parts, tcfg.weights, warmup)
        losses.total.backward()
        for name, p in model.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteLossError(f"gradient of {name}", float("nan"))
    except NonFiniteLossError as e:
        if run_dir:
            path = _write_diagnostic(run_dir, state, examples, lr, e)
            logger.error(f"Training aborted at step {state.global_step}: {e} (snapshot {path})")
        raise

    for name in ("E_x", "E_y"):
        grad = model.params[name].grad
        if grad is not None:
            grad[PAD] = 0.0
    if tcfg.grad_clip:
        clip_gradients(model.params, tcfg.grad_clip)
    state.optimizer.step(lr)
    model.trained = True

    if run_dir:
        append_metrics(os.path.join(run_dir, METRICS_FILE),
                       {"step": state.global_step, **losses.as_dict(), "lr": lr})
    state.global_step += 1
    return losses


# ----------------- State -----------------
def init_state(mcfg, tcfg):
    mcfg.validate_vocab()
    params = init_parameters(mcfg, tcfg.seed)
    schedule = build_schedule(mcfg.T, mcfg.beta_start, mcfg.beta_end, mcfg.schedule)
    model = Model(mcfg, params, schedule, trained=False)
    return TrainState(model, Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps))


def save_state(state, out_dir, tcfg):
    meta = {
        "model_config": asdict(state.model.cfg),
        "train_config": asdict(tcfg),
        "schedule": state.model.schedule.spec(),
        "seed": tcfg.seed,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "trained": state.model.trained,
        "history": state.history,
    }
    save_checkpoint(out_dir, snapshot(state.params), state.optimizer.state_dict(), meta)


def load_model(ckpt_dir):
    """Model only, for evaluation commands."""
    params, _, manifest = load_checkpoint(ckpt_dir)
    cfg = ModelConfig(**manifest["model_config"])
    return Model(cfg, restore(params), schedule_from_spec(manifest["schedule"]),
                 trained=bool(manifest.get("trained", False)))


def load_state(ckpt_dir, tcfg=None):
    params, optimizer_state, manifest = load_checkpoint(ckpt_dir)
    mcfg = ModelConfig(**manifest["model_config"])
    tcfg = tcfg or TrainConfig(**manifest["train_config"])
    model = Model(mcfg, restore(params), schedule_from_spec(manifest["schedule"]),
                  trained=bool(manifest.get("trained", False)))
    optimizer = Adam(model.params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    optimizer.load_state_dict(optimizer_state)
    state = TrainState(model, optimizer, global_step=int(manifest["global_step"]),
                       epoch=int(manifest["epoch"]), best_metric=manifest.get("best_metric"),
                       best_epoch=int(manifest.get("best_epoch", -1)),
                       history=list(manifest.get("history", [])))
    return state, tcfg


def recover_best_params(resume_dir, state):
    """Parameters of the best epoch so far, read from the run that wrote
    ``resume_dir`` (its ``best/`` or the matching epoch checkpoint)."""
    if state.best_epoch < 0:
        return None
    parent = os.path.dirname(os.path.abspath(resume_dir))
    run_dir = os.path.dirname(parent) if os.path.basename(parent) == "checkpoints" else parent
    candidates = [os.path.join(run_dir, "best"),
                  os.path.join(run_dir, "checkpoints", f"epoch_{state.best_epoch + 1:04d}")]
    for path in candidates:
        if not os.path.isfile(os.path.join(path, "manifest.json")):
            continue
        params, _, manifest = load_checkpoint(path)
        if int(manifest.get("epoch", -1)) == state.best_epoch + 1:
            return OrderedDict(params)
    logger.warning(f"No checkpoint of best epoch {state.best_epoch} next to {resume_dir}, "
                   f"best/ will only be rewritten if a later epoch improves")
    return None


def best_model(state):
    if state.best_params is None:
        return state.model
    return Model(state.model.cfg, restore(state.best_params), state.model.schedule, trained=True)


# ----------------- Loop -----------------
def fit(split, mcfg, tcfg, ecfg=None, out_dir=None, resume_dir=None):
    """Train on ``split.train``, validating each epoch; returns the TrainState.

    With ``out_dir`` the run writes ``metrics.jsonl``, ``history.json``,
    ``checkpoints/epoch_NNNN/`` (periodic), ``checkpoint/`` (final) and ``best/``
    (highest validation NDCG@10). Each epoch record in ``history.json`` and
    ``metrics.jsonl`` carries its wall-clock seconds and peak RSS.
    """
    if not split.train:
        raise DataError("The split has no training sequences")
    tcfg.validate()
    ecfg = ecfg or EvalConfig(seed=tcfg.seed)
    mcfg = replace(mcfg, n_items_x=split.vocab_x.size, n_items_y=split.vocab_y.size)
    mcfg.validate()
    examples = build_examples(split.train, tcfg.train_prefixes)
    if not examples:
        raise DataError("No training examples: every training sequence has fewer than 2 items")

    if resume_dir:
        state, _ = load_state(resume_dir, tcfg)
        if state.model.cfg != mcfg:
            raise ValueError(f"Checkpoint at {resume_dir} was trained with a different model config")
        state.best_params = recover_best_params(resume_dir, state)
        print(f"Resuming from {resume_dir} at epoch {state.epoch}, step {state.global_step}")
    else:
        state = init_state(mcfg, tcfg)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    n_steps = steps_per_epoch(len(examples), tcfg.batch_size)
    logger.info(f"Training {mcfg.variant} on {len(examples)} examples, {n_steps} steps/epoch, "
                f"epochs {state.epoch}..{tcfg.epochs}")

    process = psutil.Process()
    for epoch in range(state.epoch, tcfg.epochs):
        started = time.perf_counter()
        peak_rss = process.memory_info().rss
        totals = []
        for batch in epoch_batches(examples, tcfg.batch_size, tcfg.seed, epoch):
            totals.append(train_step(batch, state, tcfg, n_steps, out_dir).as_dict())
            peak_rss = max(peak_rss, process.memory_info().rss)
        state.epoch = epoch + 1

        record = {"epoch": epoch, "step": state.global_step}
        for key in ("l_diff", "l_rec", "l_tri_cl", "l_total"):
            record[key] = float(np.mean([t[key] for t in totals]))

        last = epoch + 1 == tcfg.epochs
        improved = False
        if tcfg.validate_every and split.validation and ((epoch + 1) % tcfg.validate_every == 0 or last):
            report = evaluate(split.validation, state.model, ecfg)
            record["val_ndcg10"] = report.mean("N@10")
            if state.best_metric is None or record["val_ndcg10"] > state.best_metric:
                state.best_metric, state.best_epoch = record["val_ndcg10"], epoch
                state.best_params = snapshot(state.params)
                improved = True
        record["seconds"] = round(time.perf_counter() - started, 3)
        record["peak_rss_mb"] = round(max(peak_rss, process.memory_info().rss) / 2 ** 20, 1)
        state.history.append(record)
        print(f"Epoch {epoch + 1}/{tcfg.epochs}: l_total={record['l_total']:.4f} "
              f"(diff {record['l_diff']:.4f}, rec {record['l_rec']:.4f}, tri-cl {record['l_tri_cl']:.4f})"
              + (f" val N@10={record['val_ndcg10']:.4f}" if "val_ndcg10" in record else "")
              + f" [{record['seconds']:.1f}s, {record['peak_rss_mb']:.0f} MB]")

        if out_dir:
            append_metrics(os.path.join(out_dir, METRICS_FILE), record)
            if improved:
                save_state(state, os.path.join(out_dir, "best"), tcfg)
            if tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
                save_state(state, os.path.join(out_dir, "checkpoints", f"epoch_{epoch + 1:04d}"), tcfg)

    if out_dir:
        save_state(state, os.path.join(out_dir, "checkpoint"), tcfg)
        if state.best_metric is None:
            save_state(state, os.path.join(out_dir, "best"), tcfg)
        with open(os.path.join(out_dir, HISTORY_FILE), "w", encoding="utf-8") as f:
            json.dump(state.history, f, indent=2)
    return state
