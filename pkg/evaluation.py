"""Guided scoring and 1 + k negative-sampled ranking metrics."""

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from config import STREAM_NEGATIVES, STREAM_SAMPLE
from dataset import N_RESERVED, Domain, split_domains
from diffusion import guided_sample
from network import collate, encode_guidance, make_denoiser
from objectives import domain_logits
from tensor import no_grad

logger = logging.getLogger("dpgdiff_logger")

METRIC_NAMES = ("MRR", "N@5", "N@10", "H@5", "H@10")
MRR_CUTOFF = 10


@dataclass
class EvalConfig:
    n_negatives: int = 999
    exclude_history: bool = True
    n_steps: int = 0  # 0 means the full schedule
    eval_batch_size: int = 256
    seed: int = 0

    def validate(self):
        if self.n_negatives < 1:
            raise ValueError(f"n_negatives must be positive, got {self.n_negatives}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.eval_batch_size < 1:
            raise ValueError(f"eval_batch_size must be positive, got {self.eval_batch_size}")


@dataclass
class RankedCandidates:
    target_domain: Domain
    candidate_indices: np.ndarray  # positive first
    scores: np.ndarray
    rank_of_positive: int


@dataclass
class MetricReport:
    domains: dict                      # Domain -> {metric: value}
    n_users: dict                      # Domain -> int
    fingerprint: dict = field(default_factory=dict)

    def value(self, domain, metric):
        return self.domains[domain][metric]

    def mean(self, metric="N@10"):
        """Average of ``metric`` over the domains that had users."""
        values = [m[metric] for m in self.domains.values()]
        return float(np.mean(values)) if values else 0.0

    def check(self):
        for domain, m in self.domains.items():
            if not (m["H@5"] <= m["H@10"] and m["N@5"] <= m["N@10"] and m["MRR"] <= m["H@10"]):
                raise AssertionError(f"Metric ordering violated for domain {domain.value}: {m}")


# ----------------- Scoring -----------------
def sample_seeds(seed, user_indices):
    return [[int(seed), STREAM_SAMPLE, int(u)] for u in user_indices]


def score_batch(model, sequences, target_domains, n_steps=None, seed=0):
    """Softmax score vectors over each target domain's table.

    Runs guided sampling for every sequence at once; row ``i`` draws its
    noise from ``(seed, user_index)`` so results do not depend on batching.
    """
    if any(len(seq) == 0 for seq in sequences):
        raise ValueError("Cannot score an empty sequence")
    cfg, params = model.cfg, model.params
    n_steps = n_steps or cfg.T
    batch = collate(sequences)
    with no_grad():
        guidance = encode_guidance(batch, params, cfg)
        x0_hat = guided_sample(guidance, make_denoiser(model), model.schedule,
                               sample_seeds(seed, [s.user_index for s in sequences]),
                               n_steps, (len(sequences), cfg.d))
        scores = []
        for row, domain in enumerate(target_domains):
            query = x0_hat[row] + guidance.last_for(domain).data[row]
            table = params["E_x"] if domain is Domain.X else params["E_y"]
            probs = domain_logits(query[None, :], table).softmax(axis=-1).data[0]
            scores.append(probs)
    return scores


def score_user(seq, target_domain, model, n_steps=None, seed=0):
    if not model.trained:
        logger.debug(f"Scoring user {seq.user_index} with an untrained model")
    return score_batch(model, [seq], [target_domain], n_steps, seed)[0]


# ----------------- Candidates and ranks -----------------
def sample_negatives(positive, vocab_size, history=(), k=999, seed=0, exclude_history=True):
    """``k`` distinct negatives drawn uniformly from the item rows of a table.

    The positive, MASK/PAD and (optionally) the user's history are never drawn.
    """
    excluded = {int(positive)}
    if exclude_history:
        excluded.update(int(i) for i in history)
    eligible = np.array([i for i in range(N_RESERVED, vocab_size) if i not in excluded], dtype=np.int64)
    if eligible.size < k:
        raise ValueError(f"Only {eligible.size} eligible negatives for positive {positive}, need {k}")
    rng = np.random.default_rng(seed)
    return rng.choice(eligible, size=k, replace=False)


def rank_of_positive(scores, positive_at=0):
    """1-based rank with ties counted against the positive."""
    scores = np.asarray(scores)
    others = np.delete(scores, positive_at)
    return int(1 + np.sum(others >= scores[positive_at]))


def rank_candidates(score_vector, positive, domain, history, k, seed, exclude_history=True):
    negatives = sample_negatives(positive, len(score_vector), history, k, seed, exclude_history)
    candidates = np.concatenate([[positive], negatives])
    scores = np.asarray(score_vector)[candidates]
    return RankedCandidates(domain, candidates, scores, rank_of_positive(scores))


# ----------------- Metrics -----------------
def compute_metrics(ranks, cutoffs=(5, 10)):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("compute_metrics needs at least one rank")
    if np.any(ranks < 1):
        raise ValueError("Ranks are 1-based")
    metrics = {"MRR": float(np.mean(np.where(ranks <= MRR_CUTOFF, 1.0 / ranks, 0.0)))}
    for k in cutoffs:
        hit = ranks <= k
        metrics[f"N@{k}"] = float(np.mean(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)))
        metrics[f"H@{k}"] = float(np.mean(hit))
    return metrics


def held_out_fingerprint(held_out):
    digest = hashlib.sha256()
    for h in held_out:
        digest.update(json.dumps([h.sequence.user_index, [[i, d.value] for i, d in h.sequence.items],
                                  h.target_item, h.target_domain.value]).encode("utf-8"))
    return digest.hexdigest()[:16]


def guided_scorer(model, n_steps=None, seed=0):
    def scorer(held_batch):
        return score_batch(model, [h.sequence for h in held_batch],
                           [h.target_domain for h in held_batch], n_steps, seed)
    return scorer


def evaluate(held_out, model, cfg=None, scorer=None, histories=None):
    """Rank every held-out target against sampled negatives, per domain.

    ``scorer(list_of_HeldOut) -> list of score vectors`` replaces guided
    scoring when given. ``histories`` maps user_index to the item indices
    excluded from negative sampling (defaults to each sequence's own items).
    """
    cfg = cfg or EvalConfig()
    if not held_out:
        raise ValueError("Nothing to evaluate")
    n_steps = cfg.n_steps or (model.cfg.T if model else None)
    scorer = scorer or guided_scorer(model, n_steps, cfg.seed)

    histories = domain_histories(held_out) if histories is None else histories
    ranks = {Domain.X: [], Domain.Y: []}
    for start in range(0, len(held_out), cfg.eval_batch_size):
        chunk = held_out[start:start + cfg.eval_batch_size]
        for h, scores in zip(chunk, scorer(chunk)):
            user = h.sequence.user_index
            ranked = rank_candidates(scores, h.target_item, h.target_domain, histories[user],
                                     cfg.n_negatives, [cfg.seed, STREAM_NEGATIVES, user],
                                     cfg.exclude_history)
            ranks[h.target_domain].append(ranked.rank_of_positive)

    report = MetricReport(
        domains={d: compute_metrics(r) for d, r in ranks.items() if r},
        n_users={d: len(r) for d, r in ranks.items() if r},
        fingerprint={
            "data": held_out_fingerprint(held_out),
            "seed": cfg.seed,
            "n_negatives": cfg.n_negatives,
            "exclude_history": cfg.exclude_history,
            "n_steps": n_steps,
            "variant": model.cfg.variant if model else None,
            "trained": bool(model.trained) if model else None,
        },
    )
    report.check()
    return report


def domain_histories(held_out):
    """user_index -> item indices of the target domain seen in the sequence."""
    out = {}
    for h in held_out:
        s_x, s_y = split_domains(h.sequence)
        out[h.sequence.user_index] = [i for i, _ in (s_x if h.target_domain is Domain.X else s_y).items]
    return out
