"""Sequence augmentations: Crop, Mask, Reorder, Substitute, Insert.

All ops work on ``UserSequence`` items of ``(item_index, Domain)`` and draw
from a generator seeded per call, so the same spec always gives the same
output. Edit counts use round-half-up of ``rate * L``; Crop keeps
``ceil((1 - rate) * L)`` items instead.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from dataset import MASK, N_RESERVED, UserSequence

DEFAULT_RATE = 0.2


class AugmentOp(str, enum.Enum):
    CROP = "crop"
    MASK = "mask"
    REORDER = "reorder"
    SUBSTITUTE = "substitute"
    INSERT = "insert"


@dataclass(frozen=True)
class AugmentationSpec:
    op: AugmentOp
    rate: float = DEFAULT_RATE
    rng_seed: int = 0

    def validate(self):
        if not 0.0 < self.rate < 1.0:
            raise ValueError(f"Augmentation rate must be in (0, 1), got {self.rate}")


def edit_count(rate, length):
    return int(math.floor(rate * length + 0.5))


def _random_item(rng, domain, vocab_sizes, exclude=None):
    size = vocab_sizes[domain]
    if size - N_RESERVED < 1:
        raise ValueError(f"Domain {domain.value} has no items to sample")
    while True:
        item = int(rng.integers(N_RESERVED, size))
        if item != exclude or size - N_RESERVED == 1:
            return item


def _crop(items, rate, rng, vocab_sizes, mask_token, max_seq_len):
    keep = max(1, math.ceil((1.0 - rate) * len(items) - 1e-9))
    start = int(rng.integers(0, len(items) - keep + 1))
    return items[start:start + keep]


def _mask(items, rate, rng, vocab_sizes, mask_token, max_seq_len):
    count = edit_count(rate, len(items))
    positions = set(rng.choice(len(items), size=count, replace=False).tolist())
    return [(mask_token, domain) if i in positions else (item, domain)
            for i, (item, domain) in enumerate(items)]


def _reorder(items, rate, rng, vocab_sizes, mask_token, max_seq_len):
    window = edit_count(rate, len(items))
    if window < 2:
        return items
    start = int(rng.integers(0, len(items) - window + 1))
    shuffled = [items[start + i] for i in rng.permutation(window)]
    return items[:start] + shuffled + items[start + window:]


def _substitute(items, rate, rng, vocab_sizes, mask_token, max_seq_len):
    count = edit_count(rate, len(items))
    positions = set(rng.choice(len(items), size=count, replace=False).tolist())
    return [(_random_item(rng, domain, vocab_sizes, exclude=item), domain) if i in positions
            else (item, domain) for i, (item, domain) in enumerate(items)]


def _insert(items, rate, rng, vocab_sizes, mask_token, max_seq_len):
    count = edit_count(rate, len(items))
    out = list(items)
    for _ in range(count):
        domain = out[int(rng.integers(0, len(out)))][1]
        out.insert(int(rng.integers(0, len(out) + 1)), (_random_item(rng, domain, vocab_sizes), domain))
    return out[-max_seq_len:]


_OPS = {
    AugmentOp.CROP: _crop,
    AugmentOp.MASK: _mask,
    AugmentOp.REORDER: _reorder,
    AugmentOp.SUBSTITUTE: _substitute,
    AugmentOp.INSERT: _insert,
}


def augment(seq, spec, vocab_sizes, mask_token=MASK, max_seq_len=15):
    """Apply one augmentation. ``vocab_sizes`` maps Domain to table size."""
    spec.validate()
    if len(seq) < 2:
        return seq
    rng = np.random.default_rng(spec.rng_seed)
    items = _OPS[AugmentOp(spec.op)](list(seq.items), spec.rate, rng, vocab_sizes,
                                     mask_token, max_seq_len)
    return UserSequence(seq.user_index, tuple(items))


def random_augmentation(seq, rng, vocab_sizes, rate=DEFAULT_RATE, max_seq_len=15):
    """One uniformly chosen op per call, seeded from ``rng``."""
    ops = list(AugmentOp)
    op = ops[int(rng.integers(0, len(ops)))]
    spec = AugmentationSpec(op, rate, int(rng.integers(0, 2 ** 31 - 1)))
    return augment(seq, spec, vocab_sizes, max_seq_len=max_seq_len)


def perturb_sequence(seq, rate, rng, vocab_sizes, max_seq_len=15):
    """Noise injection for robustness runs: Insert or Substitute, 50/50.

    Returns the perturbed sequence and the number of edited positions.
    """
    if rate == 0.0 or len(seq) < 2:
        return seq, 0
    op = AugmentOp.INSERT if rng.random() < 0.5 else AugmentOp.SUBSTITUTE
    spec = AugmentationSpec(op, rate, int(rng.integers(0, 2 ** 31 - 1)))
    return augment(seq, spec, vocab_sizes, max_seq_len=max_seq_len), edit_count(rate, len(seq))
