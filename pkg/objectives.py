"""Training losses: diffusion reconstruction, per-domain recommendation
cross-entropy, tri-view contrastive loss, and their total."""

import logging
from dataclasses import dataclass

import numpy as np

from dataset import MASK, N_RESERVED, PAD, Domain
from tensor import Tensor, concat

logger = logging.getLogger("dpgdiff_logger")

ABSENT = -1
NORM_EPS = 1e-12


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"Loss term {term} is not finite ({value})")
        self.term = term
        self.value = value


@dataclass
class LossBreakdown:
    l_diff: float
    l_rec: float
    l_tri_cl: float
    l_total: float
    total: Tensor

    def as_dict(self):
        return {"l_diff": self.l_diff, "l_rec": self.l_rec, "l_tri_cl": self.l_tri_cl,
                "l_total": self.l_total}


def _tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def reserved_columns(n_rows):
    blocked = np.zeros(n_rows, dtype=bool)
    blocked[[MASK, PAD]] = True
    return blocked


def domain_logits(h, table):
    """Scores h @ E^T with the MASK and PAD columns pushed to -inf."""
    logits = _tensor(h) @ table.transpose(1, 0)
    return logits.masked_fill(np.broadcast_to(reserved_columns(table.shape[0]), logits.shape))


def diffusion_loss(x0, x0_hat):
    x0, x0_hat = _tensor(x0), _tensor(x0_hat)
    if x0.shape != x0_hat.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match x0_hat shape {x0_hat.shape}")
    diff = x0_hat - x0
    return (diff * diff).sum(axis=-1).mean()


def _cross_entropy(h, table, targets):
    """Per-example CE against ``targets`` (ABSENT rows contribute 0)."""
    targets = np.asarray(targets, dtype=np.int64)
    present = targets != ABSENT
    bad = present & ((targets < N_RESERVED) | (targets >= table.shape[0]))
    if np.any(bad):
        raise ValueError(f"Target index {int(targets[bad][0])} is not an item row "
                         f"of a table with {table.shape[0]} rows")
    log_probs = domain_logits(h, table).log_softmax(axis=-1)
    picked = log_probs.pick(np.where(present, targets, N_RESERVED))
    return -(picked * present.astype(np.float64))


def rec_loss(x0_hat, single, targets, E_x, E_y):
    """Sum of per-domain cross-entropy terms, averaged over the batch.

    ``targets`` maps each Domain to a (B,) index array with -1 for no target.
    ``single`` is the single-domain view, either one (B, d) array for both
    domains or a mapping from Domain to that domain's own view.
    ``x0_hat=None`` drops the denoised-view terms and keeps the single-domain
    ones.
    """
    if not isinstance(single, dict):
        single = {Domain.X: single, Domain.Y: single}
    t_x = np.asarray(targets[Domain.X], dtype=np.int64)
    t_y = np.asarray(targets[Domain.Y], dtype=np.int64)
    if t_x.shape != t_y.shape:
        raise ValueError("Per-domain target arrays must have the same length")
    missing = (t_x == ABSENT) & (t_y == ABSENT)
    if np.any(missing):
        raise ValueError(f"Training example {int(np.argmax(missing))} has no target in either domain")

    terms = []
    for domain, table, target in ((Domain.X, E_x, t_x), (Domain.Y, E_y, t_y)):
        if np.all(target == ABSENT):
            continue
        if x0_hat is not None:
            terms.append(_cross_entropy(x0_hat, table, target))
        terms.append(_cross_entropy(single[domain], table, target))
    per_example = terms[0]
    for term in terms[1:]:
        per_example = per_example + term
    return per_example.mean()


def _normalize(v):
    return v * ((v * v).sum(axis=-1, keepdims=True) + NORM_EPS) ** -0.5


def tri_view_cl_loss(h_c, h_d, h_aug, normalize=True):
    """Contrast three views of each user against every view of other users.

    Each view is pulled towards the user's other two views in turn; the
    candidates for a term are the positive plus the 3(B-1) views belonging to
    the rest of the batch. Returns the mean over all 6B terms.
    """
    h_c, h_d, h_aug = _tensor(h_c), _tensor(h_d), _tensor(h_aug)
    B = h_c.shape[0]
    if B < 2:
        raise ValueError(f"Contrastive loss needs at least 2 users per batch, got {B}")
    if not h_c.shape == h_d.shape == h_aug.shape:
        raise ValueError("All three views must have the same shape")

    views = concat([h_c, h_d, h_aug], axis=0)
    if normalize:
        views = _normalize(views)
    sim = views @ views.transpose(1, 0)

    rows = np.arange(3 * B)
    user = rows % B
    other_user = user[:, None] != user[None, :]
    total = None
    for offset in (1, 2):
        positive = (rows + offset * B) % (3 * B)
        allowed = other_user.copy()
        allowed[rows, positive] = True
        log_probs = sim.masked_fill(~allowed).log_softmax(axis=-1)
        term = log_probs.pick(positive).sum()
        total = term if total is None else total + term
    return -total * (1.0 / (6 * B))


def total_loss(parts, weights=(1.0, 1.0, 1.0), warmup=False):
    """Combine ``(l_diff, l_rec, l_tri_cl)``.

    Parts may be floats or Tensors. During warm-up the diffusion and
    contrastive terms are multiplied by zero.
    """
    names = ("l_diff", "l_rec", "l_tri_cl")
    tensors = [_tensor(p) for p in parts]
    for name, value in zip(names, tensors):
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteLossError(name, float(np.asarray(value.data).ravel()[0]))

    gates = (0.0, 1.0, 0.0) if warmup else (1.0, 1.0, 1.0)
    total = None
    for value, weight, gate in zip(tensors, weights, gates):
        if gate * weight == 0.0:
            continue
        term = value if weight == 1.0 else value * weight
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)

    floats = [float(t.data) * g for t, g in zip(tensors, gates)]
    return LossBreakdown(floats[0], floats[1], floats[2], float(total.data), total)
