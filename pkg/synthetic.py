"""Synthetic cross-domain interaction logs with known interest structure.

Every user follows one shared interest (an item cluster in each domain),
optionally one domain-specific interest (a cluster in one domain only), and a
``noise_rate`` share of off-cluster items. The next item of either domain is
therefore predictable from the shared interest seen in the other domain.
"""

import csv
import json
import os
from collections import Counter
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from config import STREAM_SYNTHETIC, stream
from dataset import Domain, InteractionEvent

START_TIMESTAMP = 1_600_000_000


@dataclass
class SyntheticConfig:
    n_users: int = 200
    n_items_x: int = 120
    n_items_y: int = 120
    n_shared_interests: int = 10
    n_specific_interests: int = 4
    noise_rate: float = 0.2
    seq_len_range: Tuple[int, int] = (10, 15)
    specific_prob: float = 0.5
    specific_share: float = 0.3
    rng_seed: int = 0

    def validate(self):
        counts = (self.n_users, self.n_items_x, self.n_items_y, self.n_shared_interests)
        if min(counts) <= 0 or self.n_specific_interests < 0:
            raise ValueError("Synthetic counts must be positive")
        clusters = self.n_shared_interests + self.n_specific_interests
        if min(self.n_items_x, self.n_items_y) < clusters:
            raise ValueError(f"Each domain needs at least {clusters} items for "
                             f"{self.n_shared_interests} shared + {self.n_specific_interests} "
                             f"specific interests")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if self.noise_rate > 0 and self.n_shared_interests == 1 and self.n_specific_interests <= 1:
            # one shared cluster plus one specific cluster can own a whole domain
            raise ValueError(f"noise_rate={self.noise_rate} needs items outside every user's interest "
                             f"clusters, use at least 2 shared or 2 specific interests")
        low, high = self.seq_len_range
        if not 1 <= low <= high <= 15:
            raise ValueError(f"seq_len_range must satisfy 1 <= min <= max <= 15, got {self.seq_len_range}")


@dataclass
class GroundTruth:
    # user_id -> {"shared": k, "specific": [domain, k] or None}
    users: dict
    # (domain, item_id) -> cluster label such as "shared:3" or "specific:1"
    item_cluster: dict


def item_name(domain, index):
    return f"{domain.value.lower()}{index:04d}"


def _clusters(n_items, n_shared, n_specific):
    """Split item indices into n_shared + n_specific contiguous clusters."""
    bounds = np.linspace(0, n_items, n_shared + n_specific + 1).round().astype(int)
    groups = [list(range(bounds[i], bounds[i + 1])) for i in range(len(bounds) - 1)]
    return groups[:n_shared], groups[n_shared:]


def generate_synthetic(cfg):
    """Return ``(events, ground_truth)``, deterministic under ``cfg.rng_seed``."""
    cfg.validate()
    rng = stream(cfg.rng_seed, STREAM_SYNTHETIC)
    sizes = {Domain.X: cfg.n_items_x, Domain.Y: cfg.n_items_y}
    shared, specific = {}, {}
    item_cluster = {}
    for domain in Domain:
        shared[domain], specific[domain] = _clusters(sizes[domain], cfg.n_shared_interests,
                                                     cfg.n_specific_interests)
        for k, group in enumerate(shared[domain]):
            item_cluster.update({(domain, item_name(domain, i)): f"shared:{k}" for i in group})
        for k, group in enumerate(specific[domain]):
            item_cluster.update({(domain, item_name(domain, i)): f"specific:{k}" for i in group})

    events, users = [], {}
    for u in range(cfg.n_users):
        user_id = f"u{u:05d}"
        interest = int(rng.integers(0, cfg.n_shared_interests))
        specific_interest = None
        if cfg.n_specific_interests and rng.random() < cfg.specific_prob:
            specific_interest = (Domain.X if rng.random() < 0.5 else Domain.Y,
                                 int(rng.integers(0, cfg.n_specific_interests)))
        users[user_id] = {
            "shared": interest,
            "specific": [specific_interest[0].value, specific_interest[1]] if specific_interest else None,
        }

        length = int(rng.integers(cfg.seq_len_range[0], cfg.seq_len_range[1] + 1))
        domains = [Domain.X] * (length // 2) + [Domain.Y] * (length - length // 2)
        domains = [domains[i] for i in rng.permutation(length)]
        own = {d: set(shared[d][interest]) for d in Domain}
        if specific_interest:
            own[specific_interest[0]] |= set(specific[specific_interest[0]][specific_interest[1]])

        for position, domain in enumerate(domains):
            if rng.random() < cfg.noise_rate:
                candidates = [i for i in range(sizes[domain]) if i not in own[domain]]
                index = int(candidates[int(rng.integers(0, len(candidates)))])
            elif (specific_interest and specific_interest[0] is domain
                  and rng.random() < cfg.specific_share):
                group = specific[domain][specific_interest[1]]
                index = group[int(rng.integers(0, len(group)))]
            else:
                group = shared[domain][interest]
                index = group[int(rng.integers(0, len(group)))]
            events.append(InteractionEvent(user_id, item_name(domain, index), domain,
                                           START_TIMESTAMP + u * 10_000 + position * 60))

    return events, GroundTruth(users, item_cluster)


def off_cluster_fraction(events, truth):
    """Share of events whose item lies outside the user's assigned clusters."""
    off = 0
    for event in events:
        assigned = truth.users[event.user_id]
        label = truth.item_cluster[(event.domain, event.item_id)]
        allowed = {f"shared:{assigned['shared']}"}
        if assigned["specific"] and assigned["specific"][0] == event.domain.value:
            allowed.add(f"specific:{assigned['specific'][1]}")
        off += label not in allowed
    return off / len(events) if events else 0.0


def interest_agreement(events, truth):
    """How often the majority shared cluster of one domain's history names the
    cluster of the user's last item in the other domain.

    Returns ``(agreement, chance)``; chance is 1 / n_shared_interests.
    """
    by_user = {}
    for event in events:
        by_user.setdefault(event.user_id, []).append(event)
    hits = total = 0
    for user_events in by_user.values():
        user_events = sorted(user_events, key=lambda e: e.timestamp)
        for target_domain in Domain:
            targets = [e for e in user_events if e.domain is target_domain]
            history = [truth.item_cluster[(e.domain, e.item_id)] for e in user_events
                       if e.domain is target_domain.other and e.timestamp < targets[-1].timestamp] \
                if targets else []
            shared_history = [c for c in history if c.startswith("shared:")]
            if not shared_history:
                continue
            guess = Counter(shared_history).most_common(1)[0][0]
            hits += guess == truth.item_cluster[(targets[-1].domain, targets[-1].item_id)]
            total += 1
    n_shared = len({c for c in truth.item_cluster.values() if c.startswith("shared:")})
    return (hits / total if total else 0.0), 1.0 / max(n_shared, 1)


def write_events(events, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["user_id", "item_id", "domain", "timestamp"])
        for e in events:
            writer.writerow([e.user_id, e.item_id, e.domain.value, e.timestamp])


def save_ground_truth(truth, path):
    payload = {
        "users": truth.users,
        "item_cluster": {f"{d.value}:{item}": label for (d, item), label in truth.item_cluster.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def load_ground_truth(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Ground truth file not found at {path}")
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    item_cluster = {}
    for key, label in payload["item_cluster"].items():
        domain, item = key.split(":", 1)
        item_cluster[(Domain(domain), item)] = label
    return GroundTruth(payload["users"], item_cluster)
