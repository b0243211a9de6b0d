"""Interaction log ingestion, filtering, leave-one-out splitting and split I/O."""

import csv
import enum
import logging
import os
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

logger = logging.getLogger("dpgdiff_logger")

MASK = 0
PAD = 1
N_RESERVED = 2

LOG_COLUMNS = ("user_id", "item_id", "domain", "timestamp")
DELIMITERS = {"tsv": "\t", "csv": ","}


class DataError(ValueError):
    pass


class Domain(str, enum.Enum):
    X = "X"
    Y = "Y"

    @property
    def other(self):
        return Domain.Y if self is Domain.X else Domain.X


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: str
    domain: Domain
    timestamp: int


@dataclass(frozen=True)
class RowError:
    line: int
    message: str


@dataclass(frozen=True)
class UserSequence:
    user_index: int
    items: tuple = ()  # tuple of (item_index, Domain)

    @property
    def length(self):
        return len(self.items)

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class HeldOut:
    sequence: UserSequence
    target_item: int
    target_domain: Domain


class Vocabulary:
    """Item string to dense index for one domain; 0 and 1 are MASK and PAD."""

    def __init__(self, domain, items=()):
        self.domain = domain
        self.index = OrderedDict()
        for item in items:
            self.add(item)

    def add(self, item_id):
        if item_id not in self.index:
            self.index[item_id] = len(self.index) + N_RESERVED
        return self.index[item_id]

    @property
    def size(self):
        """Embedding table rows, reserved rows included."""
        return len(self.index) + N_RESERVED

    @property
    def n_items(self):
        return len(self.index)

    def __contains__(self, item_id):
        return item_id in self.index

    def __getitem__(self, item_id):
        return self.index[item_id]

    def item_ids(self):
        return list(self.index)


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    vocab_x: Vocabulary
    vocab_y: Vocabulary
    user_ids: list = field(default_factory=list)

    def vocab(self, domain):
        return self.vocab_x if domain is Domain.X else self.vocab_y

    def vocab_sizes(self):
        return {Domain.X: self.vocab_x.size, Domain.Y: self.vocab_y.size}


# ----------------- Ingestion -----------------
def default_domain_labels():
    return {"X": Domain.X, "Y": Domain.Y}


def ingest_log(path, fmt="csv", domain_labels=None):
    """Parse an interaction log.

    Returns ``(events, errors)``; malformed rows become ``RowError`` entries
    with their 1-based line number and are skipped. An unknown domain label or
    an empty file is a hard error.
    """
    if fmt not in DELIMITERS:
        raise ValueError(f"Unknown log format {fmt!r}, expected one of {sorted(DELIMITERS)}")
    if not os.path.exists(path):
        raise FileNotFoundError(f"Interaction log not found at {path}")
    labels = domain_labels or default_domain_labels()

    events = []
    errors = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter=DELIMITERS[fmt])
        header = next(reader, None)
        if header is None:
            raise DataError(f"Interaction log {path} is empty")
        header = [h.strip() for h in header]
        missing = [c for c in LOG_COLUMNS if c not in header]
        if missing:
            raise DataError(f"Interaction log {path} is missing columns: {', '.join(missing)}")
        columns = {c: header.index(c) for c in LOG_COLUMNS}

        start = reader.line_num + 1
        for row in reader:
            # quoted fields may span lines, a row is reported at its first line
            line_no, start = start, reader.line_num + 1
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                errors.append(RowError(line_no, f"expected {len(header)} fields, got {len(row)}"))
                continue
            user_id = row[columns["user_id"]].strip()
            item_id = row[columns["item_id"]].strip()
            label = row[columns["domain"]].strip()
            raw_ts = row[columns["timestamp"]].strip()
            if not user_id or not item_id:
                errors.append(RowError(line_no, "empty user_id or item_id"))
                continue
            if label not in labels:
                raise DataError(f"{path}:{line_no}: unknown domain label {label!r} "
                                f"(configured: {', '.join(sorted(labels))})")
            try:
                timestamp = int(raw_ts)
            except ValueError:
                errors.append(RowError(line_no, f"timestamp {raw_ts!r} is not an integer"))
                continue
            if timestamp < 0:
                errors.append(RowError(line_no, f"timestamp {timestamp} is negative"))
                continue
            events.append(InteractionEvent(user_id, item_id, labels[label], timestamp))

    if not events and not errors:
        raise DataError(f"Interaction log {path} has a header but no rows")
    for error in errors:
        logger.warning(f"{path}:{error.line}: {error.message}")
    return events, errors


# ----------------- Filtering and splitting -----------------
def _group_by_user(events):
    """Per-user events in first-appearance order, each sorted by timestamp (stable)."""
    grouped = OrderedDict()
    for event in events:
        grouped.setdefault(event.user_id, []).append(event)
    for user_id, user_events in grouped.items():
        grouped[user_id] = sorted(user_events, key=lambda e: e.timestamp)
    return grouped


def filter_users(events, min_user_interactions=10, min_per_domain=3, min_item_interactions=0):
    """Apply the user (and optional item) frequency rules.

    Returns the surviving per-user event lists and a dict of how many users
    each rule removed.
    """
    if min_item_interactions > 0:
        item_counts = Counter((e.domain, e.item_id) for e in events)
        events = [e for e in events if item_counts[(e.domain, e.item_id)] >= min_item_interactions]

    grouped = _group_by_user(events)
    survivors = OrderedDict()
    dropped = {"min_user_interactions": 0, "min_per_domain": 0}
    for user_id, user_events in grouped.items():
        if len(user_events) < min_user_interactions:
            dropped["min_user_interactions"] += 1
            continue
        per_domain = Counter(e.domain for e in user_events)
        if min(per_domain[Domain.X], per_domain[Domain.Y]) < min_per_domain:
            dropped["min_per_domain"] += 1
            continue
        if len(user_events) < 3:
            # leave-one-out needs two held-out items and a non-empty history
            dropped["min_user_interactions"] += 1
            continue
        survivors[user_id] = user_events
    return survivors, dropped


def filter_and_split(events, min_user_interactions=10, min_per_domain=3, max_seq_len=15,
                     min_item_interactions=0):
    """Filter users, truncate to the most recent items and split leave-one-out."""
    if not events:
        raise DataError("No events to split")
    if max_seq_len < 3:
        raise ValueError(f"max_seq_len must be at least 3, got {max_seq_len}")

    survivors, dropped = filter_users(events, min_user_interactions, min_per_domain,
                                      min_item_interactions)
    if not survivors:
        binding = max(dropped, key=dropped.get)
        threshold = {"min_user_interactions": min_user_interactions,
                     "min_per_domain": min_per_domain}[binding]
        raise DataError(f"No users survive filtering; {binding}={threshold} removed "
                        f"{dropped[binding]} of {sum(dropped.values())} users")

    vocab_x = Vocabulary(Domain.X)
    vocab_y = Vocabulary(Domain.Y)
    train, validation, test, user_ids = [], [], [], []
    for user_index, (user_id, user_events) in enumerate(survivors.items()):
        recent = user_events[-max_seq_len:]
        items = tuple(
            ((vocab_x if e.domain is Domain.X else vocab_y).add(e.item_id), e.domain)
            for e in recent
        )
        user_ids.append(user_id)
        train.append(UserSequence(user_index, items[:-2]))
        validation.append(HeldOut(UserSequence(user_index, items[:-2]), *items[-2]))
        test.append(HeldOut(UserSequence(user_index, items[:-1]), *items[-1]))

    return DatasetSplit(train, validation, test, vocab_x, vocab_y, user_ids)


def surviving_events(events, split):
    """All events of users kept by ``split``, in original order."""
    kept = set(split.user_ids)
    return [e for e in events if e.user_id in kept]


def full_sequence(split, user_index):
    """The truncated sequence a user's split was cut from."""
    held = split.test[user_index]
    return UserSequence(user_index, held.sequence.items + ((held.target_item, held.target_domain),))


def split_domains(seq):
    """Order-preserving per-domain subsequences of a cross-domain sequence."""
    s_x = tuple(entry for entry in seq.items if entry[1] is Domain.X)
    s_y = tuple(entry for entry in seq.items if entry[1] is Domain.Y)
    return UserSequence(seq.user_index, s_x), UserSequence(seq.user_index, s_y)


def interleave(s_x, s_y, domains):
    """Inverse of ``split_domains`` given the original domain order."""
    xs, ys = iter(s_x.items), iter(s_y.items)
    items = tuple(next(xs) if d is Domain.X else next(ys) for d in domains)
    return UserSequence(s_x.user_index, items)


def split_statistics(split):
    """Counts in the shape of the dataset statistics table."""
    lengths = [len(h.sequence) + 1 for h in split.test]
    return {
        "users": len(split.test),
        "items_x": split.vocab_x.n_items,
        "items_y": split.vocab_y.n_items,
        "avg_seq_len": sum(lengths) / len(lengths) if lengths else 0.0,
        "train_sequences": len(split.train),
        "valid_x": sum(1 for h in split.validation if h.target_domain is Domain.X),
        "valid_y": sum(1 for h in split.validation if h.target_domain is Domain.Y),
        "test_x": sum(1 for h in split.test if h.target_domain is Domain.X),
        "test_y": sum(1 for h in split.test if h.target_domain is Domain.Y),
    }


def format_statistics(stats):
    rows = [
        ("#Users", f"{stats['users']}"),
        ("#Items (X / Y)", f"{stats['items_x']} / {stats['items_y']}"),
        ("Avg. Sequence Length", f"{stats['avg_seq_len']:.2f}"),
        ("#Training Sequences", f"{stats['train_sequences']}"),
        ("#Validation (X / Y)", f"{stats['valid_x']} / {stats['valid_y']}"),
        ("#Test (X / Y)", f"{stats['test_x']} / {stats['test_y']}"),
    ]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label:<{width}}  {value}" for label, value in rows)


# ----------------- Split manifest I/O -----------------
def _encode_items(items):
    return " ".join(f"{domain.value}:{index}" for index, domain in items)


def _decode_items(text):
    items = []
    for token in text.split():
        domain, index = token.split(":")
        items.append((int(index), Domain(domain)))
    return tuple(items)


def save_split(split, out_dir):
    """Write {train,valid,test}.tsv plus vocab.tsv, one record per line."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "train.tsv"), "w", encoding="utf-8") as f:
        f.write("user_index\tuser_id\titems\n")
        for seq in split.train:
            f.write(f"{seq.user_index}\t{split.user_ids[seq.user_index]}\t{_encode_items(seq.items)}\n")
    for name, part in (("valid", split.validation), ("test", split.test)):
        with open(os.path.join(out_dir, f"{name}.tsv"), "w", encoding="utf-8") as f:
            f.write("user_index\titems\ttarget\n")
            for held in part:
                f.write(f"{held.sequence.user_index}\t{_encode_items(held.sequence.items)}\t"
                        f"{held.target_domain.value}:{held.target_item}\n")
    with open(os.path.join(out_dir, "vocab.tsv"), "w", encoding="utf-8") as f:
        f.write("domain\tindex\titem_id\n")
        for vocab in (split.vocab_x, split.vocab_y):
            for item_id, index in vocab.index.items():
                f.write(f"{vocab.domain.value}\t{index}\t{item_id}\n")


def _read_records(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Split file not found at {path}")
    with open(path, "r", encoding="utf-8") as f:
        next(f)
        return [line.rstrip("\n").split("\t") for line in f if line.strip()]


def load_split(split_dir):
    vocab_x, vocab_y = Vocabulary(Domain.X), Vocabulary(Domain.Y)
    for domain, index, item_id in _read_records(os.path.join(split_dir, "vocab.tsv")):
        vocab = vocab_x if domain == Domain.X.value else vocab_y
        if vocab.add(item_id) != int(index):
            raise DataError(f"vocab.tsv: index {index} for {item_id!r} is out of order")

    train, user_ids = [], []
    for user_index, user_id, items in (r + [""] * (3 - len(r)) for r in
                                       _read_records(os.path.join(split_dir, "train.tsv"))):
        train.append(UserSequence(int(user_index), _decode_items(items)))
        user_ids.append(user_id)

    def held_out(name):
        records = []
        for user_index, items, target in _read_records(os.path.join(split_dir, f"{name}.tsv")):
            domain, index = target.split(":")
            records.append(HeldOut(UserSequence(int(user_index), _decode_items(items)),
                                   int(index), Domain(domain)))
        return records

    return DatasetSplit(train, held_out("valid"), held_out("test"), vocab_x, vocab_y, user_ids)
