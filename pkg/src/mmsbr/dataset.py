"""Interaction logs to session corpora.

Sessions are one user's interactions within one UTC calendar day, ordered by
timestamp. Items seen fewer than `min_item_freq` times (over the whole log)
are dropped, then sessions that shrank to a single event. The last item of
each surviving session is the prediction target. Splits are contiguous
chronological blocks; the standard test split drops sessions touching items
unseen in training, while the cold-start variant keeps them.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

SECONDS_PER_DAY = 86400


class CorpusError(ValueError):
    """Malformed or empty corpus input."""


class PriceRangeError(ValueError):
    """Price fell outside its category range and clamping was disabled."""


@dataclass(frozen=True)
class Interaction:
    user_tag: str
    item_id: int
    timestamp: float
    price: float
    category_id: int

    def __post_init__(self):
        if not self.price > 0:
            raise CorpusError(f"price must be > 0, got {self.price}")
        if not (self.timestamp == self.timestamp and abs(self.timestamp) != float("inf")):
            raise CorpusError(f"timestamp must be finite, got {self.timestamp}")


@dataclass(frozen=True)
class Session:
    """Ordered item ids; everything before the last is context."""

    items: tuple
    end_time: float = 0.0

    @property
    def context(self):
        return self.items[:-1]

    @property
    def target(self):
        return self.items[-1]

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class CategoryPriceRange:
    category_id: int
    min: float
    max: float

    def __post_init__(self):
        if self.min > self.max:
            raise CorpusError(f"category {self.category_id}: min {self.min} > max {self.max}")


@dataclass(frozen=True)
class ItemRecord:
    item_id: int
    category_id: int
    price: float
    price_level: int


@dataclass
class SessionCorpus:
    """Items (dense ids 0..n-1), chronological splits and the cold variant."""

    items: list
    sessions_train: list
    sessions_val: list
    sessions_test: list
    test_plus: list
    cold_items: frozenset
    rho: int
    n_categories: int
    price_ranges: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.items)

    def warm_items(self):
        seen = set()
        for s in self.sessions_train:
            seen.update(s.items)
        return frozenset(seen)

    def levels(self):
        return [it.price_level for it in self.items]

    def categories(self):
        return [it.category_id for it in self.items]


def encode_price_level(price, price_range, rho, clamp=False):
    """Bucket a price into [0, rho-1] within its category range.

    level = floor((price - min) / (max - min) * rho); price == max clamps to
    rho - 1 so levels stay valid lookup indices. A degenerate range maps
    everything to 0. Out-of-range prices raise unless `clamp` is set.
    """
    if rho < 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    lo, hi = price_range.min, price_range.max
    if price < lo or price > hi:
        if not clamp:
            raise PriceRangeError(
                f"price {price} outside [{lo}, {hi}] of category {price_range.category_id}"
            )
        price = min(max(price, lo), hi)
    if hi == lo:
        return 0
    level = int((price - lo) / (hi - lo) * rho)
    return min(level, rho - 1)


def build_sessions(interactions, min_item_freq=5):
    """Group one user's same-UTC-day behaviors into a session.

    The item-frequency filter counts the whole log and is applied once;
    sessions of resulting length 1 are dropped.
    """
    if not interactions:
        raise CorpusError("no interactions")
    freq = Counter(x.item_id for x in interactions)
    groups = {}
    for pos, x in enumerate(interactions):
        if freq[x.item_id] < min_item_freq:
            continue
        key = (x.user_tag, int(x.timestamp // SECONDS_PER_DAY))
        groups.setdefault(key, []).append((x.timestamp, pos, x.item_id))
    sessions = []
    for events in groups.values():
        events.sort(key=lambda e: (e[0], e[1]))  # stable on timestamp ties
        if len(events) < 2:
            continue
        sessions.append(Session(items=tuple(e[2] for e in events), end_time=events[-1][0]))
    if not sessions:
        raise CorpusError("all sessions filtered out")
    sessions.sort(key=lambda s: s.end_time)  # stable; ties keep insertion order
    return sessions


def split_chronological(sessions, ratios=(7, 2, 1), drop_unseen=True):
    """Contiguous chronological blocks in the given proportions.

    With `drop_unseen` the test block loses sessions whose context or target
    contains items absent from training (the standard protocol).
    """
    n = len(sessions)
    if n < 3:
        raise CorpusError(f"need at least 3 sessions to split, got {n}")
    total = sum(ratios)
    n_train = int(n * ratios[0] / total)
    n_val = int(n * (ratios[0] + ratios[1]) / total) - n_train
    n_train = max(n_train, 1)
    n_val = max(n_val, 1)
    if n_train + n_val >= n:
        raise CorpusError(f"split of {n} sessions leaves an empty block")
    train = sessions[:n_train]
    val = sessions[n_train : n_train + n_val]
    test = sessions[n_train + n_val :]
    if drop_unseen:
        known = set()
        for s in train:
            known.update(s.items)
        test = [s for s in test if all(i in known for i in s.items)]
    return train, val, test


def make_cold_start_variant(train, test_raw):
    """Keep test sessions containing train-unseen items and flag those items.

    Returns (test_plus, cold_item_ids); the standard split is test_plus minus
    the flagged sessions.
    """
    known = set()
    for s in train:
        known.update(s.items)
    cold = set()
    for s in test_raw:
        cold.update(i for i in s.items if i not in known)
    return list(test_raw), frozenset(cold)


def build_corpus(interactions, rho=100, min_item_freq=5, ratios=(7, 2, 1), clamp_prices=True):
    """Full pipeline: sessions, splits, dense item ids and price levels.

    Item ids are remapped to dense 0..n-1 by ascending original id; item
    price/category come from the item's first interaction. Category price
    ranges are computed over training-block interactions only; categories
    with no training coverage fall back to the global training range.
    """
    sessions = build_sessions(interactions, min_item_freq=min_item_freq)
    train, val, test_raw = split_chronological(sessions, ratios, drop_unseen=False)
    _, _, test = split_chronological(sessions, ratios, drop_unseen=True)
    test_plus, cold = make_cold_start_variant(train, test_raw)

    ids = sorted({x.item_id for x in interactions})
    dense = {orig: i for i, orig in enumerate(ids)}

    first = {}
    for x in interactions:
        if x.item_id not in first:
            first[x.item_id] = x

    # Training-block interactions: those whose grouping key (user, day)
    # finished no later than the last training session.
    groups = {}
    for pos, x in enumerate(interactions):
        key = (x.user_tag, int(x.timestamp // SECONDS_PER_DAY))
        groups.setdefault(key, []).append(x.timestamp)
    train_cut = train[-1].end_time
    lo = {}
    hi = {}
    glo, ghi = float("inf"), float("-inf")
    for x in interactions:
        key = (x.user_tag, int(x.timestamp // SECONDS_PER_DAY))
        if max(groups[key]) > train_cut:
            continue
        c = x.category_id
        lo[c] = min(lo.get(c, x.price), x.price)
        hi[c] = max(hi.get(c, x.price), x.price)
        glo = min(glo, x.price)
        ghi = max(ghi, x.price)
    if glo > ghi:  # no training interactions at all
        glo, ghi = 0.0, 1.0

    ranges = {}
    categories = sorted({x.category_id for x in interactions})
    for c in categories:
        if c in lo:
            ranges[c] = CategoryPriceRange(c, lo[c], hi[c])
        else:
            ranges[c] = CategoryPriceRange(c, glo, ghi)

    items = []
    for orig in ids:
        x = first[orig]
        level = encode_price_level(x.price, ranges[x.category_id], rho, clamp=clamp_prices)
        items.append(ItemRecord(dense[orig], x.category_id, x.price, level))

    def remap(split):
        return [Session(tuple(dense[i] for i in s.items), s.end_time) for s in split]

    return SessionCorpus(
        items=items,
        sessions_train=remap(train),
        sessions_val=remap(val),
        sessions_test=remap(test),
        test_plus=remap(test_plus),
        cold_items=frozenset(dense[i] for i in cold),
        rho=rho,
        n_categories=len(categories),
        price_ranges=ranges,
    )


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

INTERACTIONS_HEADER = ["user_tag", "item_id", "timestamp", "price", "category_id"]


def read_interactions_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INTERACTIONS_HEADER:
            raise CorpusError(
                f"{path}: expected header {','.join(INTERACTIONS_HEADER)}, got {reader.fieldnames}"
            )
        for row in reader:
            out.append(
                Interaction(
                    user_tag=row["user_tag"],
                    item_id=int(row["item_id"]),
                    timestamp=float(row["timestamp"]),
                    price=float(row["price"]),
                    category_id=int(row["category_id"]),
                )
            )
    if not out:
        raise CorpusError(f"{path}: empty interaction log")
    return out


def write_corpus(corpus, out_dir):
    """Write the item table, session manifests and corpus metadata."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "items.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "category_id", "price", "price_level"])
        for it in corpus.items:
            w.writerow([it.item_id, it.category_id, repr(it.price), it.price_level])
    names = {
        "train.sessions": corpus.sessions_train,
        "val.sessions": corpus.sessions_val,
        "test.sessions": corpus.sessions_test,
        "test_plus.sessions": corpus.test_plus,
    }
    for name, split in names.items():
        with open(os.path.join(out_dir, name), "w") as fh:
            for s in split:
                fh.write(" ".join(str(i) for i in s.items) + "\n")
    with open(os.path.join(out_dir, "corpus.kv"), "w") as fh:
        fh.write(f"rho={corpus.rho}\n")
        fh.write(f"n_items={corpus.n}\n")
        fh.write(f"n_categories={corpus.n_categories}\n")


def load_corpus(corpus_dir):
    import os

    meta = {}
    with open(os.path.join(corpus_dir, "corpus.kv")) as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, v = line.split("=", 1)
                meta[k] = int(v)

    items = []
    with open(os.path.join(corpus_dir, "items.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            items.append(
                ItemRecord(
                    int(row["item_id"]),
                    int(row["category_id"]),
                    float(row["price"]),
                    int(row["price_level"]),
                )
            )
    items.sort(key=lambda it: it.item_id)

    def read_split(name):
        sessions = []
        with open(os.path.join(corpus_dir, name)) as fh:
            for line in fh:
                ids = tuple(int(t) for t in line.split())
                if ids:
                    sessions.append(Session(ids))
        return sessions

    train = read_split("train.sessions")
    corpus = SessionCorpus(
        items=items,
        sessions_train=train,
        sessions_val=read_split("val.sessions"),
        sessions_test=read_split("test.sessions"),
        test_plus=read_split("test_plus.sessions"),
        cold_items=frozenset(),
        rho=meta["rho"],
        n_categories=meta["n_categories"],
    )
    known = corpus.warm_items()
    cold = set()
    for s in corpus.test_plus:
        cold.update(i for i in s.items if i not in known)
    corpus.cold_items = frozenset(cold)
    return corpus
