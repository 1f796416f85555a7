"""Interaction-log ingestion, filtering, splitting, batching, synthesis.

Dataset conventions:

* dense item ids are contiguous 1..num_items; id 0 is reserved for padding;
* per-user sequences are chronological (stable sort, input order breaks
  timestamp ties) and keep only the most recent ``max_len`` events;
* leave-one-out split: last item = test target, second-to-last = validation
  target, the remaining prefix is the training region.  Training examples
  are every (prefix, next) pair inside that region;
* batches are left-padded, so the newest item sits at the last column.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptyDatasetError, FormatError
from .numerics import make_rng

MALFORMED_ABORT_FRACTION = 0.01


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    timestamp: int


class InteractionDataset:
    """Immutable filtered interaction data with derived splits."""

    def __init__(self, users, sequences, item_tokens, max_len,
                 build_params=None, markov_next=None, markov_sharpness=None):
        self.users = list(users)
        self.sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
        self.item_tokens = list(item_tokens)
        self.token_to_id = {tok: i + 1 for i, tok in enumerate(self.item_tokens)}
        self.max_len = int(max_len)
        self.build_params = dict(build_params or {})
        self.markov_next = (None if markov_next is None
                            else np.asarray(markov_next, dtype=np.int64))
        self.markov_sharpness = markov_sharpness
        self._samples = self._build_splits()

    @property
    def num_items(self) -> int:
        return len(self.item_tokens)

    @property
    def vocab_size(self) -> int:
        """Dense id space including the reserved padding slot."""
        return self.num_items + 1

    def _build_splits(self):
        """(user_index, end) pairs; context = seq[:end], target = seq[end]."""
        samples = {"train": [], "valid": [], "test": []}
        for ui, seq in enumerate(self.sequences):
            t = len(seq)
            if t < 3:
                continue  # no room for a context plus both held-out targets
            samples["test"].append((ui, t - 1))
            samples["valid"].append((ui, t - 2))
            for end in range(1, t - 2):
                samples["train"].append((ui, end))
        return samples

    def samples(self, split: str):
        if split not in self._samples:
            raise ContractError(f"split must be train/valid/test, got {split!r}")
        return self._samples[split]

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        return (self.users == other.users
                and self.item_tokens == other.item_tokens
                and self.max_len == other.max_len
                and len(self.sequences) == len(other.sequences)
                and all(np.array_equal(a, b)
                        for a, b in zip(self.sequences, other.sequences))
                and ((self.markov_next is None) == (other.markov_next is None))
                and (self.markov_next is None
                     or np.array_equal(self.markov_next, other.markov_next)))


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def load_interactions(path, fmt: str = "tsv", user_col: str = "user_id",
                      item_col: str = "item_id", time_col: str = "timestamp"):
    """Parse a delimited interaction log into records.

    Malformed rows (missing fields, blank tokens, non-integer timestamps) are
    counted; the run aborts if they exceed 1% of data rows.
    """
    if fmt not in ("tsv", "csv"):
        raise FormatError(f"format must be tsv or csv, got {fmt!r}")
    delim = "\t" if fmt == "tsv" else ","
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    with handle:
        reader = csv.reader(handle, delimiter=delim)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        missing = [c for c in (user_col, item_col, time_col) if c not in header]
        if missing:
            raise FormatError(
                f"{path}: missing columns {missing}; available: {header}")
        ui, ii, ti = (header.index(c) for c in (user_col, item_col, time_col))
        records = []
        malformed = 0
        total = 0
        for row in reader:
            total += 1
            try:
                user = row[ui].strip()
                item = row[ii].strip()
                ts = int(row[ti].strip())
                if not user or not item:
                    raise ValueError("blank token")
            except (IndexError, ValueError):
                malformed += 1
                continue
            records.append(InteractionRecord(user, item, ts))
    if total and malformed / total > MALFORMED_ABORT_FRACTION:
        raise FormatError(
            f"{path}: {malformed}/{total} malformed rows exceeds the "
            f"{MALFORMED_ABORT_FRACTION:.0%} threshold")
    return records


# ---------------------------------------------------------------------------
# filtering + split construction
# ---------------------------------------------------------------------------


def build_dataset(records, min_user: int = 5, min_item: int = 5,
                  max_len: int = 200, one_pass: bool = False) -> InteractionDataset:
    """Alternating user/item minimum-count filtering, then chronological
    sequences, truncation to the most recent ``max_len``, and the
    leave-one-out split.

    The default iterates the filter to a fixed point (a k-core), since one
    pass can leave counts re-violated; ``one_pass`` applies each rule once.
    """
    if not records:
        raise EmptyDatasetError("no interaction records supplied")
    live = list(records)
    while True:
        user_counts = {}
        for r in live:
            user_counts[r.user] = user_counts.get(r.user, 0) + 1
        kept = [r for r in live if user_counts[r.user] >= min_user]
        item_counts = {}
        for r in kept:
            item_counts[r.item] = item_counts.get(r.item, 0) + 1
        kept = [r for r in kept if item_counts[r.item] >= min_item]
        changed = len(kept) != len(live)
        live = kept
        if one_pass or not changed:
            break
    if not live:
        raise EmptyDatasetError(
            f"filtering (min_user={min_user}, min_item={min_item}) removed everything")

    item_tokens = []
    token_seen = set()
    user_order = []
    per_user = {}
    for idx, r in enumerate(live):
        if r.item not in token_seen:
            token_seen.add(r.item)
            item_tokens.append(r.item)
        if r.user not in per_user:
            per_user[r.user] = []
            user_order.append(r.user)
        per_user[r.user].append((r.timestamp, idx, r.item))
    token_to_id = {tok: i + 1 for i, tok in enumerate(item_tokens)}

    sequences = []
    for user in user_order:
        events = sorted(per_user[user], key=lambda e: e[0])  # stable: ties keep input order
        ids = [token_to_id[item] for _, _, item in events]
        sequences.append(ids[-max_len:])

    return InteractionDataset(
        user_order, sequences, item_tokens, max_len,
        build_params={"min_user": min_user, "min_item": min_item,
                      "one_pass": one_pass})


def dataset_stats(ds: InteractionDataset) -> dict:
    interactions = int(sum(len(s) for s in ds.sequences))
    users = len(ds.users)
    items = ds.num_items
    return {
        "users": users,
        "items": items,
        "interactions": interactions,
        "avg_ua": interactions / users if users else 0.0,
        "avg_ia": interactions / items if items else 0.0,
        "sparsity": (1.0 - interactions / (users * items)) * 100.0
                    if users and items else 0.0,
    }


def format_stats_table(stats: dict, name: str = "dataset") -> str:
    """One-row table in the usual #Users / #Items / ... layout."""
    header = f"{'Dataset':<12}{'#Users':>10}{'#Items':>10}{'#Interactions':>15}" \
             f"{'Avg. UA':>10}{'Avg. IA':>10}{'Sparsity':>10}"
    row = (f"{name:<12}{stats['users']:>10,}{stats['items']:>10,}"
           f"{stats['interactions']:>15,}{stats['avg_ua']:>10.1f}"
           f"{stats['avg_ia']:>10.1f}{stats['sparsity']:>9.2f}%")
    return header + "\n" + row


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def pad_context(context: np.ndarray, n_positions: int) -> np.ndarray:
    """Left-pad (or keep the most recent n_positions of) one context row."""
    context = context[-n_positions:]
    row = np.zeros(n_positions, dtype=np.int64)
    if len(context):
        row[-len(context):] = context
    return row


def make_batches(ds: InteractionDataset, split: str, batch_size: int,
                 n_positions: int | None = None, shuffle_seed=None):
    """Yield (ids (B, N), targets (B,)) with left padding; the final partial
    batch is emitted.  Order is deterministic: fixed for valid/test, a
    seeded permutation for train when ``shuffle_seed`` is given."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    n_positions = ds.max_len if n_positions is None else n_positions
    samples = list(ds.samples(split))
    if shuffle_seed is not None:
        perm = make_rng(shuffle_seed).permutation(len(samples))
        samples = [samples[i] for i in perm]
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        ids = np.zeros((len(chunk), n_positions), dtype=np.int64)
        targets = np.zeros(len(chunk), dtype=np.int64)
        for row, (ui, end) in enumerate(chunk):
            seq = ds.sequences[ui]
            ids[row] = pad_context(seq[:end], n_positions)
            targets[row] = seq[end]
        yield ids, targets


# ---------------------------------------------------------------------------
# synthetic first-order interaction generator
# ---------------------------------------------------------------------------


def synth_markov(num_users: int, vocab: int, sharpness: float, seed,
                 seq_len: int = 20) -> InteractionDataset:
    """Sequences from a fixed random successor map over ``vocab`` items.

    Each step follows the designated successor with probability
    ``sharpness`` and otherwise draws uniformly over all items, so
    P(successor) = sharpness + (1 - sharpness)/vocab.  The map is persisted
    on the dataset, making the best-achievable ranking computable exactly.
    """
    if vocab < 2:
        raise ContractError(f"vocab must be >= 2, got {vocab}")
    if not 0.0 <= sharpness <= 1.0:
        raise ContractError(f"sharpness must be in [0, 1], got {sharpness}")
    if seq_len < 3:
        raise ContractError(f"seq_len must be >= 3 for a usable split, got {seq_len}")
    gen = make_rng(seed)
    cycle = gen.permutation(vocab) + 1  # one full cycle covers every item
    nxt = np.zeros(vocab + 1, dtype=np.int64)
    for i in range(vocab):
        nxt[cycle[i]] = cycle[(i + 1) % vocab]
    sequences = []
    for _ in range(num_users):
        seq = [int(gen.integers(1, vocab + 1))]
        for _ in range(seq_len - 1):
            if gen.random() < sharpness:
                seq.append(int(nxt[seq[-1]]))
            else:
                seq.append(int(gen.integers(1, vocab + 1)))
        sequences.append(seq)
    users = [f"u{i}" for i in range(num_users)]
    items = [f"i{j}" for j in range(1, vocab + 1)]
    return InteractionDataset(users, sequences, items, seq_len,
                              build_params={"synthetic": True, "seed": seed},
                              markov_next=nxt, markov_sharpness=sharpness)


def bayes_topk(ds: InteractionDataset, last_item: int, k: int):
    """Best-achievable top-k list after ``last_item``: the designated
    successor first, remaining slots filled by ascending id (the global tie
    rule; non-successors are equally likely)."""
    if ds.markov_next is None:
        raise ContractError("dataset carries no transition map")
    nxt = int(ds.markov_next[last_item])
    out = [nxt]
    for cand in range(1, ds.num_items + 1):
        if len(out) == k:
            break
        if cand != nxt:
            out.append(cand)
    return out


def bayes_hit_rate(ds: InteractionDataset, split: str, k: int) -> float:
    """Hit rate of the best-achievable ranker on a split (exact, from the
    persisted map)."""
    samples = ds.samples(split)
    if not samples:
        raise ContractError(f"split {split!r} is empty")
    hits = 0
    for ui, end in samples:
        seq = ds.sequences[ui]
        hits += int(seq[end]) in bayes_topk(ds, int(seq[end - 1]), k)
    return hits / len(samples)


# ---------------------------------------------------------------------------
# cache file (versioned text format, tab-separated fields)
# ---------------------------------------------------------------------------

CACHE_MAGIC = "recgrela-dataset"
CACHE_VERSION = 1


def save_cache(ds: InteractionDataset, path):
    """Layout: header, build meta, item-token table (line = one token),
    optional transition map, then one user line each:
    ``user<TAB>length<TAB>first-id delta delta ...`` (delta-encoded ids)."""
    lines = [f"{CACHE_MAGIC} v{CACHE_VERSION}"]
    meta = [f"max_len={ds.max_len}"]
    meta.extend(f"{k}={v}" for k, v in sorted(ds.build_params.items()))
    lines.append("meta\t" + "\t".join(meta))
    lines.append(f"items\t{ds.num_items}")
    lines.extend(ds.item_tokens)
    if ds.markov_next is not None:
        lines.append(f"markov\t{ds.markov_sharpness}")
        lines.append(" ".join(str(int(x)) for x in ds.markov_next[1:]))
    lines.append(f"users\t{len(ds.users)}")
    for user, seq in zip(ds.users, ds.sequences):
        deltas = np.diff(seq, prepend=0)
        lines.append(f"{user}\t{len(seq)}\t" + " ".join(str(int(d)) for d in deltas))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_cache(path) -> InteractionDataset:
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read dataset cache {path}: {exc}") from None
    if not lines or lines[0] != f"{CACHE_MAGIC} v{CACHE_VERSION}":
        raise FormatError(f"{path}: not a v{CACHE_VERSION} dataset cache")
    pos = 1
    meta_fields = lines[pos].split("\t")[1:]
    meta = dict(field.split("=", 1) for field in meta_fields)
    max_len = int(meta.pop("max_len"))
    pos += 1
    tag, count_s = lines[pos].split("\t")
    if tag != "items":
        raise FormatError(f"{path}: expected items section, got {tag!r}")
    num_items = int(count_s)
    pos += 1
    item_tokens = lines[pos:pos + num_items]
    pos += num_items
    markov_next = None
    sharpness = None
    if pos < len(lines) and lines[pos].startswith("markov\t"):
        sharpness = float(lines[pos].split("\t")[1])
        pos += 1
        vals = [int(x) for x in lines[pos].split()]
        markov_next = np.zeros(num_items + 1, dtype=np.int64)
        markov_next[1:] = vals
        pos += 1
    tag, ucount_s = lines[pos].split("\t")
    if tag != "users":
        raise FormatError(f"{path}: expected users section, got {tag!r}")
    pos += 1
    users = []
    sequences = []
    for line in lines[pos:pos + int(ucount_s)]:
        user, length_s, payload = line.split("\t")
        deltas = np.array([int(x) for x in payload.split()], dtype=np.int64)
        if len(deltas) != int(length_s):
            raise FormatError(f"{path}: corrupt sequence for user {user!r}")
        users.append(user)
        sequences.append(np.cumsum(deltas))
    return InteractionDataset(users, sequences, item_tokens, max_len,
                              build_params=meta, markov_next=markov_next,
                              markov_sharpness=sharpness)
