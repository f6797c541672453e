"""Streaming KV cache compressed by temporal correspondence.

Each incoming token is matched to its top-1 neighbour among the cache
entries, where an entry is identified by the key of its most recent member.
When that key has cosine similarity >= ``merge_tol`` the token is folded into
the entry: the multiplicity grows by one, the value becomes the running mean
of all members, and the representative key used for attention is updated
according to the representative policy. Otherwise the token opens a
new entry. Attention over the cache uses the ``+ln(m)`` logit bias, so exact
repeats cost nothing in accuracy.
"""
import csv
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .ann import AnnConfig, top1_neighbor
from .attention import GroupedKV, grouped_attention
from .exceptions import EmptyContextError, ShapeError
from .tensor import as_matrix

POLICIES = ("last", "mean", "medoid")
MEDOID_SAMPLE = 32


@dataclass(frozen=True)
class CacheEntry:
    key: np.ndarray
    value_mean: np.ndarray
    multiplicity: int
    last_frame: int


@dataclass(frozen=True)
class IngestStats:
    merges: int
    appends: int
    entries: int
    assignment: np.ndarray  # entry id for every ingested token
    zero_norm: int = 0


class _Buffer:
    """Row buffer with amortised O(1) append."""

    def __init__(self, cols, dtype=np.float64):
        self.data = np.empty((16, cols) if cols else 16, dtype=dtype)
        self.n = 0

    def append(self, row):
        if self.n == self.data.shape[0]:
            grown = np.empty((2 * self.n,) + self.data.shape[1:], dtype=self.data.dtype)
            grown[: self.n] = self.data[: self.n]
            self.data = grown
        self.data[self.n] = row
        self.n += 1

    def view(self):
        return self.data[: self.n]


class TempCache:
    """Compressed KV cache state.

    Parameters
    ----------
    d, d_v : int
        Key and value widths.
    merge_tol : float
        Cosine similarity needed to merge a token into its neighbour.
    ann : AnnConfig
        Backend used for the top-1 correspondence search.
    policy : {"last", "mean", "medoid"}
        How the representative key of a merged entry is maintained.
    """

    def __init__(self, d, d_v, merge_tol=0.9, ann=None, policy="last"):
        if not 0.0 <= merge_tol <= 1.0:
            raise ValueError(f"merge_tol must lie in [0, 1], got {merge_tol}")
        self.d = d
        self.d_v = d_v
        self.merge_tol = merge_tol
        self.ann = ann or AnnConfig()
        self.frames_ingested = 0
        self.raw_tokens_seen = 0
        self._keys = _Buffer(d)
        self._match = _Buffer(d)
        self._key_sums = _Buffer(d)
        self._values = _Buffer(d_v)
        self._mult = _Buffer(0, np.int64)
        self._last = _Buffer(0, np.int64)
        self._samples: Optional[List[List[np.ndarray]]] = None
        self.policy = "last"
        self.set_representative_policy(policy)

    # -- state accessors ---------------------------------------------------

    def __len__(self):
        return self._keys.n

    @property
    def keys(self):
        return self._keys.view()

    @property
    def value_means(self):
        return self._values.view()

    @property
    def multiplicities(self):
        return self._mult.view()

    @property
    def last_frames(self):
        return self._last.view()

    @property
    def entries(self):
        return [
            CacheEntry(self.keys[i].copy(), self.value_means[i].copy(),
                       int(self.multiplicities[i]), int(self.last_frames[i]))
            for i in range(len(self))
        ]

    def grouped(self):
        return GroupedKV(self.keys, self.value_means, self.multiplicities)

    def set_representative_policy(self, policy):
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
        if policy == "medoid" and self._samples is None:
            self._samples = [[self.keys[i].copy()] for i in range(len(self))]
        self.policy = policy

    # -- ingestion -----------------------------------------------------------

    def _append(self, key, value, frame):
        self._keys.append(key)
        self._match.append(key)
        self._key_sums.append(key)
        self._values.append(value)
        self._mult.append(1)
        self._last.append(frame)
        if self._samples is not None:
            self._samples.append([key.copy()])

    def _merge(self, e, key, value, frame):
        m = self._mult.data[e]
        self._values.data[e] = (m * self._values.data[e] + value) / (m + 1)
        self._mult.data[e] = m + 1
        self._last.data[e] = frame
        self._key_sums.data[e] += key
        self._match.data[e] = key
        if self._samples is not None and len(self._samples[e]) < MEDOID_SAMPLE:
            self._samples[e].append(key.copy())
        if self.policy == "last":
            self._keys.data[e] = key
        elif self.policy == "mean":
            self._keys.data[e] = self._key_sums.data[e] / (m + 1)
        else:
            self._keys.data[e] = _medoid(self._samples[e])

    def _accepts(self, rep, key, unit_key):
        if self.merge_tol >= 1.0:
            return bool(np.all(np.abs(rep - key) <= 1e-7))
        return _cosine(rep, unit_key) >= self.merge_tol

    def ingest_frame(self, new_keys, new_values, frame=None):
        """Fold one frame of tokens into the cache and return IngestStats."""
        new_keys = as_matrix(new_keys, "keys", cols=self.d)
        new_values = as_matrix(new_values, "values", cols=self.d_v)
        if new_keys.shape[0] != new_values.shape[0]:
            raise ShapeError(f"{new_keys.shape[0]} keys but {new_values.shape[0]} values")
        frame = self.frames_ingested if frame is None else frame
        n_old = len(self)
        keys64 = new_keys.astype(np.float64)
        vals64 = new_values.astype(np.float64)
        norms = np.sqrt(np.einsum("ij,ij->i", keys64, keys64))
        unit = keys64 / np.where(norms == 0, 1.0, norms)[:, None]
        ann_hit: List[Optional[int]] = [None] * keys64.shape[0]
        if n_old and keys64.shape[0]:
            # search in cosine geometry, the same measure the merge test uses
            index = self.ann.build(_unit_rows(self._match.view()).astype(np.float32))
            ann_hit = top1_neighbor(index, unit.astype(np.float32))

        merges = appends = zero_norm = 0
        assignment = np.empty(keys64.shape[0], dtype=np.int64)
        for i, key in enumerate(keys64):
            target = ann_hit[i]
            # entries opened earlier in this frame are not in the index yet
            if len(self) > n_old:
                fresh = _unit_rows(self._match.data[n_old:len(self)]) @ unit[i]
                j = int(np.argmax(fresh))
                if target is None or fresh[j] > _cosine(self._match.data[target], unit[i]):
                    target = n_old + j
            merged = False
            if norms[i] == 0.0 and self.merge_tol < 1.0:
                zero_norm += 1
            elif target is not None and self._accepts(self._match.data[target], key, unit[i]):
                self._merge(target, key, vals64[i], frame)
                assignment[i] = target
                merged = True
                merges += 1
            if not merged:
                assignment[i] = len(self)
                self._append(key, vals64[i], frame)
                appends += 1
        self.frames_ingested += 1
        self.raw_tokens_seen += keys64.shape[0]
        return IngestStats(merges, appends, len(self), assignment, zero_norm)

    # -- attention -----------------------------------------------------------

    def attend(self, queries, want_weights=False, log_bias=True):
        if len(self) == 0:
            raise EmptyContextError("empty context: cache has no entries")
        return grouped_attention(queries, self.grouped(), want_weights, log_bias)

    # -- debug dump ----------------------------------------------------------

    def dump_csv(self, fh):
        """One row per entry: entry_id, multiplicity, last_frame, key_norm, value_mean_norm."""
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entry_id", "multiplicity", "last_frame", "key_norm", "value_mean_norm"])
        key_norms = np.linalg.norm(self.keys, axis=1)
        val_norms = np.linalg.norm(self.value_means, axis=1)
        for i in range(len(self)):
            w.writerow([i, int(self.multiplicities[i]), int(self.last_frames[i]),
                        f"{key_norms[i]:.9g}", f"{val_norms[i]:.9g}"])


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1)
    return x / np.where(norms == 0, 1.0, norms)[:, None]


def _cosine(rep, unit_key):
    n = float(np.sqrt(rep @ rep))
    return float(rep @ unit_key) / n if n > 0 else -np.inf


def _medoid(sample):
    """Member with the highest mean cosine similarity to the rest of the sample."""
    s = np.asarray(sample)
    norms = np.linalg.norm(s, axis=1)
    norms[norms == 0] = 1.0
    unit = s / norms[:, None]
    return s[int(np.argmax((unit @ unit.T).mean(axis=1)))].copy()
