"""Query-log ingestion, filtering and daily binning.

The input is the AOL-style five column TSV::

    AnonID  Query  QueryTime  ItemRank  ClickURL

Every line is one query record; lines carrying a rank and URL are also click
records. All days are UTC calendar days.
"""

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone

import numpy as np
from scipy import sparse

from .text import ascii_ratio, contains_phrase, normalize_query

logger = logging.getLogger(__name__)

INDEX_FORMAT = "aspectrec.logindex"
INDEX_VERSION = 1
_DAY = 86400
_EPOCH = date(1970, 1, 1)


@dataclass(frozen=True)
class QueryRecord:
    user_id: str
    terms: str
    time: datetime

    def __post_init__(self):
        if not self.terms:
            raise ValueError("query terms are empty after normalization")


@dataclass(frozen=True)
class ClickRecord:
    query: str
    url: str
    rank: int
    time: datetime

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"click rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class TimeSeries:
    """Non-negative daily values starting at ``origin_day``."""

    origin_day: date
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or len(values) < 1:
            raise ValueError("a time series needs at least one value")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("time series values must be finite and >= 0")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    @property
    def last_day(self):
        return self.origin_day + timedelta(days=len(self.values) - 1)

    def window(self, start, end):
        lo = (start - self.origin_day).days
        hi = (end - self.origin_day).days
        if lo < 0 or hi >= len(self.values) or hi < lo:
            raise ValueError(f"window {start}..{end} outside series span")
        return TimeSeries(start, self.values[lo : hi + 1])


class EntityAliasTable:
    """entity id -> set of normalized alias strings."""

    def __init__(self, aliases):
        self._aliases = {}
        for entity, names in aliases.items():
            normed = frozenset(normalize_query(n) for n in names if normalize_query(n))
            if not normed:
                raise ValueError(f"entity {entity!r} has no usable alias")
            self._aliases[str(entity)] = normed

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def save(self, path):
        data = {e: sorted(a) for e, a in sorted(self._aliases.items())}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=1, sort_keys=True)

    def __contains__(self, entity):
        return entity in self._aliases

    def __iter__(self):
        return iter(sorted(self._aliases))

    def __len__(self):
        return len(self._aliases)

    def aliases(self, entity):
        try:
            return self._aliases[entity]
        except KeyError:
            raise KeyError(f"unknown entity id {entity!r}") from None

    def primary(self, entity):
        """Shortest alias (lexicographic on ties); used as the entity query."""
        return min(self.aliases(entity), key=lambda a: (len(a), a))


@dataclass(frozen=True)
class Reject:
    line_no: int
    reason: str


def _to_epoch(ts):
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return int((ts - datetime(1970, 1, 1)).total_seconds())


def _day_of_epoch(seconds):
    return _EPOCH + timedelta(days=seconds // _DAY)


class LogIndex:
    """Immutable, filtered view of a query log.

    ``query_times`` maps each retained query to the sorted epoch seconds of its
    records; ``clicks`` maps (query, url) to {day offset: count}. Day offsets
    count from ``first_day``.
    """

    def __init__(self, first_day, last_day, query_times, clicks, rejects=(), params=None):
        self.first_day = first_day
        self.last_day = last_day
        self._times = {q: np.sort(np.asarray(t, dtype=np.int64)) for q, t in query_times.items()}
        self.queries = sorted(self._times)
        self.query_id = {q: i for i, q in enumerate(self.queries)}
        self.rejects = tuple(rejects)
        self.params = dict(params or {})

        rows = sorted(
            (q, u, d, c) for (q, u), per_day in clicks.items() for d, c in per_day.items() if c > 0
        )
        self.urls = sorted({u for _, u, _, _ in rows})
        self.url_id = {u: i for i, u in enumerate(self.urls)}
        self.click_q = np.array([self.query_id[q] for q, _, _, _ in rows], dtype=np.int64)
        self.click_u = np.array([self.url_id[u] for _, u, _, _ in rows], dtype=np.int64)
        self.click_day = np.array([d for _, _, d, _ in rows], dtype=np.int64)
        self.click_count = np.array([c for _, _, _, c in rows], dtype=np.int64)
        self._match_cache = {}
        self._freq = None
        self._click_by_query = None

    # -- span ---------------------------------------------------------------
    @property
    def n_days(self):
        if self.first_day is None:
            return 0
        return (self.last_day - self.first_day).days + 1

    def offset(self, day):
        if isinstance(day, (int, np.integer)):
            return int(day)
        return (day - self.first_day).days

    def day(self, offset):
        return self.first_day + timedelta(days=int(offset))

    def __len__(self):
        return len(self.queries)

    # -- frequencies --------------------------------------------------------
    def times(self, query):
        return self._times[query]

    def total_frequency(self, query):
        t = self._times.get(query)
        return 0 if t is None else len(t)

    @property
    def freq_matrix(self):
        """CSR matrix (query x day offset) of daily query frequencies."""
        if self._freq is None:
            base = _to_epoch(datetime.combine(self.first_day, datetime.min.time())) if self.queries else 0
            rows, cols = [], []
            for i, q in enumerate(self.queries):
                d = (self._times[q] - base) // _DAY
                rows.append(np.full(len(d), i, dtype=np.int64))
                cols.append(d)
            if rows:
                r, c = np.concatenate(rows), np.concatenate(cols)
            else:
                r = c = np.zeros(0, dtype=np.int64)
            self._freq = sparse.csr_matrix(
                (np.ones(len(r)), (r, c)), shape=(len(self.queries), max(self.n_days, 1))
            )
            self._freq.sum_duplicates()
        return self._freq

    def daily(self, query):
        """Dense daily frequency vector of one query over the whole span."""
        i = self.query_id.get(query)
        if i is None:
            return np.zeros(self.n_days)
        return self.freq_matrix[i].toarray().ravel()[: self.n_days]

    def daily_sum(self, query_ids):
        """Summed daily frequencies of several queries."""
        if len(query_ids) == 0:
            return np.zeros(self.n_days)
        sub = self.freq_matrix[np.asarray(sorted(query_ids), dtype=np.int64)]
        return np.asarray(sub.sum(axis=0)).ravel()[: self.n_days]

    def matching_queries(self, phrases):
        """Ids of queries containing any phrase on token boundaries."""
        key = tuple(sorted(phrases))
        hit = self._match_cache.get(key)
        if hit is None:
            hit = tuple(
                i for i, q in enumerate(self.queries) if any(contains_phrase(q, p) for p in key)
            )
            self._match_cache[key] = hit
        return hit

    # -- clicks -------------------------------------------------------------
    def pair_counts(self):
        out = Counter()
        for q, u, c in zip(self.click_q, self.click_u, self.click_count):
            out[(self.queries[q], self.urls[u])] += int(c)
        return dict(out)

    def _clicks_for(self, qid):
        if self._click_by_query is None:
            grouped = defaultdict(list)
            for k, q in enumerate(self.click_q):
                grouped[int(q)].append(k)
            self._click_by_query = {q: np.array(v, dtype=np.int64) for q, v in grouped.items()}
        return self._click_by_query.get(qid, np.zeros(0, dtype=np.int64))

    def clicks_on(self, query, day):
        """{url: clicks} for one query on one day (offset or date)."""
        qid = self.query_id.get(query)
        if qid is None:
            return {}
        d = self.offset(day)
        rows = self._clicks_for(qid)
        rows = rows[self.click_day[rows] == d]
        out = Counter()
        for k in rows:
            out[self.urls[self.click_u[k]]] += int(self.click_count[k])
        return dict(out)

    def url_clicks_on(self, query_ids, day):
        """Total clicks per url over several queries on one day."""
        d = self.offset(day)
        out = Counter()
        for qid in query_ids:
            rows = self._clicks_for(qid)
            rows = rows[self.click_day[rows] == d]
            for k in rows:
                out[self.urls[self.click_u[k]]] += int(self.click_count[k])
        return dict(out)

    # -- persistence --------------------------------------------------------
    def to_json(self):
        clicks = [
            [self.queries[q], self.urls[u], int(d), int(c)]
            for q, u, d, c in zip(self.click_q, self.click_u, self.click_day, self.click_count)
        ]
        return {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "first_day": self.first_day.isoformat() if self.first_day else None,
            "last_day": self.last_day.isoformat() if self.last_day else None,
            "params": self.params,
            "queries": {q: self._times[q].tolist() for q in self.queries},
            "clicks": clicks,
            "rejects": [[r.line_no, r.reason] for r in self.rejects],
        }

    @classmethod
    def from_json(cls, data):
        if data.get("format") != INDEX_FORMAT or data.get("version") != INDEX_VERSION:
            raise ValueError("not a version-1 log index file")
        clicks = defaultdict(dict)
        for q, u, d, c in data["clicks"]:
            clicks[(q, u)][d] = c
        first = date.fromisoformat(data["first_day"]) if data["first_day"] else None
        last = date.fromisoformat(data["last_day"]) if data["last_day"] else None
        rejects = [Reject(n, r) for n, r in data.get("rejects", [])]
        return cls(first, last, data["queries"], clicks, rejects, data.get("params"))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"), sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def write_tsv(self, path):
        """Re-serialize the index as a log file (click ranks are not kept; written as 1)."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("AnonID\tQuery\tQueryTime\tItemRank\tClickURL\n")
            for q in self.queries:
                qid = self.query_id[q]
                pending = defaultdict(list)
                for k in self._clicks_for(qid):
                    pending[int(self.click_day[k])].extend(
                        [self.urls[self.click_u[k]]] * int(self.click_count[k])
                    )
                for ts in self._times[q]:
                    d = (_day_of_epoch(int(ts)) - self.first_day).days
                    stamp = datetime(1970, 1, 1) + timedelta(seconds=int(ts))
                    url = pending[d].pop() if pending[d] else ""
                    rank = "1" if url else ""
                    fh.write(f"-\t{q}\t{stamp:%Y-%m-%d %H:%M:%S}\t{rank}\t{url}\n")


def _parse_line(parts):
    if len(parts) not in (3, 5):
        raise ValueError(f"expected 5 columns, got {len(parts)}")
    user, raw_query, raw_time = parts[0], parts[1], parts[2]
    rank_s, url = (parts[3].strip(), parts[4].strip()) if len(parts) == 5 else ("", "")
    try:
        ts = datetime.fromisoformat(raw_time.strip())
    except ValueError:
        raise ValueError(f"unparseable timestamp {raw_time!r}") from None
    record = QueryRecord(user, normalize_query(raw_query), ts)
    click = None
    if rank_s or url:
        if not (rank_s and url):
            raise ValueError("ItemRank and ClickURL must both be present or both empty")
        try:
            rank = int(rank_s)
        except ValueError:
            raise ValueError(f"bad ItemRank {rank_s!r}") from None
        click = ClickRecord(record.terms, url, rank, ts)
    return record, click


def ingest(path, min_qf=5, max_qf=15000, min_click=3, english_only=False):
    """Parse, filter and index a log file.

    Queries are lowercased; queries whose total frequency falls outside
    [min_qf, max_qf] are dropped, then (query, url) pairs clicked fewer than
    ``min_click`` times. With ``english_only`` queries with less than 90%
    ASCII letters/digits/spaces are dropped first. Malformed lines are
    collected in ``index.rejects`` and skipped.
    """
    times = defaultdict(list)
    clicks = defaultdict(Counter)
    rejects = []
    first = last = None  # span of the retained records
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if line_no == 1 and line.startswith("AnonID"):
                continue
            try:
                record, click = _parse_line(line.split("\t"))
            except ValueError as exc:
                rejects.append(Reject(line_no, str(exc)))
                continue
            sec = _to_epoch(record.time)
            day = _day_of_epoch(sec)
            if english_only and ascii_ratio(record.terms) < 0.9:
                continue
            times[record.terms].append(sec)
            if click is not None:
                clicks[(record.terms, click.url)][day] += 1

    if rejects:
        logger.warning("%s: %d malformed lines rejected", path, len(rejects))
    kept = {q: t for q, t in times.items() if min_qf <= len(t) <= max_qf}
    if kept:
        first = _day_of_epoch(min(min(t) for t in kept.values()))
        last = _day_of_epoch(max(max(t) for t in kept.values()))
    per_pair = {}
    for (q, u), per_day in clicks.items():
        if q in kept and sum(per_day.values()) >= min_click:
            per_pair[(q, u)] = {(d - first).days: c for d, c in per_day.items()}
    params = {
        "min_qf": min_qf,
        "max_qf": max_qf,
        "min_click": min_click,
        "english_only": bool(english_only),
    }
    return LogIndex(first, last, kept, per_pair, rejects, params)


def _window_offsets(index, window):
    if index.n_days == 0:
        raise ValueError("empty log index has no span")
    if window is None:
        return 0, index.n_days - 1
    lo, hi = index.offset(window[0]), index.offset(window[1])
    if lo < 0 or hi >= index.n_days or hi < lo:
        raise ValueError(f"window {window[0]}..{window[1]} is outside the log span")
    return lo, hi


def series_for(index, alias_table, entity, window=None):
    """Daily count of records whose query contains an alias of ``entity``."""
    aliases = alias_table.aliases(entity)
    lo, hi = _window_offsets(index, window)
    full = index.daily_sum(index.matching_queries(aliases))
    return TimeSeries(index.day(lo), full[lo : hi + 1])


def query_series(index, query, window=None):
    lo, hi = _window_offsets(index, window)
    return TimeSeries(index.day(lo), index.daily(query)[lo : hi + 1])


@dataclass
class EditCounts:
    counts: dict = field(default_factory=dict)  # entity -> {date: count}
    rejects: list = field(default_factory=list)


def read_edit_counts(path):
    """Read (entity_id, ISO day, edit_count) rows; bad or negative rows are rejected."""
    out = EditCounts()
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if line_no == 1 and row[0].strip().lower() in ("entity_id", "entity"):
                continue
            try:
                entity, day_s, count_s = (c.strip() for c in row)
                day = date.fromisoformat(day_s)
                count = float(count_s)
            except ValueError as exc:
                out.rejects.append(Reject(line_no, f"malformed row: {exc}"))
                continue
            if count < 0 or not np.isfinite(count):
                out.rejects.append(Reject(line_no, f"negative edit count {count_s}"))
                continue
            per_day = out.counts.setdefault(entity, {})
            per_day[day] = per_day.get(day, 0.0) + count
    for r in out.rejects:
        logger.warning("%s line %d rejected: %s", path, r.line_no, r.reason)
    return out


def edit_series(counts, entity, window=None):
    per_day = counts.get(entity)
    if not per_day:
        raise KeyError(f"no edit rows for entity {entity!r}")
    start, end = window if window is not None else (min(per_day), max(per_day))
    n = (end - start).days + 1
    values = np.zeros(n)
    for d, c in per_day.items():
        k = (d - start).days
        if 0 <= k < n:
            values[k] += c
    return TimeSeries(start, values)


def load_edit_series(path, entity, window=None):
    """Edit-count series of one entity with missing days filled with 0."""
    return edit_series(read_edit_counts(path).counts, entity, window)
