"""Synthetic query logs with planted events, aspects and graded labels."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .evaluation import GradedLabelSet
from .features import Article, CorpusStore
from .logstore import EntityAliasTable
from .signals import SpikeMParams, spikem_simulate

logger = logging.getLogger(__name__)

# Planted grades per aspect kind for (before, during, after).
GRADES = {
    "anticipated": {
        "prep": (3, 2, 1),
        "live": (1, 3, 2),
        "result": (1, 2, 3),
        "static": (2, 2, 2),
        "noise": (1, 1, 1),
    },
    "breaking": {
        "static": (3, 2, 1),
        "news": (1, 3, 3),
        "followup": (1, 2, 3),
        "flash": (1, 1, 1),
        "noise": (1, 1, 1),
    },
}

# How many aspects of each kind an entity gets.
KIND_COUNTS = {
    "anticipated": {"prep": 2, "live": 1, "result": 2, "static": 2, "noise": 3},
    "breaking": {"static": 3, "news": 2, "followup": 2, "flash": 2, "noise": 3},
}

WORDS = {
    "prep": ["tickets", "schedule", "preview", "odds", "lineup", "predictions", "registration",
             "parking", "packages", "hotels"],
    "live": ["live", "stream", "coverage", "broadcast", "webcast", "radio"],
    "result": ["results", "winners", "scores", "standings", "champion", "recap", "photos"],
    "static": ["history", "biography", "facts", "location", "founder", "map", "address",
               "population", "museum", "founded"],
    "news": ["crash", "arrest", "scandal", "explosion", "lawsuit", "resignation", "outbreak",
             "fire", "shooting", "storm", "collapse", "strike"],
    "followup": ["investigation", "aftermath", "memorial", "funeral", "trial", "victims",
                 "reaction", "cleanup", "donations", "inquiry"],
    "flash": ["rumors", "hoax", "conspiracy", "video", "pictures", "parody", "myspace", "petition"],
    "noise": ["lyrics", "quotes", "wallpaper", "games", "jokes", "recipes", "shirts", "poster",
              "coupons", "ringtones", "cheats", "tattoo", "forum", "blog"],
}

EVENT_SUFFIX = ["cup", "open", "festival", "awards", "marathon", "derby", "expo", "summit",
                "classic", "games"]

_SYLLABLES = ["ka", "lo", "mir", "ven", "dra", "tol", "sen", "qua", "bri", "mon", "zel", "ta",
              "ru", "vik", "nor", "pel", "gan", "sho", "fer", "lin", "dus", "kor", "mae", "thi"]


@dataclass
class SynthSpec:
    n_breaking: int = 36
    n_anticipated: int = 44
    start: date = date(2006, 3, 1)
    n_days: int = 92
    event_window: tuple = (26, 84)  # day offsets allowed for the event start
    event_days: dict = field(default_factory=dict)  # optional fixed event start per entity index
    seed: int = 42
    entity_base: tuple = (3.0, 6.0)  # entity-only queries per day
    entity_peak: tuple = (60.0, 140.0)
    static_level: tuple = (3.0, 6.0)
    event_level: tuple = (14.0, 30.0)
    noise_level: tuple = (1.5, 3.0)
    burst_height: tuple = (5.0, 9.0)  # multiple of the noise level
    n_generic_articles: int = 400
    weekly_amp: tuple = (0.4, 0.95)  # anticipated entities only, drawn per entity
    click_prob: float = 0.75
    variant_share: float = 0.2
    edit_base: tuple = (1.0, 3.0)
    edit_peak: tuple = (15.0, 30.0)
    period_margin: int = 5  # days before/after the event that form the studied periods
    embedding_dim: int = 16

    def validate(self):
        lo, hi = self.event_window
        if self.n_breaking < 1 or self.n_anticipated < 1:
            raise ValueError("need at least one entity of each type")
        if lo < 21:
            raise ValueError("event days must leave at least 21 days of history")
        max_len = 3
        if hi + max_len - 1 + self.period_margin >= self.n_days:
            raise ValueError(f"event window end {hi} leaves no room for the after period")
        for k, d in self.event_days.items():
            if not lo <= d <= hi:
                raise ValueError(f"event day {d} of entity {k} is outside the generated span")

    def to_json(self):
        d = asdict(self)
        d["start"] = self.start.isoformat()
        d["event_days"] = {str(k): v for k, v in self.event_days.items()}
        return d


@dataclass
class SynthEntity:
    id: str
    name: str
    type: str
    event_day: int  # offset of the first event day
    event_len: int
    studied: dict  # period -> day offset
    aspects: list  # [(kind, word)]
    event_url: str


@dataclass
class SynthOutput:
    entities: list
    labels: GradedLabelSet
    n_records: int
    paths: dict


def _pseudo_word(rng, used):
    while True:
        w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))
        if w not in used and len(w) >= 4:
            used.add(w)
            return w


def _attention(rng, typ, event_day, n_days):
    """Unit-peak SpikeM curve whose maximum lands on the event day."""
    if typ == "breaking":
        p = SpikeMParams(1000.0, float(rng.uniform(3e-4, 6e-4)), 0, float(rng.uniform(300, 800)),
                         0.0, 0.0, 7.0, 0.0)
    else:
        p = SpikeMParams(1000.0, float(rng.uniform(7e-4, 1e-3)), 0, float(rng.uniform(2, 5)),
                         0.5, float(rng.uniform(0.3, 0.5)), 7.0, float(rng.integers(0, 7)))
    y = spikem_simulate(p, n_days + 40)
    y = y / y.max()
    shift = event_day - int(np.argmax(y))
    out = np.zeros(n_days)
    for d in range(n_days):
        k = d - shift
        if 0 <= k < len(y):
            out[d] = y[k]
    return out


def _profile(kind, days, e0, e1):
    """Relative intensity of an aspect kind per day; e0..e1 are the event days."""
    before = days < e0
    during = (days >= e0) & (days <= e1)
    after = days > e1
    a = np.maximum(days - e1, 0).astype(float)
    out = np.zeros(len(days))
    if kind == "static":
        out[:] = 1.0
    elif kind == "prep":
        ramp = np.clip((days - (e0 - 10)) / 10.0, 0.0, 1.0) ** 1.5
        out[before] = 0.1 + 0.9 * ramp[before]
        out[during] = 0.3
        out[after] = 0.05 * 0.5 ** a[after]
    elif kind == "live":
        out[before] = 0.03
        out[during] = 1.0
        out[after] = 0.5 * 0.6 ** (a[after] - 1)
    elif kind == "result":
        out[before] = 0.02
        out[during] = 0.5
        out[after] = 0.85 ** (a[after] - 1)
    elif kind == "news":
        out[during] = 1.0
        out[after] = 0.8 * 0.85 ** (a[after] - 1)
    elif kind == "followup":
        out[during] = 0.3
        out[after] = np.minimum(1.0, 0.4 + 0.3 * a[after])
    elif kind == "flash":
        # irrelevant chatter that flares with the event and fades within days
        out[during] = 1.0
        out[after] = 0.3 * 0.35 ** (a[after] - 1)
    elif kind == "noise":
        out[:] = 0.05
    else:
        raise ValueError(f"unknown aspect kind {kind!r}")
    return out


def _bursts(rng, n_days, height):
    out = np.zeros(n_days)
    for _ in range(int(rng.integers(4, 8))):
        s = int(rng.integers(0, n_days - 3))
        out[s: s + int(rng.integers(2, 4))] += height
    return out


def _filler(rng, vocab, n):
    return " ".join(rng.choice(vocab, size=n))


class _LogWriter:
    def __init__(self, rng, start):
        self.rng = rng
        self.start = datetime.combine(start, datetime.min.time())
        self.lines = []

    def emit(self, query, day, count, urls, probs, click_prob):
        if count <= 0:
            return
        secs = self.rng.integers(0, 86400, size=count)
        users = self.rng.integers(1, 60000, size=count)
        clicked = self.rng.random(count) < click_prob
        picks = self.rng.choice(len(urls), size=count, p=probs)
        ranks = self.rng.integers(1, 11, size=count)
        for s, u, c, k, r in zip(secs, users, clicked, picks, ranks):
            ts = self.start + timedelta(days=int(day), seconds=int(s))
            if c:
                self.lines.append((ts, query, int(u), str(int(r)), urls[k]))
            else:
                self.lines.append((ts, query, int(u), "", ""))

    def write(self, path):
        self.lines.sort()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("AnonID\tQuery\tQueryTime\tItemRank\tClickURL\n")
            for ts, q, u, r, url in self.lines:
                fh.write(f"{u}\t{q}\t{ts:%Y-%m-%d %H:%M:%S}\t{r}\t{url}\n")
        return len(self.lines)


def generate(spec, out_dir):
    """Write log.tsv, aliases.json, corpus.jsonl, edits.csv, labels.csv,
    embeddings.txt, events.csv and spec.json into ``out_dir``.

    Every draw comes from one generator seeded with ``spec.seed``, so the
    outputs are a pure function of the spec.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n_days = spec.n_days
    days = np.arange(n_days)
    used = set()
    filler_vocab = [_pseudo_word(rng, used) for _ in range(300)]

    types = ["breaking"] * spec.n_breaking + ["anticipated"] * spec.n_anticipated
    order = rng.permutation(len(types))
    entities = []
    log = _LogWriter(rng, spec.start)
    labels = GradedLabelSet()
    articles, url_texts = [], {}
    aliases = {}
    edit_rows = []
    event_rows = []

    for idx, pos in enumerate(order):
        typ = types[pos]
        base = _pseudo_word(rng, used)
        name = base if typ == "breaking" else f"{base} {rng.choice(EVENT_SUFFIX)}"
        eid = f"e{idx:03d}_{base}"
        e0 = spec.event_days.get(idx, int(rng.integers(spec.event_window[0], spec.event_window[1] + 1)))
        length = int(rng.integers(1, 3)) if typ == "breaking" else int(rng.integers(1, 4))
        e1 = e0 + length - 1
        studied = {
            "before": e0 - int(rng.integers(1, spec.period_margin + 1)),
            "during": int(rng.integers(e0, e1 + 1)),
            "after": e1 + int(rng.integers(1, spec.period_margin + 1)),
        }
        chosen = []
        for kind, n in KIND_COUNTS[typ].items():
            for w in rng.choice(WORDS[kind], size=n, replace=False):
                chosen.append((kind, str(w)))
        slug = base
        main_url = f"http://en.wikipedia.org/wiki/{slug}"
        official = f"http://www.{slug}.com"
        event_url = f"http://news.example.com/{slug}" if typ == "breaking" else f"http://www.{slug}event.org"
        ent = SynthEntity(eid, name, typ, e0, length, studied, chosen, event_url)
        entities.append(ent)
        aliases[eid] = [name]
        event_rows.append([eid, typ, e0, e1, studied["before"], studied["during"], studied["after"]])

        attention = _attention(rng, typ, e0, n_days)
        weekly = np.ones(n_days)
        if typ == "anticipated":
            phase = rng.uniform(0, 2 * np.pi)
            weekly = 1.0 + rng.uniform(*spec.weekly_amp) * np.sin(2 * np.pi * days / 7.0 + phase)
        magnitude = rng.uniform(0.7, 1.3)
        event_live = days >= e0 if typ == "breaking" else np.ones(n_days, dtype=bool)

        # entity-only queries
        lam = weekly * (rng.uniform(*spec.entity_base) + rng.uniform(*spec.entity_peak) * magnitude * attention)
        counts = rng.poisson(lam)
        for d in days:
            if event_live[d]:
                urls, probs = [main_url, official, event_url], [0.45, 0.25, 0.30]
            else:
                urls, probs = [main_url, official], [0.6, 0.4]
            log.emit(name, d, int(counts[d]), urls, probs, spec.click_prob)

        # aspect queries
        for kind, word in chosen:
            prof = _profile(kind, days, e0, e1)
            if kind == "static":
                level = rng.uniform(*spec.static_level) * (1.0 + 0.3 * attention)
            elif kind == "noise":
                nl = rng.uniform(*spec.noise_level)
                level = nl * 4.0
                prof = prof + _bursts(rng, n_days, rng.uniform(*spec.burst_height) / 4.0)
            else:
                level = rng.uniform(*spec.event_level) * magnitude
            lam = weekly * level * prof
            query = f"{name} {word}"
            variant = f"{word} {name}"
            own = f"http://www.{slug}.com/{word}"
            counts = rng.poisson(lam * (1.0 - spec.variant_share))
            vcounts = rng.poisson(lam * spec.variant_share)
            for d in days:
                if event_live[d]:
                    urls, probs = [own, main_url, event_url], [0.6, 0.25, 0.15]
                else:
                    urls, probs = [own, main_url], [0.6, 0.4]
                log.emit(query, d, int(counts[d]), urls, probs, spec.click_prob)
                log.emit(variant, d, int(vcounts[d]), urls, probs, spec.click_prob)
            g = GRADES[typ][kind]
            for p, grade in zip(("before", "during", "after"), g):
                labels.set(eid, query, p, grade)
            url_texts[own] = f"{name} {word} {word} " + _filler(rng, filler_vocab, 12)

        # corpus
        static = [w for k, w in chosen if k == "static"]
        sections = [("overview", f"{name} " + _filler(rng, filler_vocab, 25) + " " + " ".join(static))]
        sections.append(("background", " ".join(static * 2) + " " + _filler(rng, filler_vocab, 20)))
        if typ == "anticipated":
            prep = [w for k, w in chosen if k == "prep"]
            result = [w for k, w in chosen if k == "result"]
            sections.append(("planning", " ".join(prep * 2) + " " + _filler(rng, filler_vocab, 15)))
            sections.append(("past editions", " ".join(result * 2) + " " + _filler(rng, filler_vocab, 15)))
        inlinks = []
        for k in range(int(rng.integers(2, 4))):
            rid = f"{eid}_ref{k}"
            inlinks.append(rid)
            text = f"{name} " + str(rng.choice(static)) + " " + _filler(rng, filler_vocab, 30)
            articles.append(Article(rid, f"{base} reference {k}", [("main", text)], []))
        articles.append(Article(eid, name, sections, inlinks))
        url_texts[main_url] = f"{name} encyclopedia article " + _filler(rng, filler_vocab, 20)
        url_texts[official] = f"{name} official site home " + _filler(rng, filler_vocab, 20)
        hot = [w for k, w in chosen if k in (("news", "followup") if typ == "breaking" else ("live", "result"))]
        url_texts[event_url] = f"{name} " + " ".join(hot * 2) + " " + _filler(rng, filler_vocab, 15)

        # edit counts
        elam = rng.uniform(*spec.edit_base) * weekly + rng.uniform(*spec.edit_peak) * attention
        for d, c in zip(days, rng.poisson(elam)):
            edit_rows.append([eid, (spec.start + timedelta(days=int(d))).isoformat(), int(c)])

    # generic pages: aspect words are everyday terms that any corpus contains
    generic = sorted({w for ws in WORDS.values() for w in ws})
    for k in range(spec.n_generic_articles):
        text = " ".join(rng.choice(generic, size=80)) + " " + _filler(rng, filler_vocab, 20)
        articles.append(Article(f"generic{k:03d}", f"web page {k}", [("main", text)], []))

    paths = {k: str(out / v) for k, v in {
        "log": "log.tsv", "aliases": "aliases.json", "corpus": "corpus.jsonl", "edits": "edits.csv",
        "labels": "labels.csv", "embeddings": "embeddings.txt", "events": "events.csv",
        "spec": "spec.json"}.items()}
    n_records = log.write(paths["log"])
    EntityAliasTable(aliases).save(paths["aliases"])
    CorpusStore(articles, url_texts).save(paths["corpus"])
    labels.save(paths["labels"])
    with open(paths["edits"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "day", "edits"])
        w.writerows(edit_rows)
    with open(paths["events"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "type", "event_day", "event_end", "before_day", "during_day", "after_day"])
        for row in event_rows:
            w.writerow(row[:2] + [(spec.start + timedelta(days=int(d))).isoformat() for d in row[2:]])
    _write_embeddings(rng, paths["embeddings"], filler_vocab, entities, spec.embedding_dim)
    with open(paths["spec"], "w", encoding="utf-8") as fh:
        json.dump(spec.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    logger.info("generated %d entities, %d log records in %s", len(entities), n_records, out)
    return SynthOutput(entities, labels, n_records, paths)


def _write_embeddings(rng, path, filler_vocab, entities, dim):
    vocab = sorted({w for ws in WORDS.values() for w in ws} | set(filler_vocab) | set(EVENT_SUFFIX)
                   | {t for e in entities for t in e.name.split()})
    vecs = rng.standard_normal((len(vocab), dim))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(vocab)} {dim}\n")
        for w, v in zip(vocab, vecs):
            fh.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")


@dataclass
class EventInfo:
    entity: str
    type: str
    event_day: date
    event_end: date
    studied: dict  # period -> date


def read_events(path):
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(EventInfo(
                rec["entity"], rec["type"], date.fromisoformat(rec["event_day"]),
                date.fromisoformat(rec["event_end"]),
                {p: date.fromisoformat(rec[f"{p}_day"]) for p in ("before", "during", "after")}))
    return out
