"""Stage functions behind the command line; each reads and writes files in one output dir."""

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import ranker as rk
from .aspects import EmbeddingTable, extract_aspects
from .clickgraph import build_graph, candidates
from .eventclf import (CELLS, TIMES, TYPES, CascadedClassifier, fit_mixture,
                       importance_from_interactions, soft_assign, train_logistic, train_stage1,
                       train_stage2)
from .evaluation import (GradedLabelSet, accuracy, comparison_rows, format_table,
                         per_query_metrics, rolling_cv, split_train_test_by_month, weighted_f1,
                         write_comparison_csv)
from .features import (ALL_COLUMNS, PRESENCE_NAMES, SALIENCE, TIMELINESS, CorpusStore,
                       EntityFeatures, FeatureParams)
from .logstore import EntityAliasTable, LogIndex, ingest, read_edit_counts
from .signals import SIGNAL_FIELDS, model_space, signal_vector
from .synth import SynthSpec, generate, read_events
from .text import contains_phrase

logger = logging.getLogger(__name__)

PERIOD_ORDER = ("before", "during", "after")
BASELINES = ("RWR", "RWR+MLE", "MLE-W", "LNQ", "PNQ")
LEARNED = ("SVM_salience", "SVM_timeliness", "SVM_all", "Ensemble")
FAMILIES = {
    "salience": SALIENCE,
    "timeliness": TIMELINESS + PRESENCE_NAMES,
    "all": ALL_COLUMNS,
}


class UserError(Exception):
    """Bad configuration or missing inputs; maps to exit code 1."""


@dataclass
class Config:
    out: str = "run"
    log: str = ""
    aliases: str = ""
    corpus: str = ""
    edits: str = ""
    embeddings: str = ""
    labels: str = ""
    events: str = ""
    restart: float = 0.15
    C: float = 20.0
    W: int = 10
    N: int = 200
    i_s: int = 1
    i_l: int = 5
    top_k_lm: int = 3
    min_qf: int = 5
    max_qf: int = 15000
    min_click: int = 3
    period: int = 7
    seed: int = 42
    mu: float = 2000.0
    english_only: bool = False
    n_candidates: int = 30
    n_aspects: int = 15
    lam_lex: float = 0.5
    lam_sem: float = 0.5
    damping: float = 0.7
    epochs: int = 50
    signal_window: int = 21
    edit_window: int = 56
    ccf_window: int = 14
    n_bins: int = 10
    test_bins: int = 4
    synth_breaking: int = 36
    synth_anticipated: int = 44

    CHECKS = {
        "restart": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
        "C": (lambda v: v >= 0, "must be >= 0"),
        "W": (lambda v: v >= 1, "must be >= 1"),
        "N": (lambda v: v >= 1, "must be >= 1"),
        "i_s": (lambda v: v >= 1, "must be >= 1"),
        "i_l": (lambda v: v >= 1, "must be >= 1"),
        "top_k_lm": (lambda v: v >= 1, "must be >= 1"),
        "min_qf": (lambda v: v >= 1, "must be >= 1"),
        "max_qf": (lambda v: v >= 1, "must be >= 1"),
        "min_click": (lambda v: v >= 1, "must be >= 1"),
        "period": (lambda v: v >= 2, "must be >= 2"),
        "mu": (lambda v: v >= 0, "must be >= 0"),
        "n_candidates": (lambda v: v >= 1, "must be >= 1"),
        "n_aspects": (lambda v: v >= 1, "must be >= 1"),
        "lam_lex": (lambda v: v >= 0, "must be >= 0"),
        "lam_sem": (lambda v: v >= 0, "must be >= 0"),
        "damping": (lambda v: 0.5 <= v < 1, "must lie in [0.5, 1)"),
        "epochs": (lambda v: v >= 1, "must be >= 1"),
        "signal_window": (lambda v: v >= 8, "must be >= 8"),
        "edit_window": (lambda v: v >= 1, "must be >= 1"),
        "ccf_window": (lambda v: v >= 3, "must be >= 3"),
        "n_bins": (lambda v: v >= 2, "must be >= 2"),
        "test_bins": (lambda v: v >= 1, "must be >= 1"),
        "synth_breaking": (lambda v: v >= 1, "must be >= 1"),
        "synth_anticipated": (lambda v: v >= 1, "must be >= 1"),
    }

    def validate(self):
        for name, (ok, msg) in self.CHECKS.items():
            if not ok(getattr(self, name)):
                raise UserError(f"parameter {name}={getattr(self, name)!r} {msg}")
        if self.i_s > self.i_l:
            raise UserError("parameter i_s must not exceed i_l")
        if self.min_qf > self.max_qf:
            raise UserError("parameter min_qf must not exceed max_qf")
        if abs(self.lam_lex + self.lam_sem - 1.0) > 1e-9:
            raise UserError("parameters lam_lex + lam_sem must sum to 1")
        if self.test_bins >= self.n_bins:
            raise UserError("parameter test_bins must be smaller than n_bins")
        return self

    @classmethod
    def load(cls, path=None, **overrides):
        data = {}
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    data = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise UserError(f"cannot read config {path}: {exc}") from None
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise UserError(f"unknown config key(s): {', '.join(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        if cfg.out and Path(cfg.out).is_dir():
            synth_dir = Path(cfg.out) / "synth"
            for key, name in (("log", "log.tsv"), ("aliases", "aliases.json"), ("corpus", "corpus.jsonl"),
                              ("edits", "edits.csv"), ("embeddings", "embeddings.txt"),
                              ("labels", "labels.csv"), ("events", "events.csv")):
                if not getattr(cfg, key) and (synth_dir / name).exists():
                    setattr(cfg, key, str(synth_dir / name))
        return cfg.validate()

    def params(self):
        return {k: v for k, v in asdict(self).items()
                if k not in ("out", "log", "aliases", "corpus", "edits", "embeddings", "labels", "events")}


# -- manifests --------------------------------------------------------------

STAGES = ("synth", "ingest", "graph", "aspects", "signals", "classify", "features", "train", "rank",
          "evaluate", "report")
UPSTREAM = {
    "graph": ("ingest",),
    "aspects": ("ingest",),
    "signals": ("ingest",),
    "classify": ("signals",),
    "features": ("aspects",),
    "train": ("signals", "features"),
    "rank": ("train",),
    "evaluate": ("rank",),
    "report": ("evaluate", "classify"),
}


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _params_hash(params):
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()


def _manifest_path(out, stage):
    return Path(out) / "manifests" / f"{stage}.json"


def check_upstream(cfg, stage):
    """Every prior stage must have run and its outputs must be unchanged since."""
    for up in UPSTREAM.get(stage, ()):
        mp = _manifest_path(cfg.out, up)
        if not mp.exists():
            raise UserError(f"{stage}: required artifacts missing; run {up} first")
        man = json.loads(mp.read_text())
        for rel, digest in man["outputs"].items():
            p = Path(cfg.out) / rel
            if not p.exists():
                raise UserError(f"{stage}: artifact {rel} missing; run {up} first")
            if sha256(p) != digest:
                raise UserError(f"{stage}: artifact {rel} changed since {up} ran; rerun {up}")


def write_manifest(cfg, stage, inputs, outputs):
    """Record input/output hashes and parameters; no timestamps so reruns are byte-identical."""
    out = Path(cfg.out)
    params = cfg.params()

    def key(p):
        # paths inside the output dir are recorded relative to it
        p = Path(p)
        try:
            return str(p.resolve().relative_to(out.resolve()))
        except ValueError:
            return str(p)

    man = {
        "stage": stage,
        "format": "aspectrec.manifest",
        "version": 1,
        "inputs": {key(p): sha256(p) for p in sorted(set(map(str, inputs)))},
        "outputs": {str(Path(p).relative_to(out)): sha256(p) for p in sorted(set(map(str, outputs)))},
        "params": params,
        "params_hash": _params_hash(params),
        "seed": cfg.seed,
    }
    man["inputs_hash"] = _params_hash(man["inputs"])
    mp = _manifest_path(out, stage)
    mp.parent.mkdir(parents=True, exist_ok=True)
    mp.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    return man


def _require(cfg, *keys):
    for k in keys:
        p = getattr(cfg, k)
        if not p:
            raise UserError(f"no {k} file configured (set it in the config or with --{k})")
        if not Path(p).exists():
            raise UserError(f"{k} file {p} does not exist")


def _dump(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _load(path):
    return json.loads(Path(path).read_text())


# -- shared loaders ---------------------------------------------------------

def _index(cfg):
    return LogIndex.load(Path(cfg.out) / "index.json")


def _events(cfg):
    _require(cfg, "events")
    return read_events(cfg.events)


def _studied(cfg, index):
    """[(entity, type, period, date, offset)] for every studied day inside the log span."""
    out = []
    for ev in _events(cfg):
        for p in PERIOD_ORDER:
            d = ev.studied[p]
            if index.first_day <= d <= index.last_day:
                out.append((ev.entity, ev.type, p, d, index.offset(d)))
            else:
                logger.warning("%s %s day %s outside the log span; skipped", ev.entity, p, d)
    return out


# -- stages -----------------------------------------------------------------

def stage_synth(cfg):
    spec = SynthSpec(n_breaking=cfg.synth_breaking, n_anticipated=cfg.synth_anticipated, seed=cfg.seed)
    res = generate(spec, Path(cfg.out) / "synth")
    for key in ("log", "aliases", "corpus", "edits", "embeddings", "labels", "events"):
        setattr(cfg, key, res.paths[key])
    write_manifest(cfg, "synth", [], list(res.paths.values()))
    return res


def stage_ingest(cfg):
    _require(cfg, "log")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    index = ingest(cfg.log, cfg.min_qf, cfg.max_qf, cfg.min_click, cfg.english_only)
    index.save(out / "index.json")
    with open(out / "rejects.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line", "reason"])
        for r in index.rejects:
            w.writerow([r.line_no, r.reason])
    write_manifest(cfg, "ingest", [cfg.log], [out / "index.json", out / "rejects.csv"])
    return index


def stage_graph(cfg):
    check_upstream(cfg, "graph")
    index = _index(cfg)
    g = build_graph(index)
    out = Path(cfg.out)
    g.write_edges(out / "graph_edges.tsv")
    _dump({"queries": len(g.queries), "urls": len(g.urls), "edges": len(g.edge_q),
           "n_queries_total": g.n_queries_total}, out / "graph_stats.json")
    write_manifest(cfg, "graph", [out / "index.json"], [out / "graph_edges.tsv", out / "graph_stats.json"])
    return g


def stage_aspects(cfg):
    check_upstream(cfg, "aspects")
    _require(cfg, "aliases", "events")
    index = _index(cfg)
    table = EntityAliasTable.load(cfg.aliases)
    emb = EmbeddingTable.load(cfg.embeddings) if cfg.embeddings else None
    graphs = {}
    result = {}
    for entity, typ, period, day, t in _studied(cfg, index):
        aliases = sorted(table.aliases(entity))
        if t not in graphs:
            graphs[t] = build_graph(index, t)
        g = graphs[t]
        source = next((a for a in aliases if a in g.query_id), None)
        if source is None:
            logger.warning("%s: no entity query in the click graph by %s", entity, day)
            continue
        accept = lambda q: q not in aliases and any(contains_phrase(q, a) for a in aliases)  # noqa: E731
        cands = candidates(g, source, cfg.n_candidates, cfg.restart, accept=accept)
        freq = {q: int(index.daily(q)[: t + 1].sum()) for q, _ in cands}
        reps = extract_aspects(cands, emb, cfg.n_aspects, freq, strip=aliases, lam_lex=cfg.lam_lex,
                               lam_sem=cfg.lam_sem, damping=cfg.damping) if cands else []
        result.setdefault(entity, {})[period] = {
            "day": day.isoformat(),
            "type": typ,
            "candidates": [[q, s] for q, s in cands],
            "aspects": [[a.text, a.rwr_score, a.frequency] for a in reps],
        }
    path = _dump(result, Path(cfg.out) / "aspects.json")
    inputs = [Path(cfg.out) / "index.json", cfg.aliases, cfg.events] + ([cfg.embeddings] if cfg.embeddings else [])
    write_manifest(cfg, "aspects", inputs, [path])
    return result


def _top_queries(index, qids, t, n=10):
    if t < 0:
        return []
    rows = [(index.freq_matrix[q, t], index.queries[q]) for q in qids]
    rows = [(c, q) for c, q in rows if c > 0]
    rows.sort(key=lambda r: (-r[0], r[1]))
    return [q for _, q in rows[:n]]


def stage_signals(cfg):
    check_upstream(cfg, "signals")
    _require(cfg, "aliases", "events")
    index = _index(cfg)
    table = EntityAliasTable.load(cfg.aliases)
    edits = read_edit_counts(cfg.edits).counts if cfg.edits else {}
    rows = []
    for entity, typ, period, day, t in _studied(cfg, index):
        qids = index.matching_queries(tuple(sorted(table.aliases(entity))))
        hist = index.daily_sum(qids)[: t + 1]
        per_day = edits.get(entity, {})
        start = day - timedelta(days=cfg.edit_window - 1)
        ehist = np.array([per_day.get(start + timedelta(days=k), 0.0) for k in range(cfg.edit_window)])
        sv = signal_vector(hist, ehist, _top_queries(index, qids, t), _top_queries(index, qids, t - 1),
                           period=cfg.period, window=cfg.signal_window, seed=cfg.seed)
        rows.append([entity, typ, period, day.isoformat()] + [f"{v:.10g}" for v in sv.as_array()])
    path = Path(cfg.out) / "signals.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "type", "period", "day"] + list(SIGNAL_FIELDS))
        w.writerows(rows)
    inputs = [Path(cfg.out) / "index.json", cfg.aliases, cfg.events] + ([cfg.edits] if cfg.edits else [])
    write_manifest(cfg, "signals", inputs, [path])
    return rows


@dataclass
class SignalTable:
    keys: list  # (entity, period)
    types: list
    periods: list
    days: list
    X: np.ndarray

    def rows_for(self, entities):
        s = set(entities)
        return [i for i, (e, _) in enumerate(self.keys) if e in s]


def load_signals(path):
    keys, types, periods, days, X = [], [], [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            keys.append((rec["entity"], rec["period"]))
            types.append(rec["type"])
            periods.append(rec["period"])
            days.append(date.fromisoformat(rec["day"]))
            X.append([float(rec[f]) for f in SIGNAL_FIELDS])
    return SignalTable(keys, types, periods, days, model_space(np.array(X, dtype=float)))


def _entity_days(cfg):
    return [(ev.entity, ev.event_day) for ev in _events(cfg)]


def classification_cv(sig, entity_days, n_bins=10, test_bins=4, seed=42):
    """Rolling chronological CV of stage 1, the cascade and plain logistic regression."""
    rows = []
    for trial in rolling_cv(entity_days, n_bins, test_bins):
        tr, te = sig.rows_for(trial.train), sig.rows_for(trial.test)
        Xtr, Xte = sig.X[tr], sig.X[te]
        ytype = [sig.types[i] for i in tr]
        ytime = [sig.periods[i] for i in tr]
        if len(set(ytype)) < 2 or len(set(ytime)) < 3:
            logger.warning("rolling bin %d: training classes incomplete; skipped", trial.test_bin)
            continue
        s1 = train_stage1(Xtr, ytype, seed=seed)
        s2 = train_stage2(Xtr, s1, ytime)
        lr = train_logistic(Xtr, ytime, classes=TIMES)
        true_type = [sig.types[i] for i in te]
        true_time = [sig.periods[i] for i in te]
        p_type = s1.predict(Xte)
        p_casc = [t for _, t in CascadedClassifier(s1, s2).predict(Xte)]
        p_lr = lr.predict(Xte)
        rows.append({
            "bin": trial.test_bin,
            "n_train": len(tr),
            "n_test": len(te),
            "type_accuracy": accuracy(true_type, p_type),
            "type_f1": weighted_f1(true_type, p_type),
            "cascaded_accuracy": accuracy(true_time, p_casc),
            "cascaded_f1": weighted_f1(true_time, p_casc),
            "logistic_accuracy": accuracy(true_time, p_lr),
            "logistic_f1": weighted_f1(true_time, p_lr),
        })
    if rows:
        mean = {"bin": "mean", "n_train": "", "n_test": sum(r["n_test"] for r in rows)}
        for k in rows[0]:
            if k not in mean:
                mean[k] = float(np.mean([r[k] for r in rows]))
        rows.append(mean)
    return rows


def stage_classify(cfg):
    check_upstream(cfg, "classify")
    out = Path(cfg.out)
    sig = load_signals(out / "signals.csv")
    rows = classification_cv(sig, _entity_days(cfg), cfg.n_bins, cfg.test_bins, cfg.seed)
    path = out / "classification.csv"
    cols = ["bin", "n_train", "n_test", "type_accuracy", "type_f1", "cascaded_accuracy", "cascaded_f1",
            "logistic_accuracy", "logistic_f1"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in cols])
    s1 = train_stage1(sig.X, sig.types, seed=cfg.seed)
    s2 = train_stage2(sig.X, s1, sig.periods)
    model = _dump(CascadedClassifier(s1, s2).to_json(), out / "models" / "classifier.json")
    write_manifest(cfg, "classify", [out / "signals.csv", cfg.events], [path, model])
    return rows


def stage_features(cfg):
    check_upstream(cfg, "features")
    _require(cfg, "aliases", "corpus")
    out = Path(cfg.out)
    index = _index(cfg)
    table = EntityAliasTable.load(cfg.aliases)
    corpus = CorpusStore.load(cfg.corpus)
    labels = GradedLabelSet.load(cfg.labels) if cfg.labels else GradedLabelSet()
    asp = _load(out / "aspects.json")
    params = FeatureParams(cfg.mu, cfg.i_s, cfg.i_l, cfg.ccf_window, 1, cfg.top_k_lm)
    rows = []
    for entity in sorted(asp):
        ef = EntityFeatures(entity, sorted(table.aliases(entity)), index, corpus, params)
        for period in PERIOD_ORDER:
            rec = asp[entity].get(period)
            if not rec:
                continue
            day = date.fromisoformat(rec["day"])
            t = index.offset(day)
            texts = [a for a, _, _ in rec["aspects"]]
            lab = labels.for_query(entity, period)
            for text, score, _ in rec["aspects"]:
                vec = ef.vector(text, texts, t, score)
                rows.append([entity, period, rec["day"], text] + [f"{v:.10g}" for v in vec.as_array()]
                            + [lab.get(text, "")])
    path = out / "features.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "period", "day", "aspect"] + list(ALL_COLUMNS) + ["grade"])
        w.writerows(rows)
    inputs = [out / "index.json", out / "aspects.json", cfg.aliases, cfg.corpus] + ([cfg.labels] if cfg.labels else [])
    write_manifest(cfg, "features", inputs, [path])
    return rows


@dataclass
class FeatureTable:
    entity: list
    period: list
    day: list
    aspect: list
    X: np.ndarray
    grade: list  # int or None

    def groups(self, rows):
        """(entity, period) -> [(row, grade)] over labeled rows in ``rows``."""
        out = {}
        for i in rows:
            if self.grade[i] is not None:
                out.setdefault((self.entity[i], self.period[i]), []).append((i, self.grade[i]))
        return out


def load_features(path):
    cols = {k: [] for k in ("entity", "period", "day", "aspect", "grade")}
    X = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            for k in ("entity", "period", "day", "aspect"):
                cols[k].append(rec[k])
            cols["grade"].append(int(rec["grade"]) if rec["grade"] != "" else None)
            X.append([float(rec[c]) for c in ALL_COLUMNS])
    return FeatureTable(cols["entity"], cols["period"], cols["day"], cols["aspect"],
                        np.array(X, dtype=float).reshape(len(X), len(ALL_COLUMNS)), cols["grade"])


def _split(cfg):
    return split_train_test_by_month(_entity_days(cfg))


def _interaction_importance(ft, sig, rows, sig_index, cfg):
    """Signal-feature importance from a ranker over aspect x signal interactions."""
    sig_mean = sig.X.mean(axis=0)
    sig_std = np.where(sig.X.std(axis=0) > 1e-12, sig.X.std(axis=0), 1.0)
    A = ft.X[rows]
    a_std = np.where(A.std(axis=0) > 1e-12, A.std(axis=0), 1.0)
    A = (A - A.mean(axis=0)) / a_std
    S = (sig.X[[sig_index[(ft.entity[i], ft.period[i])] for i in rows]] - sig_mean) / sig_std
    inter = np.einsum("na,ns->nas", A, S).reshape(len(rows), -1)
    names = [f"{a}*{s}" for a in ALL_COLUMNS for s in SIGNAL_FIELDS]
    local = ft.groups(rows)
    remap = {r: k for k, r in enumerate(rows)}
    groups = {key: [(remap[r], g) for r, g in v] for key, v in local.items()}
    prefs = rk.make_preferences(groups)
    model = rk.train_single(prefs, inter, names, names, C=cfg.C, epochs=cfg.epochs, seed=cfg.seed)
    coef = np.zeros(len(names))
    coef[model.scaler.keep] = model.weights[0]
    return importance_from_interactions(coef, len(SIGNAL_FIELDS))


def _slice_rows(ft, rows, types, typ, period):
    return [i for i in rows if types[ft.entity[i]] == typ and ft.period[i] == period]


def stage_train(cfg):
    check_upstream(cfg, "train")
    out = Path(cfg.out)
    ft = load_features(out / "features.csv")
    sig = load_signals(out / "signals.csv")
    sig_index = {k: i for i, k in enumerate(sig.keys)}
    types = {e: t for (e, _), t in zip(sig.keys, sig.types)}
    train_ents, _ = _split(cfg)
    train_set = set(train_ents)
    rows = [i for i in range(len(ft.entity)) if ft.entity[i] in train_set
            and (ft.entity[i], ft.period[i]) in sig_index]
    if not rows:
        raise UserError("train: no feature rows for training entities")
    models = out / "models"
    models.mkdir(parents=True, exist_ok=True)

    # importance weights from a seeded half of the training entities
    rng = np.random.default_rng(cfg.seed)
    ents = sorted(train_set & {e for e, _ in sig.keys})
    sample = set(rng.choice(ents, size=max(1, len(ents) // 2), replace=False).tolist())
    imp_rows = [i for i in rows if ft.entity[i] in sample]
    importance = _interaction_importance(ft, sig, imp_rows, sig_index, cfg)
    _dump({"features": list(SIGNAL_FIELDS), "importance": importance.tolist(),
           "sample": sorted(sample)}, models / "importance.json")

    sig_train = sig.rows_for(train_set)
    cells = [CELLS.index((sig.types[i], sig.periods[i])) for i in sig_train]
    mixture = fit_mixture(sig.X[sig_train], cells, importance, seed=cfg.seed)
    _dump(mixture.to_json(), models / "mixture.json")
    dists = {k: soft_assign(mixture, sig.X[i]) for k, i in sig_index.items()}
    with open(out / "distributions.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "period"] + [f"{c}/{t}" for c, t in CELLS])
        for (e, p) in sorted(dists):
            w.writerow([e, p] + [f"{v:.10g}" for v in dists[(e, p)].probs])

    groups = ft.groups(rows)
    prefs = rk.make_preferences(groups)
    names = list(ALL_COLUMNS)
    ens = rk.train_ensemble(prefs, ft.X, dists, names, C=cfg.C, epochs=cfg.epochs, seed=cfg.seed)
    ens.save(models / "Ensemble.json")
    written = [models / "importance.json", models / "mixture.json", out / "distributions.csv",
               models / "Ensemble.json"]
    for fam, cols in FAMILIES.items():
        m = rk.train_single(prefs, ft.X, names, cols, C=cfg.C, epochs=cfg.epochs, seed=cfg.seed)
        m.save(models / f"SVM_{fam}.json")
        written.append(models / f"SVM_{fam}.json")
    # per-slice single models for the type x period comparison
    for typ in TYPES:
        for period in PERIOD_ORDER:
            srows = _slice_rows(ft, rows, types, typ, period)
            sprefs = rk.make_preferences(ft.groups(srows))
            if not sprefs:
                logger.warning("no training preferences for slice %s/%s", typ, period)
                continue
            for fam in ("salience", "timeliness"):
                m = rk.train_single(sprefs, ft.X, names, FAMILIES[fam], C=cfg.C, epochs=cfg.epochs,
                                    seed=cfg.seed)
                p = models / "slices" / f"{typ}_{period}_SVM_{fam}.json"
                p.parent.mkdir(exist_ok=True)
                m.save(p)
                written.append(p)
    write_manifest(cfg, "train", [out / "features.csv", out / "signals.csv", cfg.events], written)
    return ens


def _family_cols(fam):
    return [ALL_COLUMNS.index(c) for c in FAMILIES[fam]]


def stage_rank(cfg):
    check_upstream(cfg, "rank")
    _require(cfg, "aliases")
    out = Path(cfg.out)
    index = _index(cfg)
    table = EntityAliasTable.load(cfg.aliases)
    ft = load_features(out / "features.csv")
    asp = _load(out / "aspects.json")
    sig = load_signals(out / "signals.csv")
    types = {e: t for (e, _), t in zip(sig.keys, sig.types)}
    models = out / "models"
    ens = rk.ModelSet.load(models / "Ensemble.json")
    singles = {f: rk.ModelSet.load(models / f"SVM_{f}.json") for f in FAMILIES}
    dists = {}
    with open(out / "distributions.csv", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            dists[(rec["entity"], rec["period"])] = np.array([float(rec[f"{c}/{t}"]) for c, t in CELLS])
    feats = {}
    for i in range(len(ft.entity)):
        feats[(ft.entity[i], ft.period[i], ft.aspect[i])] = ft.X[i]
    _, test = _split(cfg)
    runs = {m: [] for m in BASELINES + LEARNED}
    slice_runs = {}
    for entity in sorted(set(test) & set(asp)):
        aliases = sorted(table.aliases(entity))
        for period in PERIOD_ORDER:
            rec = asp[entity].get(period)
            if not rec or not rec["aspects"]:
                continue
            t = index.offset(date.fromisoformat(rec["day"]))
            texts = [a for a, _, _ in rec["aspects"]]
            key = (entity, rec["day"])
            runs["RWR"].append((*key, rk.baseline_rwr([(a, s) for a, s, _ in rec["aspects"]])))
            runs["RWR+MLE"].append((*key, rk.baseline_mle(texts, index, t)))
            runs["MLE-W"].append((*key, rk.baseline_mle_w(texts, index, t, cfg.W)))
            runs["LNQ"].append((*key, rk.baseline_lnq(texts, index, t, aliases, cfg.N)))
            runs["PNQ"].append((*key, rk.baseline_pnq(texts, index, t, cfg.period, cfg.W)))
            X = np.array([feats[(entity, period, a)] for a in texts])
            cands = list(zip(texts, X))
            for fam, m in singles.items():
                sub = [(a, x[_family_cols(fam)]) for a, x in cands]
                runs[f"SVM_{fam}"].append((*key, rk.rank(m, entity, t, sub)))
            runs["Ensemble"].append((*key, rk.rank(ens, entity, t, cands, dists[(entity, period)])))
            typ = types.get(entity)
            for fam in ("salience", "timeliness"):
                p = models / "slices" / f"{typ}_{period}_SVM_{fam}.json"
                if p.exists():
                    m = rk.ModelSet.load(p)
                    sub = [(a, x[_family_cols(fam)]) for a, x in cands]
                    slice_runs.setdefault(f"{typ}_{period}_SVM_{fam}", []).append(
                        (*key, rk.rank(m, entity, t, sub)))
    written = []
    (out / "runs").mkdir(exist_ok=True)
    for method, rows in runs.items():
        p = out / "runs" / f"{method}.run"
        rk.write_run(p, rows, method)
        written.append(p)
    (out / "runs" / "slices").mkdir(exist_ok=True)
    for name, rows in sorted(slice_runs.items()):
        p = out / "runs" / "slices" / f"{name}.run"
        rk.write_run(p, rows, name)
        written.append(p)
    write_manifest(cfg, "rank", [out / "features.csv", out / "aspects.json", out / "distributions.csv"],
                   written)
    return runs


def _queries(cfg, index_days=None):
    """Test (entity, day, period) triples in a fixed order."""
    _, test = _split(cfg)
    test = set(test)
    out = []
    for ev in _events(cfg):
        if ev.entity in test:
            for p in PERIOD_ORDER:
                out.append((ev.entity, ev.studied[p].isoformat(), p, ev.type))
    return sorted(out)


def stage_evaluate(cfg):
    runs_dir = Path(cfg.out) / "runs"
    if not _manifest_path(cfg.out, "rank").exists() or not runs_dir.exists():
        raise UserError("evaluate: no ranking runs found; run rank first")
    check_upstream(cfg, "evaluate")
    _require(cfg, "labels")
    out = Path(cfg.out)
    labels = GradedLabelSet.load(cfg.labels)
    queries = _queries(cfg)
    runs = {m: rk.read_run(runs_dir / f"{m}.run") for m in BASELINES + LEARNED}
    pq = per_query_metrics(runs, labels, [(e, d, p) for e, d, p, _ in queries])
    path = out / "metrics.csv"
    names = ["ndcg@3", "ndcg@10", "recall@3", "recall@10"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "entity", "day", "period", "type"] + names)
        for m in runs:
            for k, (e, d, p, typ) in enumerate(queries):
                w.writerow([m, e, d, p, typ] + [f"{pq[m][n][k]:.6f}" for n in names])
    spath = out / "metrics_slices.csv"
    with open(spath, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["type", "period", "family", "n", "ndcg@3", "ndcg@10", "recall@3", "recall@10"])
        for typ in TYPES:
            for period in PERIOD_ORDER:
                sq = [(e, d, p) for e, d, p, t in queries if t == typ and p == period]
                for fam in ("salience", "timeliness"):
                    rp = runs_dir / "slices" / f"{typ}_{period}_SVM_{fam}.run"
                    if not rp.exists() or not sq:
                        continue
                    m = per_query_metrics({fam: rk.read_run(rp)}, labels, sq)[fam]
                    w.writerow([typ, period, fam, len(sq)] + [f"{np.mean(m[n]):.6f}" for n in names])
    write_manifest(cfg, "evaluate", [cfg.labels] + sorted(runs_dir.rglob("*.run")), [path, spath])
    return pq


def load_metrics(path):
    pq = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            m = pq.setdefault(rec["method"], {n: [] for n in ("ndcg@3", "ndcg@10", "recall@3", "recall@10")})
            for n in m:
                m[n].append(float(rec[n]))
    return pq


def stage_report(cfg):
    check_upstream(cfg, "report")
    out = Path(cfg.out)
    pq = load_metrics(out / "metrics.csv")
    rows = comparison_rows(pq, "RWR")
    write_comparison_csv(out / "report.csv", rows)
    text = format_table(rows, "RWR", "Aspect ranking on the test month")
    with open(out / "metrics_slices.csv", encoding="utf-8", newline="") as fh:
        srows = list(csv.DictReader(fh))
    if srows:
        text += "\nSingle-family models per event slice (NDCG@3)\n"
        text += f"{'type':<12}{'period':<8}{'salience':>10}{'timeliness':>12}\n"
        by = {}
        for r in srows:
            by.setdefault((r["type"], r["period"]), {})[r["family"]] = float(r["ndcg@3"])
        for (typ, period), v in sorted(by.items(), key=lambda kv: (TYPES.index(kv[0][0]), PERIOD_ORDER.index(kv[0][1]))):
            text += f"{typ:<12}{period:<8}{v.get('salience', float('nan')):>10.4f}{v.get('timeliness', float('nan')):>12.4f}\n"
    with open(out / "classification.csv", encoding="utf-8", newline="") as fh:
        crow = [r for r in csv.DictReader(fh) if r["bin"] == "mean"]
    if crow:
        c = crow[0]
        text += "\nEvent classification, rolling chronological CV (mean over test bins)\n"
        text += f"{'model':<22}{'accuracy':>10}{'weighted F1':>13}\n"
        text += f"{'type (stage 1)':<22}{float(c['type_accuracy']):>10.4f}{float(c['type_f1']):>13.4f}\n"
        text += f"{'time, cascaded':<22}{float(c['cascaded_accuracy']):>10.4f}{float(c['cascaded_f1']):>13.4f}\n"
        text += f"{'time, logistic':<22}{float(c['logistic_accuracy']):>10.4f}{float(c['logistic_f1']):>13.4f}\n"
    (out / "report.txt").write_text(text)
    write_manifest(cfg, "report", [out / "metrics.csv", out / "metrics_slices.csv", out / "classification.csv"],
                   [out / "report.csv", out / "report.txt"])
    return text


STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "graph": stage_graph,
    "aspects": stage_aspects,
    "signals": stage_signals,
    "classify": stage_classify,
    "features": stage_features,
    "train": stage_train,
    "rank": stage_rank,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_all(cfg, synth=True):
    for stage in STAGES:
        if stage == "synth" and not synth:
            continue
        logger.info("running %s", stage)
        STAGE_FUNCS[stage](cfg)
