import filecmp

import numpy as np
import pytest

from aspectrec.logstore import EntityAliasTable, ingest, series_for
from aspectrec.signals import seasonality
from aspectrec.synth import GRADES, SynthSpec, generate, read_events

SMALL = dict(n_breaking=8, n_anticipated=8, n_generic_articles=20, seed=11)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    res = generate(SynthSpec(**SMALL), out)
    return res, ingest(res.paths["log"], min_qf=1, min_click=1)


def test_fixed_seed_gives_byte_identical_outputs(tmp_path, world):
    res, _ = world
    again = generate(SynthSpec(**SMALL), tmp_path)
    for key, path in res.paths.items():
        assert filecmp.cmp(path, again.paths[key], shallow=False), key


def test_different_seed_changes_log(tmp_path, world):
    res, _ = world
    other = generate(SynthSpec(**{**SMALL, "seed": 12}), tmp_path)
    assert not filecmp.cmp(res.paths["log"], other.paths["log"], shallow=False)


def test_inconsistent_spec_is_rejected(tmp_path):
    with pytest.raises(ValueError, match="outside"):
        generate(SynthSpec(**SMALL, event_days={0: 90}), tmp_path)
    with pytest.raises(ValueError):
        generate(SynthSpec(**{**SMALL, "n_breaking": 0}), tmp_path)


def test_event_days_inside_span(world):
    res, _ = world
    spec = SynthSpec(**SMALL)
    for e in res.entities:
        assert spec.event_window[0] <= e.event_day <= spec.event_window[1]
        assert e.studied["before"] < e.event_day <= e.studied["during"] < e.studied["after"]
        assert e.studied["after"] < spec.n_days
    events = read_events(res.paths["events"])
    assert [ev.entity for ev in events] == [e.id for e in res.entities]


def test_before_only_aspects_peak_before_event(world):
    res, index = world
    shares = []
    for e in res.entities:
        for kind, word in e.aspects:
            if kind == "prep":
                y = index.daily(f"{e.name} {word}")
                shares.append(y[: e.event_day].sum() / y.sum())
    assert len(shares) > 0 and min(shares) > 0.8


def test_anticipated_entities_are_more_seasonal(world):
    res, index = world
    aliases = EntityAliasTable.load(res.paths["aliases"])
    by_type = {"anticipated": [], "breaking": []}
    for e in res.entities:
        ts = series_for(index, aliases, e.id)
        by_type[e.type].append(seasonality(ts))
    assert np.mean(by_type["anticipated"]) > np.mean(by_type["breaking"])


def test_labels_follow_planted_grades(world):
    res, _ = world
    for e in res.entities:
        for kind, word in e.aspects:
            q = f"{e.name} {word}"
            got = tuple(res.labels.for_query(e.id, p)[q] for p in ("before", "during", "after"))
            assert got == GRADES[e.type][kind]


def test_breaking_entities_are_silent_about_the_event_before_it(world):
    res, index = world
    for e in res.entities:
        if e.type != "breaking":
            continue
        for kind, word in e.aspects:
            if kind == "news":
                assert index.daily(f"{e.name} {word}")[: e.event_day].sum() == 0
