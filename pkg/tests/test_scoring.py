import json

import numpy as np
import pytest

from _oracles import nearest_rank_sorted
from conftest import homogeneous_config, make_dataset
from emfleet import ecod, scoring, synth
from emfleet.errors import ConstraintError, DataShapeError, SampleLookupError


@pytest.fixture(scope="module")
def targeted():
    cfg = homogeneous_config(n=1000, d=12, checkpoints=3, seed=0,
                             injection=synth.InjectionSpec(0.001, 20.0, (9, 12)))
    ds, truth = synth.simulate(cfg)
    return ds, truth, scoring.score_fleet(ds)


def test_nearest_rank_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for n in (1, 2, 7, 99, 1000, 1001):
        v = rng.normal(size=n)
        for p in (0.01, 0.5, 0.99, 0.999, 1.0):
            assert scoring.nearest_rank(v, p) == nearest_rank_sorted(v.tolist(), p)


def test_percentile_table_columns():
    auto = np.random.default_rng(1).exponential(size=(500, 4))
    t = scoring.percentile_table(auto, (0.99, 0.999))
    for j in range(4):
        assert t[0, j] == nearest_rank_sorted(auto[:, j].tolist(), 0.99)
        assert t[1, j] == nearest_rank_sorted(auto[:, j].tolist(), 0.999)
    assert np.all(t[1] >= t[0])


def test_four_class_fleet_independent(table1_injected):
    ds, _ = table1_injected
    pops = [p for p in scoring.score_fleet(ds) if p.checkpoint == 0]
    assert [p.workload_class for p in pops] == ["jedec", "proprietary", "synthetic", "ycsb"]
    for p in pops:
        part = ds.filter(checkpoint=0, workload_class=p.workload_class)
        _, t = ecod.fit_score(part)
        np.testing.assert_array_equal(p.scores.aggregate, t.aggregate)
        manual = [f for _, f in ecod.flag(t, p.threshold)]
        assert p.flags.tolist() == manual


def test_two_identical_records():
    p = scoring.score_class(make_dataset([[3, 1], [3, 1]]))
    assert p.scores.aggregate.tolist() == [0.0, 0.0]
    assert not np.any(ecod.flag_mask(p.scores, ecod.Threshold.absolute(1e-9)))


def test_score_class_errors():
    with pytest.raises(ConstraintError):
        scoring.score_class(make_dataset([[1, 2]]))
    with pytest.raises(DataShapeError):
        scoring.score_class(make_dataset([[1], [2], [3]], classes=["a", "a", "b"]))


def test_per_class_isolation(small_fleet):
    ds, _ = small_fleet
    base = {(p.workload_class, p.checkpoint): p for p in scoring.score_fleet(ds)}
    extra = [r for r in ds.records if r.workload_class == "alpha"][:5]
    from dataclasses import replace

    added = ds.subset(list(ds.records) + [replace(r, sample_id=r.sample_id + "x") for r in extra])
    after = {(p.workload_class, p.checkpoint): p for p in scoring.score_fleet(added)}
    for key, p in base.items():
        if key[0] == "beta":
            np.testing.assert_array_equal(p.scores.aggregate, after[key].scores.aggregate)


def test_workers_do_not_change_order(small_fleet):
    ds, _ = small_fleet
    a = scoring.score_fleet(ds)
    b = scoring.score_fleet(ds, workers=4)
    assert [p.to_json() for p in a] == [p.to_json() for p in b]


def test_pooled_percentiles(small_fleet):
    ds, _ = small_fleet
    pops = scoring.score_fleet(ds, percentile_scope="pooled")
    cp0 = [p for p in pops if p.checkpoint == 0]
    assert all(p.percentile_scope == "pooled" for p in cp0)
    np.testing.assert_array_equal(cp0[0].table, cp0[1].table)
    with pytest.raises(ValueError):
        scoring.score_fleet(ds, percentile_scope="global")


def test_injected_sample_ranks_first_with_window_causal(targeted):
    _, truth, pops = targeted
    (sid, label), = truth.injected.items()
    for p in pops:
        top = scoring.rank_extrinsic(p, 1)[0]
        assert top.sample_id == sid
        assert top.causal_steps == label.steps


def test_median_sample_has_no_causal_steps(targeted):
    _, _, pops = targeted
    for p in pops:
        mid = p.sample_ids[p.rank_order()[p.n // 2]]
        assert scoring.explain(p, mid).causal_steps == ()


def test_rank_extrinsic_k_and_oracle(small_fleet):
    ds, _ = small_fleet
    p = scoring.score_fleet(ds)[0]
    assert scoring.rank_extrinsic(p, 1)[0].aggregate == p.scores.aggregate.max()
    assert len(scoring.rank_extrinsic(p, p.n + 10)) == p.n
    k = 15
    oracle = sorted(zip(-p.scores.aggregate, p.sample_ids))[:k]
    assert [r.sample_id for r in scoring.rank_extrinsic(p, k)] == [sid for _, sid in oracle]
    with pytest.raises(ValueError):
        scoring.rank_extrinsic(p, 0)


def test_causal_step_soundness(table1_injected):
    ds, _ = table1_injected
    for p in scoring.score_fleet(ds.filter(checkpoint=2)):
        row = p.percentile_row(scoring.CAUSAL_PERCENTILE)
        for rep in scoring.rank_extrinsic(p, 20):
            auto = np.array([d.auto for d in rep.dims])
            assert rep.causal_steps == tuple(np.flatnonzero(auto > row).tolist())


def test_explain_text_and_json_agree(targeted):
    _, truth, pops = targeted
    sid = next(iter(truth.injected))
    rep = scoring.explain(pops[0], sid)
    doc = rep.to_dict()
    text = rep.to_text().splitlines()
    assert f"rank {doc['rank']}/{doc['n']}" in text[1]
    rows = text[4:]
    assert len(rows) == len(doc["steps"])
    for line, step in zip(rows, doc["steps"]):
        cells = line.split()
        assert int(cells[0]) == step["step"]
        assert float(cells[3]) == pytest.approx(step["auto"], abs=5e-7)
        assert float(cells[4]) == pytest.approx(step["p99"], abs=5e-7)
        assert float(cells[5]) == pytest.approx(step["p99.9"], abs=5e-7)
        assert (cells[-1] == "*") == step["causal"]


def test_explain_unknown_sample(targeted):
    with pytest.raises(SampleLookupError):
        scoring.explain(targeted[2][0], "missing")


def test_consistency_persistent_injected(targeted):
    _, truth, pops = targeted
    sid = next(iter(truth.injected))
    rep = scoring.checkpoint_consistency(pops, sid)
    assert rep.consistent and len(rep.entries) == 3


def test_consistency_two_of_three_and_single():
    def pop(cp, flagged):
        ds = make_dataset([[0], [1], [2], [9]], checkpoint=cp)
        p = scoring.score_class(ds, threshold=ecod.Threshold.absolute(0.0))
        p.flags = np.array([False, False, False, flagged])
        return p

    pops = [pop(0, True), pop(1, False), pop(2, True)]
    assert not scoring.checkpoint_consistency(pops, "s0003").consistent
    single = scoring.checkpoint_consistency([pops[1]], "s0003")
    assert single.consistent is False and len(single.entries) == 1
    with pytest.raises(SampleLookupError):
        scoring.checkpoint_consistency(pops, "zzz")


def test_transient_boost_inconsistent():
    cfg = homogeneous_config(n=1000, d=12, checkpoints=3, seed=3,
                             injection=synth.InjectionSpec(0.001, 20.0, (9, 12), mode="transient"))
    ds, truth = synth.simulate(cfg)
    sid = next(iter(truth.injected))
    rep = scoring.checkpoint_consistency(scoring.score_fleet(ds), sid)
    assert rep.consistent is False


def test_histogram_all_equal():
    h = scoring.score_histogram(np.full(20, 2.5), 10)
    assert h.percent.max() == 100.0 and h.percent.sum() == 100.0
    z = scoring.score_histogram(np.zeros(5), 4)
    assert z.edges[-1] == 1.0 and z.percent[0] == 100.0


def test_histogram_sums_to_100_random():
    rng = np.random.default_rng(3)
    for _ in range(200):
        vals = rng.exponential(size=int(rng.integers(1, 5000)))
        h = scoring.score_histogram(vals, int(rng.integers(1, 200)))
        assert abs(h.percent.sum() - 100.0) <= 1e-9


def test_histogram_errors():
    with pytest.raises(ConstraintError):
        scoring.score_histogram(np.array([]), 5)
    with pytest.raises(ValueError):
        scoring.score_histogram(np.ones(3), 0)


def test_sparse_class_histogram_is_right_skewed():
    ds, _ = synth.simulate(homogeneous_config(n=2000, d=37, seed=0, base_rate=5e-5, decay=0.0))
    h = scoring.score_histogram(scoring.score_fleet(ds)[0], 50)
    assert h.percent[:5].sum() > 80.0


def test_histogram_csv_round_trip():
    h = scoring.score_histogram(np.array([0.0, 1.0, 2.0, 3.0]), 3)
    lines = h.to_csv().splitlines()
    assert lines[0] == "bin,lo,hi,percent"
    assert sum(float(line.split(",")[3]) for line in lines[1:]) == pytest.approx(100.0, abs=1e-12)


def test_scored_json_round_trip(tmp_path, small_fleet):
    ds, _ = small_fleet
    pops = scoring.score_fleet(ds)
    for p in pops:
        (tmp_path / f"scored_{scoring.population_stem(p)}.json").write_text(p.to_json())
    back = scoring.load_scored_dir(tmp_path)
    assert len(back) == len(pops)
    for a, b in zip(sorted(pops, key=scoring.population_stem), sorted(back, key=scoring.population_stem)):
        assert a.to_json() == b.to_json()
    bad = json.loads(pops[0].to_json())
    bad["format_version"] = 99
    with pytest.raises(DataShapeError):
        scoring.ScoredPopulation.from_dict(bad)
