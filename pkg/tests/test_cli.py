import json
from pathlib import Path

import pytest

from conftest import homogeneous_config
from emfleet import synth
from emfleet.cli import main


def _small_four_class(seed=1, injection=None):
    cfg = synth.table1_config(seed=seed)
    doc = cfg.to_dict()
    for g in doc["generations"]:
        g["population"] = 120
    doc["injection"] = injection
    return doc


@pytest.fixture(scope="module")
def fleet_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(_small_four_class(injection={"fraction": 0.01, "boost": 8.0})))
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "sim")]) == 0
    assert main(["score", str(root / "sim" / "fleet.jsonl"), "--out", str(root / "score")]) == 0
    return root


def _tree(path: Path) -> dict:
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json":
                doc = json.loads(data)
                doc.pop("wall_time_s")
                data = json.dumps(doc, sort_keys=True).encode()
            out[str(p.relative_to(path))] = data
    return out


def test_simulate_writes_expected_files(fleet_dir):
    names = sorted(p.name for p in (fleet_dir / "sim").iterdir())
    assert names == ["config.json", "fleet.jsonl", "manifest.json", "truth.json"]
    manifest = json.loads((fleet_dir / "sim" / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 1
    assert set(manifest["outputs"]) == {"config.json", "fleet.jsonl", "truth.json"}
    for key in ("config_hash", "tool_version", "inputs", "wall_time_s"):
        assert key in manifest


def test_table1_preset_record_count(tmp_path):
    assert main(["simulate", "--preset", "table1", "--out", str(tmp_path), "--format", "csv"]) == 0
    lines = (tmp_path / "fleet.csv").read_text().splitlines()
    assert len(lines) - 1 == 3 * 8311


def test_simulate_rerun_identical(tmp_path):
    args = ["simulate", "--preset", "stress-axes", "--seed", "5", "--out", str(tmp_path)]
    assert main(args) == 0
    first = _tree(tmp_path)
    assert main(args) == 0
    assert _tree(tmp_path) == first


def test_bad_seed_type_exit_2(tmp_path, capsys):
    doc = _small_four_class()
    doc["seed"] = "seven"
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err


def test_missing_config_field_exit_2(tmp_path, capsys):
    doc = _small_four_class()
    del doc["generations"][0]["label"]
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert "generations[0].label" in capsys.readouterr().err


def test_score_twelve_populations(fleet_dir):
    scored = sorted((fleet_dir / "score").glob("scored_*.json"))
    hists = sorted((fleet_dir / "score").glob("hist_*.csv"))
    assert len(scored) == 12 and len(hists) == 12
    for h in hists:
        total = sum(float(line.split(",")[3]) for line in h.read_text().splitlines()[1:])
        assert abs(total - 100.0) <= 1e-9


def test_score_contamination_ceiling(fleet_dir):
    import math

    for p in (fleet_dir / "score").glob("scored_*.json"):
        doc = json.loads(p.read_text())
        assert sum(s["flagged"] for s in doc["samples"]) == math.ceil(0.005 * doc["n"])


def test_score_absolute_zero_flags_all(fleet_dir, tmp_path):
    assert main(["score", str(fleet_dir / "sim" / "fleet.jsonl"), "--absolute", "0", "--out", str(tmp_path)]) == 0
    for p in tmp_path.glob("scored_*.json"):
        assert all(s["flagged"] for s in json.loads(p.read_text())["samples"])


def test_score_rerun_identical(fleet_dir):
    first = _tree(fleet_dir / "score")
    assert main(["score", str(fleet_dir / "sim" / "fleet.jsonl"), "--out", str(fleet_dir / "score")]) == 0
    assert _tree(fleet_dir / "score") == first


def test_score_frozen_model_dim_mismatch_exit_3(fleet_dir, tmp_path):
    other = tmp_path / "other"
    cfg = homogeneous_config(n=30, d=5)
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(other)]) == 0
    assert main(["fit", str(other / "fleet.jsonl"), "--out", str(tmp_path / "m")]) == 0
    rc = main(["score", str(fleet_dir / "sim" / "fleet.jsonl"), "--model", str(tmp_path / "m" / "model.json"),
               "--out", str(tmp_path / "s")])
    assert rc == 3


def test_score_frozen_model_matches_refit_when_same_population(tmp_path):
    cfg = homogeneous_config(n=40, d=4, checkpoints=1)
    (tmp_path / "c.json").write_text(cfg.to_json())
    main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "sim")])
    data = str(tmp_path / "sim" / "fleet.jsonl")
    main(["fit", data, "--out", str(tmp_path / "m")])
    main(["score", data, "--out", str(tmp_path / "a")])
    main(["score", data, "--model", str(tmp_path / "m" / "model.json"), "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "scored_flat_cp0.json").read_bytes()
    assert a == (tmp_path / "b" / "scored_flat_cp0.json").read_bytes()


def test_malformed_dataset_exit_3(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"sample_id": "x"}\n')
    assert main(["score", str(bad), "--out", str(tmp_path / "o")]) == 3


def test_bad_contamination_exit_2(fleet_dir, tmp_path):
    rc = main(["score", str(fleet_dir / "sim" / "fleet.jsonl"), "--contamination", "0.9", "--out", str(tmp_path)])
    assert rc == 2


def test_explain_and_unknown_sample(fleet_dir, tmp_path, capsys):
    truth = synth.GroundTruth.load(fleet_dir / "sim" / "truth.json")
    sid = sorted(truth.injected)[0]
    assert main(["explain", str(fleet_dir / "score"), "--sample", sid, "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / f"explain_{sid}_cp2.json").read_text())
    assert doc["checkpoint"] == 2 and len(doc["steps"]) == 37
    assert {"p99", "p99.9", "causal"} <= set(doc["steps"][0])
    assert main(["explain", str(fleet_dir / "score"), "--sample", "SSD-Z-0", "--out", str(tmp_path)]) == 4
    assert "SSD-Z-0" in capsys.readouterr().err


def test_explain_targeted_injection_causal_window(tmp_path):
    cfg = homogeneous_config(n=1000, d=12, checkpoints=3, seed=0,
                             injection=synth.InjectionSpec(0.001, 20.0, (9, 12)))
    (tmp_path / "c.json").write_text(cfg.to_json())
    main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "sim")])
    main(["score", str(tmp_path / "sim" / "fleet.jsonl"), "--out", str(tmp_path / "sc")])
    truth = synth.GroundTruth.load(tmp_path / "sim" / "truth.json")
    (sid, lab), = truth.injected.items()
    assert main(["explain", str(tmp_path / "sc"), "--sample", sid, "--out", str(tmp_path / "ex")]) == 0
    doc = json.loads((tmp_path / "ex" / f"explain_{sid}_cp2.json").read_text())
    assert doc["causal_steps"] == list(lab.steps)
    assert main(["consistency", str(tmp_path / "sc"), "--sample", sid, "--out", str(tmp_path / "co")]) == 0
    assert json.loads((tmp_path / "co" / f"consistency_{sid}.json").read_text())["consistent"] is True


def test_consistency_transient_and_single_checkpoint(tmp_path):
    cfg = homogeneous_config(n=1000, d=12, checkpoints=3, seed=3,
                             injection=synth.InjectionSpec(0.001, 20.0, (9, 12), mode="transient"))
    (tmp_path / "c.json").write_text(cfg.to_json())
    main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "sim")])
    main(["score", str(tmp_path / "sim" / "fleet.jsonl"), "--out", str(tmp_path / "sc")])
    sid = next(iter(synth.GroundTruth.load(tmp_path / "sim" / "truth.json").injected))
    assert main(["consistency", str(tmp_path / "sc"), "--sample", sid, "--out", str(tmp_path / "co")]) == 0
    assert json.loads((tmp_path / "co" / f"consistency_{sid}.json").read_text())["consistent"] is False
    assert main(["consistency", str(tmp_path / "sc" / "scored_flat_cp0.json"), "--sample", sid,
                 "--out", str(tmp_path / "one")]) == 0
    doc = json.loads((tmp_path / "one" / f"consistency_{sid}.json").read_text())
    assert len(doc["checkpoints"]) == 1 and doc["consistent"] == doc["checkpoints"][0]["flagged"]


def test_consistency_missing_sample_exit_4(fleet_dir, tmp_path):
    assert main(["consistency", str(fleet_dir / "score"), "--sample", "nope", "--out", str(tmp_path)]) == 4


@pytest.fixture(scope="module")
def stress_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("stress")
    assert main(["simulate", "--preset", "stress-axes", "--out", str(root / "sim")]) == 0
    return root


def test_embed_stress_design(stress_dir, tmp_path):
    sim = stress_dir / "sim"
    rc = main(["embed", str(sim / "fleet.jsonl"), "--truth", str(sim / "truth.json"),
               "--group-by", "workload", "--pooled", "--out", str(tmp_path)])
    assert rc == 0
    scree = [line.split(",") for line in (tmp_path / "scree.csv").read_text().splitlines()[1:]]
    assert float(scree[2][2]) >= 0.95
    axes = [line.split(",") for line in (tmp_path / "axes.csv").read_text().splitlines()[1:]]
    assert len({row[3] for row in axes}) == 3
    assert all(float(row[4]) >= 0.8 for row in axes)


def test_embed_full_k_reconstruction(stress_dir, tmp_path):
    rc = main(["embed", str(stress_dir / "sim" / "fleet.jsonl"), "--k", "37", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "embedding_SSD-X.csv").read_text().splitlines()[1:]
    assert all(float(line.rsplit(",", 1)[1]) <= 1e-10 for line in lines)


def test_embed_per_generation_files(fleet_dir, tmp_path):
    assert main(["embed", str(fleet_dir / "sim" / "fleet.jsonl"), "--per-generation", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("scree_*.csv")) == [
        "scree_SSD-A.csv", "scree_SSD-B.csv", "scree_SSD-C.csv"]


def test_embed_small_group_exit_5(tmp_path, capsys):
    cfg = synth.FleetConfig(
        generations=(synth.GenerationSpec("G", 3, 10.0, 0.0),), d=4,
        classes=(synth.WorkloadClassSpec("c", tuple(synth.WorkloadSpec(f"w{i}") for i in range(3))),),
        checkpoints=1, seed=0,
    )
    (tmp_path / "c.json").write_text(cfg.to_json())
    main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "sim")])
    assert main(["embed", str(tmp_path / "sim" / "fleet.jsonl"), "--out", str(tmp_path / "e")]) == 5
    assert "group" in capsys.readouterr().err


def test_embed_k_too_large_exit_5(stress_dir, tmp_path):
    assert main(["embed", str(stress_dir / "sim" / "fleet.jsonl"), "--k", "38", "--out", str(tmp_path)]) == 5


def test_embed_rerun_identical(stress_dir, tmp_path):
    args = ["embed", str(stress_dir / "sim" / "fleet.jsonl"), "--truth", str(stress_dir / "sim" / "truth.json"),
            "--out", str(tmp_path)]
    main(args)
    first = _tree(tmp_path)
    main(args)
    assert _tree(tmp_path) == first


def test_every_command_writes_one_manifest(fleet_dir):
    for sub in ("sim", "score"):
        assert len(list((fleet_dir / sub).glob("manifest.json"))) == 1
    manifest = json.loads((fleet_dir / "score" / "manifest.json").read_text())
    assert len(manifest["outputs"]) == 12 * 3 + 2
