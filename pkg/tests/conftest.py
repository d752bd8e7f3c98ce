import pytest

from emfleet import synth
from emfleet.telemetry import FleetDataset, SampleRecord


def make_dataset(rows, classes=None, checkpoint=0, workload="w0"):
    classes = classes or ["c0"] * len(rows)
    recs = [
        SampleRecord(f"s{i:04d}", "G", cls, workload, checkpoint, 1, tuple(int(v) for v in row))
        for i, (row, cls) in enumerate(zip(rows, classes))
    ]
    return FleetDataset.from_records(recs)


def homogeneous_config(n=1000, d=12, checkpoints=1, seed=0, injection=None, **kw):
    """One class, one zero-stimulus workload, fixed component count."""
    return synth.FleetConfig(
        generations=(synth.GenerationSpec("SSD-T", n, 60.0, 0.0),),
        d=d,
        classes=(synth.WorkloadClassSpec("flat", (synth.WorkloadSpec("flat-0"),)),),
        checkpoints=checkpoints,
        seed=seed,
        injection=injection,
        **kw,
    )


@pytest.fixture(scope="session")
def table1_injected():
    cfg = synth.table1_config(seed=0, injection=synth.InjectionSpec(0.005, 8.0))
    return synth.simulate(cfg)


@pytest.fixture(scope="session")
def small_fleet():
    cfg = synth.FleetConfig(
        generations=(synth.GenerationSpec("SSD-A", 150, 20.0, 2.0), synth.GenerationSpec("SSD-B", 150, 22.0, 2.0)),
        d=8,
        classes=(
            synth.WorkloadClassSpec("alpha", (synth.WorkloadSpec("a1"), synth.WorkloadSpec("a2", synth.StimulusProfile(write=1.0)))),
            synth.WorkloadClassSpec("beta", (synth.WorkloadSpec("b1", synth.StimulusProfile(read=1.0)),)),
        ),
        checkpoints=3,
        seed=7,
        base_rate=400.0,
    )
    return synth.generate_fleet(cfg)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
