"""Deterministic synthetic fleet generator with ground-truth labels.

Every SSD draws from its own Philox stream keyed by ``(seed, stream tag | index)``,
so any subset of the fleet regenerates identically regardless of how many
others are produced. Per SSD:

* component count ~ Normal(mean, sd), rounded and clamped to >= 1;
* a latent activation rate per EM step ~ Gamma(shape=dispersion,
  scale=mean/dispersion) with ``mean = base * exp(-decay * j) * stimulus_j *
  components``; the rate is a persistent device property;
* each checkpoint interval adds Poisson(rate) activations, and records hold
  the cumulative totals, so counts never decrease across checkpoints.

Marginally each interval's count is negative binomial with the configured
mean and dispersion. All defaults are synthetic choices, recorded in the
dataset provenance.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from emfleet.errors import ConfigError
from emfleet.telemetry import FleetDataset, SampleRecord

CONFIG_VERSION = 1
_STREAM_SAMPLE = 0
_STREAM_INJECT = 1
_STREAM_TAG_SHIFT = 56
AXES = ("retention", "write", "read")


@dataclass(frozen=True)
class StimulusProfile:
    """Workload stress intensities, each in [0, 1]."""

    retention: float = 0.0
    write: float = 0.0
    read: float = 0.0

    def __post_init__(self):
        for axis in AXES:
            v = getattr(self, axis)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(f"stimulus.{axis} must be a number in [0, 1], got {v!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.retention, self.write, self.read)


@dataclass(frozen=True)
class StimulusBands:
    """Half-open EM-step bands each stress axis amplifies, and the full-intensity gain."""

    write: tuple[int, int]
    read: tuple[int, int]
    retention: tuple[int, int]
    max_gain: float = 4.0

    @classmethod
    def default(cls, d: int, max_gain: float = 4.0) -> StimulusBands:
        a = max(1, round(0.27 * d))
        b = max(a + 1, round(0.6 * d))
        return cls(write=(0, a), read=(a, b), retention=(b, d), max_gain=max_gain)

    def validate(self, d: int) -> None:
        spans = []
        for axis in AXES:
            lo, hi = getattr(self, axis)
            if not (0 <= lo < hi <= d):
                raise ConfigError(f"bands.{axis} = [{lo}, {hi}) must lie within [0, {d})")
            spans.append((lo, hi, axis))
        spans.sort()
        for (lo1, hi1, a1), (lo2, _, a2) in zip(spans, spans[1:]):
            if lo2 < hi1:
                raise ConfigError(f"bands.{a1} and bands.{a2} overlap")
        if not self.max_gain >= 1.0:
            raise ConfigError(f"bands.max_gain must be >= 1, got {self.max_gain}")


def stimulus_multipliers(profile: StimulusProfile, j: int, bands: StimulusBands) -> float:
    """Rate multiplier at step ``j``: ``1 + (gain - 1) * intensity`` inside an axis band, else 1."""
    for axis in AXES:
        lo, hi = getattr(bands, axis)
        if lo <= j < hi:
            return 1.0 + (bands.max_gain - 1.0) * getattr(profile, axis)
    return 1.0


def multiplier_vector(profile: StimulusProfile, d: int, bands: StimulusBands) -> np.ndarray:
    return np.array([stimulus_multipliers(profile, j, bands) for j in range(d)])


@dataclass(frozen=True)
class GenerationSpec:
    label: str
    population: int
    mean_components: float
    sd_components: float


@dataclass(frozen=True)
class WorkloadSpec:
    workload_id: str
    stimulus: StimulusProfile = field(default_factory=StimulusProfile)


@dataclass(frozen=True)
class WorkloadClassSpec:
    name: str
    workloads: tuple[WorkloadSpec, ...]


@dataclass(frozen=True)
class InjectionSpec:
    fraction: float
    boost: float
    window: tuple[int, int] | None = None
    mode: str = "persistent"


@dataclass(frozen=True)
class FleetConfig:
    generations: tuple[GenerationSpec, ...]
    d: int
    classes: tuple[WorkloadClassSpec, ...]
    checkpoints: int = 3
    seed: int = 0
    base_rate: float = 15000.0
    decay: float = 0.35
    dispersion: float = 4.0
    bands: StimulusBands | None = None
    injection: InjectionSpec | None = None

    def __post_init__(self):
        self.validate()

    @property
    def resolved_bands(self) -> StimulusBands:
        return self.bands or StimulusBands.default(self.d)

    @property
    def population(self) -> int:
        return sum(g.population for g in self.generations)

    def workloads(self) -> list[tuple[str, WorkloadSpec]]:
        return [(c.name, w) for c in self.classes for w in c.workloads]

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {type(self.seed).__name__}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be in [0, 2**64)")
        if isinstance(self.d, bool) or not isinstance(self.d, int) or self.d < 2:
            raise ConfigError(f"d must be an integer >= 2, got {self.d!r}")
        if isinstance(self.checkpoints, bool) or not isinstance(self.checkpoints, int) or self.checkpoints < 1:
            raise ConfigError(f"checkpoints must be an integer >= 1, got {self.checkpoints!r}")
        if not self.generations:
            raise ConfigError("generations must not be empty")
        labels = set()
        for g in self.generations:
            if not g.label or g.label in labels:
                raise ConfigError(f"generations: label {g.label!r} empty or duplicated")
            labels.add(g.label)
            if isinstance(g.population, bool) or not isinstance(g.population, int) or g.population < 2:
                raise ConfigError(f"generations[{g.label}].population must be an integer >= 2")
            if not g.mean_components >= 1:
                raise ConfigError(f"generations[{g.label}].mean_components must be >= 1")
            if not g.sd_components >= 0:
                raise ConfigError(f"generations[{g.label}].sd_components must be >= 0")
        if not self.classes:
            raise ConfigError("classes must not be empty")
        ids = set()
        for c in self.classes:
            if not c.workloads:
                raise ConfigError(f"classes[{c.name}].workloads must not be empty")
            for w in c.workloads:
                if w.workload_id in ids:
                    raise ConfigError(f"workload id {w.workload_id!r} duplicated")
                ids.add(w.workload_id)
        if not self.base_rate > 0:
            raise ConfigError("base_rate must be > 0")
        if not self.decay >= 0:
            raise ConfigError("decay must be >= 0")
        if not self.dispersion > 0:
            raise ConfigError("dispersion must be > 0")
        self.resolved_bands.validate(self.d)
        if self.injection is not None:
            inj = self.injection
            _check_injection(inj.fraction, inj.boost, inj.window or default_window(self.d), self.d, inj.mode)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc = {"config_version": CONFIG_VERSION, **doc}
        doc["bands"] = asdict(self.resolved_bands)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}{key} is required")
    return doc[key]


def config_from_dict(doc: dict) -> FleetConfig:
    """Build a :class:`FleetConfig` from its JSON document, naming the field on errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = doc.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version {version!r} is not supported (expected {CONFIG_VERSION})")
    known = {
        "config_version", "generations", "d", "classes", "checkpoints", "seed", "base_rate",
        "decay", "dispersion", "bands", "injection",
    }
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    try:
        gens = tuple(
            GenerationSpec(
                label=_require(g, "label", f"generations[{i}]."),
                population=_require(g, "population", f"generations[{i}]."),
                mean_components=_require(g, "mean_components", f"generations[{i}]."),
                sd_components=g.get("sd_components", 0.0),
            )
            for i, g in enumerate(_require(doc, "generations", ""))
        )
        classes = []
        for i, c in enumerate(_require(doc, "classes", "")):
            wls = []
            for k, w in enumerate(_require(c, "workloads", f"classes[{i}].")):
                stim = w.get("stimulus", {})
                bad = sorted(set(stim) - set(AXES))
                if bad:
                    raise ConfigError(f"classes[{i}].workloads[{k}].stimulus: unknown axis {bad[0]!r}")
                wls.append(WorkloadSpec(_require(w, "workload_id", f"classes[{i}].workloads[{k}]."), StimulusProfile(**stim)))
            classes.append(WorkloadClassSpec(_require(c, "name", f"classes[{i}]."), tuple(wls)))
        bands = None
        if doc.get("bands") is not None:
            b = doc["bands"]
            bands = StimulusBands(
                write=tuple(_require(b, "write", "bands.")),
                read=tuple(_require(b, "read", "bands.")),
                retention=tuple(_require(b, "retention", "bands.")),
                max_gain=b.get("max_gain", 4.0),
            )
        injection = None
        if doc.get("injection") is not None:
            j = doc["injection"]
            injection = InjectionSpec(
                fraction=_require(j, "fraction", "injection."),
                boost=_require(j, "boost", "injection."),
                window=tuple(j["window"]) if j.get("window") is not None else None,
                mode=j.get("mode", "persistent"),
            )
        return FleetConfig(
            generations=gens,
            d=_require(doc, "d", ""),
            classes=tuple(classes),
            checkpoints=doc.get("checkpoints", 3),
            seed=doc.get("seed", 0),
            base_rate=doc.get("base_rate", 15000.0),
            decay=doc.get("decay", 0.35),
            dispersion=doc.get("dispersion", 4.0),
            bands=bands,
            injection=injection,
        )
    except (TypeError, AttributeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from None


def load_config(path) -> FleetConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(doc)


# --- presets -----------------------------------------------------------------


def _w(wid: str, retention=0.0, write=0.0, read=0.0) -> WorkloadSpec:
    return WorkloadSpec(wid, StimulusProfile(retention=retention, write=write, read=read))


def table1_config(seed: int = 0, injection: InjectionSpec | None = None) -> FleetConfig:
    """Three generations of 906 / 4027 / 3378 SSDs (~0.5 M components), 4 workload classes."""
    return FleetConfig(
        generations=(
            GenerationSpec("SSD-A", 906, 58.0, 4.0),
            GenerationSpec("SSD-B", 4027, 61.0, 4.0),
            GenerationSpec("SSD-C", 3378, 60.0, 4.0),
        ),
        d=37,
        classes=(
            WorkloadClassSpec("jedec", (
                _w("jesd219-client", write=0.5, read=0.3),
                _w("jesd219-enterprise", write=0.9, read=0.2),
                _w("jesd218-retention", retention=0.8, write=0.3),
            )),
            WorkloadClassSpec("synthetic", (
                _w("seq-write", write=1.0),
                _w("rand-write", write=0.7, read=0.1),
                _w("rand-read", read=1.0),
                _w("mixed-70-30", write=0.3, read=0.7),
            )),
            WorkloadClassSpec("ycsb", (
                _w("ycsb-a", write=0.5, read=0.5),
                _w("ycsb-b", write=0.05, read=0.95),
                _w("ycsb-c", read=1.0),
                _w("ycsb-f", write=0.4, read=0.6),
            )),
            WorkloadClassSpec("proprietary", (
                _w("early-retention", retention=1.0),
                _w("retention-interference", retention=0.6, read=0.4),
                _w("thermal-throttle", retention=0.4, write=0.4),
                _w("read-disturb", read=0.8),
            )),
        ),
        checkpoints=3,
        seed=seed,
        injection=injection,
    )


def stress_axes_config(seed: int = 0, per_workload: int = 100, levels=(0.0, 0.5, 1.0)) -> FleetConfig:
    """One class whose workloads form a full factorial over the three stress axes.

    With the default three levels this gives 27 workload groups whose latent
    intensities are mutually uncorrelated across groups.
    """
    workloads = []
    for ret, wr, rd in itertools.product(levels, repeat=3):
        wid = f"ret{int(ret * 100)}-wr{int(wr * 100)}-rd{int(rd * 100)}"
        workloads.append(_w(wid, retention=ret, write=wr, read=rd))
    return FleetConfig(
        generations=(GenerationSpec("SSD-X", per_workload * len(workloads), 60.0, 4.0),),
        d=37,
        classes=(WorkloadClassSpec("stress-sweep", tuple(workloads)),),
        checkpoints=1,
        seed=seed,
    )


PRESETS = {"table1": table1_config, "stress-axes": stress_axes_config}


# --- generation --------------------------------------------------------------


def _stream(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, (tag << _STREAM_TAG_SHIFT) | index]))


@dataclass(frozen=True)
class InjectionLabel:
    steps: tuple[int, ...]
    boost: float
    checkpoints: tuple[int, ...]


@dataclass
class GroundTruth:
    """Validation labels: injected samples and per-workload latent stress intensities."""

    injected: dict[str, InjectionLabel] = field(default_factory=dict)
    latent: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    @property
    def injected_ids(self) -> set[str]:
        return set(self.injected)

    def to_dict(self) -> dict:
        return {
            "axes": list(AXES),
            "injected": {
                sid: {"steps": list(lab.steps), "boost": lab.boost, "checkpoints": list(lab.checkpoints)}
                for sid, lab in sorted(self.injected.items())
            },
            "latent": {wid: list(v) for wid, v in sorted(self.latent.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> GroundTruth:
        return cls(
            injected={
                sid: InjectionLabel(tuple(v["steps"]), v["boost"], tuple(v["checkpoints"]))
                for sid, v in doc.get("injected", {}).items()
            },
            latent={wid: tuple(v) for wid, v in doc.get("latent", {}).items()},
        )

    @classmethod
    def load(cls, path) -> GroundTruth:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def generate_fleet(config: FleetConfig) -> tuple[FleetDataset, GroundTruth]:
    """Generate the clean fleet (no injections) with per-workload latent labels.

    Records are ordered checkpoint-major, SSDs in generation order within each
    checkpoint. Sample ids are ``<generation>-<index>`` with a fleet-wide index.
    """
    d, C = config.d, config.checkpoints
    bands = config.resolved_bands
    workloads = config.workloads()
    mults = [multiplier_vector(w.stimulus, d, bands) for _, w in workloads]
    depth = config.base_rate * np.exp(-config.decay * np.arange(d))
    r = config.dispersion

    ids, metas = [], []
    cumulative = np.empty((config.population, C, d), dtype=np.int64)
    index = 0
    for gen in config.generations:
        for _ in range(gen.population):
            rng = _stream(config.seed, _STREAM_SAMPLE, index)
            comps = max(1, int(round(rng.normal(gen.mean_components, gen.sd_components))))
            w = int(rng.integers(len(workloads)))
            mean = depth * mults[w] * comps
            rate = rng.gamma(r, mean / r)
            increments = rng.poisson(rate, size=(C, d))
            cumulative[index] = np.cumsum(increments, axis=0)
            ids.append(f"{gen.label}-{index:05d}")
            metas.append((gen.label, workloads[w][0], workloads[w][1].workload_id, comps))
            index += 1

    records = []
    for c in range(C):
        block = cumulative[:, c, :].tolist()
        for i, sid in enumerate(ids):
            g, cls, wid, comps = metas[i]
            records.append(SampleRecord(sid, g, cls, wid, c, comps, tuple(block[i])))
    provenance = {
        "generator": "emfleet.synth",
        "synthetic_defaults": True,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
    }
    dataset = FleetDataset(records=tuple(records), d=d, provenance=provenance)
    truth = GroundTruth(latent={w.workload_id: w.stimulus.as_tuple() for _, w in workloads})
    return dataset, truth


def default_window(d: int) -> tuple[int, int]:
    """The deepest ``max(2, d // 3)`` steps."""
    return (d - max(2, d // 3), d)


def _check_injection(fraction, boost, window, d, mode):
    if not 0 < fraction <= 0.2:
        raise ConfigError(f"injection.fraction must be in (0, 0.2], got {fraction}")
    if not boost > 1:
        raise ConfigError(f"injection.boost must be > 1, got {boost}")
    lo, hi = window
    if not (0 <= lo < hi <= d):
        raise ConfigError(f"injection.window [{lo}, {hi}) must lie within [0, {d})")
    if mode not in ("persistent", "transient"):
        raise ConfigError(f"injection.mode must be 'persistent' or 'transient', got {mode!r}")


def _allocate(total: int, sizes: dict[str, int]) -> dict[str, int]:
    """Largest-remainder split of ``total`` proportional to ``sizes`` (ties by key)."""
    n = sum(sizes.values())
    quotas = {k: Fraction(total * v, n) for k, v in sizes.items()}
    alloc = {k: min(sizes[k], math.floor(q)) for k, q in quotas.items()}
    rest = total - sum(alloc.values())
    for k in sorted(sizes, key=lambda k: (-(quotas[k] - math.floor(quotas[k])), k)):
        if rest <= 0:
            break
        if alloc[k] < sizes[k]:
            alloc[k] += 1
            rest -= 1
    return alloc


def inject_extrinsic(
    dataset: FleetDataset,
    fraction: float,
    boost: float,
    window: tuple[int, int] | None = None,
    *,
    seed: int = 0,
    mode: str = "persistent",
    truth: GroundTruth | None = None,
) -> tuple[FleetDataset, GroundTruth]:
    """Boost deep-step activations of ``ceil(fraction * n_ssd)`` seeded-random SSDs.

    Selection is stratified across workload classes (largest-remainder split,
    uniform within a class) so each class receives its proportional share.
    ``persistent`` multiplies the window's activations in every checkpoint
    interval, which scales the cumulative counts by ``boost`` at every
    checkpoint. ``transient`` boosts a single interval, chosen uniformly among
    checkpoints after the first; earlier snapshots stay clean and later ones
    carry the excess cumulatively.
    """
    window = tuple(window) if window is not None else default_window(dataset.d)
    _check_injection(fraction, boost, window, dataset.d, mode)

    by_sample: dict[str, list[int]] = {}
    for i, rec in enumerate(dataset.records):
        by_sample.setdefault(rec.sample_id, []).append(i)
    for rows in by_sample.values():
        rows.sort(key=lambda i: dataset.records[i].checkpoint)
    sample_order = list(by_sample)
    k_total = math.ceil(Fraction(repr(float(fraction))) * len(sample_order))

    strata: dict[str, list[str]] = {}
    for sid in sample_order:
        strata.setdefault(dataset.records[by_sample[sid][0]].workload_class, []).append(sid)
    alloc = _allocate(k_total, {k: len(v) for k, v in strata.items()})
    rng = _stream(seed, _STREAM_INJECT, 0)
    chosen = []
    for cls in sorted(strata):
        members = sorted(strata[cls])
        pick = rng.choice(len(members), size=alloc[cls], replace=False)
        chosen.extend(members[p] for p in sorted(pick))

    lo, hi = window
    records = list(dataset.records)
    labels = dict(truth.injected) if truth else {}
    for sid in sorted(chosen):
        rows = by_sample[sid]
        cps = [records[i].checkpoint for i in rows]
        counts = np.array([records[i].steps for i in rows], dtype=np.int64)
        inc = np.diff(counts, axis=0, prepend=0)
        if mode == "persistent":
            hit = list(range(len(rows)))
        else:
            later = list(range(1, len(rows))) or [0]
            hit = [later[int(rng.integers(len(later)))]]
        inc[np.ix_(hit, range(lo, hi))] = np.rint(inc[np.ix_(hit, range(lo, hi))] * boost).astype(np.int64)
        new = np.cumsum(inc, axis=0)
        for row, i in enumerate(rows):
            records[i] = replace(records[i], steps=tuple(new[row].tolist()))
        labels[sid] = InjectionLabel(tuple(range(lo, hi)), float(boost), tuple(cps[h] for h in hit))

    provenance = dict(dataset.provenance)
    provenance["injection"] = {
        "fraction": fraction, "boost": boost, "window": list(window), "mode": mode, "seed": seed,
    }
    out = FleetDataset(records=tuple(records), d=dataset.d, provenance=provenance)
    latent = dict(truth.latent) if truth else {}
    return out, GroundTruth(injected=labels, latent=latent)


def simulate(config: FleetConfig) -> tuple[FleetDataset, GroundTruth]:
    """Generate a fleet and apply the config's injection section, if any."""
    dataset, truth = generate_fleet(config)
    if config.injection is not None:
        inj = config.injection
        dataset, truth = inject_extrinsic(
            dataset, inj.fraction, inj.boost, inj.window,
            seed=config.seed, mode=inj.mode, truth=truth,
        )
    return dataset, truth
