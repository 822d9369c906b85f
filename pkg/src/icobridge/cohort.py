"""Longitudinal cohort data model and synthetic generation.

The synthetic generator replaces a real imaging cohort: every subject gets a
smooth random baseline thickness field and follow-up change fields with a
known parametric ground truth, so downstream accuracy can be checked
quantitatively. All randomness is derived from the config seed through named
substreams; equal seeds give bit-identical cohorts.

Ground-truth change at visit time t months for a subject aged `a` at
baseline with visit diagnosis d:

    delta(v, t) = -(t/12) * (rate(d) * pattern_d(v) + 0.02 * (a - 70) / 10) + xi(v)

with rates in mm/year, a smooth per-diagnosis spatial pattern normalized to
mean 1 over unmasked vertices, and smooth per-visit noise xi rescaled to the
configured standard deviation. Rate constants are artifact choices tuned to
give errors on the 0.1 mm scale, not measured biology.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import VertexField, read_field, write_field
from .icosphere import IcosphereMesh, build_icosphere
from .rng import derive_rng

SEXES = ("F", "M")
DIAGNOSES = ("CN", "MCI", "AD")
DX_PATHS = ("CN", "MCI", "MCI>AD", "AD")

ATROPHY_RATES = {"CN": 0.01, "MCI": 0.03, "AD": 0.07}  # mm per year
AGE_RATE_PER_DECADE = 0.02                              # mm per year at +10y from age 70
BASELINE_MEAN = 2.5
BASELINE_SEX_SHIFT = 0.05
BASELINE_CLAMP = (1.0, 4.5)
MEDIAL_CAP_DEGREES = 25.0


@dataclass(frozen=True)
class Condition:
    """Covariates the network is conditioned on."""

    age: float
    sex: str
    dx0: str
    dxt: str | None = None

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.dx0 not in DIAGNOSES:
            raise ValueError(f"dx0 must be one of {DIAGNOSES}, got {self.dx0!r}")
        if self.dxt is not None and self.dxt not in DIAGNOSES:
            raise ValueError(f"dxt must be one of {DIAGNOSES} or None, got {self.dxt!r}")
        if not math.isfinite(self.age):
            raise ValueError("age must be finite")


@dataclass(frozen=True)
class Visit:
    t_months: float
    dx: str
    cth: VertexField
    true_delta: VertexField | None = None  # synthetic cohorts only


@dataclass(frozen=True)
class Subject:
    id: str
    sex: str
    age: float
    dx0: str
    baseline: VertexField
    visits: tuple

    @property
    def dx_path(self) -> str:
        """Diagnosis trajectory label, derived from visit diagnoses."""
        last = self.visits[-1].dx if self.visits else self.dx0
        return self.dx0 if last == self.dx0 else f"{self.dx0}>{last}"


@dataclass(frozen=True)
class Cohort:
    level: int
    mask: np.ndarray
    subjects: tuple
    generator: dict | None = None

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def visit_pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i, s in enumerate(self.subjects) for j in range(len(s.visits))]


@dataclass(frozen=True)
class TrainingTuple:
    baseline: VertexField
    delta: np.ndarray       # float64, visit - baseline, zeros on the mask
    t_months: float
    cond: Condition
    subject_id: str
    visit_index: int


@dataclass(frozen=True)
class SyntheticConfig:
    level: int = 2
    n_subjects: int = 240
    visit_months: tuple = (12.0, 24.0, 36.0)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        times = tuple(float(t) for t in self.visit_months)
        if not times or any(t <= 0 for t in times) or any(
                b <= a for a, b in zip(times, times[1:])):
            raise ValueError("visit_months must be positive and strictly increasing")
        object.__setattr__(self, "visit_months", times)


def validate_cohort(cohort: Cohort) -> None:
    ref = None
    for s in cohort.subjects:
        if not s.visits:
            raise ValueError(f"subject {s.id}: needs at least one follow-up visit")
        times = [v.t_months for v in s.visits]
        if any(t <= 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"subject {s.id}: visit times must be positive and strictly increasing")
        for f in [s.baseline] + [v.cth for v in s.visits]:
            if f.level != cohort.level:
                raise ValueError(f"subject {s.id}: field level {f.level} != cohort level {cohort.level}")
            if not np.array_equal(f.mask, cohort.mask):
                raise ValueError(f"subject {s.id}: field mask differs from cohort mask")
            if ref is None:
                ref = f


def medial_wall_mask(mesh: IcosphereMesh, cap_degrees: float = MEDIAL_CAP_DEGREES) -> np.ndarray:
    """Validity mask: False inside the spherical cap about the -z pole."""
    threshold = -math.cos(math.radians(cap_degrees))
    mask = mesh.vertices[:, 2] > threshold
    mask.setflags(write=False)
    return mask


def _bump_field(mesh: IcosphereMesh, centers: np.ndarray, widths: np.ndarray,
                weights: np.ndarray) -> np.ndarray:
    """Sum of Gaussian bumps in chordal distance."""
    out = np.zeros(mesh.vertex_count)
    for c, w, s in zip(centers, weights, widths):
        d2 = np.sum((mesh.vertices - c) ** 2, axis=1)
        out += w * np.exp(-d2 / (s * s))
    return out


def _random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _diagnosis_patterns(mesh: IcosphereMesh, mask: np.ndarray, seed: int) -> dict:
    """Two-bump spatial atrophy pattern per diagnosis, mean 1 on unmasked."""
    rng = derive_rng(seed, "patterns")
    patterns = {}
    for dx in DIAGNOSES:
        centers = _random_unit(rng, 2)
        widths = rng.uniform(0.3, 0.7, size=2)
        raw = 1.0 + _bump_field(mesh, centers, widths, np.ones(2))
        raw /= raw[mask].mean()
        raw[~mask] = 0.0
        patterns[dx] = raw
    return patterns


def _smooth_noise(rng: np.random.Generator, mesh: IcosphereMesh, mask: np.ndarray,
                  sigma: float) -> np.ndarray:
    """White noise on unmasked vertices, two one-ring mean smoothings, then an
    exact rescale of the unmasked standard deviation to sigma."""
    if sigma == 0.0:
        return np.zeros(mesh.vertex_count)
    x = np.zeros(mesh.vertex_count)
    x[mask] = rng.standard_normal(int(mask.sum()))
    for _ in range(2):
        x = x[mesh.ring7].mean(axis=1)
        x[~mask] = 0.0
    std = x[mask].std()
    if std > 0:
        x[mask] *= sigma / std
    return x


def generate_synthetic_cohort(config: SyntheticConfig) -> Cohort:
    mesh = build_icosphere(config.level)
    mask = medial_wall_mask(mesh)
    patterns = _diagnosis_patterns(mesh, mask, config.seed)
    n_visits = len(config.visit_months)

    subjects = []
    for i in range(config.n_subjects):
        rng = derive_rng(config.seed, f"subject/{i:06d}")
        sex = SEXES[int(rng.integers(2))]
        age = float(rng.uniform(55.0, 90.0))
        path = DX_PATHS[int(rng.integers(len(DX_PATHS)))]
        dx0 = "MCI" if path == "MCI>AD" else path
        convert_at = int(rng.integers(n_visits)) if path == "MCI>AD" else None

        centers = _random_unit(rng, 20)
        widths = rng.uniform(0.2, 0.6, size=20)
        weights = rng.uniform(-0.8, 0.8, size=20)
        base = BASELINE_MEAN + (BASELINE_SEX_SHIFT if sex == "M" else -BASELINE_SEX_SHIFT)
        base = base + _bump_field(mesh, centers, widths, weights)
        base = np.clip(base, *BASELINE_CLAMP)
        baseline = VertexField(config.level, base, mask, "thickness")

        visits = []
        for j, t in enumerate(config.visit_months):
            dx_t = path if convert_at is None else ("MCI" if j < convert_at else "AD")
            years = t / 12.0
            rate = ATROPHY_RATES[dx_t] * patterns[dx_t] + AGE_RATE_PER_DECADE * (age - 70.0) / 10.0
            delta = -years * rate + _smooth_noise(rng, mesh, mask, config.noise_sigma)
            delta[~mask] = 0.0
            true_delta = VertexField(config.level, delta, mask, "delta")
            cth = VertexField(config.level,
                              baseline.values64 + true_delta.values64, mask, "thickness")
            visits.append(Visit(t_months=float(t), dx=dx_t, cth=cth, true_delta=true_delta))

        subjects.append(Subject(id=f"s{i:04d}", sex=sex, age=age, dx0=dx0,
                                baseline=baseline, visits=tuple(visits)))

    generator = {
        "seed": config.seed,
        "noise_sigma": config.noise_sigma,
        "rates_mm_per_year": dict(ATROPHY_RATES),
        "age_rate_per_decade": AGE_RATE_PER_DECADE,
        "visit_months": list(config.visit_months),
        "patterns": {dx: patterns[dx].tolist() for dx in DIAGNOSES},
    }
    cohort = Cohort(level=config.level, mask=mask, subjects=tuple(subjects), generator=generator)
    validate_cohort(cohort)
    return cohort


def sample_training_tuple(cohort: Cohort, rng: np.random.Generator,
                          with_target_dx: bool = False) -> TrainingTuple:
    """Uniform draw over (subject, visit) pairs."""
    pairs = cohort.visit_pairs()
    if not pairs:
        raise ValueError("cannot sample from an empty cohort")
    i, j = pairs[int(rng.integers(len(pairs)))]
    subject = cohort.subjects[i]
    visit = subject.visits[j]
    delta = visit.cth.values64 - subject.baseline.values64
    cond = Condition(age=subject.age, sex=subject.sex, dx0=subject.dx0,
                     dxt=visit.dx if with_target_dx else None)
    return TrainingTuple(baseline=subject.baseline, delta=delta, t_months=visit.t_months,
                         cond=cond, subject_id=subject.id, visit_index=j)


def _age_terciles(ages: np.ndarray) -> np.ndarray:
    q1, q2 = np.quantile(ages, [1.0 / 3.0, 2.0 / 3.0])
    return np.where(ages <= q1, 0, np.where(ages <= q2, 1, 2))


def split_cohort(cohort: Cohort, fractions: tuple[float, float, float],
                 seed: int) -> tuple[Cohort, Cohort, Cohort]:
    """Subject-level split stratified by sex x diagnosis path x age tercile."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    ages = np.array([s.age for s in cohort.subjects])
    terciles = _age_terciles(ages)
    strata: dict = {}
    for i, s in enumerate(cohort.subjects):
        strata.setdefault((s.sex, s.dx_path, int(terciles[i])), []).append(i)

    rng = derive_rng(seed, "split")
    buckets: tuple[list, list, list] = ([], [], [])
    deficit = [0.0, 0.0, 0.0]  # global target minus allocated, per split
    for key in sorted(strata):
        members = strata[key]
        order = rng.permutation(len(members))
        shuffled = [members[k] for k in order]
        n = len(shuffled)
        targets = [n * f for f in fractions]
        counts = [int(math.floor(t)) for t in targets]
        seats = n - sum(counts)
        # every split receives floor or floor+1 of its per-stratum target
        # (keeps each stratum within one subject of proportional); surplus
        # seats go where the accumulated shortfall is largest, so singleton
        # strata spread over all splits instead of piling into the first
        claims = sorted((k for k in range(3) if fractions[k] > 0),
                        key=lambda k: (-(deficit[k] + targets[k] - counts[k]), k))
        for k in claims[:seats]:
            counts[k] += 1
        start = 0
        for k in range(3):
            buckets[k].extend(shuffled[start:start + counts[k]])
            start += counts[k]
            deficit[k] += targets[k] - counts[k]

    names = ("train", "val", "test")
    out = []
    for name, frac, members in zip(names, fractions, buckets):
        if frac > 0 and not members:
            raise ValueError(f"degenerate split: '{name}' received no subjects")
        picked = tuple(cohort.subjects[i] for i in sorted(members))
        out.append(Cohort(level=cohort.level, mask=cohort.mask, subjects=picked,
                          generator=cohort.generator))
    return out[0], out[1], out[2]


# ---------------------------------------------------------------------------
# manifest I/O

MANIFEST_VERSION = 1


def _require(obj: dict, key: str, types, where: str):
    if key not in obj:
        raise ValueError(f"manifest: missing '{key}' in {where}")
    if not isinstance(obj[key], types):
        raise ValueError(f"manifest: '{key}' in {where} has wrong type {type(obj[key]).__name__}")
    return obj[key]


def write_manifest(cohort: Cohort, directory) -> Path:
    """Write mask, all field files and the JSON manifest under `directory`."""
    directory = Path(directory)
    (directory / "fields").mkdir(parents=True, exist_ok=True)
    mask_field = VertexField(cohort.level, cohort.mask.astype(np.float32), cohort.mask, "thickness")
    write_field(mask_field, directory / "fields" / "mask.sbdf")

    subjects_meta = []
    for s in cohort.subjects:
        base_rel = f"fields/{s.id}_baseline.sbdf"
        write_field(s.baseline, directory / base_rel)
        visits_meta = []
        for j, v in enumerate(s.visits):
            rel = f"fields/{s.id}_visit{j:02d}.sbdf"
            write_field(v.cth, directory / rel)
            visits_meta.append({"t_months": v.t_months, "dx": v.dx, "cth": rel})
        subjects_meta.append({"id": s.id, "sex": s.sex, "age": s.age, "dx0": s.dx0,
                              "baseline": base_rel, "visits": visits_meta})

    manifest = {
        "format_version": MANIFEST_VERSION,
        "level": cohort.level,
        "mask": "fields/mask.sbdf",
        "generator": cohort.generator,
        "subjects": subjects_meta,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path) -> Cohort:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"manifest {path} is not valid JSON: {e}") from None
    root = path.parent

    version = _require(doc, "format_version", int, "manifest root")
    if version != MANIFEST_VERSION:
        raise ValueError(f"manifest: unsupported format_version {version}")
    level = _require(doc, "level", int, "manifest root")
    mask_rel = _require(doc, "mask", str, "manifest root")
    generator = doc.get("generator")
    if generator is not None and not isinstance(generator, dict):
        raise ValueError("manifest: 'generator' must be an object or null")
    subjects_meta = _require(doc, "subjects", list, "manifest root")

    def load_field(rel: str, what: str) -> VertexField:
        fpath = root / rel
        if not fpath.exists():
            raise FileNotFoundError(f"manifest: {what} file missing: {fpath}")
        return read_field(fpath)

    mask_file = load_field(mask_rel, "mask")
    mask = mask_file.mask
    subjects = []
    for meta in subjects_meta:
        if not isinstance(meta, dict):
            raise ValueError("manifest: each subject entry must be an object")
        sid = _require(meta, "id", str, "subject entry")
        where = f"subject '{sid}'"
        sex = _require(meta, "sex", str, where)
        age = float(_require(meta, "age", (int, float), where))
        dx0 = _require(meta, "dx0", str, where)
        Condition(age=age, sex=sex, dx0=dx0)  # reuse categorical validation
        baseline = load_field(_require(meta, "baseline", str, where), f"{where} baseline")
        visits_meta = _require(meta, "visits", list, where)
        if len(visits_meta) < 1:
            raise ValueError(f"manifest: {where} has no visits (Mi >= 1 required)")
        visits = []
        for vm in visits_meta:
            if not isinstance(vm, dict):
                raise ValueError(f"manifest: visit entries of {where} must be objects")
            t = float(_require(vm, "t_months", (int, float), f"{where} visit"))
            dx = _require(vm, "dx", str, f"{where} visit")
            if dx not in DIAGNOSES:
                raise ValueError(f"manifest: {where} visit dx {dx!r} not in {DIAGNOSES}")
            cth = load_field(_require(vm, "cth", str, f"{where} visit"), f"{where} visit")
            visits.append(Visit(t_months=t, dx=dx, cth=cth))
        subjects.append(Subject(id=sid, sex=sex, age=age, dx0=dx0,
                                baseline=baseline, visits=tuple(visits)))

    cohort = Cohort(level=level, mask=mask, subjects=tuple(subjects), generator=generator)
    validate_cohort(cohort)
    return cohort
