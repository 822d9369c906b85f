import json

import numpy as np
import pytest

from icobridge import cohort as ch
from icobridge.fields import VertexField
from icobridge.icosphere import build_icosphere
from icobridge.rng import derive_rng

CFG = ch.SyntheticConfig(level=2, n_subjects=16, seed=11)


@pytest.fixture(scope="module")
def small_cohort():
    return ch.generate_synthetic_cohort(CFG)


def test_config_validation():
    with pytest.raises(ValueError):
        ch.SyntheticConfig(n_subjects=0)
    with pytest.raises(ValueError):
        ch.SyntheticConfig(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        ch.SyntheticConfig(visit_months=(12.0, 12.0))
    with pytest.raises(ValueError):
        ch.SyntheticConfig(visit_months=(0.0, 12.0))


def test_same_seed_bit_identical(small_cohort):
    again = ch.generate_synthetic_cohort(CFG)
    assert len(again.subjects) == len(small_cohort.subjects)
    for a, b in zip(small_cohort.subjects, again.subjects):
        assert a.id == b.id and a.sex == b.sex and a.age == b.age and a.dx0 == b.dx0
        assert np.array_equal(a.baseline.values, b.baseline.values)
        for va, vb in zip(a.visits, b.visits):
            assert va.t_months == vb.t_months and va.dx == vb.dx
            assert np.array_equal(va.cth.values, vb.cth.values)


def test_visit_equals_baseline_plus_delta_exactly(small_cohort):
    for s in small_cohort.subjects:
        for v in s.visits:
            expect = (s.baseline.values64 + v.true_delta.values64).astype(np.float32)
            assert np.array_equal(v.cth.values, expect)
            # and the reconstruction used for training round-trips bitwise
            delta = v.cth.values64 - s.baseline.values64
            assert np.array_equal((s.baseline.values64 + delta).astype(np.float32), v.cth.values)


def test_field_ranges_and_mask(small_cohort):
    mask = small_cohort.mask
    assert (~mask).sum() > 0
    for s in small_cohort.subjects:
        assert np.all(s.baseline.values[~mask] == 0.0)
        b = s.baseline.values64[mask]
        assert b.min() >= 0.5 and b.max() <= 5.0
        for v in s.visits:
            assert np.all(v.cth.values[~mask] == 0.0)
            d = v.cth.values64[mask] - s.baseline.values64[mask]
            assert d.min() >= -2.0 and d.max() <= 1.0
        times = [v.t_months for v in s.visits]
        assert all(b > a for a, b in zip(times, times[1:]))
        assert len(s.visits) >= 1


def test_diagnosis_paths_consistent(small_cohort):
    for s in small_cohort.subjects:
        dxs = [v.dx for v in s.visits]
        if s.dx_path == "MCI>AD":
            assert s.dx0 == "MCI" and dxs[-1] == "AD"
            assert dxs == sorted(dxs, key=("MCI", "AD").index)
        else:
            assert all(d == s.dx0 for d in dxs)


def test_generator_formula_noise_free():
    cfg = ch.SyntheticConfig(level=2, n_subjects=10, seed=4, noise_sigma=0.0)
    c = ch.generate_synthetic_cohort(cfg)
    mask = c.mask
    patterns = {dx: np.array(c.generator["patterns"][dx]) for dx in ch.DIAGNOSES}
    for s in c.subjects:
        for v in s.visits:
            rate = (ch.ATROPHY_RATES[v.dx] * patterns[v.dx]
                    + ch.AGE_RATE_PER_DECADE * (s.age - 70.0) / 10.0)
            expect = -(v.t_months / 12.0) * rate
            expect[~mask] = 0.0
            np.testing.assert_allclose(v.true_delta.values64[mask], expect[mask],
                                       rtol=0, atol=1e-6)


def test_patterns_mean_one_on_unmasked(small_cohort):
    mask = small_cohort.mask
    for dx in ch.DIAGNOSES:
        p = np.array(small_cohort.generator["patterns"][dx])
        assert p[mask].mean() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p[mask] > 0)
        assert np.all(p[~mask] == 0)


def test_noise_std_matches_config():
    sigma = 0.05
    cfg = ch.SyntheticConfig(level=2, n_subjects=6, seed=9, noise_sigma=sigma)
    c = ch.generate_synthetic_cohort(cfg)
    mask = c.mask
    patterns = {dx: np.array(c.generator["patterns"][dx]) for dx in ch.DIAGNOSES}
    for s in c.subjects:
        for v in s.visits:
            det = -(v.t_months / 12.0) * (ch.ATROPHY_RATES[v.dx] * patterns[v.dx]
                                          + ch.AGE_RATE_PER_DECADE * (s.age - 70.0) / 10.0)
            resid = v.true_delta.values64[mask] - det[mask]
            assert resid.std() == pytest.approx(sigma, rel=1e-4)


def test_medial_wall_cap():
    mesh = build_icosphere(2)
    mask = ch.medial_wall_mask(mesh)
    angles = np.degrees(np.arccos(np.clip(-mesh.vertices[:, 2], -1, 1)))
    assert np.array_equal(mask, angles > 25.0)
    assert (~mask).sum() == 7


def test_sample_training_tuple_single_pair():
    cfg = ch.SyntheticConfig(level=1, n_subjects=1, visit_months=(18.0,), seed=2)
    c = ch.generate_synthetic_cohort(cfg)
    rng = derive_rng(0, "draw")
    tup = ch.sample_training_tuple(c, rng)
    assert tup.subject_id == c.subjects[0].id and tup.visit_index == 0
    assert tup.t_months == 18.0
    assert tup.cond.dxt is None
    v = c.subjects[0].visits[0]
    assert np.array_equal((tup.baseline.values64 + tup.delta).astype(np.float32), v.cth.values)


def test_sample_training_tuple_target_dx(small_cohort):
    rng = derive_rng(1, "draw")
    for _ in range(20):
        tup = ch.sample_training_tuple(small_cohort, rng, with_target_dx=True)
        subject = next(s for s in small_cohort.subjects if s.id == tup.subject_id)
        assert tup.cond.dxt == subject.visits[tup.visit_index].dx


def test_sample_training_tuple_uniform(small_cohort):
    pairs = small_cohort.visit_pairs()
    k = len(pairs)
    n = 10_000
    rng = derive_rng(123, "uniformity")
    counts = np.zeros(k)
    index = {pair: i for i, pair in enumerate(pairs)}
    ids = {s.id: i for i, s in enumerate(small_cohort.subjects)}
    for _ in range(n):
        tup = ch.sample_training_tuple(small_cohort, rng)
        counts[index[(ids[tup.subject_id], tup.visit_index)]] += 1
    p = 1.0 / k
    bound = 3 * np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= bound)


def test_sample_from_empty_cohort():
    mesh_mask = ch.medial_wall_mask(build_icosphere(1))
    empty = ch.Cohort(level=1, mask=mesh_mask, subjects=())
    with pytest.raises(ValueError):
        ch.sample_training_tuple(empty, derive_rng(0, "x"))


def test_split_disjoint_and_complete(small_cohort):
    tr, va, te = ch.split_cohort(small_cohort, (0.5, 0.25, 0.25), seed=7)
    ids = lambda c: {s.id for s in c.subjects}
    assert ids(tr) | ids(va) | ids(te) == ids(small_cohort)
    assert not (ids(tr) & ids(va)) and not (ids(tr) & ids(te)) and not (ids(va) & ids(te))


def test_split_all_train(small_cohort):
    tr, va, te = ch.split_cohort(small_cohort, (1.0, 0.0, 0.0), seed=7)
    assert len(tr.subjects) == small_cohort.n_subjects
    assert len(va.subjects) == 0 and len(te.subjects) == 0


def test_split_stratum_proportions():
    cfg = ch.SyntheticConfig(level=1, n_subjects=120, visit_months=(12.0,), seed=21)
    c = ch.generate_synthetic_cohort(cfg)
    fractions = (0.6, 0.2, 0.2)
    tr, va, te = ch.split_cohort(c, fractions, seed=3)
    ages = np.array([s.age for s in c.subjects])
    q1, q2 = np.quantile(ages, [1 / 3, 2 / 3])

    def stratum(s):
        t = 0 if s.age <= q1 else (1 if s.age <= q2 else 2)
        return (s.sex, s.dx_path, t)

    totals = {}
    for s in c.subjects:
        totals[stratum(s)] = totals.get(stratum(s), 0) + 1
    for split, frac in zip((tr, va, te), fractions):
        got = {}
        for s in split.subjects:
            got[stratum(s)] = got.get(stratum(s), 0) + 1
        for key, n in totals.items():
            assert abs(got.get(key, 0) - n * frac) <= 1.0, (key, got.get(key, 0), n * frac)


def test_split_determinism_and_validation(small_cohort):
    a = ch.split_cohort(small_cohort, (0.5, 0.25, 0.25), seed=9)
    b = ch.split_cohort(small_cohort, (0.5, 0.25, 0.25), seed=9)
    assert [s.id for s in a[0].subjects] == [s.id for s in b[0].subjects]
    with pytest.raises(ValueError):
        ch.split_cohort(small_cohort, (0.5, 0.6, -0.1), seed=0)
    with pytest.raises(ValueError):
        ch.split_cohort(small_cohort, (0.5, 0.4, 0.2), seed=0)


def test_split_degenerate():
    cfg = ch.SyntheticConfig(level=1, n_subjects=1, visit_months=(12.0,), seed=2)
    c = ch.generate_synthetic_cohort(cfg)
    with pytest.raises(ValueError, match="degenerate"):
        ch.split_cohort(c, (0.5, 0.5, 0.0), seed=0)


def test_manifest_round_trip(tmp_path, small_cohort):
    ch.write_manifest(small_cohort, tmp_path)
    loaded = ch.read_manifest(tmp_path)
    assert loaded.level == small_cohort.level
    assert np.array_equal(loaded.mask, small_cohort.mask)
    assert loaded.generator["seed"] == CFG.seed
    assert len(loaded.subjects) == small_cohort.n_subjects
    for a, b in zip(small_cohort.subjects, loaded.subjects):
        assert (a.id, a.sex, a.age, a.dx0) == (b.id, b.sex, b.age, b.dx0)
        assert np.array_equal(a.baseline.values, b.baseline.values)
        for va, vb in zip(a.visits, b.visits):
            assert va.t_months == vb.t_months and va.dx == vb.dx
            assert np.array_equal(va.cth.values, vb.cth.values)
            assert vb.true_delta is None  # ground truth is not persisted


def test_manifest_missing_visit_file(tmp_path, small_cohort):
    ch.write_manifest(small_cohort, tmp_path)
    victim = next(tmp_path.glob("fields/*_visit01.sbdf"))
    victim.unlink()
    with pytest.raises(FileNotFoundError, match=victim.name):
        ch.read_manifest(tmp_path)


def test_manifest_rejects_zero_visits(tmp_path, small_cohort):
    path = ch.write_manifest(small_cohort, tmp_path)
    doc = json.loads(path.read_text())
    doc["subjects"][0]["visits"] = []
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="Mi >= 1"):
        ch.read_manifest(tmp_path)


def test_manifest_schema_errors_name_the_field(tmp_path, small_cohort):
    path = ch.write_manifest(small_cohort, tmp_path)
    doc = json.loads(path.read_text())
    del doc["subjects"][0]["sex"]
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="sex"):
        ch.read_manifest(tmp_path)

    doc = json.loads(ch.write_manifest(small_cohort, tmp_path).read_text())
    doc["subjects"][0]["age"] = "old"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="age"):
        ch.read_manifest(tmp_path)

    doc = json.loads(ch.write_manifest(small_cohort, tmp_path).read_text())
    doc["subjects"][0]["visits"][0]["dx"] = "UNKNOWN"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="dx"):
        ch.read_manifest(tmp_path)


def test_manifest_not_json(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError, match="JSON"):
        ch.read_manifest(bad)


def test_validate_cohort_catches_mask_mismatch(small_cohort):
    s0 = small_cohort.subjects[0]
    other_mask = np.array(small_cohort.mask)
    other_mask[0] = ~other_mask[0]
    bad_baseline = VertexField(small_cohort.level, s0.baseline.values, other_mask)
    bad_subject = ch.Subject(id=s0.id, sex=s0.sex, age=s0.age, dx0=s0.dx0,
                             baseline=bad_baseline, visits=s0.visits)
    bad = ch.Cohort(level=small_cohort.level, mask=small_cohort.mask,
                    subjects=(bad_subject,))
    with pytest.raises(ValueError, match="mask"):
        ch.validate_cohort(bad)


def test_condition_validation():
    with pytest.raises(ValueError):
        ch.Condition(age=70, sex="X", dx0="CN")
    with pytest.raises(ValueError):
        ch.Condition(age=70, sex="F", dx0="??")
    with pytest.raises(ValueError):
        ch.Condition(age=float("nan"), sex="F", dx0="CN")
    c = ch.Condition(age=70, sex="F", dx0="MCI", dxt="AD")
    assert c.dxt == "AD"
