import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segtool.formats import write_nifti
from segtool.metrics import (
    EMPTY_HD95, CohortReport, RegionMask, boundary, dice_score, evaluate_case, evaluate_cohort, hausdorff95,
    region_masks, summarize,
)
from segtool.volume import GeometryError, LabelVolume, ShapeError


def brute_boundary(mask):
    """Foreground voxels with a 6-neighbour that is background or outside the grid."""
    out = np.zeros_like(mask)
    padded = np.pad(mask, 1)
    for idx in zip(*np.nonzero(mask)):
        i, j, k = (c + 1 for c in idx)
        nbrs = [padded[i - 1, j, k], padded[i + 1, j, k], padded[i, j - 1, k],
                padded[i, j + 1, k], padded[i, j, k - 1], padded[i, j, k + 1]]
        out[idx] = not all(nbrs)
    return out


def brute_hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return EMPTY_HD95
    pa = np.argwhere(brute_boundary(a)) * np.asarray(spacing)
    pb = np.argwhere(brute_boundary(b)) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(np.percentile(d.min(axis=1), 95), np.percentile(d.min(axis=0), 95))


def cube(dims, lo, size=8):
    m = np.zeros(dims, dtype=bool)
    m[tuple(slice(l, l + size) for l in lo)] = True
    return m


def test_dice_half_overlap():
    a, b = cube((20, 12, 12), (2, 2, 2)), cube((20, 12, 12), (6, 2, 2))
    assert dice_score(a, b) == 50.0


def test_dice_conventions():
    z = np.zeros((4, 4, 4), dtype=bool)
    o = z.copy()
    o[1, 1, 1] = True
    assert dice_score(z, z) == 100.0
    assert dice_score(o, o) == 100.0
    assert dice_score(o, z) == 0.0 and dice_score(z, o) == 0.0
    with pytest.raises(ShapeError):
        dice_score(z, np.zeros((4, 4, 5), dtype=bool))


def test_hd95_shifted_cubes():
    a, b = cube((20, 12, 12), (2, 2, 2)), cube((20, 12, 12), (5, 2, 2))
    assert brute_hd95(a, b) == pytest.approx(3.0, abs=1e-9)
    assert hausdorff95(a, b) == pytest.approx(3.0, abs=1e-9)


def test_hd95_conventions():
    z = np.zeros((5, 5, 5), dtype=bool)
    o = cube((5, 5, 5), (1, 1, 1), 2)
    assert hausdorff95(z, z) == 0.0
    assert hausdorff95(o, z) == EMPTY_HD95 == 373.13
    assert hausdorff95(z, o) == 373.13
    assert hausdorff95(o, o) == 0.0


def test_boundary_matches_brute_force(rng):
    for _ in range(10):
        m = rng.random((7, 6, 5)) < 0.6
        assert np.array_equal(boundary(m), brute_boundary(m))
    full = np.ones((3, 3, 3), dtype=bool)
    assert boundary(full).sum() == 26  # only the center is interior


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 16), st.integers(2, 16), st.integers(2, 16),
       st.floats(0.05, 0.7))
def test_hd95_matches_all_pairs_oracle(seed, nx, ny, nz, density):
    gen = np.random.default_rng(seed)
    a = gen.random((nx, ny, nz)) < density
    b = gen.random((nx, ny, nz)) < density
    assert abs(hausdorff95(a, b) - brute_hd95(a, b)) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.tuples(st.floats(0.5, 3), st.floats(0.5, 3), st.floats(0.5, 3)))
def test_hd95_anisotropic_matches_oracle(seed, spacing):
    gen = np.random.default_rng(seed)
    a, b = gen.random((6, 7, 5)) < 0.4, gen.random((6, 7, 5)) < 0.4
    assert abs(hausdorff95(a, b, spacing) - brute_hd95(a, b, spacing)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_symmetry_and_scaling(seed):
    gen = np.random.default_rng(seed)
    a, b = gen.random((8, 8, 8)) < 0.3, gen.random((8, 8, 8)) < 0.3
    assert dice_score(a, b) == dice_score(b, a)
    assert hausdorff95(a, b) == hausdorff95(b, a)
    if a.any() and b.any():
        assert hausdorff95(a, b, (2.0, 2.0, 2.0)) == pytest.approx(2 * hausdorff95(a, b), rel=1e-12)


def test_dice_permutation_invariant(rng):
    a, b = rng.random((6, 6, 6)) < 0.5, rng.random((6, 6, 6)) < 0.5
    perm = rng.permutation(a.size)
    pa, pb = a.ravel()[perm].reshape(a.shape), b.ravel()[perm].reshape(b.shape)
    assert dice_score(pa, pb) == dice_score(a, b)


def test_spacing_mismatch():
    m = np.ones((2, 2, 2), dtype=bool)
    with pytest.raises(GeometryError):
        hausdorff95(RegionMask("WT", m, (1, 1, 1)), RegionMask("WT", m, (2, 1, 1)))


def test_region_membership(rng):
    lab = LabelVolume(rng.integers(0, 4, (5, 5, 5)).astype(np.uint8))
    masks = {r.name: r.mask for r in region_masks(lab)}
    d = lab.data
    assert np.array_equal(masks["ET"], d == 1)
    assert np.array_equal(masks["TC"], (d == 1) | (d == 3))
    assert np.array_equal(masks["WT"], d > 0)
    single = {r.name: bool(r.mask.item()) for r in region_masks(LabelVolume(np.full((1, 1, 1), 2, np.uint8)))}
    assert single == {"ET": False, "TC": False, "WT": True}


# -- summaries ----------------------------------------------------------------

def test_summarize_1_to_100():
    s = summarize(range(1, 101))
    assert s["p25"] == 25.75
    assert s["mean"] == 50.5 and s["n"] == 100
    assert s["std"] == pytest.approx(np.std(np.arange(1, 101), ddof=1))


def test_summarize_degenerate():
    assert summarize([7.0]) == {"mean": 7.0, "std": 0.0, "p5": 7.0, "p25": 7.0, "p75": 7.0, "p95": 7.0, "n": 1}
    s = summarize([3.0] * 5)
    assert s["std"] == 0.0 and s["p95"] == 3.0
    with pytest.raises(ValueError):
        summarize([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 400), min_size=1, max_size=40))
def test_percentiles_monotone(values):
    s = summarize(values)
    assert s["p5"] <= s["p25"] <= s["p75"] <= s["p95"]


# -- cohort evaluation -----------------------------------------------------------

def make_dirs(tmp_path, rng, n=3):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    disk = np.array([0, 1, 2, 4], dtype=np.uint8)
    for i in range(n):
        g = disk[rng.integers(0, 4, (10, 10, 10))]
        p = g.copy()
        p[:3] = 0
        write_nifti(LabelVolume(g), gt / f"case{i}.nii.gz")
        write_nifti(LabelVolume(p), pred / f"case{i}.nii.gz")
    return pred, gt


def test_self_evaluation(tmp_path, rng):
    _, gt = make_dirs(tmp_path, rng)
    rep = evaluate_cohort(gt, gt)
    for r, stats in rep.summary.items():
        assert stats["dice"]["mean"] == 100.0 and stats["dice"]["std"] == 0.0
        assert stats["hd95"]["mean"] == 0.0 and stats["hd95"]["std"] == 0.0


def test_missed_region_lowers_mean(rng):
    g = LabelVolume(rng.integers(0, 4, (8, 8, 8)).astype(np.uint8))
    miss = LabelVolume(np.where(g.data == 1, 2, g.data).astype(np.uint8))
    cases = [evaluate_case("a", g, g), evaluate_case("b", g, g), evaluate_case("c", miss, g)]
    rep = CohortReport(cases, ("ET", "TC", "WT"))
    assert rep.summary["ET"]["dice"]["mean"] == pytest.approx(100 - 100 / 3)
    assert cases[2].hd95["ET"] == EMPTY_HD95


def test_report_round_trip(tmp_path, rng):
    pred, gt = make_dirs(tmp_path, rng)
    rep = evaluate_cohort(pred, gt)
    for back in (CohortReport.from_json(rep.to_json()), CohortReport.from_csv(rep.to_csv())):
        assert back.regions == rep.regions
        for c0, c1 in zip(rep.cases, back.cases):
            assert c0.case_id == c1.case_id and c0.dice == c1.dice and c0.hd95 == c1.hd95
    doc = json.loads(rep.to_json())
    assert set(doc["summary"]["WT"]["hd95"]) == {"mean", "std", "p5", "p25", "p75", "p95", "n"}
    assert rep.to_csv().splitlines()[0] == "case,region,dice,hd95"
    assert "Dice mean" in rep.table()


def test_missing_counterpart(tmp_path, rng):
    pred, gt = make_dirs(tmp_path, rng)
    (pred / "case1.nii.gz").unlink()
    with pytest.raises(FileNotFoundError, match="case1"):
        evaluate_cohort(pred, gt)
