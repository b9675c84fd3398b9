"""Acceptance criteria, one check per criterion.

Run with ``pytest tests/test_acceptance.py`` (a PASS/FAIL line per
criterion is printed in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

import math
import shutil
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from segtool.cli import gradcheck_report, main as cli_main
from segtool.ensemble import DEFAULT_ZOOM, EnsembleConfig, patch_ensemble, tta_softmax, two_step_ensemble
from segtool.formats import (
    BadMagicError, HeaderError, LabelCoding, TruncatedDataError, UnsupportedDatatypeError, read_nifti,
    remap_labels, write_manifest, write_nifti,
)
from segtool.losses import LOSS_KINDS, gwdl
from segtool.metrics import dice_score, evaluate_cohort, hausdorff95, summarize
from segtool.patches import axis_origins, fuse_patches, gaussian_kernel, plan_tiling, sliding_window_predict
from segtool.phantom import make_phantom, write_phantom_case
from segtool.predictors import EquivariantPredictor, NoisyOraclePredictor
from segtool.volume import LabelSchema, LabelVolume, PatchSpec, ScalarVolume

RESULTS: dict[int, tuple[bool, str]] = {}
ORACLE_NOISE = 2.0


def _one_hot(labels, n):
    return (labels[None] == np.arange(n).reshape(-1, 1, 1, 1)).astype(np.float64)


# -- losses -----------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    lines, ok = gradcheck_report(seed=2024, trials=20, max_dim=4)
    dt = time.perf_counter() - t0
    worst = max(float(l.split("max_rel_err=")[1].split()[0]) for l in lines)
    kinds = {l.split()[0] for l in lines}
    ok = ok and dt < 60 and kinds == set(LOSS_KINDS)
    return ok, f"5 kinds x prob/logit x 20 volumes, max rel err {worst:.2e} (< 1e-4), {dt:.1f} s (< 60 s)"


def criterion_2():
    schema = LabelSchema(("bg", "fg"), np.array([[0.0, 1.0], [1.0, 0.0]]), background=0)
    gen = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        dims = tuple(int(d) for d in gen.integers(1, 7, 3))
        g = _one_hot(gen.integers(0, 2, dims), 2)
        p = gen.uniform(0, 1, (1,) + dims)
        p = np.concatenate([1 - p, p])
        soft = 2 * (g[1] * p[1]).sum() / (g[1].sum() + p[1].sum())
        worst = max(worst, abs(gwdl(p, g, schema).value - (1 - soft)))
    return worst < 1e-4, f"max |gwdl - (1 - softDice_fg)| = {worst:.2e} over 100 volumes (< 1e-4)"


def criterion_3():
    p = np.array([[0.0, 0.8, 0.2, 0.0], [1.0, 0.0, 0.0, 0.0]]).T.reshape(4, 2, 1, 1)
    g = np.array([[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]).T.reshape(4, 2, 1, 1)
    v = gwdl(p, g, LabelSchema.brats()).value
    target = 1 - 1.72 / 1.86
    return abs(v - target) < 1e-3, f"gwdl = {v:.6f}, 1 - 1.72/1.86 = {target:.6f} (tol 1e-3)"


def criterion_4():
    schema = LabelSchema.brats()
    g = np.eye(4)[1].reshape(4, 1, 1, 1)
    vals = {name: gwdl(np.eye(4)[c].reshape(4, 1, 1, 1), g, schema).value
            for name, c in (("NET", 3), ("ED", 2), ("background", 0))}
    ok = vals["NET"] < vals["ED"] < vals["background"]
    return ok, "GWDL(NET) {NET:.4f} < GWDL(ED) {ED:.4f} < GWDL(background) {background:.4f}".format(**vals)


# -- patches ------------------------------------------------------------------

def criterion_5():
    plan = plan_tiling((240, 240, 155), (128, 192, 128))
    ok = len(plan) == 12
    gen = np.random.default_rng(5)
    bad = 0
    for _ in range(500):
        dims = gen.integers(128, 321, 3)
        patch = np.array([gen.integers(1, d + 1) for d in dims])
        tiling = plan_tiling(tuple(dims), tuple(patch))
        # the plan is a Cartesian product, so its invariants reduce to each axis
        for axis, (d, p) in enumerate(zip(dims, patch)):
            origins = sorted({s.origin[axis] for s in tiling.patches})
            assert origins == axis_origins(int(d), int(p))
            covered = np.zeros(d, dtype=bool)
            for o in origins:
                covered[o:o + p] = True
            steps = np.diff(origins)
            if not (covered.all() and origins[0] == 0 and origins[-1] + p == d
                    and np.all(steps <= max(p // 2, 1)) and np.all(steps > 0)):
                bad += 1
        if len(tiling) != np.prod([len(axis_origins(int(d), int(p))) for d, p in zip(dims, patch)]):
            bad += 1
    ok = ok and bad == 0
    return ok, f"(240,240,155)/(128,192,128) -> {len(plan)} patches; 500 random plans, {bad} violations"


def criterion_6():
    gen = np.random.default_rng(6)
    dims, size = (60, 50, 40), (32, 24, 16)
    z = gen.normal(size=4)
    plan = plan_tiling(dims, size)
    fused = fuse_patches([(s, np.broadcast_to(z[:, None, None, None], (4,) + size)) for s in plan.patches],
                         gaussian_kernel(size), dims)
    const_err = float(np.abs(fused - z[:, None, None, None]).max())
    full = gen.normal(size=(4, 12, 10, 8))
    ident = fuse_patches([(PatchSpec((0, 0, 0), (12, 10, 8)), full)], gaussian_kernel((12, 10, 8)), (12, 10, 8))
    exact = bool(np.array_equal(ident, full))
    k = gaussian_kernel((128, 192, 128))
    w_err = max(abs(k.weight(off) - math.exp(-0.5)) for off in ((16, 0, 0), (0, 24, 0), (0, 0, 16)))
    sig_ok = k.sigmas == (16.0, 24.0, 16.0)
    ok = const_err < 1e-6 and exact and w_err < 1e-9 and sig_ok
    return ok, (f"constant fuse err {const_err:.1e}; single patch exact={exact}; "
                f"one-sigma weight err {w_err:.1e}, sigmas {k.sigmas}")


# -- ensemble --------------------------------------------------------------------

def criterion_7():
    image, _ = make_phantom((64, 60, 48), seed=7)
    p = EquivariantPredictor()
    size = (32, 32, 24)
    plain = sliding_window_predict(p, image, flip_tta=False, patch_size=size)
    flipped = sliding_window_predict(p, image, flip_tta=True, patch_size=size)
    e_sw = float(np.abs(plain.data - flipped.data).max())
    patch = image.data[:, 10:42, 8:40, 12:36].astype(np.float64)
    base = tta_softmax(p, patch, (10, 8, 12), False, None, 4)
    e_flip = float(np.abs(tta_softmax(p, patch, (10, 8, 12), True, None, 4) - base).max())
    e_zoom = float(np.abs(tta_softmax(p, patch, (10, 8, 12), False, 1.0, 4) - base).max())
    spec = PatchSpec((10, 8, 12), size)
    both = patch_ensemble(image.data, spec, EnsembleConfig([p], size, ("flip", "zoom"), zoom_ratio=1.0))
    e_all = float(np.abs(both - base).max())
    worst = max(e_sw, e_flip, e_zoom, e_all)
    return worst < 1e-6, (f"max diff: sliding flip {e_sw:.1e}, patch flip {e_flip:.1e}, "
                          f"zoom(1.0) {e_zoom:.1e}, flip+zoom(1.0) {e_all:.1e} (< 1e-6)")


def criterion_8():
    image, labels = make_phantom((160, 208, 144), seed=8)
    one = two_step_ensemble(image, EnsembleConfig([NoisyOraclePredictor(labels, noise_std=ORACLE_NOISE, seed=1)]))
    outside = np.ones(image.dims, dtype=bool)
    outside[one.patch.slices] = False
    bg_ok = one.patch.size == (128, 192, 128) and bool(np.all(one.labels.data[outside] == 0))
    same = [NoisyOraclePredictor(labels, noise_std=ORACLE_NOISE, seed=1) for _ in range(3)]
    three = two_step_ensemble(image, EnsembleConfig(same))
    idem = bool(np.array_equal(one.labels.data, three.labels.data)
                and np.array_equal(one.probabilities.data, three.probabilities.data))
    zoom_ok = DEFAULT_ZOOM == 1.125 and EnsembleConfig(same).zoom_ratio == 1.125
    return bg_ok and idem and zoom_ok, (f"background outside patch {one.patch.origin}+(128,192,128): {bg_ok}; "
                                        f"3 identical == 1 exactly: {idem}; default zoom {DEFAULT_ZOOM}")


# -- metrics -----------------------------------------------------------------------

def _brute_boundary(m):
    p = np.pad(m, 1)
    core = p[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for ax in range(3):
        for sh in (1, -1):
            interior &= np.roll(p, sh, axis=ax)[1:-1, 1:-1, 1:-1]
    return core & ~interior


def _brute_hd95(a, b):
    pa, pb = np.argwhere(_brute_boundary(a)).astype(float), np.argwhere(_brute_boundary(b)).astype(float)
    d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
    return max(np.percentile(d.min(1), 95), np.percentile(d.min(0), 95))


def criterion_9():
    def cube(x0):
        m = np.zeros((24, 12, 12), dtype=bool)
        m[x0:x0 + 8, 2:10, 2:10] = True
        return m

    d50 = dice_score(cube(2), cube(6))
    h3, h3b = hausdorff95(cube(2), cube(5)), _brute_hd95(cube(2), cube(5))
    empty = np.zeros((24, 12, 12), dtype=bool)
    e_hd, e_dice = hausdorff95(cube(2), empty), dice_score(cube(2), empty)
    gen = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        dims = tuple(int(d) for d in gen.integers(2, 17, 3))
        dens = gen.uniform(0.05, 0.6)
        a, b = gen.random(dims) < dens, gen.random(dims) < dens
        if not (a.any() and b.any()):
            continue
        worst = max(worst, abs(hausdorff95(a, b) - _brute_hd95(a, b)))
    p25 = summarize(range(1, 101))["p25"]
    ok = (d50 == 50.0 and abs(h3 - 3.0) < 1e-9 and abs(h3b - 3.0) < 1e-9 and e_hd == 373.13 and e_dice == 0
          and worst < 1e-9 and p25 == 25.75)
    return ok, (f"half-overlap Dice {d50}; shift-3 HD95 {h3} (brute {h3b}); empty HD95 {e_hd}, Dice {e_dice}; "
                f"50 random masks max |diff| {worst:.1e}; p25(1..100) = {p25}")


# -- end to end -------------------------------------------------------------------

def _segtool(*args) -> int:
    return cli_main([str(a) for a in args])


def criterion_10():
    t0 = time.perf_counter()
    root = Path(tempfile.mkdtemp(prefix="segtool_e2e_"))
    try:
        image, labels = make_phantom((240, 240, 155), seed=10)
        case = write_phantom_case(root, "phantom", image, labels)
        del image
        write_manifest([case], root / "manifest.ini")
        seeds = (11, 12, 13)
        oracle = [f"oracle:seed={s},noise={ORACLE_NOISE}" for s in seeds]
        scores = {}
        runs = [("ensemble", oracle)] + [(f"oracle{s}", [o]) for s, o in zip(seeds, oracle)]
        for name, preds in runs:
            flags = [x for p in preds for x in ("--predictor", p)]
            if _segtool("predict", "--manifest", root / "manifest.ini", "--output-dir", root / name,
                        "--mode", "two-step", "--jobs", 1, *flags) != 0:
                return False, f"predict failed for {name}"
            rep = evaluate_cohort(root / name, root / "gt")
            scores[name] = rep.cases[0].dice
        self_rep = evaluate_cohort(root / "gt", root / "gt")
        dt = time.perf_counter() - t0
    finally:
        shutil.rmtree(root, ignore_errors=True)
    ens = scores.pop("ensemble")
    worst = {r: min(s[r] for s in scores.values()) for r in ("WT", "TC", "ET")}
    bound_ok = all(ens[r] >= worst[r] - 0.5 for r in worst)
    self_ok = all(self_rep.cases[0].dice[r] == 100.0 and self_rep.cases[0].hd95[r] == 0.0 for r in worst)
    detail = ", ".join(f"{r} {ens[r]:.2f} vs worst single {worst[r]:.2f}" for r in worst)
    return bound_ok and self_ok and dt < 300, f"{detail}; self-eval 100/0: {self_ok}; {dt:.0f} s (< 300 s)"


def _digest(directory: Path) -> bytes:
    import hashlib

    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.digest()


def criterion_11():
    root = Path(tempfile.mkdtemp(prefix="segtool_repro_"))
    try:
        cases = []
        for i in range(2):
            image, labels = make_phantom((64, 56, 48), seed=100 + i)
            cases.append(write_phantom_case(root / "data", f"c{i}", image, labels))
        write_manifest(cases, root / "data" / "manifest.ini")
        man = root / "data" / "manifest.ini"
        (root / "aug.cfg").write_text("zoom_prob = 1\nrotation_prob = 1\nnoise_prob = 1\n"
                                      "smooth_prob = 1\ngamma_prob = 1\nflip_prob = 0.5\n")
        digests = {"augment": [], "predict": [], "gradcheck": []}
        for run, jobs in (("a", 1), ("b", 1), ("c", 8)):
            out = root / run
            assert _segtool("augment", "--manifest", man, "--aug-config", root / "aug.cfg", "--seed", 1,
                            "--jobs", jobs, "--output-dir", out / "aug") == 0
            digests["augment"].append(_digest(out / "aug"))
            assert _segtool("predict", "--manifest", man, "--output-dir", out / "pred", "--patch-size", "32,32,24",
                            "--predictor", "oracle:noise=2", "--predictor", "oracle:noise=2", "--seed", 1,
                            "--save-probs", "--jobs", jobs) == 0
            digests["predict"].append(_digest(out / "pred"))
            proc = subprocess.run([sys.executable, "-m", "segtool.cli", "gradcheck", "--seed", "7",
                                   "--trials", "3", "--jobs", str(jobs)], capture_output=True)
            digests["gradcheck"].append(proc.stdout if proc.returncode == 0 else None)
    finally:
        shutil.rmtree(root, ignore_errors=True)
    same = {k: v[0] is not None and len(set(v)) == 1 for k, v in digests.items()}
    return all(same.values()), ", ".join(f"{k} identical (2 runs, jobs 1 vs 8): {v}" for k, v in same.items())


def criterion_12():
    root = Path(tempfile.mkdtemp(prefix="segtool_io_"))
    gen = np.random.default_rng(12)
    try:
        lossless = True
        for dtype in (np.uint8, np.int16, np.float32):
            if dtype == np.float32:
                data = gen.normal(size=(7, 6, 5)).astype(dtype)
            else:
                info = np.iinfo(dtype)
                data = gen.integers(info.min, info.max, (7, 6, 5), endpoint=True).astype(dtype)
            for suffix in (".nii", ".nii.gz"):
                p = root / f"v_{np.dtype(dtype).name}{suffix}"
                write_nifti(ScalarVolume(data, (1.0, 1.5, 2.0)), p, dtype)
                back = read_nifti(p)
                lossless &= back.data.dtype == dtype and back.data.tobytes() == data.tobytes()
                lossless &= back.spacing == (1.0, 1.5, 2.0)
        disk = np.array([0, 1, 2, 4], dtype=np.uint8)[gen.integers(0, 4, (9, 9, 9))]
        internal = remap_labels(LabelVolume(disk))
        table = dict(zip(disk.ravel().tolist(), internal.data.ravel().tolist()))
        bij = (table == LabelCoding().disk_to_internal == {0: 0, 1: 3, 2: 2, 4: 1}
               and np.array_equal(remap_labels(internal, direction="to_disk").data, disk))
        write_nifti(ScalarVolume(np.zeros((2, 2, 2), dtype=np.float32)), root / "ok.nii")
        good = (root / "ok.nii").read_bytes()
        corrupt = {
            "magic": (good[:344] + b"bad!" + good[348:], BadMagicError),
            "sizeof_hdr": (b"\x00\x00\x00\x07" + good[4:], HeaderError),
            "datatype": (good[:70] + (512).to_bytes(2, "little") + good[72:], UnsupportedDatatypeError),
            "truncated": (good[:-5], TruncatedDataError),
        }
        typed = True
        for name, (raw, err) in corrupt.items():
            (root / f"{name}.nii").write_bytes(raw)
            try:
                read_nifti(root / f"{name}.nii")
                typed = False
            except err as e:
                typed &= e.offset is not None
    finally:
        shutil.rmtree(root, ignore_errors=True)
    return lossless and bij and typed, (f"lossless uint8/int16/float32 plain+gz: {lossless}; "
                                        f"disk{{0,1,2,4}}<->internal{{0,3,2,1}} bijection: {bij}; "
                                        f"typed header errors: {typed}")


CRITERIA = {
    1: ("gradient fidelity", criterion_1),
    2: ("GWDL reduction identity", criterion_2),
    3: ("GWDL hand value", criterion_3),
    4: ("penalty ordering", criterion_4),
    5: ("tiling", criterion_5),
    6: ("fusion", criterion_6),
    7: ("TTA equivariance", criterion_7),
    8: ("two-step ensemble contract", criterion_8),
    9: ("metrics oracles", criterion_9),
    10: ("end-to-end phantom", criterion_10),
    11: ("reproducibility", criterion_11),
    12: ("I/O", criterion_12),
}


def run_criterion(n: int) -> tuple[bool, str]:
    name, fn = CRITERIA[n]
    try:
        ok, detail = fn()
    except Exception as e:  # a crash is a failure of that criterion, not of the report
        ok, detail = False, f"{type(e).__name__}: {e}"
    RESULTS[n] = (bool(ok), detail)
    return bool(ok), detail


def format_line(n: int) -> str:
    ok, detail = RESULTS[n]
    return f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2} ({CRITERIA[n][0]}): {detail}"


@pytest.mark.parametrize("n", sorted(CRITERIA), ids=[f"criterion_{n}" for n in sorted(CRITERIA)])
def test_criterion(n):
    ok, _ = run_criterion(n)
    print(format_line(n))
    assert ok, format_line(n)


if __name__ == "__main__":
    failed = 0
    for n in sorted(CRITERIA):
        ok, _ = run_criterion(n)
        failed += not ok
        print(format_line(n), flush=True)
    sys.exit(1 if failed else 0)
