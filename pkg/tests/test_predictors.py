import sys
from pathlib import Path

import numpy as np
import pytest

from segtool.formats import read_raw_tensor, write_raw_tensor
from segtool.losses import softmax
from segtool.patches import sliding_window_predict
from segtool.predictors import (
    ConstantPredictor, EquivariantPredictor, NoisyOraclePredictor, PatchContext, PredictorError,
    SubprocessPredictor,
)
from segtool.volume import ChannelVolume, LabelVolume

CAT = Path(__file__).resolve().parents[1] / "scripts" / "cat_predictor.py"


def test_constant_predictor_shape():
    out = ConstantPredictor([1.0, 2.0]).predict(np.zeros((4, 3, 2, 1)))
    assert out.shape == (2, 3, 2, 1) and np.all(out[1] == 2.0)


def test_equivariant_commutes_with_flip(rng):
    x = rng.normal(size=(4, 6, 5, 4))
    p = EquivariantPredictor()
    assert np.array_equal(p.predict(x[:, ::-1]), p.predict(x)[:, ::-1])
    assert np.array_equal(p.predict(x.transpose(0, 2, 1, 3)), p.predict(x).transpose(0, 2, 1, 3))


def test_noisy_oracle_locates_patch(rng):
    lab = LabelVolume(rng.integers(0, 4, (10, 9, 8)).astype(np.uint8))
    quiet = NoisyOraclePredictor(lab, noise_std=0.0)
    out = quiet.predict(np.zeros((4, 4, 4, 4)), PatchContext((3, 2, 1)))
    assert np.array_equal(np.argmax(out, axis=0), lab.data[3:7, 2:6, 1:5])
    # a patch reaching past the volume sees background there
    edge = quiet.predict(np.zeros((4, 4, 4, 4)), PatchContext((8, 0, 0)))
    assert np.all(np.argmax(edge[:, 2:], axis=0) == 0)
    noisy = NoisyOraclePredictor(lab, noise_std=1.0, seed=4)
    a = noisy.predict(np.zeros((4, 4, 4, 4)), PatchContext((0, 0, 0)))
    b = NoisyOraclePredictor(lab, noise_std=1.0, seed=4).predict(np.zeros((4, 4, 4, 4)), PatchContext((0, 0, 0)))
    assert np.array_equal(a, b)
    with pytest.raises(PredictorError):
        noisy.predict(np.zeros((4, 4, 4, 4)))


def test_noisy_oracle_replays_flip(rng):
    lab = LabelVolume(rng.integers(0, 4, (6, 6, 6)).astype(np.uint8))
    o = NoisyOraclePredictor(lab, noise_std=0.5, seed=1)
    plain = o.predict(np.zeros((4, 6, 6, 6)), PatchContext((0, 0, 0)))
    flipped = o.predict(np.zeros((4, 6, 6, 6)), PatchContext((0, 0, 0), flip=True))
    assert np.array_equal(flipped, plain[:, ::-1])


def cat_predictor(tmp_path, *extra):
    return SubprocessPredictor([sys.executable, str(CAT), *extra], tmp_path / "work", timeout=30)


def test_cat_round_trip_is_byte_exact(tmp_path, rng):
    patch = rng.normal(size=(4, 5, 6, 7)).astype(np.float32)
    with cat_predictor(tmp_path) as p:
        first = p.predict(patch, PatchContext((0, 0, 0)))
        second = p.predict(patch * 2, PatchContext((0, 0, 0)))
    assert first.dtype == np.float32 and first.tobytes() == patch.tobytes()
    assert second.tobytes() == (patch * 2).tobytes()


def test_echo_predictor_pipeline(tmp_path, rng):
    logits = rng.normal(size=(4, 6, 5, 4)).astype(np.float32)
    write_raw_tensor(ChannelVolume(logits), tmp_path / "fixed.volt")
    img = ChannelVolume(rng.normal(size=(4, 6, 5, 4)))
    with cat_predictor(tmp_path, "--logits", str(tmp_path / "fixed.volt")) as p:
        out = sliding_window_predict(p, img, flip_tta=False, patch_size=(6, 5, 4))
    expected = softmax(read_raw_tensor(tmp_path / "fixed.volt").data)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_process_that_exits_immediately(tmp_path):
    cmd = [sys.executable, "-c", "import sys; sys.stderr.write('model weights missing\\n'); sys.exit(3)"]
    p = SubprocessPredictor(cmd, tmp_path, timeout=30, name="dead")
    with pytest.raises(PredictorError, match="model weights missing") as e:
        p.predict(np.zeros((4, 2, 2, 2), dtype=np.float32), PatchContext((1, 2, 3)))
    assert e.value.predictor == "dead" and e.value.origin == (1, 2, 3)
    assert "exit code 3" in str(e.value)


def test_protocol_violation(tmp_path):
    cmd = [sys.executable, "-c", "import sys\nfor l in sys.stdin: print('not json', flush=True)"]
    with SubprocessPredictor(cmd, tmp_path, timeout=30) as p:
        with pytest.raises(PredictorError, match="protocol"):
            p.predict(np.zeros((4, 2, 2, 2), dtype=np.float32))


def test_mismatched_id(tmp_path):
    script = ("import sys, json, shutil\n"
              "for l in sys.stdin:\n"
              "    r = json.loads(l); shutil.copy(r['patch'], 'o.volt')\n"
              "    print(json.dumps({'id': r['id'] + 1, 'logits': 'o.volt', 'channels': 4}), flush=True)\n")
    with SubprocessPredictor([sys.executable, "-c", script], tmp_path, timeout=30) as p:
        with pytest.raises(PredictorError, match="does not match"):
            p.predict(np.zeros((4, 2, 2, 2), dtype=np.float32))


def test_timeout(tmp_path):
    cmd = [sys.executable, "-c", "import time; time.sleep(30)"]
    p = SubprocessPredictor(cmd, tmp_path, timeout=0.5)
    with pytest.raises(PredictorError, match="no response"):
        p.predict(np.zeros((4, 2, 2, 2), dtype=np.float32))


def test_missing_command(tmp_path):
    p = SubprocessPredictor(["/nonexistent/predictor-binary"], tmp_path)
    with pytest.raises(PredictorError, match="cannot start"):
        p.predict(np.zeros((4, 2, 2, 2), dtype=np.float32))
