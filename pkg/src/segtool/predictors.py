"""Predictor interface, phantom predictors and the subprocess wrapper.

A predictor maps a ``(4, px, py, pz)`` image patch to ``(L, px, py, pz)``
logits. Inference code also passes a :class:`PatchContext` describing
where the patch came from and which test-time transform was applied;
ordinary predictors ignore it.
"""

from __future__ import annotations

import json
import os
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import flip_x, resample
from .formats import read_raw_tensor, write_raw_tensor
from .rng import make_generator
from .volume import ChannelVolume, LabelVolume


class PredictorError(RuntimeError):
    def __init__(self, message: str, predictor: str = "", origin=None):
        where = f" at patch origin {tuple(origin)}" if origin is not None else ""
        super().__init__(f"predictor {predictor!r} failed{where}: {message}")
        self.predictor = predictor
        self.origin = origin


@dataclass(frozen=True)
class PatchContext:
    origin: tuple[int, int, int]
    flip: bool = False
    zoom: float | None = None


class Predictor:
    name = "predictor"

    def predict(self, patch: np.ndarray, context: PatchContext | None = None) -> np.ndarray:
        raise NotImplementedError

    def close(self) -> None:
        pass


class ConstantPredictor(Predictor):
    def __init__(self, logits, name: str = "constant"):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.name = name

    def predict(self, patch, context=None):
        return np.broadcast_to(self.logits[:, None, None, None], (len(self.logits),) + patch.shape[1:]).copy()


class EquivariantPredictor(Predictor):
    """Logits are a fixed affine function of each voxel's intensity vector.

    Being pointwise, it commutes exactly with flips and axis permutations.
    """

    def __init__(self, weights=None, bias=None, name: str = "equivariant"):
        if weights is None:
            weights = np.array(
                [
                    [-1.0, -1.0, -1.0, -1.0],
                    [0.5, 2.0, 0.0, 0.5],
                    [0.0, 0.0, 1.0, 2.0],
                    [1.0, 0.5, 1.5, 0.0],
                ]
            )
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.zeros(len(self.weights)) if bias is None else np.asarray(bias, dtype=np.float64)
        self.name = name

    def predict(self, patch, context=None):
        out = np.tensordot(self.weights, np.asarray(patch, dtype=np.float64), axes=([1], [0]))
        return out + self.bias[:, None, None, None]


class NoisyOraclePredictor(Predictor):
    """One-hot logits of a known segmentation, corrupted by seeded Gaussian noise.

    Needs the :class:`PatchContext` to locate the patch in the full volume
    and to replay the test-time transform on its logits.
    """

    def __init__(self, labels: LabelVolume, num_classes: int = 4, noise_std: float = 1.0,
                 seed: int = 0, scale: float = 4.0, background: int = 0, name: str | None = None):
        self.labels = labels
        self.num_classes = num_classes
        self.noise_std = noise_std
        self.seed = seed
        self.scale = scale
        self.background = background
        self.name = name or f"oracle-{seed}"
        self._logits = None
        self._lock = threading.Lock()

    def _full(self) -> np.ndarray:
        with self._lock:
            if self._logits is None:
                gen = make_generator(self.seed)
                lab = self.labels.data
                out = np.empty((self.num_classes,) + lab.shape, dtype=np.float32)
                for c in range(self.num_classes):
                    out[c] = gen.standard_normal(lab.shape, dtype=np.float32) * self.noise_std
                    out[c] += self.scale * (lab == c)
                self._logits = out
        return self._logits

    def predict(self, patch, context=None):
        if context is None:
            raise PredictorError("noisy oracle needs a patch context", self.name)
        full = self._full()
        size = patch.shape[1:]
        out = np.zeros((self.num_classes,) + tuple(size), dtype=np.float64)
        out[self.background] = self.scale
        src, dst = [], []
        for o, s, d in zip(context.origin, size, full.shape[1:]):
            lo, hi = max(o, 0), min(o + s, d)
            src.append(slice(lo, max(hi, lo)))
            dst.append(slice(lo - o, max(hi, lo) - o))
        out[(slice(None),) + tuple(dst)] = full[(slice(None),) + tuple(src)]
        if context.flip:
            out = flip_x(out)
        if context.zoom is not None:
            out = resample(out, context.zoom, "trilinear", mode="nearest")
        return out


class SubprocessPredictor(Predictor):
    """Talks to a child process over line-delimited JSON on stdin/stdout.

    Each request writes the patch as a raw tensor file in ``workdir`` and
    sends ``{"id", "patch", "channels", "dims"}``; the child answers with
    ``{"id", "logits", "channels"}`` naming a raw tensor file, with paths
    relative to ``workdir``. One request is in flight at a time.
    """

    def __init__(self, command, workdir, timeout: float = 300.0, name: str | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.workdir = Path(workdir)
        self.timeout = timeout
        self.name = name or " ".join(self.command)
        self._proc = None
        self._lines: queue.Queue = queue.Queue()
        self._stderr: list[str] = []
        self._lock = threading.Lock()
        self._next_id = 0

    def _start(self):
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._lines = queue.Queue()
        self._stderr = []
        try:
            self._proc = subprocess.Popen(
                self.command, cwd=self.workdir, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.PIPE, text=True, encoding="utf-8", bufsize=1,
            )
        except OSError as e:
            raise PredictorError(f"cannot start process: {e}", self.name) from e

        def pump(stream, sink):
            for line in stream:
                sink(line)
            sink(None)

        threading.Thread(target=pump, args=(self._proc.stdout, self._lines.put), daemon=True).start()
        self._err_thread = threading.Thread(
            target=pump, args=(self._proc.stderr, lambda l: l is not None and self._stderr.append(l)), daemon=True
        )
        self._err_thread.start()

    def _fail(self, msg, origin):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
        if self._proc is not None:
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass
            self._err_thread.join(timeout=2)
        err = "".join(self._stderr).strip()
        code = None if self._proc is None else self._proc.returncode
        self._proc = None
        detail = f" (exit code {code})" if code is not None else ""
        if err:
            detail += f"; stderr: {err}"
        raise PredictorError(msg + detail, self.name, origin)

    def predict(self, patch, context=None):
        origin = None if context is None else context.origin
        with self._lock:
            if self._proc is None:
                self._start()
            rid = self._next_id
            self._next_id += 1
            patch = np.asarray(patch, dtype=np.float32)
            rel_in = f"patch_{rid}.volt"
            write_raw_tensor(ChannelVolume(patch), self.workdir / rel_in)
            req = {"id": rid, "patch": rel_in, "channels": int(patch.shape[0]), "dims": list(patch.shape[1:])}
            try:
                self._proc.stdin.write(json.dumps(req) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError):
                self._fail("process closed its input", origin)
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                self._fail(f"no response within {self.timeout} s", origin)
            if line is None:
                self._fail("process exited before responding", origin)
            try:
                resp = json.loads(line)
                if resp["id"] != rid:
                    raise ValueError(f"response id {resp['id']} does not match request id {rid}")
                vol = read_raw_tensor(self.workdir / resp["logits"])
                if vol.channels != int(resp["channels"]):
                    raise ValueError(f"declared {resp['channels']} channels, file has {vol.channels}")
                if vol.dims != tuple(patch.shape[1:]):
                    raise ValueError(f"logits dims {vol.dims} != patch dims {tuple(patch.shape[1:])}")
            except (ValueError, KeyError, TypeError, OSError) as e:
                self._fail(f"protocol violation: {e}", origin)
            os.remove(self.workdir / rel_in)
            return vol.data

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def subprocess_predictor(command, workdir, timeout: float = 300.0) -> SubprocessPredictor:
    return SubprocessPredictor(command, workdir, timeout)
