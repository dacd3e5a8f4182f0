"""Fast numerical self-checks behind ``contextnet selftest``."""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import log_softmax, logsumexp

from . import encoder as enc
from . import numerics as nx
from .frontend import Waveform, log_mel_filterbank
from .training import TrainConfig, lr_schedule
from .transducer import rnnt_loss


def _enumerated_nll(logits, labels):
    T, U = logits.shape[0], len(labels)
    lp = log_softmax(logits, axis=-1)
    scores = []
    for slots in itertools.combinations(range(T - 1 + U), U):
        t = u = 0
        s = 0.0
        for pos in range(T - 1 + U):
            if pos in slots:
                s += lp[t, u, labels[u]]
                u += 1
            else:
                s += lp[t, u, 0]
                t += 1
        scores.append(s + lp[T - 1, U, 0])
    return -logsumexp(scores)


def check_loss():
    rng = np.random.default_rng(0)
    worst = 0.0
    for T, U in [(1, 0), (2, 1), (3, 2), (4, 3)]:
        logits = rng.normal(size=(T, U + 1, 5))
        labels = list(rng.integers(1, 5, U))
        worst = max(worst, abs(rnnt_loss(logits, labels)[0] - _enumerated_nll(logits, labels)))
    return worst < 1e-8, f"max |loss - enumeration| = {worst:.2e}"


def check_block_gradient():
    rng = np.random.default_rng(1)
    spec = enc.BlockSpec(2, 4, kernel_size=3, stride=2)
    with nx.precision(np.float64):
        params = enc.init_block_params(spec, 3, rng, np.float64)
        x0 = rng.normal(size=(9, 3))

        def value(x):
            return float(nx.sum(nx.tanh(enc.conv_block(nx.Tensor(x), spec, params))).item())

        x = nx.parameter(x0)
        with nx.GradTape() as tape:
            loss = nx.sum(nx.tanh(enc.conv_block(x, spec, params)))
        (grad,) = tape.gradient(loss, [x])
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        up, down = x0.copy(), x0.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        numeric[idx] = (value(up) - value(down)) / 2e-6
    err = np.linalg.norm(grad - numeric) / max(np.linalg.norm(numeric), 1e-6)
    return err < 1e-4, f"relative error {err:.2e}"


def check_frontend():
    shape = log_mel_filterbank(Waveform(np.zeros(16000))).frames.shape
    return shape == (98, 80), f"1 s of audio -> {shape}"


def check_downsampling():
    config = enc.default_config(1.0)
    bad = [T for T in range(1, 201) if config.output_length(T) != math.ceil(T / 8)]
    small = enc.reduced_config(0.125)
    params = enc.init_encoder_params(small, np.random.default_rng(2))
    got = enc.encode(np.zeros((37, 80), dtype=np.float32), small, params).shape[0]
    return not bad and got == 5, f"mismatched lengths {bad[:3]}, reduced encoder 37 -> {got}"


def check_windowed_se():
    rng = np.random.default_rng(3)
    T, D = 12, 16
    spec = enc.BlockSpec(1, D)
    block = enc.init_block_params(spec, D, rng, np.float64)
    x = nx.Tensor(rng.normal(size=(T, D)))
    a = enc.se_module(x, enc.SEParams.from_block(block)).data
    b = enc.se_module(x, enc.SEParams.from_block(block, window=2 * T - 1)).data
    return a.tobytes() == b.tobytes(), "window 2T-1 matches global bitwise"


def check_schedule():
    cfg = TrainConfig()
    got = [lr_schedule(s, cfg) for s in (15000, 7500, 60000)]
    ok = all(abs(g - e) <= 1e-12 for g, e in zip(got, (0.0025, 0.00125, 0.00125)))
    return ok, "lr at 15000, 7500, 60000 = " + ", ".join(f"{g:.6g}" for g in got)


CHECKS = [
    ("transducer loss", check_loss),
    ("conv block gradient", check_block_gradient),
    ("frontend frame count", check_frontend),
    ("8x downsampling", check_downsampling),
    ("windowed squeeze-excite", check_windowed_se),
    ("learning-rate schedule", check_schedule),
]


def run() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
