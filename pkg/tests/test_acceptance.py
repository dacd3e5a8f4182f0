"""Acceptance gate: every criterion at its stated tolerance, one PASS/FAIL line each."""
import itertools
import json
import math
import time

import numpy as np
import pytest

import conftest
from contextnet import analysis, cli, frontend
from contextnet import encoder as enc
from contextnet import numerics as nx
from contextnet import training as tr
from contextnet import transducer as td
from conftest import check_gradients
from test_transducer import brute_force_nll

TITLES = {
    1: "transducer loss equals alignment enumeration",
    2: "analytic gradients match finite differences",
    3: "8x encoder output length is ceil(T/8)",
    4: "parameter scaling with width",
    5: "FLOPS ordering over reduction and kernel",
    6: "windowed squeeze-excite limits",
    7: "feature frontend shape and energy scaling",
    8: "toy task learned end to end",
    9: "training runs are bitwise reproducible",
    10: "learning-rate schedule point values",
}
conftest.ACCEPTANCE_TITLES.update(TITLES)


def report(number, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {TITLES[number]}: {detail}"
    conftest.ACCEPTANCE_RESULTS[number] = line
    print(line)
    assert ok, line


def test_criterion_01_loss_oracle():
    start = time.perf_counter()
    worst, count = 0.0, 0
    for T, U, V in itertools.product(range(1, 5), range(0, 4), range(2, 6)):
        for trial in range(50):
            rng = np.random.default_rng([1, T, U, V, trial])
            logits = rng.normal(size=(T, U + 1, V)) * 3.0
            labels = list(rng.integers(1, V, U))
            worst = max(worst, abs(td.rnnt_loss(logits, labels)[0] - brute_force_nll(logits, labels)))
            count += 1
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-8 and elapsed < 10,
           f"{count} instances, max abs diff {worst:.1e} (< 1e-8), {elapsed:.1f} s (< 10 s)")


# -- criterion 2 -------------------------------------------------------------------

def grad_se(rng):
    T, D = int(rng.integers(1, 7)), int(rng.choice([4, 8, 16]))
    db = enc.se_bottleneck(D)
    window = [None, 1, 3, 2 * T - 1][int(rng.integers(4))]

    def build(t):
        return nx.sum(nx.tanh(enc.se_module(t[0], enc.SEParams(t[1], t[2], t[3], t[4], window))))

    return build, [rng.normal(size=(T, D)), rng.normal(size=(D, db)), rng.normal(size=db),
                   rng.normal(size=(db, D)), rng.normal(size=D)]


def grad_conv_block(rng):
    spec = enc.BlockSpec(int(rng.integers(1, 3)), 3, kernel_size=int(rng.choice([1, 3, 5])),
                         stride=int(rng.integers(1, 3)), residual=bool(rng.integers(2)))
    d_in = int(rng.integers(1, 4))
    train = bool(rng.integers(2))
    template = enc.init_block_params(spec, d_in, rng, np.float64)
    names = [k for k, v in template.items() if v.requires_grad]
    buffers = {k: v for k, v in template.items() if not v.requires_grad}

    def build(t):
        params = dict(buffers)
        params.update(zip(names, t[1:]))
        return nx.sum(nx.tanh(enc.conv_block(t[0], spec, params, train=train)))

    x = rng.normal(size=(2, int(rng.integers(2, 7)), d_in))
    return build, [x] + [template[n].data + 0.1 * rng.normal(size=template[n].shape) for n in names]


def grad_batch_norm(rng):
    D = int(rng.integers(1, 5))
    train = bool(rng.integers(2))
    mean, var = rng.normal(size=D), rng.uniform(0.5, 2.0, D)

    def build(t):
        y = nx.batch_norm(t[0], t[1], t[2], nx.Tensor(mean.copy()), nx.Tensor(var.copy()), train=train)
        return nx.sum(nx.tanh(y))

    return build, [rng.normal(size=(2, int(rng.integers(2, 6)), D)), rng.normal(size=D), rng.normal(size=D)]


def grad_lstm(rng):
    E, H = int(rng.integers(1, 4)), int(rng.integers(1, 4))

    def build(t):
        p = td.LabelEncoderParams(nx.Tensor(np.zeros((1, E))), nx.Tensor(np.zeros(E)), t[3], t[4], t[5])
        h, (_, c) = td.lstm_step(t[0], (t[1], t[2]), p)
        return nx.add(nx.sum(nx.tanh(h)), nx.sum(nx.mul(c, c)))

    return build, [rng.normal(size=(2, E)), rng.normal(size=(2, H)), rng.normal(size=(2, H)),
                   rng.normal(size=(E, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H)]


def grad_joint(rng):
    De, H, J, V = (int(v) for v in rng.integers(1, 5, 4))

    def build(t):
        return nx.sum(nx.tanh(td.joint(t[0], t[1], td.JointParams(*t[2:]))))

    return build, [rng.normal(size=(3, 1, De)), rng.normal(size=(1, 2, H)), rng.normal(size=(De, J)),
                   rng.normal(size=(H, J)), rng.normal(size=J), rng.normal(size=(J, V)), rng.normal(size=V)]


def grad_loss(rng):
    B, T, U, V = 2, int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(2, 5))
    lengths = [U, int(rng.integers(0, U + 1))]
    labels = rng.integers(1, V, (B, U))

    def build(t):
        return td.rnnt_loss_batch(t[0], labels, lengths)

    return build, [rng.normal(size=(B, T, U + 1, V))]


GRADIENT_CASES = {"SE module": grad_se, "conv block": grad_conv_block, "batch norm": grad_batch_norm,
                  "LSTM cell": grad_lstm, "joint": grad_joint, "transducer loss": grad_loss}


def test_criterion_02_gradients():
    start = time.perf_counter()
    worst = {}
    for name, make in GRADIENT_CASES.items():
        errors = []
        for trial in range(100):
            rng = np.random.default_rng([2, len(name), trial])
            build, arrays = make(rng)
            with nx.precision(np.float64):
                errors.append(check_gradients(build, arrays))
        worst[name] = max(errors)
    elapsed = time.perf_counter() - start
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, ok, f"max rel err over 100 trials each: {detail} (< 1e-4); {elapsed:.1f} s (< 60 s)")


def test_criterion_03_downsampling():
    config = enc.default_config(1.0)
    params = enc.init_encoder_params(config, np.random.default_rng(3), np.float32)
    bad = []
    with nx.no_grad():
        for T in range(1, 201):
            out = enc.encode(np.random.default_rng(T).normal(size=(T, 80)).astype(np.float32), config, params)
            if out.shape[0] != math.ceil(T / 8):
                bad.append((T, out.shape[0]))
    report(3, not bad, f"T = 1..200 through the alpha=1 encoder, mismatches: {bad[:5] or 'none'}")


def test_criterion_04_parameter_scaling():
    start = time.perf_counter()
    decoder = analysis.reference_decoder()
    totals = {a: analysis.count_params(enc.default_config(a), decoder).total_params for a in (0.5, 1.0, 2.0)}
    encoders = [analysis.encoder_params(enc.default_config(a)) for a in (0.5, 1.0, 1.5, 2.0)]
    ratio = encoders[3] / encoders[1]
    elapsed = time.perf_counter() - start
    within = {a: abs(t / 1e6 - analysis.REFERENCE_PARAMS_M[a]) <= 0.2 * analysis.REFERENCE_PARAMS_M[a]
              for a, t in totals.items()}
    monotone = all(x < y for x, y in zip(encoders, encoders[1:]))
    ok = all(within.values()) and 3.5 <= ratio <= 4.0 and monotone and elapsed < 1
    detail = ", ".join(f"a={a}: {t / 1e6:.2f}M vs {analysis.REFERENCE_PARAMS_M[a]}M" for a, t in totals.items())
    report(4, ok, f"{detail} (+-20%); encoder ratio a2/a1 {ratio:.3f} in [3.5, 4.0]; "
                  f"strictly increasing {monotone}; {elapsed * 1e3:.0f} ms")


def test_criterion_05_flops_ordering():
    start = time.perf_counter()
    flops = {(r, k): analysis.count_flops(enc.default_config(1.0, kernel=k, reduction=r), 1.0)
             for r in ("2x", "8x") for k in (3, 5, 11, 23)}
    ratio = flops[("8x", 5)] / flops[("2x", 5)]
    lo, hi = 0.487 * 0.85, 0.487 * 1.15
    nondecreasing = all(flops[(r, a)] <= flops[(r, b)] for r in ("2x", "8x") for a, b in [(3, 5), (5, 11), (11, 23)])
    cheaper = all(flops[("8x", k)] < flops[("2x", k)] for k in (3, 5, 11, 23))
    elapsed = time.perf_counter() - start
    ok = lo <= ratio <= hi and nondecreasing and cheaper and elapsed < 1
    report(5, ok, f"8x/2x at k=5 {ratio:.4f} in [{lo:.4f}, {hi:.4f}]; nondecreasing in kernel {nondecreasing}; "
                  f"8x < 2x everywhere {cheaper}; {elapsed * 1e3:.0f} ms")


def test_criterion_06_windowed_se():
    bitwise, monotone = 0, 0
    for trial in range(100):
        rng = np.random.default_rng([6, trial])
        T, D = int(rng.integers(1, 65)), 16
        block = enc.init_block_params(enc.BlockSpec(1, D), D, rng, np.float64)
        for key in ("se.w1", "se.b1", "se.w2", "se.b2"):
            block[key] = nx.Tensor(rng.normal(size=block[key].shape))
        x = nx.Tensor(rng.normal(size=(T, D)) + rng.normal(size=D))
        glob = enc.se_module(x, enc.SEParams.from_block(block)).data
        wide = [enc.se_module(x, enc.SEParams.from_block(block, window=w)).data
                for w in (2 * T - 1, 2 * T, 10 * T + 3)]
        bitwise += all(w.tobytes() == glob.tobytes() for w in wide)
        mad = [np.mean(np.abs(enc.se_module(x, enc.SEParams.from_block(block, window=w)).data - glob))
               for w in (4, 16, 64)]
        monotone += mad[0] >= mad[1] >= mad[2]
    ok = bitwise == 100 and monotone >= 90
    report(6, ok, f"bitwise equal at window >= 2T-1 in {bitwise}/100; MAD(4) >= MAD(16) >= MAD(64) "
                  f"in {monotone}/100 (>= 90)")


def test_criterion_07_frontend():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    wave = frontend.Waveform(rng.uniform(-0.3, 0.3, 16000))
    base = frontend.log_mel_filterbank(wave).frames
    c = 3.0
    scaled = frontend.log_mel_filterbank(frontend.Waveform(wave.samples * c)).frames
    live = base > math.log(frontend.LOG_FLOOR)
    err = float(np.max(np.abs((scaled - base)[live] - 2 * math.log(c))))
    elapsed = time.perf_counter() - start
    ok = base.shape == (98, 80) and err <= 1e-6 and elapsed < 1
    report(7, ok, f"shape {base.shape}; max |shift - 2 ln c| {err:.1e} (<= 1e-6) on {int(live.sum())} cells; "
                  f"{elapsed * 1e3:.0f} ms")


# -- criteria 8 and 9: training ------------------------------------------------------

@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    start = time.perf_counter()
    code = cli.main(["train-toy", "--out", str(out), "--seed", "7"])
    return out, code, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_08_toy_learning(toy_run, tmp_path, capsys):
    out, code, elapsed = toy_run
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    final = records[-1]

    model = tr.load_model(out / "model.cnck", vocab=td.Vocab.load(out / "vocab.txt"))
    held_out = tr.ToyTaskSpec(seed=20261017, num_dev=200)
    feats, labels = tr.make_dataset(held_out, "dev")
    with nx.no_grad():
        encoded = model.encode(feats, train=False).data
    exact = sum(td.greedy_decode(encoded[i], model) == labels[i] for i in range(len(labels)))

    frontend.write_wav(tmp_path / "silence.wav", frontend.Waveform(np.zeros(16000)))
    capsys.readouterr()
    silence_code = cli.main(["decode", str(out / "model.cnck"), str(tmp_path / "silence.wav")])
    silence_out = capsys.readouterr().out

    ok = (code == 0 and final["step"] <= 10000 and final["dev_token_error_rate"] <= 0.05
          and elapsed < 45 * 60 and exact >= 0.95 * len(labels) and silence_code == 0 and silence_out == "\n")
    report(8, ok, f"dev token error {final['dev_token_error_rate']:.4f} (<= 0.05) at step {final['step']} "
                  f"(<= 10000) in {elapsed / 60:.1f} min (< 45); held-out exact sequences {exact}/{len(labels)} "
                  f"(>= 95%); silence decodes to {silence_out.strip()!r}")


def test_criterion_09_determinism(tmp_path, capsys):
    config = tmp_path / "short.json"
    config.write_text('{"task": {"num_train": 64, "num_dev": 16}, '
                      '"train": {"max_steps": 12, "eval_interval": 4, "batch_size": 8, "weight_noise_start_step": 4}}')
    runs = []
    for name in ("a", "b"):
        code = cli.main(["train-toy", "--config", str(config), "--out", str(tmp_path / name), "--seed", "11"])
        runs.append(code)
    capsys.readouterr()
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("model.cnck", "metrics.jsonl")}
    report(9, runs == [0, 0] and all(same.values()),
           "two seeded runs with augmentation and weight noise: "
           + ", ".join(f"{f} {'identical' if s else 'DIFFERENT'}" for f, s in same.items()))


def test_criterion_10_schedule():
    cfg = tr.TrainConfig()
    points = {15000: 0.0025, 7500: 0.00125, 60000: 0.00125}
    errs = {s: abs(tr.lr_schedule(s, cfg) - v) for s, v in points.items()}
    report(10, all(e <= 1e-12 for e in errs.values()),
           ", ".join(f"lr({s}) off by {e:.1e}" for s, e in errs.items()) + " (<= 1e-12)")
