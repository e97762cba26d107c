"""Acceptance criteria 1-9, one test each.

Every test records a ``PASS``/``FAIL criterion N: ...`` line; conftest echoes
them in the terminal summary so a single run shows the whole scorecard.
"""

import json
import time

import conftest
import numpy as np
import pytest
from _helpers import gradient_check, random_example

from vflite.cli import main
from vflite.evaluation import enhance_features
from vflite.frontend import FeatureConfig, Waveform
from vflite.masknet import (
    MaskNetConfig,
    StreamState,
    default_config,
    forward_sequence,
    init_params,
    mask_values,
    stream_outputs,
    toy_config,
)
from vflite.mixer import MixSpec, NoiseKind, make_example, sample_snr
from vflite.quantizer import (
    QuantTensor,
    forward_sequence_quantized,
    forward_step_quantized,
    quantize_model,
    quantize_tensor,
)
from vflite.speaker import DVector
from vflite.suppression import SuppressionConfig, SuppressionState, compensate, update_strength
from vflite.synth import fixture_examples, write_corpus
from vflite.training import LossConfig, TrainConfig, asym_l2_loss, l2_loss, train
from vflite.vfm import decode_model, encode_model, predicted_size, save_model


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def over_rate(params, cfg, examples, eps=0.05):
    over = cells = 0
    for ex in examples:
        m, _ = forward_sequence(params, cfg, ex.noisy, ex.dvec)
        out = mask_values(ex.noisy.frames, m, ex.noisy.variant)
        over += int(np.sum(out < ex.clean.frames - eps))
        cells += out.size
    return over / cells


def feature_mse(params, cfg, examples):
    enh = ref = 0.0
    for ex in examples:
        m, _ = forward_sequence(params, cfg, ex.noisy, ex.dvec)
        out = mask_values(ex.noisy.frames, m, ex.noisy.variant)
        enh += float(np.mean((out - ex.clean.frames) ** 2))
        ref += float(np.mean((ex.noisy.frames - ex.clean.frames) ** 2))
    return enh / len(examples), ref / len(examples)


def test_criterion_1_loss_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 12, 2))
        a = rng.standard_normal(shape) * rng.uniform(0.1, 10)
        b = rng.standard_normal(shape) * rng.uniform(0.1, 10)
        mismatches += asym_l2_loss(a, b, 1.0) != l2_loss(a, b)
    over = asym_l2_loss([[1.0]], [[0.0]], 10.0)
    under = asym_l2_loss([[0.0]], [[1.0]], 10.0)
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and over == 100.0 and under == 1.0 and dt < 1.0
    record(1, ok, f"alpha=1 mismatches {mismatches}/1000, d=+1 -> {over}, d=-1 -> {under}, {dt:.2f}s")


def test_criterion_2_gradient_check():
    t0 = time.perf_counter()
    cfg = toy_config()
    assert (cfg.lstm_layers, cfg.lstm_units, cfg.input_dim, cfg.dvec_dim) == (2, 8, 6, 4)
    lc = LossConfig(alpha=10.0, noise_head_weight=0.5)
    errors, kinks = [], 0
    for seed in range(4):
        ex = random_example(10, 6, 4, seed=100 + seed)
        # coordinates whose step straddles a kink (residual, hinge margin or ReLU) are excluded
        e, k = gradient_check(init_params(cfg, seed), cfg, ex, lc, 60, seed=seed)
        errors.extend(e)
        kinks += k
    errors = np.array(errors)
    dt = time.perf_counter() - t0
    ok = errors.size >= 200 and errors.max() < 1e-3 and dt < 30
    record(2, ok, f"{errors.size} coords, max rel err {errors.max():.2e}, {kinks} kink coords excluded, {dt:.1f}s")


def test_criterion_3_streaming_equals_batch():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    x = rng.random((1000, 6)) * 4
    d = DVector.normalized(rng.standard_normal(4))
    worst = 0.0
    exact = True
    for kw in ({}, {"conv_kernel": 3, "conv_channels": 2}):
        cfg = toy_config(**kw)
        p = init_params(cfg, 7)
        mb, sb = forward_sequence(p, cfg, x, d)
        ms, ss = stream_outputs(p, cfg, x, d)
        worst = max(worst, float(np.max(np.abs(mb - ms))), float(np.max(np.abs(sb - ss))))
        q = quantize_model(p)
        state = StreamState.initial(cfg)
        steps = []
        for fr in x:
            m, s, state = forward_step_quantized(q, cfg, state, fr, d)
            steps.append(np.append(m, s))
        qm, qs = forward_sequence_quantized(q, cfg, x, d)
        exact &= bool(np.array_equal(np.array(steps), np.column_stack([qm, qs])))
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and exact and dt < 10
    record(3, ok, f"float max diff {worst:.2e}, quantized bit-identical {exact}, {dt:.1f}s")


def test_criterion_4_snr_accuracy(fcfg):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    d = DVector.normalized(np.ones(8))
    for i in range(100):
        clean = Waveform(rng.standard_normal(4000) * rng.uniform(0.01, 0.3))
        noise = Waveform(rng.standard_normal(int(rng.integers(1000, 6000))) * rng.uniform(0.01, 0.3))
        snr = sample_snr(rng, -5.0, 20.0)
        ex = make_example(clean, noise, None, MixSpec(snr, NoiseKind.SPEECH, seed=i), fcfg, dvec=d)
        worst = max(worst, abs(ex.meta["measured_snr_db"] - snr))
    dt = time.perf_counter() - t0
    record(4, worst < 1e-6 and dt < 10, f"max |requested - measured| {worst:.2e} dB over 100 mixtures, {dt:.1f}s")


def test_criterion_5_suppression_recursion():
    t0 = time.perf_counter()
    a, b, c = 0.6, 0.2, 0.7
    cfg = SuppressionConfig(mode="adaptive", a=a, b=b, beta=0.8)
    target = a * c + b
    state = SuppressionState(cfg.initial_w())
    gap0 = abs(state.w_prev - target)
    worst = 0.0
    for t in range(1, 101):
        w = update_strength(state, c, cfg)
        worst = max(worst, abs(abs(w - target) - 0.8**t * gap0))
    rng = np.random.default_rng(5)
    s_in, s_enh = rng.random((20, 8)), rng.random((20, 8))
    endpoints = np.array_equal(compensate(s_enh, s_in, 0.0), s_in) and np.array_equal(compensate(s_enh, s_in, 1.0), s_enh)
    # endpoints through the full enhancer as well
    mcfg = toy_config(input_dim=8)
    p = init_params(mcfg, 1)
    ex = random_example(20, 8, 4, seed=6)
    off, _ = enhance_features(p, mcfg, ex.noisy, ex.dvec, SuppressionConfig.parse("fixed:0"))
    full, _ = enhance_features(p, mcfg, ex.noisy, ex.dvec, SuppressionConfig.parse("fixed:1"))
    m, _ = forward_sequence(p, mcfg, ex.noisy, ex.dvec)
    endpoints &= np.array_equal(off.frames, ex.noisy.frames)
    endpoints &= np.array_equal(full.frames, mask_values(ex.noisy.frames, m, ex.noisy.variant))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and endpoints and dt < 1
    record(5, ok, f"max recursion deviation {worst:.1e} for t<=100, endpoints bit-exact {endpoints}, {dt:.2f}s")


def test_criterion_6_quantization_bounds():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    w = rng.standard_normal((200, 500)) * 0.1
    q = quantize_tensor(w)
    excess = float(np.max(np.abs(q.dequantize() - w)) - q.scale / 2)
    fcfg = FeatureConfig(variant="filterbank", n_mels=6)
    data = fixture_examples(20, fcfg, seed=4, dvec_dim=4)
    cfg = toy_config()
    st = train(data, cfg, LossConfig(), TrainConfig(steps=150, learning_rate=0.01, seed=0))
    qp = quantize_model(st.params)
    probe = fixture_examples(1, fcfg, seed=9, dvec_dim=4, duration_s=1.2)[0]
    frames = probe.noisy.frames[:100]
    mf, _ = forward_sequence(st.params, cfg, frames, probe.dvec)
    mq, _ = forward_sequence_quantized(qp, cfg, frames, probe.dvec)
    mae = float(np.mean(np.abs(mf - mq)))
    roundtrip = True
    for params in (st.params, qp):
        raw = encode_model(params, cfg, {"step": st.step})
        back = decode_model(raw)
        roundtrip &= encode_model(back.params, back.config, back.meta) == raw
        for k, v in params.tensors.items():
            got = back.params[k]
            if isinstance(v, QuantTensor):
                roundtrip &= bool(np.array_equal(got.values, v.values)) and got.scale == v.scale
            else:
                roundtrip &= bool(np.array_equal(got, v))
    dt = time.perf_counter() - t0
    ok = excess <= 0 and frames.shape[0] == 100 and mae < 0.05 and roundtrip and dt < 30
    record(6, ok, f"10^5 weights max err - scale/2 = {excess:.1e}, mask MAE {mae:.4f}, VFM1 bit-exact {roundtrip}, {dt:.1f}s")


# twin-model experiment: seeds and thresholds fixed here
TWIN_FEATURES = FeatureConfig(variant="filterbank", n_mels=32)
TWIN_TRAIN_SEED, TWIN_SPEECH_SEED, TWIN_NONSPEECH_SEED = 1, 2, 3
TWIN_MODEL = MaskNetConfig(input_dim=32, dvec_dim=64, lstm_layers=2, lstm_units=32, head_hidden=(16, 16), variant="filterbank")
TWIN_TRAIN = TrainConfig(steps=300, learning_rate=0.01, batch_size=8, seed=0)
# measured: over-suppression 0.083 (alpha=1) vs 0.030 (alpha=10); speech MSE 0.020 / 0.079 vs 0.705 unenhanced


@pytest.mark.slow
def test_criterion_7_over_suppression_effect():
    t0 = time.perf_counter()
    data = fixture_examples(200, TWIN_FEATURES, seed=TWIN_TRAIN_SEED)
    speech = fixture_examples(30, TWIN_FEATURES, seed=TWIN_SPEECH_SEED, speech_fraction=1.0)
    nonspeech = fixture_examples(30, TWIN_FEATURES, seed=TWIN_NONSPEECH_SEED, speech_fraction=0.0)
    results = {}
    for alpha in (1.0, 10.0):
        st = train(data, TWIN_MODEL, LossConfig(alpha=alpha), TWIN_TRAIN)
        results[alpha] = (over_rate(st.params, TWIN_MODEL, nonspeech), *feature_mse(st.params, TWIN_MODEL, speech))
    (o1, e1, r1), (o10, e10, _) = results[1.0], results[10.0]
    dt = time.perf_counter() - t0
    ok = o10 < o1 and e1 < r1 and e10 < r1
    record(
        7,
        ok,
        f"non-speech over-suppression alpha=1 {o1:.3f} vs alpha=10 {o10:.3f}; "
        f"speech MSE {e1:.3f} / {e10:.3f} vs unenhanced {r1:.3f}, {dt:.0f}s",
    )


def test_criterion_8_model_sizes():
    t0 = time.perf_counter()
    lines, ok = [], True
    for small, target in ((False, 6.8e6), (True, 2.2e6)):
        cfg = default_config(512, 256, small=small)
        formula = predicted_size(cfg, quantized=True)
        actual = len(encode_model(quantize_model(init_params(cfg, 0)), cfg))
        for v in (formula, actual):
            ok &= abs(v - target) <= 0.25 * target
        lines.append(f"3x{cfg.lstm_units}: formula {formula / 1e6:.2f} MB, file {actual / 1e6:.2f} MB vs {target / 1e6:.1f} MB")
    dt = time.perf_counter() - t0
    record(8, ok and dt < 60, "; ".join(lines) + f", {dt:.1f}s")


@pytest.mark.slow
def test_criterion_9_throughput(tmp_path, capsys):
    manifest = write_corpus(tmp_path / "corpus", 1, seed=9, duration_s=60.0, speech_fraction=1.0)
    fcfg = FeatureConfig()
    cfg = default_config(fcfg.width, 256, small=True)
    save_model(tmp_path / "q.vfm", quantize_model(init_params(cfg, 0)), cfg, {"feature_config": fcfg.to_dict()})
    code = main([
        "eval", str(manifest), str(tmp_path / "q.vfm"), str(tmp_path / "r.json"),
        "--conditions", "additive-speech", "--suppression", "adaptive", "--no-plots",
    ])
    capsys.readouterr()
    assert code == 0
    row = json.loads((tmp_path / "r.json").read_text())["conditions"][0]
    ok = row["utterances"] == 1 and row["realtime_factor"] < 1.0
    record(9, ok, f"3x256 quantized, 60 s audio, realtime_factor {row['realtime_factor']:.3f}")
