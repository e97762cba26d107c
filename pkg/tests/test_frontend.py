import struct

import numpy as np
import pytest

from vflite.errors import FormatError, NumericError, TooShortError
from vflite.frontend import (
    FeatureConfig,
    FeatureSequence,
    FeatureWriter,
    StreamingFrontend,
    Variant,
    Waveform,
    extract,
    iter_wav,
    mel_filterbank,
    mel_weights,
    num_frames,
    num_stacked,
    periodic_hann,
    read_features,
    read_wav,
    stack_frames,
    stft_magnitude,
    wav_num_samples,
    write_features,
    write_wav,
)

SR = 16000


def sine(freq, seconds=1.0, amp=1.0):
    t = np.arange(int(SR * seconds)) / SR
    return Waveform(amp * np.sin(2 * np.pi * freq * t))


def test_zero_second_is_98_by_513(fcfg):
    s = stft_magnitude(Waveform(np.zeros(SR)), fcfg)
    assert s.shape == (98, 513)
    assert not s.frames.any()


def test_frame_count_formula(fcfg):
    for n in (400, 401, 559, 560, 16000, 16321):
        assert num_frames(n, fcfg) == 1 + (n - 400) // 160
        assert len(stft_magnitude(Waveform(np.ones(n) * 0.1), fcfg)) == num_frames(n, fcfg)


def test_too_short_raises(fcfg):
    with pytest.raises(TooShortError):
        stft_magnitude(Waveform(np.zeros(399)), fcfg)


def test_sine_peaks_at_bin_64(fcfg):
    s = stft_magnitude(sine(1000.0), fcfg)
    assert round(1000 * 1024 / 16000) == 64
    assert np.all(np.argmax(s.frames, axis=1) == 64)


def test_single_frame_matches_direct_dft(fcfg):
    w = sine(1000.0, 0.025)
    x = np.zeros(1024)
    x[:400] = w.samples * periodic_hann(400)
    k = np.arange(513)[:, None]
    n = np.arange(1024)[None, :]
    oracle = np.abs(np.sum(x * np.exp(-2j * np.pi * k * n / 1024), axis=1))
    s = stft_magnitude(w, fcfg)
    assert s.shape == (1, 513)
    np.testing.assert_allclose(s.frames[0], oracle, atol=1e-9)


def test_periodic_hann():
    h = periodic_hann(8)
    assert h[0] == 0.0
    np.testing.assert_allclose(h, 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(8) / 8))


def test_widths_per_variant():
    assert FeatureConfig(variant="fft").width == 513
    assert FeatureConfig(variant="filterbank").width == 128
    assert FeatureConfig(variant="stacked").width == 512


def test_mel_zero_in_zero_out(fcfg):
    s = FeatureSequence(np.zeros((5, 513)), Variant.FFT_MAGNITUDE, 0.01)
    out = mel_filterbank(s, fcfg)
    assert out.shape == (5, 128)
    assert not out.frames.any()


def test_mel_single_filter_unit_weight(fcfg):
    # bin energy e - 1 through a unit weight gives log(1 + e - 1) = 1
    frames = np.zeros((1, 513))
    frames[0, 40] = np.sqrt(np.e - 1)
    weights = np.zeros((1, 513))
    weights[0, 40] = 1.0
    out = mel_filterbank(FeatureSequence(frames, Variant.FFT_MAGNITUDE, 0.01), fcfg, weights)
    assert out.frames[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_mel_rejects_wrong_variant(fcfg):
    with pytest.raises(ValueError):
        mel_filterbank(FeatureSequence(np.zeros((2, 128)), Variant.FILTERBANK, 0.01), fcfg)


def test_mel_weights_shape_and_peaks(fcfg):
    w = mel_weights(fcfg)
    assert w.shape == (128, 513)
    assert np.all(w >= 0) and np.all(w.max(axis=1) <= 1.0 + 1e-12)
    assert np.all(w.sum(axis=1) > 0)
    # no weight outside the configured band
    freqs = np.arange(513) * SR / 1024
    assert not w[:, (freqs < 125 - SR / 1024) | (freqs > 7500 + SR / 1024)].any()


def test_stack_identity(fcfg):
    cfg = FeatureConfig(variant="stacked", stack=1, stride=1)
    fb = FeatureSequence(np.random.default_rng(0).random((7, 128)), Variant.FILTERBANK, 0.01)
    out = stack_frames(fb, cfg)
    np.testing.assert_array_equal(out.frames, fb.frames)


def test_stack_ten_frames_gives_three(fcfg):
    fb = FeatureSequence(np.arange(10, dtype=float)[:, None] * np.ones((1, 128)), Variant.FILTERBANK, 0.01)
    out = stack_frames(fb, fcfg)
    assert out.shape == (3, 512)
    assert out.frame_hop_s == pytest.approx(0.04)
    idx = out.frames[:, ::128]
    np.testing.assert_array_equal(idx, [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 9, 9]])


def test_num_stacked_examples(fcfg):
    assert num_stacked(10, fcfg) == 3
    assert num_stacked(98, fcfg) == 25
    assert num_stacked(1, fcfg) == 1
    overlap = FeatureConfig(stack=4, stride=2)
    assert num_stacked(10, overlap) == 4


def test_stack_empty_raises(fcfg):
    with pytest.raises(TooShortError):
        stack_frames(FeatureSequence(np.zeros((0, 128)), Variant.FILTERBANK, 0.01), fcfg)


def test_extract_compositions(fcfg):
    w = sine(440.0, 0.5, 0.3)
    fft = extract(w, fcfg.with_variant("fft"))
    np.testing.assert_array_equal(fft.frames, stft_magnitude(w, fcfg).frames)
    fb = extract(w, fcfg.with_variant("filterbank"))
    assert fb.shape[1] == 128
    np.testing.assert_array_equal(fb.frames, mel_filterbank(fft, fcfg).frames)
    st = extract(w, fcfg)
    np.testing.assert_array_equal(st.frames, stack_frames(fb, fcfg).frames)
    assert not extract(Waveform(np.zeros(SR)), fcfg).frames.any()


def test_energy_monotone_under_gain(fcfg):
    w = Waveform(np.random.default_rng(3).uniform(-0.3, 0.3, 4000))
    a = stft_magnitude(w, fcfg).frames
    b = stft_magnitude(Waveform(w.samples * 1.7), fcfg).frames
    assert np.all(b >= a)


def test_config_validation():
    with pytest.raises(ValueError):
        FeatureConfig(n_fft=1000)
    with pytest.raises(ValueError):
        FeatureConfig(stack=0)
    with pytest.raises(ValueError):
        FeatureConfig(n_mels=513)


def test_waveform_validation(fcfg):
    with pytest.raises(NumericError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 10)))
    with pytest.raises(TooShortError):
        extract(Waveform(np.array([])), fcfg)


@pytest.mark.parametrize("variant", ["fft", "filterbank", "stacked"])
@pytest.mark.parametrize("chunk", [1, 160, 999, 4000])
def test_streaming_frontend_matches_batch(fcfg, variant, chunk):
    cfg = fcfg.with_variant(variant)
    x = np.random.default_rng(chunk).uniform(-0.5, 0.5, 7777)
    batch = extract(Waveform(x), cfg).frames
    fe = StreamingFrontend(cfg)
    parts = [fe.push(x[i : i + chunk]) for i in range(0, len(x), chunk)] + [fe.flush()]
    streamed = np.concatenate(parts)
    assert streamed.shape == batch.shape
    np.testing.assert_allclose(streamed, batch, atol=1e-12)


def test_wav_roundtrip(tmp_path):
    x = np.round(np.random.default_rng(0).uniform(-0.9, 0.9, 3000) * 32767) / 32767
    path = tmp_path / "a.wav"
    write_wav(path, Waveform(x))
    back = read_wav(path)
    assert back.sample_rate_hz == SR
    np.testing.assert_allclose(back.samples, x, atol=1 / 32767)
    assert wav_num_samples(path) == 3000
    chunks = list(iter_wav(path, 1000))
    assert [len(c) for c in chunks] == [1000, 1000, 1000]
    np.testing.assert_array_equal(np.concatenate(chunks), back.samples)


def _raw_wav(path, channels=1, rate=SR, bits=16):
    data = b"\x00" * (bits // 8) * channels * 100
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", 1, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


@pytest.mark.parametrize("kw", [{"channels": 2}, {"rate": 8000}, {"bits": 8}])
def test_wav_rejects_other_formats(tmp_path, kw):
    path = tmp_path / "bad.wav"
    _raw_wav(path, **kw)
    with pytest.raises(FormatError):
        read_wav(path)


def test_wav_rejects_garbage(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"not a wav file at all")
    with pytest.raises(FormatError):
        read_wav(path)


def test_vff_roundtrip_and_layout(tmp_path):
    s = FeatureSequence(np.random.default_rng(1).random((6, 128)), Variant.FILTERBANK, 0.01)
    path = tmp_path / "f.vff"
    write_features(path, s)
    raw = path.read_bytes()
    assert raw[:4] == b"VFF1"
    variant, t, f, hop = struct.unpack_from("<IIId", raw, 4)
    assert (variant, t, f, hop) == (1, 6, 128, 0.01)
    assert len(raw) == 4 + 12 + 8 + 6 * 128 * 4
    back = read_features(path)
    assert back.variant == Variant.FILTERBANK
    np.testing.assert_array_equal(back.frames, s.frames.astype(np.float32))


def test_vff_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "f.vff"
    write_features(path, FeatureSequence(np.ones((3, 4)), Variant.FILTERBANK, 0.01))
    raw = path.read_bytes()
    (tmp_path / "magic.vff").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.vff").write_bytes(raw[:-3])
    for name in ("magic.vff", "short.vff"):
        with pytest.raises(FormatError):
            read_features(tmp_path / name)


def test_feature_writer_patches_count(tmp_path):
    path = tmp_path / "w.vff"
    rows = np.random.default_rng(2).random((9, 5))
    with FeatureWriter(path, Variant.FILTERBANK, 5, 0.01) as fw:
        fw.write(rows[:4])
        fw.write(rows[4:])
    back = read_features(path)
    assert back.shape == (9, 5)
    np.testing.assert_array_equal(back.frames, rows.astype(np.float32))


def test_determinism(fcfg):
    w = Waveform(np.random.default_rng(9).uniform(-0.2, 0.2, 8000))
    np.testing.assert_array_equal(extract(w, fcfg).frames, extract(w, fcfg).frames)
