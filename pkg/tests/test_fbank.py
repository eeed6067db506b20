import math

import numpy as np
import pytest

from ssmd.fbank import (
    FbankConfig,
    build_mel_filterbank,
    compute_fbank,
    dump_features,
    load_features,
    mel_centers,
    read_wav,
    write_wav,
)

CFG = FbankConfig()


def test_filter_rows_positive_and_peak_one():
    fb = build_mel_filterbank(CFG)
    assert fb.shape == (40, 257)
    assert (fb >= 0).all()
    assert (fb.sum(axis=1) > 0).all()
    np.testing.assert_allclose(fb.max(axis=1), 1.0)


def test_filter_centers_strictly_increasing_and_overlapping():
    c = mel_centers(CFG)
    assert np.all(np.diff(c) > 0)
    fb = build_mel_filterbank(CFG)
    overlaps = [(fb[i] * fb[i + 1]).sum() > 0 for i in range(39)]
    assert sum(overlaps) > 30  # narrow low filters may touch only at a bin edge


def test_too_many_mels_rejected():
    with pytest.raises(ValueError):
        build_mel_filterbank(FbankConfig(n_mels=200, n_fft=512))


@pytest.mark.parametrize("j", [8, 15, 22, 30, 38])
def test_sine_at_center_lights_that_filter(j):
    f0 = mel_centers(CFG)[j]
    t = np.arange(16000) / 16000
    feats = compute_fbank(np.sin(2 * np.pi * f0 * t), CFG).matrix
    assert int(np.argmax(feats.mean(axis=0))) == j


def test_silence_is_log_floor():
    feats = compute_fbank(np.zeros(16000), CFG).matrix
    np.testing.assert_array_equal(feats, math.log(1e-10))


def test_frame_count_one_second():
    assert compute_fbank(np.random.default_rng(0).standard_normal(16000), CFG).n_frames == 98


def test_doubling_amplitude_adds_log4():
    x = np.random.default_rng(1).standard_normal(8000) * 0.1
    a = compute_fbank(x, CFG).matrix
    b = compute_fbank(2 * x, CFG).matrix
    above = a > math.log(1e-10) + 1
    np.testing.assert_allclose((b - a)[above], math.log(4.0), atol=1e-9)


def test_hop_shift_shifts_rows():
    x = np.random.default_rng(2).standard_normal(8000)
    a = compute_fbank(x, CFG).matrix
    b = compute_fbank(np.concatenate([np.zeros(CFG.hop_samples), x]), CFG).matrix
    np.testing.assert_allclose(b[1:-1], a[:-1][: b.shape[0] - 2], atol=1e-9)


def test_deterministic_and_cmn():
    x = np.random.default_rng(3).standard_normal(4000)
    np.testing.assert_array_equal(compute_fbank(x).matrix, compute_fbank(x).matrix)
    m = compute_fbank(x, FbankConfig(cmn=True)).matrix
    np.testing.assert_allclose(m.mean(axis=0), 0.0, atol=1e-9)


def test_errors():
    with pytest.raises(ValueError):
        compute_fbank(np.zeros(0))
    with pytest.raises(ValueError):
        compute_fbank(np.zeros(100))
    with pytest.raises(ValueError):
        FbankConfig(f_min=9000)


def test_wav_roundtrip_and_feature_dump(tmp_path):
    x = np.random.default_rng(4).uniform(-0.5, 0.5, 3200)
    write_wav(tmp_path / "a.wav", x, 16000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000
    np.testing.assert_allclose(y, x, atol=1 / 32768)
    chunk = compute_fbank(y, source_id="a")
    dump_features(tmp_path / "f.ssmd", {"a": chunk})
    back = load_features(tmp_path / "f.ssmd")
    np.testing.assert_array_equal(back["a"].matrix, chunk.matrix)
