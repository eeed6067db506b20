import numpy as np
import pytest

from ssmd.inference import frame_accuracy, infer_recording, median_smooth, stitch
from ssmd.model import ModelConfig, build_model
from ssmd.scoring import parse_rttm

TOY = dict(n_mels=8, d_model=16, d_memory=12, d_ivec=4, n_speakers=3, t_chunk=10, conv_channels=2,
           enc_layers=1, dec_layers=1, heads=2, memory_rows=4, conv_kernel=3)


def test_stitch_averages_overlaps():
    a = np.full((1, 4), 1.0)
    b = np.full((1, 4), 3.0)
    out = stitch([a, b], [0, 2], 6)
    np.testing.assert_array_equal(out, [[1, 1, 2, 2, 3, 3]])


def test_stitch_drops_padded_tail():
    out = stitch([np.ones((2, 4)), 2 * np.ones((2, 4))], [0, 4], 6)
    assert out.shape == (2, 6)
    np.testing.assert_array_equal(out[:, 4:], 2)


def test_median_removes_short_blips_keeps_long_runs():
    x = np.zeros((1, 40))
    x[0, 10] = 1
    x[0, 20:32] = 1
    y = median_smooth(x, 11)
    assert y[0, 10] == 0
    np.testing.assert_array_equal(y[0, 20:32], 1)
    np.testing.assert_array_equal(median_smooth(x, 1), x)
    with pytest.raises(ValueError):
        median_smooth(x, 4)


def test_infer_recording_shapes_and_rttm():
    cfg = ModelConfig(**TOY)
    model = build_model(cfg)
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((37, 8))
    mask = (rng.random((2, 37)) > 0.5).astype(float)
    res = infer_recording(model, feats, mask, rng.standard_normal((2, 4)), recording="r1", speakers=["a", "b"])
    assert res.posteriors.shape == (2, 37) and res.activity.shape == (2, 37)
    assert set(np.unique(res.activity)) <= {0.0, 1.0}
    assert model.training
    parsed = parse_rttm(res.rttm()) if res.segments() else {}
    assert set(parsed) <= {"r1"}


def test_frame_accuracy():
    a = np.array([[1, 0, 1, 1]], float)
    assert frame_accuracy(a, np.array([[1, 0, 0, 1]], float)) == 0.75
