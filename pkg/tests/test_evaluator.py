import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lunar_restore.errors import ValidationError
from lunar_restore.evaluator import (
    EvalRecord,
    EvalReport,
    aggregate,
    evaluate,
    masked_psnr,
    mse,
    psnr,
    render_triptych,
)
from lunar_restore.mosaic_io import read_image_u8

unit_images = arrays(np.float64, (6, 7), elements=st.floats(0, 1))


class TestClosedForms:
    @pytest.mark.parametrize("d,expected", [(0.1, 20.0), (0.01, 40.0), (0.5, 20 * math.log10(2)), (1.0, 0.0)])
    def test_constant_offset(self, d, expected):
        a = np.zeros((8, 8))
        assert psnr(a, a + d) == pytest.approx(expected, abs=1e-9)

    def test_identical_is_inf(self, rng):
        a = rng.random((5, 5))
        assert psnr(a, a) == math.inf

    def test_single_pixel_error(self):
        a = np.zeros((10, 10))
        b = a.copy()
        b[3, 3] = 1.0
        # MSE = 1/100 -> 20 dB
        assert psnr(a, b) == pytest.approx(20.0)
        assert mse(a, b) == pytest.approx(0.01)

    def test_masked(self):
        a = np.zeros((4, 4))
        b = a.copy()
        b[:, 0] = 0.1
        m = np.zeros((4, 4), bool)
        m[:, :2] = True
        # masked MSE is 0.01/2 over the 8 masked pixels
        assert masked_psnr(a, b, m) == pytest.approx(10 * math.log10(200))

    def test_masked_empty(self):
        with pytest.raises(ValidationError):
            masked_psnr(np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    @settings(max_examples=50)
    @given(unit_images, unit_images)
    def test_symmetric(self, a, b):
        assert psnr(a, b) == psnr(b, a)

    @settings(max_examples=50)
    @given(unit_images, st.floats(0.01, 0.5), st.floats(1.01, 1.9))
    def test_monotone_in_error(self, a, d, k):
        assert psnr(a, a + d * k) < psnr(a, a + d)


def test_aggregate_recomputes():
    recs = [
        EvalRecord(0, 10.0, 20.0, 15.0, 0.01, 5.0, 19.0, 14.0, 0.02),
        EvalRecord(1, 12.0, 11.0, None, 0.08, None, 11.0, None, 0.0),
    ]
    agg = aggregate(recs)
    assert agg["n"] == 2
    assert agg["mean_psnr_restored_dB"] == 15.5
    assert agg["mean_masked_psnr_restored_dB"] == 15.0
    assert agg["fraction_improved"] == 0.5


def test_report_json_inf(tmp_path):
    rep = EvalReport("test", "x", True, [EvalRecord(0, 10.0, math.inf, math.inf, 0.0, 5.0, 30.0, 25.0, 0.01)])
    rep.recompute().save_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["records"][0]["psnr_restored_dB"] == "inf"
    rep.save_csv(tmp_path / "r.csv")
    assert "inf" in (tmp_path / "r.csv").read_text().splitlines()[1]


class TestEvaluate:
    def test_identity_stub(self, small_dataset):
        rep = evaluate("stub:identity", small_dataset, "test")
        assert rep.checkpoint_id == "stub:identity" and len(rep.records) == 3
        for r in rep.records:
            assert r.psnr_restored_dB == r.psnr_corrupted_dB

    def test_constant_stub_uncomposited(self, small_dataset):
        rep = evaluate("stub:constant:0.5", small_dataset, "val", composite=False)
        assert all(r.psnr_restored_dB == r.psnr_raw_dB for r in rep.records)

    def test_triptychs(self, small_dataset, tmp_path):
        evaluate("stub:identity", small_dataset, "val", triptych_dir=str(tmp_path / "t"))
        img = read_image_u8(tmp_path / "t" / f"{small_dataset.split_samples('val')[0].id:06d}.png")
        assert img.shape[1] == 3 * 32 + 8


def test_triptych_layout(tmp_path, rng):
    a, b, c = rng.random((64, 64)), rng.random((64, 64)), rng.random((64, 64))
    render_triptych(a, b, c, 12.5, math.inf, tmp_path / "t.png")
    img = read_image_u8(tmp_path / "t.png")
    assert img.shape[1] == 200 and img.shape[0] > 64
    assert np.array_equal(img[:64, 68:132], np.floor(b * 255 + 0.5).astype(np.uint8))
    assert (img[:64, 64:68] == 255).all()
