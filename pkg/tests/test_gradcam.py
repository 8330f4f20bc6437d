import numpy as np
import pytest
from PIL import Image

from kanlab.gradcam import (Heatmap, colormap, export_csv, gradcam, overlay_array, overlay_export,
                            upsample)
from kanlab.models import BackboneConfig, Model, ModelSpec

VARIANTS = ("SBTAYLOR", "SBRBF", "SBWAVELET")


def spec(variant, hw=(16, 16)):
    return ModelSpec(variant=variant, backbone=BackboneConfig(3, 4, 4, 3, 2, hw), hidden=(6, 6),
                     num_classes=3)


@pytest.mark.parametrize("variant", VARIANTS)
def test_map_range(variant, rng):
    m = Model(spec(variant), seed=1)
    for c in range(3):
        hm = gradcam(m, rng.random((1, 3, 16, 16), dtype=np.float32), c)
        assert hm.values.shape == (8, 8) and hm.upsampled.shape == (16, 16)
        assert hm.values.min() >= 0 and hm.values.max() <= 1
        assert hm.flat or hm.values.max() == pytest.approx(1.0)
        assert hm.upsampled.min() >= 0 and hm.upsampled.max() <= 1 + 1e-12


def test_flat_map_for_image_blind_model(rng):
    m = Model(spec("SBRBF"), seed=0)
    for conv in (m.conv1, m.conv2):
        conv.weight.data[...] = 0
        conv.bias.data[...] = 0
    hm = gradcam(m, rng.random((1, 3, 16, 16), dtype=np.float32), 0)
    assert hm.flat and np.all(hm.values == 0)


def test_default_class_is_argmax(rng):
    m = Model(spec("SBTAYLOR"), seed=2)
    x = rng.random((1, 3, 16, 16), dtype=np.float32)
    m.eval()
    assert gradcam(m, x).target_class == int(np.argmax(m(x).data[0]))


def test_class_out_of_range(rng):
    m = Model(spec("SBTAYLOR"))
    with pytest.raises(IndexError):
        gradcam(m, rng.random((1, 3, 16, 16), dtype=np.float32), 3)


def test_three_dim_input_accepted(rng):
    m = Model(spec("SBTAYLOR"))
    assert gradcam(m, rng.random((3, 16, 16), dtype=np.float32), 0).values.shape == (8, 8)


def test_leaves_no_gradients(rng):
    m = Model(spec("SBRBF"))
    gradcam(m, rng.random((1, 3, 16, 16), dtype=np.float32), 1)
    assert all(p.grad is None for p in m.parameters())


@pytest.mark.parametrize("variant", VARIANTS)
def test_invariant_to_target_bias_shift(variant, rng):
    m = Model(spec(variant), seed=3).astype(np.float64)
    x = rng.random((1, 3, 16, 16))
    before = gradcam(m, x, 1)
    last = m.kan[-1]
    if variant == "SBWAVELET":
        last.bn_bias.data[1] += 2.5
    else:
        # these KAN layers carry no bias, so add the constant to the target logit directly
        orig_head = m.head

        def shifted_head(x, _orig=orig_head):
            return _orig(x) + np.array([0.0, 2.5, 0.0])

        m.head = shifted_head
    after = gradcam(m, x, 1)
    np.testing.assert_allclose(after.values, before.values, atol=1e-6)


def test_upsample_grid_points(rng):
    v = rng.random((4, 5))
    up = upsample(v, (13, 17))
    np.testing.assert_allclose(up[::4, ::4], v, atol=1e-12)
    assert up.shape == (13, 17)


def test_upsample_constant():
    np.testing.assert_allclose(upsample(np.full((3, 3), 0.4), (10, 10)), 0.4)


def test_colormap_shape_and_ends():
    cm = colormap()
    assert cm.shape == (256, 3) and cm.dtype == np.uint8
    assert cm[0].tolist() == [0, 0, 255] and cm[255].tolist() == [255, 0, 0]


def test_zero_heatmap_overlay(rng):
    img = rng.random((3, 8, 8))
    hm = Heatmap(np.zeros((4, 4)), np.zeros((8, 8)), 0, True)
    out = overlay_array(hm, img)
    gray = img.mean(axis=0) * 255
    expected = np.stack([0.5 * gray, 0.5 * gray, 0.5 * gray + 127.5], axis=-1)
    np.testing.assert_array_equal(out, np.floor(expected + 0.5).astype(np.uint8))


def test_overlay_size_mismatch():
    hm = Heatmap(np.zeros((2, 2)), np.zeros((4, 4)), 0)
    with pytest.raises(ValueError):
        overlay_array(hm, np.zeros((3, 5, 5)))


def test_export_png_deterministic(tmp_path, rng):
    m = Model(spec("SBTAYLOR", hw=(64, 64)), seed=4)
    x = rng.random((1, 3, 64, 64), dtype=np.float32)
    hm = gradcam(m, x, 0)
    overlay_export(hm, x, tmp_path / "a.png")
    overlay_export(hm, x, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    with Image.open(tmp_path / "a.png") as im:
        assert im.size == (64, 64) and im.mode == "RGB"


def test_export_errors_name_path(tmp_path):
    hm = Heatmap(np.zeros((2, 2)), np.zeros((4, 4)), 0)
    bad = tmp_path / "missing" / "x.png"
    with pytest.raises(OSError, match="missing"):
        overlay_export(hm, np.zeros((3, 4, 4)), bad)


def test_export_csv(tmp_path):
    hm = Heatmap(np.array([[0.0, 0.5], [1.0, 0.25]]), np.zeros((4, 4)), 0)
    export_csv(hm, tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows == ["0.0,0.5", "1.0,0.25"]
