import numpy as np
import pytest

from ahmsa.errors import ValidationError
from ahmsa.optflow import (
    FlowField,
    LandmarkSet,
    TVL1Params,
    assemble_flow_map,
    compose_regions,
    extract_feature_map,
    optical_strain,
    read_flow_map,
    read_pgm,
    stack_flow_channels,
    standardize_channels,
    tvl1_flow,
    write_flow_map,
    write_pgm,
)


def smooth_texture(seed: int, n: int = 64, sigma: float = 2.5) -> np.ndarray:
    """Band-limited periodic texture; Fourier shifts of it are exact."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, n))
    ky = np.fft.fftfreq(n)[:, None]
    kx = np.fft.fftfreq(n)[None, :]
    envelope = np.exp(-(kx ** 2 + ky ** 2) * (2 * np.pi * sigma) ** 2 / 2)
    tex = np.real(np.fft.ifft2(np.fft.fft2(noise) * envelope))
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return 0.1 + 0.8 * tex


def fourier_shift(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Exact wrap-around shift of a periodic image."""
    n, m = img.shape
    ky = np.fft.fftfreq(n)[:, None]
    kx = np.fft.fftfreq(m)[None, :]
    shifted = np.fft.ifft2(np.fft.fft2(img) * np.exp(-2j * np.pi * (ky * dy + kx * dx)))
    return np.clip(np.real(shifted), 0.0, 1.0)


CENTRAL = slice(8, 56)  # central 75% of a 64x64 frame


# -- tvl1_flow -----------------------------------------------------------------


def test_tvl1_identical_frames_zero_flow():
    tex = smooth_texture(42)
    flow = tvl1_flow(tex, tex)
    assert max(np.abs(flow.u).max(), np.abs(flow.v).max()) < 0.05


def test_tvl1_recovers_integer_shift_x():
    tex = smooth_texture(42)
    apex = fourier_shift(tex, 0.0, 2.0)
    flow = tvl1_flow(tex, apex)
    assert abs(np.median(flow.u[CENTRAL, CENTRAL]) - 2.0) < 0.25
    assert abs(np.median(flow.v[CENTRAL, CENTRAL])) < 0.25


def test_tvl1_recovers_integer_shift_y():
    tex = smooth_texture(42)
    apex = fourier_shift(tex, -1.0, 0.0)
    flow = tvl1_flow(tex, apex)
    assert abs(np.median(flow.v[CENTRAL, CENTRAL]) + 1.0) < 0.25


@pytest.mark.parametrize("dx,dy", [(0.5, 0.0), (1.5, -2.5), (-3.0, 1.0), (0.3, 0.7)])
def test_tvl1_subpixel_shift_endpoint_error(dx, dy):
    tex = smooth_texture(7)
    apex = fourier_shift(tex, dy, dx)
    flow = tvl1_flow(tex, apex)
    epe = np.hypot(flow.u[CENTRAL, CENTRAL] - dx, flow.v[CENTRAL, CENTRAL] - dy)
    assert np.median(epe) < 0.3


def test_tvl1_constant_images_give_zero_flow():
    img = np.full((32, 32), 0.5)
    flow = tvl1_flow(img, img)
    np.testing.assert_allclose(flow.u, 0.0, atol=1e-9)
    np.testing.assert_allclose(flow.v, 0.0, atol=1e-9)


def test_tvl1_dim_mismatch():
    with pytest.raises(ValidationError):
        tvl1_flow(np.zeros((32, 32)), np.zeros((32, 48)))


def test_tvl1_too_small():
    with pytest.raises(ValidationError):
        tvl1_flow(np.zeros((8, 8)), np.zeros((8, 8)))


def test_tvl1_deterministic():
    tex = smooth_texture(3)
    apex = fourier_shift(tex, 1.0, -1.0)
    a = tvl1_flow(tex, apex)
    b = tvl1_flow(tex, apex)
    assert a.u.tobytes() == b.u.tobytes()
    assert a.v.tobytes() == b.v.tobytes()


def test_tvl1_param_validation():
    with pytest.raises(ValidationError, match="stability"):
        TVL1Params(tau=0.5, theta=0.3)
    with pytest.raises(ValidationError):
        TVL1Params(pyramid_scale=1.5)


# -- optical_strain ---------------------------------------------------------------


def test_strain_of_constant_flow_is_zero():
    flow = FlowField(u=np.full((10, 12), 3.7), v=np.full((10, 12), -1.2))
    strain = optical_strain(flow)
    assert np.abs(strain).max() < 1e-12


def test_strain_unit_stretch():
    yy, xx = np.meshgrid(np.arange(9.0), np.arange(9.0), indexing="ij")
    flow = FlowField(u=xx.copy(), v=np.zeros_like(xx))
    strain = optical_strain(flow)
    np.testing.assert_allclose(strain[1:-1, 1:-1], 1.0, atol=1e-6)


def test_strain_pure_shear_is_sqrt2():
    yy, xx = np.meshgrid(np.arange(9.0), np.arange(9.0), indexing="ij")
    flow = FlowField(u=yy.copy(), v=xx.copy())
    strain = optical_strain(flow)
    np.testing.assert_allclose(strain[1:-1, 1:-1], np.sqrt(2.0), atol=1e-6)


def test_strain_translation_invariance():
    rng = np.random.default_rng(5)
    u = rng.standard_normal((12, 12))
    v = rng.standard_normal((12, 12))
    base = optical_strain(FlowField(u=u, v=v))
    shifted = optical_strain(FlowField(u=u + 10.0, v=v - 4.0))
    np.testing.assert_allclose(base, shifted, atol=1e-10)


def test_strain_nonnegative():
    rng = np.random.default_rng(6)
    strain = optical_strain(FlowField(u=rng.standard_normal((8, 8)),
                                      v=rng.standard_normal((8, 8))))
    assert np.all(strain >= 0.0)


def test_strain_rejects_tiny_fields():
    with pytest.raises(ValidationError):
        optical_strain(FlowField(u=np.zeros((2, 5)), v=np.zeros((2, 5))))


# -- assemble_flow_map ---------------------------------------------------------------


def test_assemble_zero_flow_gives_zero_map():
    flow = FlowField(u=np.zeros((40, 40)), v=np.zeros((40, 40)))
    out = assemble_flow_map(flow, np.zeros((40, 40)))
    assert out.shape == (28, 28, 3)
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("dims", [(30, 30), (64, 48), (28, 28)])
def test_assemble_output_shape_contract(dims):
    rng = np.random.default_rng(1)
    flow = FlowField(u=rng.standard_normal(dims), v=rng.standard_normal(dims))
    out = assemble_flow_map(flow, np.abs(rng.standard_normal(dims)))
    assert out.shape == (28, 28, 3)
    assert np.all(np.isfinite(out))


def test_assemble_standardization_moments():
    rng = np.random.default_rng(2)
    flow = FlowField(u=rng.standard_normal((40, 40)) * 3 + 1,
                     v=rng.standard_normal((40, 40)) * 0.5 - 2)
    out = assemble_flow_map(flow, np.abs(rng.standard_normal((40, 40))))
    for c in range(3):
        assert abs(out[:, :, c].mean()) < 1e-5
        assert abs(out[:, :, c].var() - 1.0) < 1e-4


def test_assemble_norm_none_keeps_values():
    flow = FlowField(u=np.full((28, 28), 2.0), v=np.zeros((28, 28)))
    out = assemble_flow_map(flow, np.zeros((28, 28)), norm="none")
    np.testing.assert_allclose(out[:, :, 0], 2.0)


# -- compose_regions ------------------------------------------------------------------


def _landmarks_all_at(x, y):
    return LandmarkSet(left_eye=(x, y), right_eye=(x, y), nose=(x, y),
                       left_lip=(x, y), right_lip=(x, y))


def test_compose_identical_regions_tile():
    rng = np.random.default_rng(3)
    full = rng.standard_normal((64, 64, 3))
    out = compose_regions(full, _landmarks_all_at(32, 32), region_px=28)
    assert out.shape == (28, 28, 3)
    np.testing.assert_array_equal(out[:14, :14], out[:14, 14:])
    np.testing.assert_array_equal(out[:14, :14], out[14:, :14])
    np.testing.assert_array_equal(out[:14, :14], out[14:, 14:])


def test_compose_clamps_near_border():
    rng = np.random.default_rng(4)
    full = rng.standard_normal((40, 40, 3))
    lm = LandmarkSet(left_eye=(1, 1), right_eye=(39, 1), nose=(20, 20),
                     left_lip=(1, 39), right_lip=(39, 39))
    out = compose_regions(full, lm, region_px=28)
    assert out.shape == (28, 28, 3)
    assert np.all(np.isfinite(out))
    # clamped left-eye window is exactly the top-left 28x28 corner
    from ahmsa.optflow import _resize_bilinear
    np.testing.assert_allclose(out[:14, :14],
                               _resize_bilinear(full[:28, :28, :], 14, 14))


def test_compose_hot_pixel_stays_in_left_eye_quadrant():
    full = np.zeros((64, 64, 3))
    full[20, 16, 0] = 100.0
    lm = LandmarkSet(left_eye=(16, 20), right_eye=(48, 20), nose=(32, 32),
                     left_lip=(16, 48), right_lip=(48, 48))
    out = compose_regions(full, lm, region_px=16)
    assert out[:14, :14, 0].max() > 0.0
    assert out[:14, 14:, 0].max() == 0.0
    assert out[14:, :, 0].max() == 0.0


def test_compose_rejects_out_of_bounds_landmark():
    full = np.zeros((32, 32, 3))
    lm = LandmarkSet(left_eye=(10, 10), right_eye=(40, 10), nose=(16, 16),
                     left_lip=(10, 25), right_lip=(25, 25))
    with pytest.raises(ValidationError, match="right_eye"):
        compose_regions(full, lm, region_px=16)


def test_compose_nose_overlay_changes_center_only():
    rng = np.random.default_rng(8)
    full = rng.standard_normal((64, 64, 3))
    lm = LandmarkSet(left_eye=(16, 16), right_eye=(48, 16), nose=(32, 32),
                     left_lip=(16, 48), right_lip=(48, 48))
    plain = compose_regions(full, lm, region_px=16)
    overlaid = compose_regions(full, lm, region_px=16, include_nose=True)
    diff = np.abs(plain - overlaid).sum(axis=2)
    assert diff[7:21, 7:21].max() > 0.0
    assert diff[:7, :].max() == 0.0 and diff[21:, :].max() == 0.0
    assert diff[:, :7].max() == 0.0 and diff[:, 21:].max() == 0.0


# -- extract_feature_map ----------------------------------------------------------------


def test_extract_feature_map_end_to_end():
    tex = smooth_texture(11)
    apex = fourier_shift(tex, 0.0, 1.5)
    lm = LandmarkSet(left_eye=(19, 22), right_eye=(45, 22), nose=(32, 35),
                     left_lip=(22, 48), right_lip=(42, 48))
    out = extract_feature_map(tex, apex, lm)
    assert out.shape == (28, 28, 3)
    assert np.all(np.isfinite(out))


# -- file formats --------------------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    img = rng.integers(0, 256, (24, 31)).astype(np.float64) / 255.0
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    np.testing.assert_allclose(back, img, atol=1e-12)


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    payload = bytes(range(16))
    path.write_bytes(b"P5\n# a comment\n4 4\n255\n" + payload)
    img = read_pgm(path)
    assert img.shape == (4, 4)
    np.testing.assert_allclose(img[0, 1], 1.0 / 255.0)


def test_pgm_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n2 2\n255\n1 2 3 4\n")
    with pytest.raises(ValidationError):
        read_pgm(path)


def test_flow_map_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    fmap = rng.standard_normal((28, 28, 3)).astype(np.float32)
    path = tmp_path / "a.flow"
    write_flow_map(path, fmap)
    back = read_flow_map(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, fmap)


def test_flow_map_header_layout(tmp_path):
    path = tmp_path / "h.flow"
    write_flow_map(path, np.zeros((5, 7, 3), dtype=np.float32))
    raw = path.read_bytes()
    assert raw[:4] == b"AHMS"
    assert raw[4] == 1
    assert raw[5:8] == b"\x00\x00\x00"
    assert int.from_bytes(raw[8:12], "little") == 5
    assert int.from_bytes(raw[12:16], "little") == 7
    assert len(raw) == 16 + 5 * 7 * 3 * 4


def test_flow_map_rejects_corrupt(tmp_path):
    path = tmp_path / "bad.flow"
    path.write_bytes(b"AHMS" + b"\x01\x00\x00\x00" + b"\x00" * 8)
    with pytest.raises(ValidationError):
        read_flow_map(path)
    path.write_bytes(b"XXXX" + b"\x00" * 12)
    with pytest.raises(ValidationError):
        read_flow_map(path)


def test_standardize_channels_zero_variance_fallback():
    fmap = np.ones((5, 5, 3))
    fmap[:, :, 1] = np.arange(25.0).reshape(5, 5)
    out = standardize_channels(fmap)
    np.testing.assert_array_equal(out[:, :, 0], 0.0)
    assert abs(out[:, :, 1].mean()) < 1e-12
