"""Series container, on-disk format, scaling, sampling and synthesis."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adepinn.data import (FormatError, SampleBatch, ScaleRecord, SynthSpec,
                          VoxelSeries, _rle_decode, _rle_encode,
                          field_to_frame, frame_to_field, generate_synthetic,
                          load_voxel_series, nondimensionalize,
                          nondimensionalize_coefficients, normalize_intensity,
                          prepare_batch, redimensionalize, sample_points,
                          save_voxel_series, series_grid)
from adepinn.fdsolver import Grid, gaussian_on_grid


def tiny_series(n_frames=2, nx=4, ny=4, nz=1, seed=7) -> VoxelSeries:
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0.5, 2.0, size=(n_frames, nz, ny, nx))
    return VoxelSeries((nx, ny, nz), (0.5, 0.5, 1.0),
                       np.arange(n_frames, dtype=float),
                       frames, np.ones((nz, ny, nx), dtype=bool))


def line_series(n=64, n_frames=3, spacing=0.1) -> VoxelSeries:
    rng = np.random.default_rng(3)
    frames = rng.uniform(0.0, 4.0, size=(n_frames, 1, 1, n))
    return VoxelSeries((n, 1, 1), (spacing, 1.0, 1.0),
                       10.0 + 5.0 * np.arange(n_frames),
                       frames, np.ones((1, 1, n), dtype=bool))


# -- container invariants --------------------------------------------------

def test_series_validation_rejects_each_broken_invariant():
    good = tiny_series()
    with pytest.raises(FormatError, match="increasing"):
        VoxelSeries(good.dims, good.spacing_mm, [1.0, 1.0], good.frames, good.roi_mask)
    with pytest.raises(FormatError, match="shape"):
        VoxelSeries((5, 4, 1), good.spacing_mm, good.timestamps_s,
                    good.frames, good.roi_mask)
    with pytest.raises(FormatError, match="negative"):
        VoxelSeries(good.dims, good.spacing_mm, good.timestamps_s,
                    -good.frames, good.roi_mask)
    with pytest.raises(FormatError, match="empty"):
        VoxelSeries(good.dims, good.spacing_mm, good.timestamps_s,
                    good.frames, np.zeros_like(good.roi_mask))
    with pytest.raises(FormatError, match="non-finite"):
        bad = good.frames.copy()
        bad[0, 0, 0, 0] = np.nan
        VoxelSeries(good.dims, good.spacing_mm, good.timestamps_s, bad, good.roi_mask)


def test_active_axes_and_extent():
    s = line_series(n=11, spacing=0.25)
    assert s.active_axes == [0]
    assert s.spatial_dim == 1
    assert s.extent_mm(0) == pytest.approx(2.5)
    cube = tiny_series(nx=3, ny=5, nz=2)
    assert cube.active_axes == [0, 1, 2]


def test_series_grid_uses_active_axes_only():
    g = series_grid(line_series(n=9, spacing=0.2))
    assert g.dims == (9,) and g.spacing_mm == (0.2,)
    with pytest.raises(FormatError):
        series_grid(VoxelSeries((1, 1, 1), (1, 1, 1), [0.0, 1.0],
                                np.ones((2, 1, 1, 1)), np.ones((1, 1, 1), bool)))


def test_frame_field_round_trip():
    s = tiny_series(nx=3, ny=4, nz=2)
    frame = s.frames[0]
    field = frame_to_field(s, frame)
    assert field.shape == (3, 4, 2)
    np.testing.assert_array_equal(field_to_frame(s.dims, field), frame)
    # Stored layout is [z][y][x]; the field is indexed [x][y][z].
    assert field[2, 1, 0] == frame[0, 1, 2]


# -- on-disk format --------------------------------------------------------

def test_save_load_round_trip_is_byte_exact(tmp_path):
    src = tiny_series()
    src.frames[:] = np.round(src.frames * 64) / 64  # exactly float32-representable
    src.roi_mask[0, 1, 2] = False
    path = save_voxel_series(src, tmp_path / "series")
    back = load_voxel_series(path)
    np.testing.assert_array_equal(back.frames, src.frames)
    np.testing.assert_array_equal(back.roi_mask, src.roi_mask)
    np.testing.assert_array_equal(back.timestamps_s, src.timestamps_s)
    assert back.dims == src.dims and back.spacing_mm == src.spacing_mm
    # loading by directory works too
    again = load_voxel_series(tmp_path / "series")
    np.testing.assert_array_equal(again.frames, back.frames)


def test_missing_manifest_is_its_own_error(tmp_path):
    with pytest.raises(FormatError, match="missing manifest"):
        load_voxel_series(tmp_path / "nowhere.json")


def test_bad_magic_is_rejected(tmp_path):
    p = save_voxel_series(tiny_series(), tmp_path)
    doc = json.loads(open(p).read())
    doc["magic"] = "ECSF9"
    open(p, "w").write(json.dumps(doc))
    with pytest.raises(FormatError, match="magic"):
        load_voxel_series(p)


def test_blob_size_mismatch_reports_both_sizes(tmp_path):
    p = save_voxel_series(tiny_series(), tmp_path)
    blob = os.path.join(tmp_path, "frames.f32")
    with open(blob, "ab") as fh:
        fh.write(b"\x00" * 4)
    with pytest.raises(FormatError, match="bytes"):
        load_voxel_series(p)


def test_missing_blob_is_its_own_error(tmp_path):
    p = save_voxel_series(tiny_series(), tmp_path)
    os.remove(os.path.join(tmp_path, "frames.f32"))
    with pytest.raises(FormatError, match="missing blob"):
        load_voxel_series(p)


def test_nonincreasing_timestamps_rejected_at_load(tmp_path):
    p = save_voxel_series(tiny_series(), tmp_path)
    doc = json.loads(open(p).read())
    doc["timestamps_s"] = [0.0, 0.0]
    open(p, "w").write(json.dumps(doc))
    with pytest.raises(FormatError, match="increasing"):
        load_voxel_series(p)


def test_manifest_must_be_json_with_all_keys(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text("{nope")
    with pytest.raises(FormatError, match="JSON"):
        load_voxel_series(p)
    good = save_voxel_series(tiny_series(), tmp_path / "s")
    doc = json.loads(open(good).read())
    del doc["roi"]
    open(good, "w").write(json.dumps(doc))
    with pytest.raises(FormatError, match="roi"):
        load_voxel_series(good)


def test_rle_conventions():
    assert _rle_encode(np.ones(5, dtype=bool)) == [0, 5]
    assert _rle_encode(np.zeros(4, dtype=bool)) == [4]
    assert _rle_encode(np.array([0, 1, 1, 0], dtype=bool)) == [1, 2, 1]
    np.testing.assert_array_equal(_rle_decode([1, 2, 1], 4),
                                  [False, True, True, False])
    with pytest.raises(FormatError, match="covers"):
        _rle_decode([2, 1], 4)
    with pytest.raises(FormatError, match="nonnegative"):
        _rle_decode([2, -1, 3], 4)
    with pytest.raises(FormatError):
        _rle_decode([], 0)


@given(st.lists(st.booleans(), min_size=1, max_size=200))
@settings(max_examples=100, deadline=None)
def test_rle_round_trip(bits):
    mask = np.asarray(bits, dtype=bool)
    np.testing.assert_array_equal(_rle_decode(_rle_encode(mask), mask.size), mask)


# -- scaling ---------------------------------------------------------------

def test_normalize_scales_roi_max_to_one():
    s = tiny_series()
    s.roi_mask[0, 0, 0] = False
    s.frames[0, 0, 0, 0] = 99.0  # outside the ROI: must not drive the scale
    scaled, c_s = normalize_intensity(s)
    assert c_s == pytest.approx(s.frames[:, s.roi_mask].max())
    assert scaled.frames[:, scaled.roi_mask].max() == pytest.approx(1.0)
    again, one = normalize_intensity(scaled)
    assert one == pytest.approx(1.0)


def test_normalize_rejects_empty_signal():
    s = tiny_series()
    s.frames[:] = 0.0
    with pytest.raises(FormatError, match="normalize"):
        normalize_intensity(s)


def test_nondimensionalize_uses_largest_extent_and_time_span():
    s = tiny_series(n_frames=3, nx=4, ny=8, nz=1)  # extents 1.5 and 3.5 mm
    sc = nondimensionalize(s, c_s=2.0)
    assert sc.X_s_mm == pytest.approx(3.5)
    assert sc.T_s_s == pytest.approx(2.0)
    assert sc.t0_s == pytest.approx(0.0)
    assert sc.C_s == pytest.approx(2.0)


def test_redimensionalize_reference_case():
    # A run in unit boxes over a 10 mm extent and a 3-hour span: a scaled
    # diffusion of 0.0135 maps back to 1.25e-4 mm^2/s.
    sc = ScaleRecord(10.0, 10800.0)
    d_phys, v_phys = redimensionalize(0.0135, [0.054], sc)
    assert d_phys == pytest.approx(0.0135 * 100.0 / 10800.0, rel=1e-12)
    assert d_phys == pytest.approx(1.25e-4, rel=1e-12)
    assert v_phys[0] == pytest.approx(0.054 * 10.0 / 10800.0, rel=1e-12)


@given(st.floats(min_value=1e-6, max_value=1e4),
       st.floats(min_value=1e-3, max_value=1e5),
       st.floats(min_value=1e-8, max_value=10.0),
       st.floats(min_value=-10.0, max_value=10.0))
@settings(max_examples=100, deadline=None)
def test_scaling_round_trips_to_identity(x_s, t_s, d, v):
    sc = ScaleRecord(x_s, t_s)
    d_hat, v_hat = nondimensionalize_coefficients(d, [v], sc)
    d_back, v_back = redimensionalize(d_hat, v_hat, sc)
    assert d_back == pytest.approx(d, rel=1e-12, abs=0.0)
    assert v_back[0] == pytest.approx(v, rel=1e-12, abs=1e-300)


def test_scale_record_validation_and_dict_round_trip():
    with pytest.raises(FormatError):
        ScaleRecord(0.0, 1.0)
    with pytest.raises(FormatError):
        ScaleRecord(1.0, -2.0)
    sc = ScaleRecord(2.0, 3.0, 4.0, 5.0)
    assert ScaleRecord.from_dict(sc.to_dict()) == sc
    assert ScaleRecord.from_dict({"X_s_mm": 1, "T_s_s": 1}) == ScaleRecord.identity()


# -- sampling --------------------------------------------------------------

def test_sampled_points_sit_on_roi_voxels_with_verbatim_values():
    s = line_series(n=64, n_frames=3, spacing=0.1)
    s.roi_mask[0, 0, :10] = False
    batch = sample_points(s, 20, 25, seed=5)
    assert batch.collocation.shape == (60, 2)
    assert batch.data_points.shape == (75, 2)
    assert batch.data_values.shape == (75,)
    sc = batch.scale
    for kind, pts in (("colloc", batch.collocation), ("data", batch.data_points)):
        ix = np.rint(pts[:, 0] * sc.X_s_mm / s.spacing_mm[0]).astype(int)
        np.testing.assert_allclose(ix * s.spacing_mm[0] / sc.X_s_mm, pts[:, 0],
                                   atol=1e-12, err_msg=kind)
        assert np.all(s.roi_mask[0, 0, ix]), kind
    # times are the scaled frame timestamps, k per frame in order
    t_hat = (s.timestamps_s - sc.t0_s) / sc.T_s_s
    np.testing.assert_allclose(batch.collocation[:, 1], np.repeat(t_hat, 20))
    np.testing.assert_allclose(batch.data_points[:, 1], np.repeat(t_hat, 25))
    # data values are read straight out of the frames
    for f in range(3):
        rows = slice(f * 25, (f + 1) * 25)
        ix = np.rint(batch.data_points[rows, 0] * sc.X_s_mm / s.spacing_mm[0]).astype(int)
        np.testing.assert_array_equal(batch.data_values[rows], s.frames[f, 0, 0, ix])


def test_sampling_is_deterministic_per_seed():
    s = line_series()
    a = sample_points(s, 8, 8, seed=11)
    b = sample_points(s, 8, 8, seed=11)
    c = sample_points(s, 8, 8, seed=12)
    np.testing.assert_array_equal(a.collocation, b.collocation)
    np.testing.assert_array_equal(a.data_values, b.data_values)
    assert not np.array_equal(a.collocation, c.collocation)


def test_full_roi_draw_is_a_permutation():
    s = line_series(n=32)
    batch = sample_points(s, 32, 32, seed=0)
    sc = batch.scale
    first = batch.collocation[:32]
    ix = np.rint(first[:, 0] * sc.X_s_mm / s.spacing_mm[0]).astype(int)
    assert sorted(ix) == list(range(32))


def test_oversampling_needs_replacement():
    s = line_series(n=16)
    with pytest.raises(FormatError, match="replacement"):
        sample_points(s, 20, 4, seed=0)
    batch = sample_points(s, 50, 4, seed=0, with_replacement=True)
    assert batch.collocation.shape[0] == 150


def test_sampling_is_uniform_over_the_roi():
    s = line_series(n=40, n_frames=2)
    s.frames[:] = np.arange(40, dtype=float)  # value == voxel index
    k = 50000
    batch = sample_points(s, 1, k, seed=9, with_replacement=True)
    target = np.arange(40).mean()
    se = np.arange(40).std() / np.sqrt(2 * k)
    assert abs(batch.data_values.mean() - target) < 3 * se


def test_sample_counts_validated():
    with pytest.raises(FormatError):
        sample_points(line_series(), 0, 5, seed=0)


def test_prepare_batch_normalizes_then_samples():
    s = line_series()
    batch, normalized = prepare_batch(s, 6, 6, seed=4)
    assert batch.scale.C_s == pytest.approx(s.frames[:, s.roi_mask].max())
    assert normalized.frames.max() == pytest.approx(1.0)
    assert batch.data_values.max() <= 1.0
    assert batch.spatial_dim == 1 and batch.n_frames == 3


# -- synthetic generation --------------------------------------------------

def test_synth_spec_from_dict_and_minute_conversion():
    doc = {"dim": 1, "shape": [33], "spacing_mm": [0.1], "d_mm2_s": 1e-3,
           "v_mm_s": [0.2], "x0_mm": [1.0], "frame_times_min": [1.0, 2.0]}
    spec = SynthSpec.from_dict(doc)
    assert spec.frame_times_s == [60.0, 120.0]
    with pytest.raises(FormatError, match="not both"):
        SynthSpec.from_dict({**doc, "frame_times_s": [1.0, 2.0]})
    with pytest.raises(FormatError, match="unknown"):
        SynthSpec.from_dict({**doc, "extra": 1})
    with pytest.raises(FormatError, match="missing"):
        SynthSpec.from_dict({"dim": 1})


def test_synth_spec_validation():
    base = dict(dim=1, shape=[33], spacing_mm=[0.1], d_mm2_s=1e-3,
                v_mm_s=[0.2], x0_mm=[1.0], frame_times_s=[1.0, 2.0])
    with pytest.raises(FormatError):
        SynthSpec(**{**base, "dim": 4, "shape": [3, 3, 3, 3]})
    with pytest.raises(FormatError):
        SynthSpec(**{**base, "shape": [33, 33]})
    with pytest.raises(FormatError):
        SynthSpec(**{**base, "sigma": -0.1})
    with pytest.raises(FormatError):
        SynthSpec(**{**base, "generator": "magic"})
    with pytest.raises(FormatError, match="fd_dt_s"):
        SynthSpec(**{**base, "generator": "fd"})
    with pytest.raises(FormatError, match="positive"):
        SynthSpec(**{**base, "t_offset_s": -1.0})


def test_noiseless_frames_equal_the_closed_form_exactly():
    spec = SynthSpec(dim=1, shape=[41], spacing_mm=[0.05], d_mm2_s=2e-3,
                     v_mm_s=[0.3], x0_mm=[0.5], frame_times_s=[0.5, 1.0, 1.5],
                     t_offset_s=0.5)
    series, truth = generate_synthetic(spec)
    grid = Grid((41,), (0.05,))
    for i, t in enumerate(spec.frame_times_s):
        expect = gaussian_on_grid(grid, t, 2e-3, [0.3], [0.5], 0.5)
        np.testing.assert_array_equal(frame_to_field(series, series.frames[i]), expect)
    assert truth["D"] == 2e-3 and truth["v"] == [0.3] and truth["t_offset"] == 0.5


def test_noise_has_the_requested_scale_and_never_goes_negative():
    spec = SynthSpec(dim=1, shape=[4001], spacing_mm=[2.0 / 4000], d_mm2_s=1e-3,
                     v_mm_s=[0.0], x0_mm=[1.0], frame_times_s=[1.0, 2.0],
                     t_offset_s=10.0, sigma=0.02, seed=3)
    noisy, _ = generate_synthetic(spec)
    clean, _ = generate_synthetic(SynthSpec(**{**spec.__dict__, "sigma": 0.0}))
    assert np.all(noisy.frames >= 0.0)
    # Away from the clipping region the additive part is zero-mean with std sigma.
    strong = clean.frames > 0.5
    delta = (noisy.frames - clean.frames)[strong]
    assert delta.std() == pytest.approx(0.02, rel=0.15)
    assert abs(delta.mean()) < 0.02


def test_same_seed_reproduces_the_noise():
    spec = SynthSpec(dim=1, shape=[64], spacing_mm=[0.05], d_mm2_s=1e-3,
                     v_mm_s=[0.1], x0_mm=[1.5], frame_times_s=[1.0, 2.0],
                     t_offset_s=5.0, sigma=0.05, seed=8)
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    np.testing.assert_array_equal(a.frames, b.frames)


def test_fd_generator_matches_analytic_on_a_fine_grid():
    base = dict(dim=1, shape=[201], spacing_mm=[1.0 / 200], d_mm2_s=1e-3,
                v_mm_s=[0.1], x0_mm=[0.4], frame_times_s=[0.1, 0.2],
                t_offset_s=1.0)
    ana, _ = generate_synthetic(SynthSpec(**base))
    fd, _ = generate_synthetic(SynthSpec(**base, generator="fd", fd_dt_s=1e-5))
    np.testing.assert_array_equal(fd.frames[0], ana.frames[0])  # shared start
    # First-order upwind adds v*dx/2 of numerical diffusion (25% of D here),
    # so expect percent-level agreement, not machine precision.
    err = np.max(np.abs(fd.frames[1] - ana.frames[1]))
    assert err < 2e-2 * ana.frames[1].max()


def test_fd_generator_requires_dt_dividing_the_intervals():
    with pytest.raises(FormatError, match="divide"):
        generate_synthetic(SynthSpec(
            dim=1, shape=[33], spacing_mm=[0.1], d_mm2_s=1e-3, v_mm_s=[0.0],
            x0_mm=[1.6], frame_times_s=[0.0, 1.0], t_offset_s=1.0,
            generator="fd", fd_dt_s=0.3))


def test_two_dimensional_synthesis_round_trips_through_disk(tmp_path):
    spec = SynthSpec(dim=2, shape=[17, 13], spacing_mm=[0.1, 0.1], d_mm2_s=1e-3,
                     v_mm_s=[0.1, -0.1], x0_mm=[0.8, 0.6],
                     frame_times_s=[0.5, 1.0], t_offset_s=2.0)
    series, _ = generate_synthetic(spec)
    assert series.dims == (17, 13, 1)
    assert series.spatial_dim == 2
    path = save_voxel_series(series, tmp_path)
    back = load_voxel_series(path)
    np.testing.assert_allclose(back.frames, series.frames, atol=1e-7)
