import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mambatrack import numerics as nx
from mambatrack.events import (BBox, Event, EventStream, FormatError, crop_patch, event_density, patch_embed,
                               read_events, read_frames, read_groundtruth, voxelize, write_events, write_frames,
                               write_groundtruth)
from mambatrack.numerics import Tensor


def random_stream(rng, n, H=12, W=10, t_max=1000):
    t = np.sort(rng.integers(0, t_max, n))
    return EventStream(rng.integers(0, W, n), rng.integers(0, H, n), t, rng.choice([-1, 1], n), H, W)


def naive_surface(events, t_ref, dt, H, W):
    grid = np.zeros((H, W))
    count = 0
    for e in events:
        w = max(0.0, 1.0 - abs(t_ref - e.t) / dt)
        if w > 0:
            grid[e.y, e.x] += e.p * w
            count += 1
    return grid, count


def test_empty_stream_gives_zero_surface():
    s = voxelize(EventStream.empty(10, 10), 500, 100)
    assert not s.grid.any() and s.density == 0.0 and s.contributing_count == 0


def test_single_event_at_reference_time():
    s = voxelize(EventStream.from_events([Event(3, 4, 1000, 1)], 8, 8), 1000, 200)
    expected = np.zeros((8, 8))
    expected[4, 3] = 1.0
    np.testing.assert_array_equal(s.grid, expected)


def test_half_window_negative_event():
    s = voxelize(EventStream.from_events([Event(1, 1, 900, -1)], 4, 4), 1000, 200)
    assert s.grid[1, 1] == -0.5


def test_event_at_window_edge_excluded():
    stream = EventStream.from_events([Event(0, 0, 800, 1), Event(2, 0, 1000, 1), Event(1, 0, 1200, 1)], 4, 4)
    s = voxelize(stream, 1000, 200)
    assert s.contributing_count == 1
    assert s.grid[0, 0] == 0.0 and s.grid[0, 1] == 0.0


def test_nonpositive_window_rejected():
    with pytest.raises(ValueError):
        voxelize(EventStream.empty(4, 4), 0, 0)


def test_density_examples():
    assert event_density(voxelize(EventStream.empty(10, 10), 0, 10)) == 0.0
    ev = [Event(i % 10, i // 10, 50, 1) for i in range(25)]
    assert voxelize(EventStream.from_events(ev, 10, 10), 50, 10).density == 0.25
    ev = [Event(x, y, 7, -1) for y in range(3) for x in range(5)]
    assert voxelize(EventStream.from_events(ev, 3, 5), 7, 1).density == 1.0


def test_voxelize_matches_per_event_loop():
    rng = np.random.default_rng(5)
    stream = random_stream(rng, 300)
    s = voxelize(stream, 500, 150)
    grid, count = naive_surface(list(stream), 500, 150, 12, 10)
    np.testing.assert_allclose(s.grid, grid, atol=1e-12)
    assert s.contributing_count == count


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 200), st.integers(0, 200))
def test_voxelize_is_linear_in_streams(seed, n1, n2):
    rng = np.random.default_rng(seed)
    a, b = random_stream(rng, n1), random_stream(rng, n2)
    whole = voxelize(a.concat(b), 480, 120)
    parts = (voxelize(a, 480, 120), voxelize(b, 480, 120))
    np.testing.assert_allclose(whole.grid, parts[0].grid + parts[1].grid, atol=1e-12)
    assert whole.contributing_count == parts[0].contributing_count + parts[1].contributing_count


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_polarity_flip_negates_grid(seed):
    s = random_stream(np.random.default_rng(seed), 150)
    a, b = voxelize(s, 400, 300), voxelize(s.flipped(), 400, 300)
    np.testing.assert_array_equal(b.grid, -a.grid)
    assert a.density == b.density


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(1.0, 400.0), st.floats(0.0, 1.0))
def test_shrinking_window_never_adds_events(seed, dt, shrink):
    s = random_stream(np.random.default_rng(seed), 120)
    assert voxelize(s, 500, dt * shrink + 1e-3).contributing_count <= voxelize(s, 500, dt + 1e-3).contributing_count


def test_cell_values_bounded_by_event_multiplicity():
    rng = np.random.default_rng(8)
    s = random_stream(rng, 400, H=4, W=4)
    surf = voxelize(s, 500, 250)
    counts = np.zeros((4, 4))
    np.add.at(counts, (s.y, s.x), 1)
    assert np.all(np.abs(surf.grid) <= counts.max())


def test_stream_validation():
    with pytest.raises(ValueError):
        EventStream([0, 0], [0, 0], [5, 3], [1, 1], 4, 4)
    with pytest.raises(ValueError):
        EventStream([0], [0], [5], [0], 4, 4)
    with pytest.raises(ValueError):
        EventStream([4], [0], [5], [1], 4, 4)


def test_degenerate_box_and_bad_crop_args_rejected():
    with pytest.raises(ValueError):
        BBox(1.0, 1.0, 0.0, 2.0)
    with pytest.raises(ValueError):
        crop_patch(np.zeros((8, 8)), BBox(1, 1, 1, 1), 0.5, 4)
    with pytest.raises(ValueError):
        crop_patch(np.zeros((8, 8)), BBox(1, 1, 1, 1), 2.0, 0)


def test_crop_uniform_region():
    img = np.zeros((40, 40, 2))
    img[10:30, 10:30] = 0.7
    out = crop_patch(img, BBox(20.0, 20.0, 10.0, 10.0), 1.0, 16)
    np.testing.assert_allclose(out, 0.7, atol=1e-12)


def test_crop_at_corner_is_zero_outside_image():
    img = np.ones((32, 32))
    out = crop_patch(img, BBox(0.0, 0.0, 8.0, 8.0), 2.0, 16)
    assert np.all(out[:8, :] == 0.0) and np.all(out[:, :8] == 0.0)
    np.testing.assert_allclose(out[8:, 8:], 1.0, atol=1e-12)


def test_crop_preserves_linear_ramp():
    yy, xx = np.mgrid[0:64, 0:64].astype(float)
    img = 0.3 * (xx + 0.5) - 0.2 * (yy + 0.5) + 1.0
    box = BBox(30.3, 27.9, 12.0, 12.0)
    out = crop_patch(img, box, 2.0, 20)
    side = 24.0
    centres = (np.arange(20) + 0.5) * side / 20
    ex = box.cx - side / 2 + centres
    ey = box.cy - side / 2 + centres
    expected = 0.3 * ex[None, :] - 0.2 * ey[:, None] + 1.0
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_identity_scale_crop_is_exact_copy():
    img = np.random.default_rng(0).normal(size=(16, 16, 3))
    out = crop_patch(img, BBox(8.0, 8.0, 16.0, 16.0), 1.0, 16)
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_patch_embed_shapes_and_zero_case():
    D = 5
    tok = patch_embed(Tensor(np.zeros((4, 4, 1))), 2, Tensor(np.ones((4, D))), Tensor(np.zeros((4, D))))
    assert tok.shape == (4, D) and not tok.data.any()
    with pytest.raises(ValueError):
        patch_embed(Tensor(np.zeros((6, 6))), 4, Tensor(np.ones((16, D))), Tensor(np.zeros((1, D))))


def test_patch_embed_row_major_token_order():
    grid = np.arange(16.0).reshape(4, 4)
    tok = patch_embed(Tensor(grid), 2, Tensor(np.eye(4)), Tensor(np.zeros((4, 4))))
    np.testing.assert_array_equal(tok.data[1], [2.0, 3.0, 6.0, 7.0])
    np.testing.assert_array_equal(tok.data[2], [8.0, 9.0, 12.0, 13.0])


@pytest.mark.parametrize("S,patch", [(4, 2), (8, 4), (16, 16), (12, 3)])
def test_patch_token_count(S, patch):
    g = (S // patch) ** 2
    tok = patch_embed(Tensor(np.zeros((S, S, 2))), patch, Tensor(np.zeros((patch * patch * 2, 3))),
                      Tensor(np.zeros((g, 3))))
    assert tok.shape[0] == g


def test_patch_embed_gradcheck():
    rng = np.random.default_rng(4)
    grid = nx.parameter(rng.normal(size=(8, 8, 1)))
    W = nx.parameter(rng.normal(size=(16, 3)))
    pos = nx.parameter(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    errs = nx.check_grads(lambda: nx.tsum(patch_embed(grid, 4, W, pos) * w), [grid, W, pos])
    assert max(errs.values()) < 1e-6


def test_file_round_trips(tmp_path):
    rng = np.random.default_rng(9)
    s = random_stream(rng, 50)
    write_events(tmp_path / "e.evt", s)
    back = read_events(tmp_path / "e.evt", 12, 10)
    for a, b in zip((s.x, s.y, s.t, s.p), (back.x, back.y, back.t, back.p)):
        np.testing.assert_array_equal(a, b)
    assert (tmp_path / "e.evt").stat().st_size == 8 + 14 * 50

    frames = rng.random((3, 5, 4, 2)).astype(np.float32)
    write_frames(tmp_path / "f.frm", frames)
    np.testing.assert_array_equal(read_frames(tmp_path / "f.frm"), frames)

    boxes = [BBox(1.5, 2.25, 3.0, 4.125), BBox(0.1, 0.2, 0.3, 0.4)]
    write_groundtruth(tmp_path / "gt.txt", boxes)
    assert read_groundtruth(tmp_path / "gt.txt") == boxes


def test_corrupt_files_raise_format_error(tmp_path):
    (tmp_path / "bad.evt").write_bytes(b"EVT1\x05\x00\x00\x00")
    with pytest.raises(FormatError):
        read_events(tmp_path / "bad.evt", 4, 4)
    (tmp_path / "bad.frm").write_bytes(b"JUNK")
    with pytest.raises(FormatError):
        read_frames(tmp_path / "bad.frm")
    (tmp_path / "gt.txt").write_text("0,1,2,3\n")
    with pytest.raises(FormatError):
        read_groundtruth(tmp_path / "gt.txt")
