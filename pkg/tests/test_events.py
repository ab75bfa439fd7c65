import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eled.events import (
    EventBoundsError,
    EventFormatError,
    EventStream,
    bilinear_time_weights,
    events_to_voxel_grid,
    read_events,
    read_events_binary,
    simulate_events,
    write_events,
    write_events_binary,
)


def single(t, p=1, x=0, y=0):
    return EventStream.from_records([(t, x, y, p)])


def brute_force_voxel(stream, window, B, h, w):
    """Per-event, per-bin evaluation of the bilinear vote."""
    t0, t1 = window
    grid = np.zeros((B, h, w))
    for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
        if not t0 <= t <= t1:
            continue
        ts = (B - 1) * (t - t0) / (t1 - t0)
        for b in range(B):
            if abs(ts - b) < 1:
                grid[b, y, x] += p * (1 - abs(ts - b))
    return grid


def random_stream(rng, n, h, w, t0=0.0, t1=1.0):
    t = np.sort(rng.uniform(t0, t1, n))
    return EventStream(t, rng.integers(0, w, n), rng.integers(0, h, n), rng.choice([-1, 1], n))


# ---------------------------------------------------------------- voxel grid


def test_voxel_integer_bin():
    # t* = (B-1) * t / 1 = 2.0 with B=5 -> t = 0.5
    g = events_to_voxel_grid(single(0.5), (0.0, 1.0), 5, 2, 2, normalize=False).bins
    assert g[2, 0, 0] == 1.0
    assert np.count_nonzero(g) == 1


def test_voxel_half_split():
    g = events_to_voxel_grid(single(2.5 / 4), (0.0, 1.0), 5, 2, 2, normalize=False).bins
    np.testing.assert_allclose(g[:, 0, 0], [0, 0, 0.5, 0.5, 0])


def test_voxel_empty_stream():
    g = events_to_voxel_grid(EventStream.empty(), (0.0, 1.0), 4, 3, 5)
    assert g.bins.shape == (4, 3, 5)
    assert not g.bins.any()


def test_voxel_matches_brute_force_and_conserves():
    rng = np.random.default_rng(0)
    s = random_stream(rng, 1000, 6, 7)
    g = events_to_voxel_grid(s, (0.0, 1.0), 9, 6, 7, normalize=False).bins
    np.testing.assert_allclose(g, brute_force_voxel(s, (0.0, 1.0), 9, 6, 7), atol=1e-6)
    assert abs(g.sum() - s.p.sum()) <= 1e-6 * max(1, abs(s.p.sum())) + 1e-4


def test_voxel_ignores_out_of_window():
    s = EventStream.from_records([(-0.5, 0, 0, 1), (0.5, 0, 0, 1), (1.5, 0, 0, -1)])
    g = events_to_voxel_grid(s, (0.0, 1.0), 3, 1, 1, normalize=False).bins
    assert g.sum() == pytest.approx(1.0)


def test_voxel_normalization():
    rng = np.random.default_rng(1)
    s = random_stream(rng, 50, 4, 4)
    g = events_to_voxel_grid(s, (0.0, 1.0), 5, 4, 4, normalize=True).bins
    assert np.abs(g).max() == pytest.approx(1.0)


def test_voxel_single_bin():
    rng = np.random.default_rng(2)
    s = random_stream(rng, 40, 3, 3)
    g = events_to_voxel_grid(s, (0.0, 1.0), 1, 3, 3, normalize=False).bins
    expected = np.zeros((3, 3))
    np.add.at(expected, (s.y, s.x), s.p)
    np.testing.assert_allclose(g[0], expected)


def test_voxel_errors():
    with pytest.raises(EventBoundsError):
        events_to_voxel_grid(single(0.5, x=5), (0.0, 1.0), 3, 4, 4)
    with pytest.raises(ValueError):
        events_to_voxel_grid(single(0.5), (1.0, 1.0), 3, 4, 4)
    with pytest.raises(ValueError):
        events_to_voxel_grid(single(0.5), (0.0, 1.0), 0, 4, 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 32), st.floats(0.0, 1.0))
def test_bilinear_partition_of_unity(B, u):
    t_star = np.array([u * (B - 1)])
    lo, wlo, hi, whi = bilinear_time_weights(t_star, B)
    assert wlo[0] >= 0 and whi[0] >= 0
    assert wlo[0] + whi[0] == pytest.approx(1.0, abs=1e-12)
    assert 0 <= lo[0] <= hi[0] < B


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_voxel_conservation_property(seed, B):
    rng = np.random.default_rng(seed)
    s = random_stream(rng, 64, 5, 5, 0.25, 0.75)
    g = events_to_voxel_grid(s, (0.25, 0.75), B, 5, 5, normalize=False).bins
    assert g.sum() == pytest.approx(float(s.p.sum()), abs=1e-4)


# ---------------------------------------------------------------- simulator


def pixel_video(log_values):
    return [np.full((1, 1), np.exp(v) - 1e-3) for v in log_values]


def test_simulator_threshold_example():
    s = simulate_events(pixel_video([0.0, 0.45]), [0.0, 1.0], 0.2)
    assert len(s) == 2
    assert np.all(s.p == 1)


def test_simulator_crossing_times():
    s = simulate_events(pixel_video([0.0, 0.45]), [0.0, 1.0], 0.2)
    np.testing.assert_allclose(s.t, [0.2 / 0.45, 0.4 / 0.45], rtol=1e-9)


def test_simulator_constant_video():
    frames = [np.full((4, 4), 0.3)] * 5
    assert len(simulate_events(frames, np.arange(5.0), 0.2)) == 0


def test_simulator_staircase():
    s = simulate_events(pixel_video([0.0, -0.2, 0.0]), [0.0, 1.0, 2.0], 0.2)
    assert list(s.p) == [-1, 1]
    assert s.t[0] <= 1.0 <= s.t[1]


def test_simulator_errors():
    f = [np.ones((2, 2))] * 2
    with pytest.raises(ValueError):
        simulate_events(f, [0, 1], 0.0)
    with pytest.raises(ValueError):
        simulate_events([np.ones((2, 2)), -np.ones((2, 2))], [0, 1], 0.2)
    with pytest.raises(ValueError):
        simulate_events(f[:1], [0], 0.2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.5))
def test_simulator_monotone_in_threshold(seed, c):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0, 1, (6, 4, 4))
    ts = np.arange(6) / 10.0
    assert len(simulate_events(frames, ts, 2 * c)) <= len(simulate_events(frames, ts, c))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.5))
def test_simulator_log_reconstruction(seed, c):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0, 1, (5, 3, 3))
    s = simulate_events(frames, np.arange(5.0), c)
    recon = np.zeros((3, 3))
    np.add.at(recon, (s.y, s.x), s.p * c)
    true = np.log(frames[-1] + 1e-3) - np.log(frames[0] + 1e-3)
    assert np.all(np.abs(recon - true) < c + 1e-9)


def test_simulator_sorted_and_in_bounds():
    rng = np.random.default_rng(3)
    s = simulate_events(rng.uniform(0, 1, (8, 5, 6)), np.arange(8) / 240, 0.15)
    assert np.all(np.diff(s.t) >= 0)
    s.check_bounds(5, 6)


# ---------------------------------------------------------------- formats


def test_binary_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    s = random_stream(rng, 300, 40, 50)
    path = tmp_path / "a.evt"
    write_events_binary(path, s)
    assert read_events_binary(path) == s
    data = path.read_bytes()
    assert data[:4] == b"EVT1"
    assert int.from_bytes(data[4:8], "little") == 300
    assert len(data) == 8 + 300 * 13


def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    s = random_stream(rng, 200, 40, 50)
    path = tmp_path / "a.csv"
    write_events(path, s)
    assert path.read_text().splitlines()[0] == "t,x,y,p"
    back = read_events(path)
    assert back == s
    assert back.t.tobytes() == s.t.tobytes()


def test_empty_round_trip(tmp_path):
    for name in ("e.evt", "e.csv"):
        write_events(tmp_path / name, EventStream.empty())
        assert len(read_events(tmp_path / name)) == 0


def test_format_errors(tmp_path):
    bad = tmp_path / "bad.evt"
    bad.write_bytes(b"NOPE\x00\x00\x00\x00")
    with pytest.raises(EventFormatError):
        read_events(bad)
    trunc = tmp_path / "trunc.evt"
    trunc.write_bytes(b"EVT1" + (5).to_bytes(4, "little") + b"\x00" * 13)
    with pytest.raises(EventFormatError):
        read_events(trunc)
    csvbad = tmp_path / "bad.csv"
    csvbad.write_text("a,b\n1,2\n")
    with pytest.raises(EventFormatError):
        read_events(csvbad)


def test_stream_validation():
    with pytest.raises(ValueError):
        EventStream([1.0, 0.0], [0, 0], [0, 0], [1, 1])
    with pytest.raises(ValueError):
        EventStream([0.0], [0], [0], [0])
    s = EventStream.from_records([(0.1, 0, 0, 1), (0.2, 0, 0, 1), (0.3, 0, 0, 1)])
    assert len(s.slice_time(0.1, 0.2)) == 2
