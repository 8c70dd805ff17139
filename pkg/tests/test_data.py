import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from estag import data
from estag.errors import FormatError, NumericalError, ValidationError


def small_traj(F=12, N=4, C=1, c=1, seed=0, n_total=None):
    rng = np.random.default_rng(seed)
    n_total = n_total or N
    return data.Trajectory(rng.normal(size=(F, n_total, C, 3)), N, rng.normal(size=(N, c)))


# --------------------------------------------------------------------------- simulator


def test_simulation_is_deterministic():
    cfg = data.SimConfig(frames=200)
    a, b = data.simulate(cfg, 3), data.simulate(cfg, 3)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert data.simulate(cfg, 4).positions.tobytes() != a.positions.tobytes()


def test_no_forces_gives_constant_trajectory():
    cfg = data.SimConfig(frames=50, velocity_scale=0.0, k_visible=0.0, k_hidden=0.0, drive_amplitude=0.0)
    traj = data.simulate(cfg, 0)
    assert np.array_equal(traj.positions, np.broadcast_to(traj.positions[:1], traj.positions.shape))


def _drift(energy):
    return np.max(np.abs(energy - energy[0])) / energy[0]


def test_undriven_energy_drift_within_one_percent():
    cfg = data.SimConfig(frames=1001, drive_amplitude=0.0)
    _, energy = data.simulate(cfg, 1, return_energy=True)
    # reference: same physical span with a 10x smaller step
    ref_cfg = data.SimConfig(frames=10001, drive_amplitude=0.0, step_size=cfg.step_size / 10)
    _, ref_energy = data.simulate(ref_cfg, 1, return_energy=True)
    assert ref_energy[0] == energy[0]
    assert _drift(energy) <= 0.01
    assert _drift(ref_energy) <= 0.01
    # Verlet's energy error scales with the squared step
    assert _drift(ref_energy) < _drift(energy) / 10
    assert abs(energy[-1] - ref_energy[-1]) / energy[0] <= 0.01


def test_metadata_and_features():
    traj = data.simulate(data.SimConfig(frames=20), 7)
    assert traj.metadata["seed"] == 7 and traj.metadata["rng"] == "PCG64"
    assert traj.n_hidden == 2 and traj.visible().shape == (20, 5, 1, 3)
    np.testing.assert_array_equal(traj.node_feats[:, 0], [1, 2, 3, 1, 2])


def test_unstable_step_reports_step_index():
    cfg = data.SimConfig(frames=400, step_size=3.0, k_visible=50.0)
    with pytest.raises(NumericalError, match=r"step \d+"):
        data.simulate(cfg, 0)


def test_simulate_rejects_bad_config():
    with pytest.raises(ValidationError):
        data.simulate(data.SimConfig(n_visible=1), 0)
    with pytest.raises(ValidationError):
        data.simulate(data.SimConfig(frames=1), 0)


def test_trajectory_validation():
    with pytest.raises(ValidationError):
        data.Trajectory(np.zeros((1, 2, 1, 3)), 2, np.ones((2, 1)))
    with pytest.raises(ValidationError):
        data.Trajectory(np.zeros((3, 2, 1, 3)), 3, np.ones((3, 1)))
    with pytest.raises(ValidationError):
        data.Trajectory(np.zeros((3, 2, 1, 3)), 2, np.ones((1, 1)))


# --------------------------------------------------------------------------- windowing


def test_window_count_formula():
    traj = small_traj(F=25)
    assert len(data.window(traj, 2, 5, cutoff=10.0)) == 15


def test_minimal_length_gives_one_sample():
    assert len(data.window(small_traj(F=2 * 3 + 1), 2, 3, cutoff=10.0)) == 1


def test_window_indices():
    s = data.window(small_traj(F=10), 3, 2, cutoff=10.0)[0]
    assert s.frames == (0, 2, 4) and s.label_frame == 6
    traj = small_traj(F=10)
    np.testing.assert_array_equal(s.X, traj.positions[[0, 2, 4]])
    np.testing.assert_array_equal(s.label, traj.positions[6])


def test_too_short_trajectory_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert data.window(small_traj(F=6), 3, 2, cutoff=1.0) == []
    assert "too short" in caplog.text


def test_window_rejects_out_of_range_start():
    with pytest.raises(ValidationError):
        data.window(small_traj(F=10), 3, 2, cutoff=1.0, starts=[4])


@settings(max_examples=40, deadline=None)
@given(F=st.integers(2, 40), T=st.integers(1, 5), dt=st.integers(1, 4))
def test_windows_never_leak_label_or_hidden_nodes(F, T, dt):
    traj = small_traj(F=F, N=3, n_total=5)
    samples = data.window(traj, T, dt, cutoff=1.0)
    assert len(samples) == max(F - T * dt, 0)
    for s in samples:
        assert max(s.frames) < s.label_frame < F
        assert np.diff(s.frames).tolist() == [dt] * (T - 1)
        assert s.X.shape[1] == 3 and s.label.shape[0] == 3


def test_hidden_nodes_never_exported():
    traj = data.simulate(data.SimConfig(frames=40), 0)
    for s in data.window(traj, 3, 5, cutoff=1.6):
        assert s.X.shape[1] == traj.n_visible
        np.testing.assert_array_equal(s.X, traj.positions[list(s.frames), : traj.n_visible])


def test_split_blocks_are_disjoint_in_frames():
    T, dt = 10, 10
    tr, va, te = data.split_starts(2001, T, dt)
    assert (len(tr), len(va), len(te)) == (200, 100, 100)
    # every frame used by a block (inputs and label) precedes the next block's first frame
    assert max(tr) + T * dt < min(va)
    assert max(va) + T * dt < min(te)
    assert max(te) <= 2000
    full = data.split_starts(2001, T, dt, sizes=(None, None, None))
    assert full[0] == list(range(0, 1200))


# --------------------------------------------------------------------------- neighbours


def test_large_cutoff_complete_graph():
    pos = np.random.default_rng(0).normal(size=(5, 3))
    g = data.build_neighbors(pos, 1e3)
    hop = g.hop_matrix()
    assert np.all(hop[~np.eye(5, dtype=bool)] == 1)
    assert np.all(np.diag(hop) == 0)


def test_small_cutoff_no_edges():
    g = data.build_neighbors(np.array([[0.0, 0, 0], [1.0, 0, 0]]), 0.5)
    assert g.edges == [[], []]


def test_chain_two_hop():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    g = data.build_neighbors(pos, 1.5)
    assert g.edges[0] == [(1, 1), (2, 2)]
    assert g.edges[2] == [(0, 2), (1, 1)]
    assert data.build_neighbors(pos, 1.5, use_2hop=False).edges[0] == [(1, 1)]


def test_cutoff_is_strict():
    g = data.build_neighbors(np.array([[0.0, 0, 0], [1.0, 0, 0]]), 1.0)
    assert g.edges == [[], []]


def test_cutoff_must_be_positive():
    with pytest.raises(ValidationError):
        data.build_neighbors(np.zeros((2, 3)), 0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 9), cutoff=st.floats(0.1, 3.0))
def test_graph_symmetric_and_hop_types_disjoint(seed, n, cutoff):
    pos = np.random.default_rng(seed).uniform(-2, 2, size=(n, 3))
    hop = data.build_neighbors(pos, cutoff).hop_matrix()
    assert np.array_equal(hop, hop.T)
    assert not np.diag(hop).any()
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    np.testing.assert_array_equal(hop == 1, (d < cutoff) & ~np.eye(n, dtype=bool))
    # an independent path enumeration for 2-hop pairs
    for i in range(n):
        for j in range(n):
            via = any(hop[i, m] == 1 and hop[m, j] == 1 for m in range(n))
            assert (hop[i, j] == 2) == (via and i != j and hop[i, j] != 1)


# --------------------------------------------------------------------------- I/O


def test_dataset_round_trip_bitwise(tmp_path):
    traj = small_traj(F=9, N=3, C=2, c=4, n_total=5)
    path = tmp_path / "t.estg"
    data.write_dataset(traj, path)
    back = data.read_dataset(path)
    assert back.positions.tobytes() == traj.visible().tobytes()
    assert back.node_feats.tobytes() == traj.node_feats.tobytes()
    assert back.n_visible == 3 and back.n_hidden == 0


def test_dataset_size_follows_layout(tmp_path):
    # 4 magic + 4 version + 4 * 4 dims + 5 * 8 features + 101 * 5 * 3 * 8 positions
    assert data.dataset_nbytes(5, 1, 101, 1) == 12184
    path = tmp_path / "s.estg"
    data.write_dataset(small_traj(F=101, N=5), path)
    assert path.stat().st_size == 12184


def test_header_layout(tmp_path):
    path = tmp_path / "h.estg"
    data.write_dataset(small_traj(F=7, N=3, C=2, c=4), path)
    magic, version, N, C, F, c = struct.unpack_from("<4sIIIII", path.read_bytes())
    assert (magic, version, N, C, F, c) == (b"ESTG", 1, 3, 2, 7, 4)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.estg"
    data.write_dataset(small_traj(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic") as exc:
        data.read_dataset(path)
    assert exc.value.offset == 0


def test_bad_version_and_truncation(tmp_path):
    path = tmp_path / "v.estg"
    data.write_dataset(small_traj(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        data.read_dataset(path)
    assert exc.value.offset == 4
    data.write_dataset(small_traj(), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError, match="size"):
        data.read_dataset(path)
    path.write_bytes(b"ES")
    with pytest.raises(FormatError, match="truncated"):
        data.read_dataset(path)


def test_csv_ingest(tmp_path):
    rows = [f"{f} {n} {f + n} {2 * n} {-f}" for f in range(4) for n in range(3)]
    path = tmp_path / "t.csv"
    path.write_text("\n".join(rows[::-1]) + "\n")
    traj = data.read_csv_trajectory(path)
    assert traj.positions.shape == (4, 3, 1, 3)
    np.testing.assert_array_equal(traj.positions[2, 1, 0], [3, 2, -2])
    np.testing.assert_array_equal(traj.node_feats, np.ones((3, 1)))


def test_csv_rejects_missing_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0 0 1 2 3\n1 1 1 2 3\n")
    with pytest.raises(ValidationError):
        data.read_csv_trajectory(path)
    path.write_text("0 0 1 2\n")
    with pytest.raises(ValidationError):
        data.read_csv_trajectory(path)
