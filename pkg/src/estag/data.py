"""Synthetic hidden-particle trajectories, windowing, neighbour graphs and dataset I/O.

The simulator integrates a spring network with velocity Verlet.  Only the
first ``n_visible`` particles are ever exported; the remaining hidden
particles are spring-coupled to the visible ones and optionally driven by an
external periodic force, which makes the visible dynamics non-Markovian.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ValidationError

log = logging.getLogger(__name__)

DATASET_MAGIC = b"ESTG"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, N, C, F, feature width


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide generator: numpy PCG64 seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    positions: np.ndarray  # [F, N_total, C, 3]
    n_visible: int
    node_feats: np.ndarray  # [N, c]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.node_feats = np.asarray(self.node_feats, dtype=np.float64)
        if self.positions.ndim != 4 or self.positions.shape[-1] != 3:
            raise ValidationError(f"positions must be [F, N, C, 3], got {self.positions.shape}")
        if self.positions.shape[0] < 2:
            raise ValidationError("a trajectory needs at least 2 frames")
        if not 1 <= self.n_visible <= self.positions.shape[1]:
            raise ValidationError(f"n_visible={self.n_visible} out of range")
        if self.node_feats.shape[0] != self.n_visible:
            raise ValidationError(
                f"node_feats has {self.node_feats.shape[0]} rows for {self.n_visible} visible nodes"
            )

    @property
    def frames(self) -> int:
        return self.positions.shape[0]

    @property
    def channels(self) -> int:
        return self.positions.shape[2]

    @property
    def n_hidden(self) -> int:
        return self.positions.shape[1] - self.n_visible

    def visible(self) -> np.ndarray:
        return self.positions[:, : self.n_visible]


@dataclass
class SimConfig:
    n_visible: int = 5
    n_hidden: int = 2
    frames: int = 2101
    step_size: float = 0.05
    k_visible: float = 1.0
    k_hidden: float = 0.6
    hidden_links: int = 2  # visible partners per hidden particle
    mass_ids: tuple[float, ...] = (1.0, 2.0, 3.0)
    hidden_mass: float = 2.0
    drive_amplitude: float = 0.3
    drive_frequency: float = 1.7
    init_radius: float = 1.0
    velocity_scale: float = 0.3
    min_separation: float = 0.5


def _springs(cfg: SimConfig, pos: np.ndarray, rng: np.random.Generator):
    """Spring list ``(i, j, k, rest_length)``: all visible pairs plus hidden links."""
    nv, nh = cfg.n_visible, cfg.n_hidden
    out = []
    for i in range(nv):
        for j in range(i + 1, nv):
            out.append((i, j, cfg.k_visible))
    links = min(cfg.hidden_links, nv)
    for h in range(nh):
        for j in rng.choice(nv, size=links, replace=False):
            out.append((nv + h, int(j), cfg.k_hidden))
    I = np.array([s[0] for s in out], dtype=np.intp)
    J = np.array([s[1] for s in out], dtype=np.intp)
    K = np.array([s[2] for s in out], dtype=np.float64)
    rest = np.linalg.norm(pos[I] - pos[J], axis=-1)
    return I, J, K, rest


def _initial_positions(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_visible + cfg.n_hidden
    pos = np.zeros((n, 3))
    placed = 0
    for _ in range(10000):
        if placed == n:
            break
        p = rng.uniform(-cfg.init_radius, cfg.init_radius, size=3)
        if np.linalg.norm(p) > cfg.init_radius:
            continue
        if placed and np.min(np.linalg.norm(pos[:placed] - p, axis=-1)) < cfg.min_separation:
            continue
        pos[placed] = p
        placed += 1
    if placed < n:
        raise ValidationError("could not place particles; lower min_separation or raise init_radius")
    return pos


def spring_forces(pos: np.ndarray, I, J, K, rest) -> np.ndarray:
    d = pos[I] - pos[J]
    r = np.linalg.norm(d, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    f = (-K * (r - rest) / safe)[:, None] * d
    out = np.zeros_like(pos)
    np.add.at(out, I, f)
    np.add.at(out, J, -f)
    return out


def spring_energy(pos, vel, mass, I, J, K, rest) -> float:
    r = np.linalg.norm(pos[I] - pos[J], axis=-1)
    return float(0.5 * np.sum(mass[:, None] * vel * vel) + 0.5 * np.sum(K * (r - rest) ** 2))


def simulate(cfg: SimConfig, seed: int, return_energy: bool = False):
    """Velocity-Verlet spring network; returns a :class:`Trajectory` (C = 1)."""
    if cfg.n_visible < 2 or cfg.n_hidden < 0 or cfg.frames < 2:
        raise ValidationError("simulate needs n_visible >= 2, n_hidden >= 0, frames >= 2")
    if cfg.step_size <= 0:
        raise ValidationError("step_size must be positive")
    rng = make_rng(seed)
    nv, nh = cfg.n_visible, cfg.n_hidden
    n = nv + nh
    pos = _initial_positions(cfg, rng)
    I, J, K, rest = _springs(cfg, pos, rng)
    ids = np.array([cfg.mass_ids[i % len(cfg.mass_ids)] for i in range(nv)], dtype=np.float64)
    mass = np.concatenate([ids, np.full(nh, cfg.hidden_mass)])
    vel = rng.normal(scale=cfg.velocity_scale, size=(n, 3))
    vel -= (mass[:, None] * vel).sum(axis=0) / mass.sum()  # zero net momentum
    drive_dir = rng.normal(size=(nh, 3))
    drive_dir /= np.linalg.norm(drive_dir, axis=-1, keepdims=True) + (nh == 0)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=nh)

    def forces(p, t):
        f = spring_forces(p, I, J, K, rest)
        if nh and cfg.drive_amplitude:
            amp = cfg.drive_amplitude * np.cos(cfg.drive_frequency * t + phase)
            f[nv:] += amp[:, None] * drive_dir
        return f

    dt = cfg.step_size
    out = np.empty((cfg.frames, n, 1, 3))
    energy = np.empty(cfg.frames)
    out[0, :, 0] = pos
    energy[0] = spring_energy(pos, vel, mass, I, J, K, rest)
    acc = forces(pos, 0.0) / mass[:, None]
    for step in range(1, cfg.frames):
        pos = pos + dt * vel + 0.5 * dt * dt * acc
        new_acc = forces(pos, step * dt) / mass[:, None]
        vel = vel + 0.5 * dt * (acc + new_acc)
        acc = new_acc
        if not np.all(np.isfinite(pos)) or np.max(np.abs(pos)) > 1e6:
            raise NumericalError(f"simulation diverged at step {step}")
        out[step, :, 0] = pos
        energy[step] = spring_energy(pos, vel, mass, I, J, K, rest)

    meta = {
        "seed": seed,
        "step_size": dt,
        "n_hidden": nh,
        "springs": [(int(i), int(j), float(k)) for i, j, k in zip(I, J, K)],
        "rng": "PCG64",
    }
    traj = Trajectory(out, nv, ids[:, None], meta)
    if return_energy:
        return traj, energy
    return traj


# --------------------------------------------------------------------------- graphs & samples


@dataclass
class NeighborGraph:
    """Symmetric neighbour lists with hop type 1 or 2; no self loops."""

    n: int
    edges: list[list[tuple[int, int]]]

    def hop_matrix(self) -> np.ndarray:
        """``[N, N]`` int array: 0 for no edge, else the hop type."""
        m = np.zeros((self.n, self.n), dtype=np.int64)
        for i, nbrs in enumerate(self.edges):
            for j, hop in nbrs:
                m[i, j] = hop
        return m

    def degree(self) -> np.ndarray:
        return np.array([len(e) for e in self.edges])


def build_neighbors(pos: np.ndarray, cutoff: float, use_2hop: bool = True) -> NeighborGraph:
    """1-hop if closer than ``cutoff``; 2-hop if two 1-hop steps apart and not 1-hop."""
    if not cutoff > 0:
        raise ValidationError(f"cutoff must be positive, got {cutoff}")
    pos = np.asarray(pos, dtype=np.float64).reshape(len(pos), -1)
    n = len(pos)
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    one = (d < cutoff) & ~np.eye(n, dtype=bool)
    two = np.zeros_like(one)
    if use_2hop:
        two = ((one.astype(np.int64) @ one.astype(np.int64)) > 0) & ~one & ~np.eye(n, dtype=bool)
    edges = [
        [(j, 1) for j in range(n) if one[i, j]] + [(j, 2) for j in range(n) if two[i, j]]
        for i in range(n)
    ]
    for e in edges:
        e.sort()
    return NeighborGraph(n, edges)


@dataclass
class Sample:
    X: np.ndarray  # [T, N, C, 3]
    label: np.ndarray  # [N, C, 3]
    node_feats: np.ndarray  # [N, c]
    graph: NeighborGraph
    start: int = 0
    frames: tuple[int, ...] = ()
    label_frame: int = -1


def window_starts(frames: int, T: int, dt: int) -> range:
    return range(max(frames - T * dt, 0))


def make_sample(traj: Trajectory, start: int, T: int, dt: int, cutoff: float,
                use_2hop: bool = True, ref_channel: int = 0) -> Sample:
    vis = traj.visible()
    idx = tuple(start + t * dt for t in range(T))
    label_frame = start + T * dt
    X = vis[list(idx)]
    graph = build_neighbors(X[0, :, ref_channel], cutoff, use_2hop)
    return Sample(X.copy(), vis[label_frame].copy(), traj.node_feats.copy(), graph, start, idx, label_frame)


def window(traj: Trajectory, T: int, dt: int, cutoff: float, use_2hop: bool = True,
           starts=None, ref_channel: int = 0) -> list[Sample]:
    """Cut ``T`` input frames spaced ``dt`` apart plus the following label frame."""
    if T < 1 or dt < 1:
        raise ValidationError("window needs T >= 1 and dt >= 1")
    valid = window_starts(traj.frames, T, dt)
    if len(valid) == 0:
        log.warning("trajectory of %d frames too short for T=%d, dt=%d", traj.frames, T, dt)
        return []
    if starts is None:
        starts = valid
    for s in starts:
        if s not in valid:
            raise ValidationError(f"window start {s} outside [0, {len(valid) - 1}]")
    return [make_sample(traj, s, T, dt, cutoff, use_2hop, ref_channel) for s in starts]


def split_starts(n_windows: int, T: int, dt: int, sizes=(200, 100, 100),
                 fractions=(0.6, 0.2, 0.2)) -> tuple[list[int], list[int], list[int]]:
    """Contiguous train|val|test blocks of window starts.

    ``T * dt`` windows are dropped after each block boundary so that no frame
    of a later block appears in an earlier one.  Inside each block ``sizes``
    starts are taken evenly spaced (``None`` keeps the whole block).
    """
    gap = T * dt
    bounds = np.floor(np.cumsum((0.0,) + tuple(fractions)) * n_windows).astype(int)
    out = []
    for b in range(3):
        lo = bounds[b] + (gap if b else 0)
        hi = bounds[b + 1]
        block = list(range(lo, max(lo, hi)))
        want = sizes[b]
        if want is not None and want < len(block):
            sel = np.linspace(0, len(block) - 1, want).round().astype(int)
            block = [block[i] for i in sel]
        out.append(block)
    return out[0], out[1], out[2]


# --------------------------------------------------------------------------- I/O


def write_dataset(traj: Trajectory, path) -> None:
    """Binary little-endian dataset holding visible nodes only."""
    vis = np.ascontiguousarray(traj.visible(), dtype="<f8")
    F, N, C, _ = vis.shape
    feats = np.ascontiguousarray(traj.node_feats, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, N, C, F, feats.shape[1]))
        fh.write(feats.tobytes())
        fh.write(vis.tobytes())


def dataset_nbytes(N: int, C: int, F: int, c: int) -> int:
    return _HEADER.size + 8 * N * c + 8 * F * N * C * 3


def read_dataset(path) -> Trajectory:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes", len(buf))
    magic, version, N, C, F, c = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    want = dataset_nbytes(N, C, F, c)
    if len(buf) != want:
        raise FormatError(f"payload size {len(buf)} != expected {want}", min(len(buf), want))
    off = _HEADER.size
    feats = np.frombuffer(buf, dtype="<f8", count=N * c, offset=off).reshape(N, c)
    off += 8 * N * c
    pos = np.frombuffer(buf, dtype="<f8", count=F * N * C * 3, offset=off).reshape(F, N, C, 3)
    return Trajectory(pos.astype(np.float64), N, feats.astype(np.float64), {"source": str(path)})


def read_csv_trajectory(path) -> Trajectory:
    """Whitespace-delimited ``frame node x y z`` rows; all-ones node features."""
    try:
        rows = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"cannot parse {path}: {exc}") from None
    if rows.shape[1] != 5:
        raise ValidationError(f"{path}: expected 5 columns, got {rows.shape[1]}")
    frame = rows[:, 0].astype(int)
    node = rows[:, 1].astype(int)
    F, N = int(frame.max()) + 1, int(node.max()) + 1
    if frame.min() < 0 or node.min() < 0 or len(rows) != F * N:
        raise ValidationError(f"{path}: need exactly one row per (frame, node) pair")
    pos = np.full((F, N, 1, 3), np.nan)
    pos[frame, node, 0] = rows[:, 2:]
    if np.isnan(pos).any():
        raise ValidationError(f"{path}: duplicate or missing (frame, node) rows")
    return Trajectory(pos, N, np.ones((N, 1)), {"source": str(path)})
