"""Training, evaluation, baselines, ablations, rollout and verification drivers."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamStore
from .data import (
    Sample,
    SimConfig,
    Trajectory,
    build_neighbors,
    make_rng,
    make_sample,
    read_dataset,
    simulate,
    split_starts,
    window,
    window_starts,
)
from .errors import NumericalError, ValidationError
from .model import (
    VARIANTS,
    Batch,
    ModelConfig,
    estag_forward,
    init_params,
    loss_mse,
    per_node_mse,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 500
    batch_size: int = 100
    lr: float = 5e-3
    weight_decay: float = 1e-12
    seed: int = 0
    n_train: int | None = 200
    n_val: int | None = 100
    n_test: int | None = 100
    data: str | None = None
    checkpoint: str | None = None
    metrics: str | None = None
    record_time: bool = True

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValidationError("lr must be positive and weight_decay non-negative")
        return self


@dataclass
class MetricsRecord:
    epoch: int
    train_mse: float
    val_mse: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclass
class Splits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


@dataclass
class TrainResult:
    config: TrainConfig
    params: ParamStore  # best validation
    initial: ParamStore
    metrics: list[MetricsRecord]
    best_epoch: int
    best_val: float


# --------------------------------------------------------------------------- data plumbing


def make_splits(traj: Trajectory, cfg: TrainConfig) -> Splits:
    m = cfg.model
    if traj.channels != m.channels:
        raise ValidationError(f"dataset has {traj.channels} channels, model expects {m.channels}")
    if traj.node_feats.shape[1] != m.feat_dim:
        raise ValidationError(f"dataset feature width {traj.node_feats.shape[1]} != model feat_dim {m.feat_dim}")
    n = len(window_starts(traj.frames, m.T, m.dt))
    tr, va, te = split_starts(n, m.T, m.dt, (cfg.n_train, cfg.n_val, cfg.n_test))

    def cut(starts):
        return [make_sample(traj, s, m.T, m.dt, m.cutoff, m.use_2hop, m.ref_channel) for s in starts]

    return Splits(cut(tr), cut(va), cut(te))


def load_trajectory(cfg: TrainConfig) -> Trajectory:
    if cfg.data is None:
        raise ValidationError("no dataset path configured")
    return read_dataset(cfg.data)


def _batches(n: int, size: int, perm: np.ndarray):
    for lo in range(0, n, size):
        yield perm[lo : lo + size]


# --------------------------------------------------------------------------- prediction & evaluation


def predict(params, cfg: ModelConfig, samples: Sequence[Sample] | Batch, chunk: int = 200) -> np.ndarray:
    batch = samples if isinstance(samples, Batch) else Batch.from_samples(samples)
    outs = []
    for lo in range(0, batch.size, chunk):
        sub = batch.subset(np.arange(lo, min(lo + chunk, batch.size)))
        outs.append(estag_forward(sub, params, cfg).data)
    return np.concatenate(outs)


def per_sample_mse(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Per-sample ``loss_mse / (N * C)``."""
    N, C = label.shape[1], label.shape[2]
    return np.array([loss_mse(p, y).item() for p, y in zip(pred, label)]) / (N * C)


def evaluate(params, cfg: ModelConfig, samples: Sequence[Sample] | Batch) -> float:
    """Mean over samples of the per-node squared error."""
    batch = samples if isinstance(samples, Batch) else (Batch.from_samples(samples) if samples else None)
    if batch is None or batch.size == 0:
        raise ValidationError("cannot evaluate on an empty split")
    if batch.X.shape[1] != cfg.T or batch.X.shape[3] != cfg.channels:
        raise ValidationError(f"split shape {batch.X.shape} does not match config T={cfg.T}, C={cfg.channels}")
    return float(per_sample_mse(predict(params, cfg, batch), batch.label).mean())


# --------------------------------------------------------------------------- training


def train(cfg: TrainConfig, traj: Trajectory | None = None, splits: Splits | None = None) -> TrainResult:
    """Mini-batch Adam on the per-node MSE; keeps the best-validation parameters."""
    cfg.validate()
    m = cfg.model
    if splits is None:
        splits = make_splits(traj if traj is not None else load_trajectory(cfg), cfg)
    if not splits.train or not splits.val:
        raise ValidationError("training needs non-empty train and validation splits")
    rng = make_rng(cfg.seed)
    params = init_params(m, rng)
    initial = params.copy()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    train_batch = Batch.from_samples(splits.train)
    val_batch = Batch.from_samples(splits.val)
    n = train_batch.size

    metrics: list[MetricsRecord] = []
    best, best_epoch, best_val = params.copy(), 0, float("inf")
    out = open(cfg.metrics, "w") if cfg.metrics else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            perm = rng.permutation(n)
            total = 0.0
            for b, idx in enumerate(_batches(n, cfg.batch_size, perm)):
                batch = train_batch.subset(idx)
                tape = ad.Tape()
                with tape:
                    watched = tape.watch_all(params)
                    loss = per_node_mse(estag_forward(batch, watched, m), batch.label)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
                grads = tape.backward(loss)
                params = ad.adam_step(params, grads, state)
                total += value * len(idx)
            val = evaluate(params, m, val_batch)
            if not np.isfinite(val):
                raise NumericalError(f"non-finite validation loss at epoch {epoch}")
            wall = (time.perf_counter() - t0) * 1e3 if cfg.record_time else 0.0
            rec = MetricsRecord(epoch, total / n, val, round(wall, 3))
            metrics.append(rec)
            if out:
                out.write(rec.to_json() + "\n")
                out.flush()
            if val < best_val:
                best, best_epoch, best_val = params.copy(), epoch, val
            log.info("epoch %d train %.6g val %.6g", epoch, rec.train_mse, val)
    finally:
        if out:
            out.close()
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, m, best)
    return TrainResult(cfg, best, initial, metrics, best_epoch, best_val)


# --------------------------------------------------------------------------- baselines & ablations


def pt_frame(T: int, which: str) -> int:
    frames = {"s": 0, "m": T // 2, "t": T - 1}
    if which not in frames:
        raise ValidationError(f"unknown copy baseline {which!r}; expected s, m or t")
    return frames[which]


def baseline_pt(samples: Sequence[Sample], which: str) -> float:
    """Copy input frame start/middle/terminal as the prediction."""
    if not samples:
        raise ValidationError("cannot evaluate on an empty split")
    T = samples[0].X.shape[0]
    f = pt_frame(T, which)
    pred = np.stack([s.X[f] for s in samples])
    label = np.stack([s.label for s in samples])
    return float(per_sample_mse(pred, label).mean())


def st_weighted_config(cfg: TrainConfig) -> TrainConfig:
    """Per-frame EGNN with a softmax-weighted sum of all frames (the ST_EGNN reference)."""
    m = dataclasses.replace(cfg.model, no_edft=True, no_attention=True, no_temporal=True,
                            no_wk=False, attention="forward", no_equivariance=False)
    return dataclasses.replace(cfg, model=m)


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValidationError(f"unknown ablation {variant!r}; expected one of {', '.join(VARIANTS)}")
    changes = {variant: True}
    if variant == "no_attention":
        changes["attention"] = "forward"
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **changes).validate())


def single_frame_samples(samples: Sequence[Sample], frame: int) -> list[Sample]:
    out = []
    for s in samples:
        out.append(dataclasses.replace(s, X=s.X[frame : frame + 1], frames=(s.frames[frame],) if s.frames else ()))
    return out


def egnn_config(cfg: TrainConfig) -> TrainConfig:
    m = dataclasses.replace(cfg.model, T=1, no_edft=True, no_attention=True, no_temporal=False,
                            no_wk=False, no_equivariance=False, attention="forward")
    return dataclasses.replace(cfg, model=m.validate())


@dataclass
class RunSummary:
    name: str
    test_mse: float
    result: TrainResult | None = None


def run_model(cfg: TrainConfig, splits: Splits, name: str | None = None) -> RunSummary:
    res = train(cfg, splits=splits)
    return RunSummary(name or cfg.model.variant, evaluate(res.params, cfg.model, splits.test), res)


def baseline(cfg: TrainConfig, which: str, splits: Splits) -> RunSummary:
    """``pt-s|pt-m|pt-t`` copy baselines, ``st-weighted``, or single-frame ``egnn-s|m|t``."""
    if which.startswith("pt-"):
        return RunSummary(which, baseline_pt(splits.test, which[3:]))
    if which == "st-weighted":
        return run_model(st_weighted_config(cfg), splits, which)
    if which.startswith("egnn-"):
        f = pt_frame(cfg.model.T, which[5:])
        ecfg = egnn_config(cfg)
        single = Splits(*(single_frame_samples(x, f) for x in (splits.train, splits.val, splits.test)))
        return run_model(ecfg, single, which)
    raise ValidationError(f"unknown baseline {which!r}")


def ablate(cfg: TrainConfig, variant: str, splits: Splits) -> RunSummary:
    return run_model(variant_config(cfg, variant), splits, variant)


# --------------------------------------------------------------------------- rollout


def rollout_window(original: Sequence, preds: Sequence, T: int) -> list:
    """Last ``T`` frames of the original window followed by the predictions so far."""
    seq = list(original) + list(preds)
    return seq[-T:]


def rollout(params, cfg: ModelConfig, traj: Trajectory, starts: Sequence[int], steps: int,
            attention: str | None = None) -> list[float]:
    """Recurrent forecasting: each predicted frame is fed back through a sliding window.

    Returns the mean per-node MSE at every step.  The neighbour graph of each
    window is rebuilt from its first frame, as for ordinary samples.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if attention is not None and attention != cfg.attention:
        if cfg.no_attention:
            raise ValidationError("model has no attention to switch")
        cfg = dataclasses.replace(cfg, attention=attention).validate()
    T, dt = cfg.T, cfg.dt
    vis = traj.visible()
    last_needed = [s + (T + steps - 1) * dt for s in starts]
    if not starts or max(last_needed) >= traj.frames:
        raise ValidationError(
            f"insufficient ground truth: {steps} steps need frame {max(last_needed, default=-1)}, "
            f"trajectory has {traj.frames}"
        )
    base = [make_sample(traj, s, T, dt, cfg.cutoff, cfg.use_2hop, cfg.ref_channel) for s in starts]
    frames = [list(s.X) for s in base]
    preds: list[list[np.ndarray]] = [[] for _ in base]
    out = []
    for k in range(1, steps + 1):
        windows = [np.stack(rollout_window(frames[i], preds[i], T)) for i in range(len(base))]
        samples = []
        for i, s in enumerate(base):
            graph = build_neighbors(windows[i][0, :, cfg.ref_channel], cfg.cutoff, cfg.use_2hop)
            label = vis[starts[i] + (T + k - 1) * dt]
            samples.append(dataclasses.replace(s, X=windows[i], label=label, graph=graph))
        batch = Batch.from_samples(samples)
        pred = predict(params, cfg, batch)
        out.append(float(per_sample_mse(pred, batch.label).mean()))
        for i in range(len(base)):
            preds[i].append(pred[i])
    return out


# --------------------------------------------------------------------------- verification


def random_orthogonal(rng: np.random.Generator, reflect: bool | None = None) -> np.ndarray:
    """Haar-ish orthogonal matrix from QR of a Gaussian; ``reflect`` forces det = -1 (or +1)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if reflect is not None and (np.linalg.det(q) < 0) != reflect:
        q[:, 0] = -q[:, 0]
    return q


def transform(X: np.ndarray, O: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Apply ``x -> O x + b`` to every 3-vector on the last axis."""
    return X @ O.T + b


def check_equivariance(params, cfg: ModelConfig, batch: Batch, trials: int = 100, seed: int = 0) -> float:
    """Max |f(OX+b) - (O f(X) + b)| over random orthogonal O (half reflections) and b in [-10, 10]^3."""
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    rng = make_rng(seed)
    base = estag_forward(batch, params, cfg).data
    worst = 0.0
    for trial in range(trials):
        O = random_orthogonal(rng, reflect=bool(trial % 2))
        b = rng.uniform(-10.0, 10.0, size=3)
        moved = estag_forward(batch.with_X(transform(batch.X, O, b)), params, cfg).data
        worst = max(worst, float(np.max(np.abs(moved - transform(base, O, b)))))
    return worst


def random_batch(cfg: ModelConfig, n_samples: int = 4, n_nodes: int = 5, seed: int = 0) -> Batch:
    """Random positions and features with graphs from frame 0 (for checks without data)."""
    rng = make_rng(seed)
    samples = []
    for _ in range(n_samples):
        X = rng.normal(size=(cfg.T, n_nodes, cfg.channels, 3))
        X += 0.1 * np.cumsum(rng.normal(size=X.shape), axis=0)
        feats = rng.integers(1, 4, size=(n_nodes, cfg.feat_dim)).astype(np.float64)
        graph = build_neighbors(X[0, :, cfg.ref_channel], max(cfg.cutoff, 2.0), cfg.use_2hop)
        samples.append(Sample(X, rng.normal(size=(n_nodes, cfg.channels, 3)), feats, graph))
    return Batch.from_samples(samples)


def gradcheck_loss(cfg: ModelConfig, batch: Batch):
    def f(P):
        return loss_mse(estag_forward(batch, P, cfg), batch.label)

    return f


def gradcheck_problem(cfg: ModelConfig, seed: int = 0, n_nodes: int = 3) -> tuple[Batch, ParamStore]:
    """One window of simulated springs (random positions when C > 1) and initial parameters."""
    if cfg.channels == 1:
        traj = simulate(SimConfig(n_visible=n_nodes, frames=cfg.T * cfg.dt + 1), seed)
        batch = Batch.from_samples(window(traj, cfg.T, cfg.dt, cfg.cutoff, cfg.use_2hop, [0]))
    else:
        batch = random_batch(cfg, n_samples=1, n_nodes=n_nodes, seed=seed)
    params = init_params(cfg, seed)
    if "pool.w" in params:
        # zero pooling weights would hide every frame but the last from the loss
        params["pool.w"] = make_rng(seed + 1).uniform(-0.5, 0.5, size=params["pool.w"].shape)
    return batch, params


def gradcheck(eps: float = 1e-5, seed: int = 0, cfg: ModelConfig | None = None,
              n_nodes: int = 3) -> float:
    """Max relative finite-difference error of the full loss (3 nodes, T=4, L=1, hidden 8 by default)."""
    cfg = cfg or ModelConfig(T=4, layers=1, hidden=8, filter_hidden=8)
    batch, params = gradcheck_problem(cfg, seed, n_nodes)
    return ad.finite_diff_check(gradcheck_loss(cfg, batch), params, eps)
