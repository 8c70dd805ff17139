"""Acceptance suite: one PASS/FAIL line per criterion, printed in the pytest summary.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 6 minutes on one
core) or as a script with ``python tests/test_acceptance.py``.
"""

import cmath
import dataclasses
import time

import numpy as np
import pytest

from estag import autodiff as ad
from estag import data as D
from estag import fourier
from estag import harness as H
from estag import model as M

RESULTS: list[str] = []
SEEDS = (0, 1, 2)
DATA_SEED = 1


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title} | {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# --------------------------------------------------------------------------- shared experiment


@dataclasses.dataclass
class Experiment:
    traj: D.Trajectory
    splits: H.Splits
    cfg: H.TrainConfig
    pt: dict
    runs: dict  # (model name, seed) -> RunSummary
    seconds: float


@pytest.fixture(scope="module")
def dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance") / "oscillators.estg"
    D.write_dataset(D.simulate(D.SimConfig(), DATA_SEED), path)
    return path


@pytest.fixture(scope="module")
def experiment(dataset_path):
    t0 = time.perf_counter()
    traj = D.read_dataset(dataset_path)
    base = H.TrainConfig(epochs=100, record_time=False)
    splits = H.make_splits(traj, base)
    pt = {w: H.baseline_pt(splits.test, w) for w in "smt"}
    runs = {}
    for seed in SEEDS:
        cfg = dataclasses.replace(base, seed=seed)
        runs["estag", seed] = H.run_model(cfg, splits, "estag")
        runs["st-weighted", seed] = H.baseline(cfg, "st-weighted", splits)
        runs["no_attention", seed] = H.ablate(cfg, "no_attention", splits)
        runs["no_equivariance", seed] = H.ablate(cfg, "no_equivariance", splits)
    return Experiment(traj, splits, base, pt, runs, time.perf_counter() - t0)


def _mse(exp, name, seed):
    return exp.runs[name, seed].test_mse


def _nonzero_pool(params, seed=0):
    P = params.copy()
    if "pool.w" in P:
        P["pool.w"] = np.random.default_rng(seed).uniform(-0.5, 0.5, P["pool.w"].shape)
    return P


# --------------------------------------------------------------------------- criteria


def test_criterion_01_equivariance(experiment):
    cfg = M.ModelConfig()
    t0 = time.perf_counter()
    fresh = H.check_equivariance(_nonzero_pool(M.init_params(cfg, 0)), cfg, H.random_batch(cfg, seed=0), 100)
    first = time.perf_counter() - t0
    trained = experiment.runs["estag", 0].result.params
    batch = M.Batch.from_samples(experiment.splits.test[:4])
    t0 = time.perf_counter()
    after = H.check_equivariance(trained, cfg, batch, 100, seed=1)
    second = time.perf_counter() - t0
    ok = fresh <= 1e-8 and after <= 1e-8 and max(first, second) < 60
    report(1, "E(3) equivariance, 100 trials with reflections", ok,
           f"random init {fresh:.2e}, trained {after:.2e} (tol 1e-8); {first:.1f}s / {second:.1f}s")


def _direct_dft(X):
    T, N = len(X), len(X[0])
    out = [[[0j] * 3 for _ in range(T)] for _ in range(N)]
    for t in range(T):
        mean = [sum(X[t][j][d] for j in range(N)) / N for d in range(3)]
        for i in range(N):
            for k in range(T):
                phase = cmath.exp(-2j * cmath.pi * k * t / T)
                for d in range(3):
                    out[i][k][d] += phase * (X[t][i][d] - mean[d])
    return np.array(out)


def test_criterion_02_edft_oracle():
    rng = np.random.default_rng(2)
    oracle_err = sym_err = inv_err = 0.0
    for _ in range(50):
        T, N = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        X = rng.uniform(-3, 3, size=(T, N, 3))
        W = rng.normal(size=(N, T))
        f_re, f_im = fourier.edft(fourier.center_positions(X))
        ref = _direct_dft(X.tolist())
        oracle_err = max(oracle_err, np.abs(f_re.data - ref.real).max(), np.abs(f_im.data - ref.imag).max())
        spectra = fourier.spectral_features(X, W)
        A = spectra.A.data
        sym_err = max(sym_err, np.abs(A - A.transpose(1, 0, 2)).max())
        O = H.random_orthogonal(rng, reflect=bool(rng.integers(2)))
        moved = fourier.spectral_features(H.transform(X, O, rng.uniform(-10, 10, 3)), W)
        inv_err = max(inv_err, np.abs(moved.A.data - A).max(), np.abs(moved.c_amp.data - spectra.c_amp.data).max())
    ok = oracle_err <= 1e-12 and sym_err <= 1e-10 and inv_err <= 1e-10
    report(2, "EDFT vs direct summation; A symmetric; A, c invariant", ok,
           f"oracle {oracle_err:.1e} (tol 1e-12), symmetry {sym_err:.1e}, invariance {inv_err:.1e} (tol 1e-10)")


def test_criterion_03_gradcheck():
    t0 = time.perf_counter()
    err = H.gradcheck(eps=1e-5)
    elapsed = time.perf_counter() - t0
    report(3, "finite-difference check of the full loss (3 nodes, T=4, L=1, hidden 8)", err <= 1e-4 and elapsed < 120,
           f"max relative error {err:.2e} (tol 1e-4), eps 1e-5, {elapsed:.1f}s")


def test_criterion_04_attention_contract():
    cfg = M.ModelConfig()
    P = M.init_params(cfg, 4)
    batch = H.random_batch(cfg, seed=4)
    h0 = np.random.default_rng(4).normal(size=batch.X.shape[:3] + (cfg.hidden,))
    _, x_new, alpha = M.etm_layer(h0, batch.X, P, 0, "forward", return_alpha=True)
    a = alpha.data
    row_err = np.abs(a.sum(axis=-1) - 1.0).max()
    future = ~M.attention_mask(cfg.T, "forward")
    masked_zero = bool(np.all(a[..., future] == 0.0))
    # masked terms never reach the tape: nothing flows back from frame t to later frames
    grad_zero = True
    for t in range(cfg.T - 1):
        tape = ad.Tape()
        with tape:
            h, x = tape.watch("h", h0), tape.watch("x", batch.X)
            hn, xn = M.etm_layer(h, x, P, 0, "forward")
            out = hn[:, t].sum() + xn[:, t].sum()
        g = tape.backward(out)
        grad_zero &= bool(np.all(g["h"][:, t + 1:] == 0.0) and np.all(g["x"][:, t + 1:] == 0.0))
    first = bool(np.all(a[..., 0, 0] == 1.0)) and bool(np.array_equal(x_new.data[:, 0], batch.X[:, 0]))
    ok = row_err <= 1e-12 and masked_zero and grad_zero and first
    report(4, "forward attention rows, mask, first frame", ok,
           f"row-sum error {row_err:.1e} (tol 1e-12); masked weights zero={masked_zero}; "
           f"future gradients zero={grad_zero}; t=0 weight 1 and no update={first}")


def test_criterion_05_pooling_contract():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 10, 5, 1, 3))
    zero_w = np.array_equal(M.temporal_pool(x, np.zeros(9)).data, x[:, 9])
    w = rng.normal(size=9)
    b = rng.uniform(-10, 10, 3)
    shift_err = np.abs(M.temporal_pool(x + b, w).data - (M.temporal_pool(x, w).data + b)).max()
    report(5, "temporal pooling", zero_w and shift_err <= 1e-12,
           f"w=0 gives frame T-1 exactly={zero_w}; translation error {shift_err:.1e} (tol 1e-12)")


def test_criterion_06_multichannel():
    cfg = M.ModelConfig()
    P = _nonzero_pool(M.init_params(cfg, 6), 6)
    batch = H.random_batch(cfg, seed=6)
    bitwise = M.mc_forward(batch, P, cfg).data.tobytes() == M.estag_forward(batch, P, cfg).data.tobytes()
    rng = np.random.default_rng(6)
    Z = rng.normal(size=(200, 4, 3))
    g = M._pair_invariant(ad.Value(Z), True, True).data
    norm_err = np.abs(np.linalg.norm(g.reshape(-1, 4, 4), axis=(-2, -1)) - 1.0).max()
    inv_err = 0.0
    for reflect in (False, True):
        O = H.random_orthogonal(rng, reflect)
        inv_err = max(inv_err, np.abs(M._pair_invariant(ad.Value(Z @ O.T), True, True).data - g).max())
    mc = M.ModelConfig(channels=4, gram_normalization=True)
    mc_dev = H.check_equivariance(_nonzero_pool(M.init_params(mc, 6)), mc, H.random_batch(mc, seed=6), 10)
    ok = bitwise and norm_err <= 1e-12 and inv_err <= 1e-12 and mc_dev <= 1e-8
    report(6, "multi-channel reduction and Gram invariants", ok,
           f"m=1 bitwise match={bitwise}; unit Frobenius error {norm_err:.1e}; orthogonal invariance "
           f"{inv_err:.1e} (tol 1e-12); 4-channel equivariance {mc_dev:.1e}")


def test_criterion_07_comparative(experiment):
    est = [_mse(experiment, "estag", s) for s in SEEDS]
    st = [_mse(experiment, "st-weighted", s) for s in SEEDS]
    noatt = [_mse(experiment, "no_attention", s) for s in SEEDS]
    pt_t = experiment.pt["t"]
    per_seed = all(e <= 0.5 * pt_t for e in est)
    means = np.mean(est) <= np.mean(st) and np.mean(est) <= np.mean(noatt)
    ok = per_seed and means and experiment.seconds < 1800
    report(7, "ESTAG beats copy, st-weighted and no-attention", ok,
           f"ESTAG {', '.join(f'{e:.2e}' for e in est)} vs 0.5*Pt-t {0.5 * pt_t:.2e}; means ESTAG "
           f"{np.mean(est):.2e}, st-weighted {np.mean(st):.2e}, no_attention {np.mean(noatt):.2e}; "
           f"{experiment.seconds / 60:.1f} min")


def test_criterion_08_copy_baseline_order(experiment):
    s, m, t = (experiment.pt[w] for w in "smt")
    report(8, "Pt-s > Pt-m > Pt-t", s > m > t, f"Pt-s {s:.3e}, Pt-m {m:.3e}, Pt-t {t:.3e}")


def test_criterion_09_equivariance_ablation(experiment):
    cfg = H.variant_config(experiment.cfg, "no_equivariance").model
    batch = M.Batch.from_samples(experiment.splits.test[:4])
    devs = [H.check_equivariance(experiment.runs["no_equivariance", s].result.params, cfg, batch, 10) for s in SEEDS]
    pairs = [(_mse(experiment, "no_equivariance", s), _mse(experiment, "estag", s)) for s in SEEDS]
    ok = all(d > 1e-3 for d in devs) and all(a >= b for a, b in pairs)
    report(9, "no_equivariance breaks symmetry and does not beat ESTAG", ok,
           f"deviations {', '.join(f'{d:.2e}' for d in devs)} (need > 1e-3); MSE no_eq/ESTAG "
           + ", ".join(f"{a:.2e}/{b:.2e}" for a, b in pairs))


def test_criterion_10_determinism_and_io(dataset_path, tmp_path):
    traj = D.read_dataset(dataset_path)
    files = []
    for run in ("a", "b"):
        cfg = H.TrainConfig(epochs=5, seed=3, record_time=False, metrics=str(tmp_path / f"{run}.jsonl"),
                            checkpoint=str(tmp_path / f"{run}.estc"))
        H.train(cfg, traj)
        files.append((open(cfg.metrics, "rb").read(), open(cfg.checkpoint, "rb").read()))
    same_metrics = files[0][0] == files[1][0] and len(files[0][0]) > 0
    same_ckpt = files[0][1] == files[1][1]
    D.write_dataset(traj, tmp_path / "copy.estg")
    data_rt = (tmp_path / "copy.estg").read_bytes() == dataset_path.read_bytes()
    back = D.read_dataset(tmp_path / "copy.estg")
    data_rt &= back.positions.tobytes() == traj.positions.tobytes()
    mcfg, params = M.load_checkpoint(tmp_path / "a.estc")
    M.save_checkpoint(tmp_path / "again.estc", mcfg, params)
    ckpt_rt = (tmp_path / "again.estc").read_bytes() == files[0][1]
    ok = same_metrics and same_ckpt and data_rt and ckpt_rt
    report(10, "determinism and bitwise round trips", ok,
           f"metrics identical={same_metrics}; checkpoints identical={same_ckpt}; "
           f"dataset round trip={data_rt}; checkpoint round trip={ckpt_rt}")


def test_criterion_11_rollout(experiment):
    cfg = experiment.cfg.model
    params = experiment.runs["estag", 0].result.params
    starts = [s.start for s in experiment.splits.test[:20]]
    one = H.rollout(params, cfg, experiment.traj, starts, 1)
    ref = H.evaluate(params, cfg, experiment.splits.test[:20])
    ten = H.rollout(params, cfg, experiment.traj, starts, 10, attention="full")
    ok = abs(one[0] - ref) <= 1e-12 and len(ten) == 10 and all(np.isfinite(ten))
    report(11, "rollout", ok,
           f"1-step {one[0]:.6e} vs evaluate {ref:.6e} (diff {abs(one[0] - ref):.1e}, tol 1e-12); "
           f"10-step full attention emitted {len(ten)} values, last {ten[-1]:.3e}")


if __name__ == "__main__":  # pragma: no cover
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
