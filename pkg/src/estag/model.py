"""ESTAG: alternating equivariant spatial / temporal layers with equivariant pooling.

All forward functions work on a :class:`Batch` whose coordinates are shaped
``[B, T, N, C, 3]`` (``C`` coordinate channels per node) and take parameters as
a name -> tensor mapping; the tensors may be plain arrays or tape Values.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fourier, nn
from .autodiff import ParamStore
from .data import Sample, make_rng
from .errors import FormatError, ValidationError

CHECKPOINT_MAGIC = b"ESTC"
CHECKPOINT_VERSION = 1

VARIANTS = ("no_edft", "no_attention", "no_equivariance", "no_temporal", "no_wk")


@dataclass
class ModelConfig:
    T: int = 10
    dt: int = 10
    layers: int = 2
    hidden: int = 16
    channels: int = 1
    feat_dim: int = 1
    cutoff: float = 1.6
    use_2hop: bool = True
    no_edft: bool = False
    no_attention: bool = False
    no_equivariance: bool = False
    no_temporal: bool = False
    no_wk: bool = False
    attention: str = "forward"
    gram_normalization: bool = False
    ref_channel: int = 0
    filter_hidden: int = 16

    def validate(self) -> "ModelConfig":
        if self.layers < 1 or self.hidden < 1 or self.channels < 1 or self.feat_dim < 1:
            raise ValidationError("layers, hidden, channels and feat_dim must be >= 1")
        if self.dt < 1:
            raise ValidationError("dt must be >= 1")
        if self.attention not in ("forward", "full"):
            raise ValidationError(f"attention must be 'forward' or 'full', got {self.attention!r}")
        if self.no_attention and self.attention == "full":
            raise ValidationError("attention='full' is meaningless with no_attention")
        if self.no_wk and self.no_edft:
            raise ValidationError("no_wk needs the spectral features that no_edft removes")
        if self.no_equivariance and self.no_temporal:
            raise ValidationError("no_equivariance has no temporal pooling to replace")
        single_frame = self.no_edft and self.no_attention and not self.no_equivariance
        if self.T < 2 and not (self.T == 1 and single_frame):
            raise ValidationError("T must be >= 2 (T = 1 only for the single-frame EGNN variant)")
        if not 0 <= self.ref_channel < self.channels:
            raise ValidationError(f"ref_channel {self.ref_channel} out of range for {self.channels} channels")
        if not self.cutoff > 0:
            raise ValidationError("cutoff must be positive")
        return self

    @property
    def variant(self) -> str:
        flags = [v for v in VARIANTS if getattr(self, v)]
        return "+".join(flags) if flags else "estag"

    @property
    def edge_dim(self) -> int:
        return 3 if self.no_edft else self.T + 2

    @property
    def pair_dim(self) -> int:
        return self.channels * self.channels

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValidationError(f"unknown ModelConfig fields {sorted(unknown)}")
        return cls(**raw).validate()


# --------------------------------------------------------------------------- batches


@dataclass
class Batch:
    X: np.ndarray  # [B, T, N, C, 3]
    feats: np.ndarray  # [B, N, c]
    adj: np.ndarray  # [B, N, N] 1.0 where j is a neighbour of i
    hop: np.ndarray  # [B, N, N, 2] one-hot hop type
    label: np.ndarray | None = None  # [B, N, C, 3]

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        if not samples:
            raise ValidationError("cannot batch zero samples")
        hops = np.stack([s.graph.hop_matrix() for s in samples])
        onehot = np.stack([hops == 1, hops == 2], axis=-1).astype(np.float64)
        labels = [s.label for s in samples]
        return cls(
            X=np.stack([s.X for s in samples]).astype(np.float64),
            feats=np.stack([s.node_feats for s in samples]).astype(np.float64),
            adj=(hops > 0).astype(np.float64),
            hop=onehot,
            label=None if any(l is None for l in labels) else np.stack(labels).astype(np.float64),
        )

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.X[idx], self.feats[idx], self.adj[idx], self.hop[idx],
                     None if self.label is None else self.label[idx])

    def with_X(self, X) -> "Batch":
        return dataclasses.replace(self, X=X)


# --------------------------------------------------------------------------- parameters


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> ParamStore:
    """Initial parameters; the insertion order below is the checkpoint order.

    ``embed`` -> ``filter`` (if spectral weights are learned) -> ``coord``
    (non-equivariant variant) -> per layer ``esm{l}.phi_m``, ``esm{l}.phi_h``,
    ``esm{l}.phi_x`` then ``etm{l}.phi_q/k/v``, ``etm{l}.phi_x`` -> ``pool`` or
    ``head``.  Linear layers draw from U(-sqrt(1/fan_in), sqrt(1/fan_in)); the
    pooling weights start at zero.
    """
    cfg.validate()
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    H, T = cfg.hidden, cfg.T
    store: dict[str, np.ndarray] = {}
    nn.add_linear(store, rng, "embed", cfg.feat_dim, H)
    if not cfg.no_edft and not cfg.no_wk:
        fourier.SpectralFilter.init(store, rng, cfg.feat_dim, T, cfg.filter_hidden)
    if cfg.no_equivariance:
        nn.add_linear(store, rng, "coord", 3 * cfg.channels, H, bias=False)
    c_dim = 0 if cfg.no_edft else T
    pair = 0 if cfg.no_equivariance else cfg.pair_dim
    for l in range(cfg.layers):
        nn.add_mlp(store, rng, f"esm{l}.phi_m", 2 * H + pair + cfg.edge_dim, H, H)
        nn.add_mlp(store, rng, f"esm{l}.phi_h", 2 * H + c_dim, H, H)
        if not cfg.no_equivariance:
            nn.add_linear(store, rng, f"esm{l}.phi_x", H, 1, bias=False)
        if not cfg.no_attention:
            for name in ("phi_q", "phi_k", "phi_v"):
                nn.add_mlp(store, rng, f"etm{l}.{name}", H, H, H)
            if not cfg.no_equivariance:
                nn.add_linear(store, rng, f"etm{l}.phi_x", H, 1, bias=False)
    if cfg.no_equivariance:
        nn.add_linear(store, rng, "head", H, 3 * cfg.channels)
    elif cfg.no_temporal:
        store["pool.logits"] = np.zeros(T)
    else:
        store["pool.w"] = np.zeros(T - 1)
    return ParamStore(store)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


# --------------------------------------------------------------------------- building blocks


_warned_isolated = False


def _inv_degree(adj: np.ndarray) -> np.ndarray:
    global _warned_isolated
    deg = adj.sum(axis=-1)
    if (deg == 0).any() and not _warned_isolated:
        warnings.warn("node without neighbours: its spatial coordinate update is zero", RuntimeWarning)
        _warned_isolated = True
    return 1.0 / np.maximum(deg, 1.0)


def _pair_invariant(xij: ad.Value, multichannel: bool, normalize: bool) -> ad.Value:
    """Invariant of relative positions ``[..., C, 3]``: squared norm or flattened Gram matrix."""
    if not multichannel:
        return ad.sqnorm(xij[..., 0, :])
    gram = (xij[..., :, None, :] * xij[..., None, :, :]).sum(axis=-1)
    if normalize:
        fro = ad.frobenius(gram)
        gram = gram / (fro + (fro.data == 0.0))  # zero Gram stays zero
    C = xij.shape[-2]
    return ad.reshape(gram, gram.shape[:-2] + (C * C,))


def _pairwise(h: ad.Value) -> tuple[ad.Value, ad.Value]:
    """Broadcast ``[..., N, D]`` into receiver/sender copies ``[..., N, N, D]``."""
    *lead, N, D = h.shape
    full = (*lead, N, N, D)
    return ad.broadcast_to(h[..., :, None, :], full), ad.broadcast_to(h[..., None, :, :], full)


def esm_layer(h, x, edge, c_amp, adj, P: Mapping, l: int, multichannel: bool = False,
              normalize: bool = False):
    """One spatial message-passing layer applied to every frame.

    h ``[B, T, N, H]``, x ``[B, T, N, C, 3]``, edge ``[B, N, N, E]``,
    c_amp ``[B, N, K]`` or None, adj ``[B, N, N]``.  Returns ``(h, x)``.
    """
    h, x = ad.lift(h), ad.lift(x)
    B, T, N, C, _ = x.shape
    geometric = f"esm{l}.phi_x.w" in P
    hi, hj = _pairwise(h)
    E = edge.shape[-1]
    edge_t = ad.broadcast_to(ad.lift(edge)[:, None], (B, T, N, N, E))
    if geometric:
        xij = x[:, :, :, None] - x[:, :, None, :]  # [B, T, N, N, C, 3]
        inv = _pair_invariant(xij, multichannel, normalize)
        m_in = [hi, hj, inv, edge_t]
    else:
        m_in = [hi, hj, edge_t]
    m = nn.mlp(ad.concat(m_in, axis=-1), P, f"esm{l}.phi_m")
    mask = adj[:, None, :, :, None]
    m = m * mask
    agg = m.sum(axis=3)
    parts = [h]
    if c_amp is not None:
        K = c_amp.shape[-1]
        parts.append(ad.broadcast_to(ad.lift(c_amp)[:, None], (B, T, N, K)))
    parts.append(agg)
    h_new = h + nn.mlp(ad.concat(parts, axis=-1), P, f"esm{l}.phi_h")
    if not geometric:
        return h_new, x
    scale = nn.linear(m, P, f"esm{l}.phi_x")  # [B, T, N, N, 1]; zero off-graph
    shift = (xij * ad.reshape(scale, (B, T, N, N, 1, 1))).sum(axis=3)
    inv_deg = _inv_degree(adj)[:, None, :, None, None]
    return h_new, x + shift * inv_deg


def attention_mask(T: int, mode: str) -> np.ndarray:
    """``[T, T]`` boolean mask; row t may attend to column s."""
    if mode == "forward":
        return np.tril(np.ones((T, T), dtype=bool))
    if mode == "full":
        return np.ones((T, T), dtype=bool)
    raise ValidationError(f"unknown attention mode {mode!r}")


def etm_layer(h, x, P: Mapping, l: int, mode: str = "forward", return_alpha: bool = False):
    """Per-node attention over frames with displacement-based coordinate updates.

    h ``[B, T, N, H]``, x ``[B, T, N, C, 3]``.  Logits are plain ``q.k`` dot
    products.  Returns ``(h, x)`` (and the ``[B, N, T, T]`` weights if asked).
    """
    h, x = ad.lift(h), ad.lift(x)
    B, T, N, C, _ = x.shape
    ht = ad.transpose(h, (0, 2, 1, 3))  # [B, N, T, H]
    q = nn.mlp(ht, P, f"etm{l}.phi_q")
    k = nn.mlp(ht, P, f"etm{l}.phi_k")
    v = nn.mlp(ht, P, f"etm{l}.phi_v")
    logits = q @ ad.transpose(k, (0, 1, 3, 2))
    alpha = ad.softmax(logits, attention_mask(T, mode))
    h_new = ad.transpose(ht + alpha @ v, (0, 2, 1, 3))
    x_new = x
    if f"etm{l}.phi_x.w" in P:
        xt = ad.reshape(ad.transpose(x, (0, 2, 1, 3, 4)), (B, N, T, 3 * C))
        scale = nn.linear(v, P, f"etm{l}.phi_x")  # [B, N, T(s), 1]
        wts = alpha * ad.reshape(scale, (B, N, 1, T))
        disp = xt[:, :, :, None, :] - xt[:, :, None, :, :]  # x(t) - x(s)
        upd = (disp * ad.reshape(wts, (B, N, T, T, 1))).sum(axis=3)
        x_new = ad.transpose(ad.reshape(xt + upd, (B, N, T, C, 3)), (0, 2, 1, 3, 4))
    if return_alpha:
        return h_new, x_new, alpha
    return h_new, x_new


def temporal_pool(x, w) -> ad.Value:
    """``x(T-1) + sum_s w_s (x(s) - x(T-1))`` over ``s < T-1``; x is ``[B, T, ...]``."""
    x, w = ad.lift(x), ad.lift(w)
    T = x.shape[1]
    if w.shape != (T - 1,):
        raise ad.ShapeError("temporal_pool", x.shape, w.shape)
    last = x[:, T - 1]
    if T == 1:
        return last
    hat = x[:, : T - 1] - x[:, T - 1 : T]
    wb = ad.reshape(w, (1, T - 1) + (1,) * (x.ndim - 2))
    return (hat * wb).sum(axis=1) + last


def softmax_pool(x, logits) -> ad.Value:
    """Convex combination of frames with softmax(logits) weights."""
    x = ad.lift(x)
    T = x.shape[1]
    wts = ad.softmax(logits)
    wb = ad.reshape(wts, (1, T) + (1,) * (x.ndim - 2))
    return (x * wb).sum(axis=1)


def spectral_weights(cfg: ModelConfig, P: Mapping, feats) -> ad.Value:
    if cfg.no_wk:
        return ad.Value(np.ones(np.shape(feats)[:-1] + (cfg.T,)))
    return fourier.spectral_filter_apply(fourier.SpectralFilter(P), feats)


def edge_features(cfg: ModelConfig, P: Mapping, batch: Batch, Xref):
    """Edge tensor ``[B, N, N, E]`` and node amplitudes ``[B, N, K]`` (None without EDFT)."""
    if cfg.no_edft:
        x0 = ad.lift(Xref)[:, 0]
        d0 = ad.sqrt(ad.sqnorm(x0[:, :, None, :] - x0[:, None, :, :]))
        return ad.concat([ad.lift(batch.hop), d0], axis=-1), None
    W = spectral_weights(cfg, P, batch.feats)
    spectra = fourier.spectral_features(Xref, W)
    return ad.concat([spectra.A, ad.lift(batch.hop)], axis=-1), spectra.c_amp


def _check_batch(batch: Batch, cfg: ModelConfig) -> None:
    B, T, N, C, three = np.shape(batch.X.data if isinstance(batch.X, ad.Value) else batch.X)
    if T != cfg.T or C != cfg.channels or three != 3:
        raise ValidationError(f"batch shape {(B, T, N, C, three)} does not match config T={cfg.T}, C={cfg.channels}")
    if batch.feats.shape[-1] != cfg.feat_dim:
        raise ValidationError(f"node features have width {batch.feats.shape[-1]}, config expects {cfg.feat_dim}")


def _forward(batch: Batch, P: Mapping, cfg: ModelConfig, multichannel: bool, return_states: bool):
    _check_batch(batch, cfg)
    X = ad.lift(batch.X)
    T = cfg.T
    Xref = X[:, :, :, cfg.ref_channel]
    edge, c_amp = edge_features(cfg, P, batch, Xref)
    h = nn.linear(batch.feats, P, "embed")  # [B, N, H]
    B, N, H = h.shape
    h = ad.broadcast_to(h[:, None], (B, T, N, H))
    x = X
    states = [(h, x)]
    for l in range(cfg.layers):
        h, x = esm_layer(h, x, edge, c_amp, batch.adj, P, l, multichannel, cfg.gram_normalization)
        states.append((h, x))
        if not cfg.no_attention:
            h, x = etm_layer(h, x, P, l, cfg.attention)
            states.append((h, x))
    pred = softmax_pool(x, P["pool.logits"]) if cfg.no_temporal else temporal_pool(x, P["pool.w"])
    if return_states:
        return pred, states
    return pred


def _forward_vanilla(batch: Batch, P: Mapping, cfg: ModelConfig, return_states: bool):
    """Non-equivariant variant: raw coordinates enter as node features, a head emits positions."""
    _check_batch(batch, cfg)
    X = ad.lift(batch.X)
    B, T, N, C, _ = X.shape
    Xref = X[:, :, :, cfg.ref_channel]
    edge, c_amp = edge_features(cfg, P, batch, Xref)
    h0 = nn.linear(batch.feats, P, "embed")
    H = h0.shape[-1]
    h = ad.broadcast_to(h0[:, None], (B, T, N, H)) + nn.linear(ad.reshape(X, (B, T, N, 3 * C)), P, "coord")
    states = [(h, X)]
    for l in range(cfg.layers):
        h, _ = esm_layer(h, X, edge, c_amp, batch.adj, P, l)
        states.append((h, X))
        if not cfg.no_attention:
            h, _ = etm_layer(h, X, P, l, cfg.attention)
            states.append((h, X))
    pred = ad.reshape(nn.linear(h[:, T - 1], P, "head"), (B, N, C, 3))
    if return_states:
        return pred, states
    return pred


def estag_forward(batch: Batch, P: Mapping, cfg: ModelConfig, return_states: bool = False):
    """EDFT features, ``layers`` rounds of ESM then ETM, then temporal pooling.

    Returns the predicted next frame ``[B, N, C, 3]``; with ``return_states``
    also the list of ``(h, x)`` after the embedding and after every half layer.
    """
    if cfg.no_equivariance:
        return _forward_vanilla(batch, P, cfg, return_states)
    return _forward(batch, P, cfg, cfg.channels > 1, return_states)


def mc_esm_layer(h, x, edge, c_amp, adj, P, l, normalize: bool = True):
    return esm_layer(h, x, edge, c_amp, adj, P, l, multichannel=True, normalize=normalize)


def mc_etm_layer(h, x, P, l, mode: str = "forward"):
    return etm_layer(h, x, P, l, mode)


def mc_forward(batch: Batch, P: Mapping, cfg: ModelConfig, return_states: bool = False):
    """Multi-channel forward: Gram-matrix invariants and reference-channel EDFT even when C = 1."""
    if cfg.no_equivariance:
        return _forward_vanilla(batch, P, cfg, return_states)
    return _forward(batch, P, cfg, True, return_states)


def loss_mse(pred, label) -> ad.Value:
    """Sum of squared Euclidean errors over every node and channel (and batch entry)."""
    pred, label = ad.lift(pred), ad.lift(label)
    if pred.shape != label.shape:
        raise ad.ShapeError("loss_mse", pred.shape, label.shape)
    diff = pred - label
    return (diff * diff).sum()


def per_node_mse(pred, label) -> ad.Value:
    """``loss_mse`` divided by the number of (sample, node, channel) triples."""
    pred = ad.lift(pred)
    count = int(np.prod(pred.shape[:-1]))
    return loss_mse(pred, label) * (1.0 / count)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> None:
    """``ESTC`` | version u32 | config length u32 | config JSON | count u32 | float64 tensors."""
    shapes = param_shapes(cfg)
    if list(shapes) != list(params):
        raise ValidationError("parameter names do not match the configuration")
    blob = cfg.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(shapes)))
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype="<f8")
            if arr.shape != shape:
                raise ad.ShapeError(f"save_checkpoint[{name}]", shape, arr.shape)
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ParamStore]:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header", len(buf))
    magic, version, n = struct.unpack_from("<4sII", buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = 12
    if len(buf) < off + n + 4:
        raise FormatError("truncated checkpoint config", len(buf))
    try:
        cfg = ModelConfig.from_json(buf[off : off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint config: {exc}", off) from None
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    shapes = param_shapes(cfg)
    if count != len(shapes):
        raise FormatError(f"checkpoint has {count} tensors, config implies {len(shapes)}", off - 4)
    params = ParamStore()
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        if len(buf) < off + 8 * size:
            raise FormatError(f"truncated tensor {name!r}", len(buf))
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return cfg, params
