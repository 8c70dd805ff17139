"""Equivariant DFT of node trajectories and the invariant features built from it.

Arrays carry an arbitrary number of leading batch axes.  Trajectories are
``[..., T, N, 3]``; spectra are ``[..., N, K, 3]`` with ``K == T``
frequencies; the cross-correlation tensor is ``[..., N, N, K]`` and the
amplitudes ``[..., N, K]``.  Complex quantities are kept as separate real
and imaginary tensors.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import nn


@dataclass
class SpectralFeatures:
    f_re: ad.Value
    f_im: ad.Value
    A: ad.Value
    c_amp: ad.Value


@lru_cache(maxsize=64)
def dft_basis(T: int) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of ``exp(-2*pi*i*k*t/T)`` as ``[K, T]`` matrices."""
    k = np.arange(T)[:, None]
    t = np.arange(T)[None, :]
    angle = 2.0 * np.pi * ((k * t) % T) / T
    cos = np.cos(angle)
    sin = -np.sin(angle)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def center_positions(X) -> ad.Value:
    """Subtract the per-frame mean over nodes (axis -2)."""
    X = ad.lift(X)
    if X.ndim < 2 or X.shape[-1] != 3:
        raise ad.ShapeError("center_positions", X.shape)
    return X - ad.mean(X, axis=-2, keepdims=True)


def edft(Xc) -> tuple[ad.Value, ad.Value]:
    """Shared-basis DFT over the frame axis of centred positions.

    ``Xc`` is ``[..., T, N, 3]``; returns ``(f_re, f_im)`` each ``[..., N, K, 3]``.
    """
    Xc = ad.lift(Xc)
    if Xc.ndim < 3 or Xc.shape[-1] != 3:
        raise ad.ShapeError("edft", Xc.shape)
    *lead, T, N, _ = Xc.shape
    cos, sin = dft_basis(T)
    flat = ad.reshape(Xc, (*lead, T, N * 3))
    nd = len(lead)
    perm = tuple(range(nd)) + (nd + 1, nd, nd + 2)

    def project(basis):
        f = ad.reshape(ad.matmul(basis, flat), (*lead, T, N, 3))
        return ad.transpose(f, perm)

    return project(cos), project(sin)


@dataclass
class SpectralFilter:
    """Per-frequency weights ``w_k(h)`` from initial node features: c -> hidden -> T."""

    params: Mapping
    prefix: str = "filter"

    @staticmethod
    def init(store: dict, rng: np.random.Generator, feat_dim: int, T: int, hidden: int = 16,
             prefix: str = "filter") -> None:
        nn.add_mlp(store, rng, prefix, feat_dim, hidden, T)

    def __call__(self, H0) -> ad.Value:
        return spectral_filter_apply(self, H0)


def spectral_filter_apply(filt: SpectralFilter, H0) -> ad.Value:
    """``W[..., i, k] = w_k(h_i)``; depends on node features only."""
    return nn.mlp(H0, filt.params, filt.prefix)


def cross_correlation(f_re, f_im, W) -> ad.Value:
    """``A[i, j, k] = W[i, k] W[j, k] |<f_i(k), f_j(k)>|`` with the conjugate-linear inner product."""
    f_re, f_im, W = ad.lift(f_re), ad.lift(f_im), ad.lift(W)
    ar, ai = f_re[..., :, None, :, :], f_im[..., :, None, :, :]
    br, bi = f_re[..., None, :, :, :], f_im[..., None, :, :, :]
    # conj(a) . b = (ar.br + ai.bi) + i (ar.bi - ai.br)
    re = (ar * br + ai * bi).sum(axis=-1)
    im = (ar * bi - ai * br).sum(axis=-1)
    modulus = ad.sqrt(re * re + im * im)
    return W[..., :, None, :] * W[..., None, :, :] * modulus


def amplitudes(f_re, f_im, W) -> ad.Value:
    """``c[i, k] = W[i, k] * ||f_i(k)||^2``."""
    f_re, f_im = ad.lift(f_re), ad.lift(f_im)
    power = ad.sqnorm(f_re, keepdims=False) + ad.sqnorm(f_im, keepdims=False)
    return ad.lift(W) * power


def spectral_features(X, W) -> SpectralFeatures:
    """Centre, transform and derive ``A`` and ``c`` in one call."""
    f_re, f_im = edft(center_positions(X))
    return SpectralFeatures(f_re, f_im, cross_correlation(f_re, f_im, W), amplitudes(f_re, f_im, W))


def write_spectra(path, A: np.ndarray) -> None:
    """Dump ``A`` as one whitespace-delimited N x N block per frequency."""
    A = np.asarray(A)
    N, _, K = A.shape
    with open(path, "w") as fh:
        for k in range(K):
            fh.write(f"# frequency {k}\n")
            for i in range(N):
                fh.write(" ".join(f"{A[i, j, k]:.17g}" for j in range(N)) + "\n")
            fh.write("\n")
