"""Frequency-domain attention over band components of an embedded sequence."""
from __future__ import annotations

import functools
import math
from typing import Optional

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, as_tensor, dft_real, fan_in_uniform, softmax


@functools.lru_cache(maxsize=32)
def _band_basis(L: int):
    f = L // 2
    k = np.arange(f + 1)
    t = np.arange(L)[:, None]
    angle = 2.0 * np.pi * ((k[None, :] * t) % L) / L
    gain = np.full(f + 1, 2.0 / L)
    gain[0] = 1.0 / L
    if L % 2 == 0:
        gain[f] = 1.0 / L
    return (
        torch.from_numpy(np.cos(angle) * gain),
        torch.from_numpy(np.sin(angle) * gain),
    )


def band_components(E) -> torch.Tensor:
    """Per-frequency time-domain parts of ``E``, shape ``(..., L, f+1, d_m)``.

    Block ``k`` at step ``t`` is ``g_k |X_k| cos(2 pi k t / L + angle(X_k))`` per
    channel, written as ``g_k (Re X_k cos - Im X_k sin)``; the blocks sum to ``E``.
    """
    E = as_tensor(E)
    L = E.shape[-2]
    spec = dft_real(E, dim=-2)
    cos, sin = _band_basis(L)
    return torch.einsum("tk,...kc->...tkc", cos, spec.real) - torch.einsum("tk,...kc->...tkc", sin, spec.imag)


def frequency_features(E) -> torch.Tensor:
    """Flattened band components, ``(..., L, (f+1)*d_m)`` with block ``k`` in columns ``k*d_m:(k+1)*d_m``."""
    bands = band_components(E)
    return bands.reshape(*bands.shape[:-2], bands.shape[-2] * bands.shape[-1])


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale_dim: int):
    scores = q @ k.transpose(-1, -2) / math.sqrt(scale_dim)
    weights = softmax(scores, dim=-1)
    return weights @ v, weights


class SpectralAttention(nn.Module):
    """Single-head attention with queries/keys projected from band features, values from ``E``."""

    def __init__(self, L: int, d_m: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        self.L, self.d_m = L, d_m
        width = (L // 2 + 1) * d_m
        self.W_Q = nn.Parameter(fan_in_uniform((width, d_m), width, g))
        self.W_K = nn.Parameter(fan_in_uniform((width, d_m), width, g))
        self.W_V = nn.Parameter(fan_in_uniform((d_m, d_m), d_m, g))
        self.W_O = nn.Parameter(fan_in_uniform((d_m, d_m), d_m, g))

    def forward(self, E: torch.Tensor, return_weights: bool = False, materialize: bool = False):
        """Same result as ``frequency_attention(E, frequency_features(E), self)``.

        By default the projections are folded into each frequency block so the
        ``(L, (f+1)*d_m)`` feature matrix is never built; ``materialize`` forces
        the literal route.
        """
        if E.shape[-2] != self.L or E.shape[-1] != self.d_m:
            raise ValueError(f"expected (..., {self.L}, {self.d_m}) embedding, got {tuple(E.shape)}")
        if materialize:
            return frequency_attention(E, frequency_features(E), self, return_weights)
        spec = dft_real(E, dim=-2)
        cos, sin = _band_basis(self.L)
        blocks = (self.L // 2 + 1, self.d_m, self.d_m)

        def project(W):
            W = W.reshape(blocks)
            re = torch.einsum("...kc,kcj->...kj", spec.real, W)
            im = torch.einsum("...kc,kcj->...kj", spec.imag, W)
            return cos @ re - sin @ im

        Z, weights = attention(project(self.W_Q), project(self.W_K), E @ self.W_V, self.d_m)
        out = Z @ self.W_O
        return (out, weights) if return_weights else out


def frequency_attention(E, A, params, return_weights: bool = False):
    """``softmax(A W_Q (A W_K)^T / sqrt(d_m)) (E W_V) W_O``; values stay in the time domain."""
    E, A = as_tensor(E), as_tensor(A)
    Z, weights = attention(A @ params.W_Q, A @ params.W_K, E @ params.W_V, E.shape[-1])
    out = Z @ params.W_O
    return (out, weights) if return_weights else out


class LinearAttention(nn.Module):
    """Ablation stand-in: queries and keys are plain linear maps of ``E``."""

    def __init__(self, L: int, d_m: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        self.L, self.d_m = L, d_m
        self.W_Q = nn.Parameter(fan_in_uniform((d_m, d_m), d_m, g))
        self.W_K = nn.Parameter(fan_in_uniform((d_m, d_m), d_m, g))
        self.W_V = nn.Parameter(fan_in_uniform((d_m, d_m), d_m, g))
        self.W_O = nn.Parameter(fan_in_uniform((d_m, d_m), d_m, g))

    def forward(self, E: torch.Tensor, return_weights: bool = False):
        Z, weights = attention(E @ self.W_Q, E @ self.W_K, E @ self.W_V, E.shape[-1])
        out = Z @ self.W_O
        return (out, weights) if return_weights else out
