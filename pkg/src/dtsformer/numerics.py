"""Double-precision tensor helpers, the real-input DFT and a finite-difference checker.

Tensors and the reverse-mode graph are torch's (``float64`` throughout); this
module adds the pieces the model needs on top of that: a naive half-spectrum
DFT that stays inside the autograd graph, amplitude extraction, an explicit
``backward``/``zero_grad`` pair with accumulation semantics, and a central
difference gradient checker used by the tests.
"""
from __future__ import annotations

import functools
import math
import threading
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class InvalidLengthError(ValueError):
    """Raised when a sequence is too short for the requested transform."""


class GradContractError(ValueError):
    """Raised when ``backward`` is called on something other than a scalar."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


class ComplexSpectrum(NamedTuple):
    """Half spectrum of a real sequence, components ``k = 0..floor(L/2)``.

    ``real`` and ``imag`` carry the frequency index on the axis the transform
    was taken over.
    """

    real: torch.Tensor
    imag: torch.Tensor

    @property
    def length(self) -> int:
        return self.real.shape[-1] if self.real.ndim else 1


class _CallCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def bump(self):
        with self._lock:
            self.value += 1


_DFT_CALLS = _CallCounter()


def dft_call_count() -> int:
    """Number of ``dft_real`` invocations since the last reset (instrumentation)."""
    return _DFT_CALLS.value


def reset_dft_call_count() -> None:
    _DFT_CALLS.value = 0


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@functools.lru_cache(maxsize=64)
def _dft_basis(L: int) -> tuple[torch.Tensor, torch.Tensor]:
    f = L // 2
    n = np.arange(L)[:, None]
    k = np.arange(f + 1)[None, :]
    # reduce k*n modulo L before scaling so large products keep full precision
    angle = 2.0 * np.pi * ((k * n) % L) / L
    return torch.from_numpy(np.cos(angle)), torch.from_numpy(np.sin(angle))


def dft_real(x, dim: int = -1) -> ComplexSpectrum:
    """Half-spectrum DFT ``X_k = sum_n x_n exp(-2j*pi*k*n/L)`` for ``k = 0..L//2``.

    Evaluated as the naive sum (two dense products against cached cosine/sine
    bases), so it is deterministic and differentiable with respect to ``x``.
    Works along ``dim`` of a batched tensor.
    """
    x = as_tensor(x)
    if x.ndim == 0:
        raise InvalidLengthError("dft_real needs at least one axis")
    L = x.shape[dim]
    if L < 2:
        raise InvalidLengthError(f"dft_real needs length >= 2, got {L}")
    _DFT_CALLS.bump()
    cos, sin = _dft_basis(L)
    moved = x.movedim(dim, -1)
    real = moved @ cos
    imag = -(moved @ sin)
    return ComplexSpectrum(real.movedim(-1, dim), imag.movedim(-1, dim))


def amplitude(spec: ComplexSpectrum) -> torch.Tensor:
    """Modulus ``sqrt(Re^2 + Im^2)`` of every spectral component."""
    return torch.sqrt(spec.real * spec.real + spec.imag * spec.imag)


def full_spectrum(spec: ComplexSpectrum, L: int) -> np.ndarray:
    """Rebuild all ``L`` complex components of a 1-D half spectrum by conjugate symmetry."""
    half = spec.real.detach().numpy() + 1j * spec.imag.detach().numpy()
    out = np.empty(L, dtype=np.complex128)
    out[: half.shape[0]] = half
    for k in range(half.shape[0], L):
        out[k] = np.conj(half[L - k])
    return out


def softmax(scores: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Row softmax (torch's kernel subtracts the row max before exponentiating)."""
    return torch.softmax(scores, dim=dim)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``; repeated calls accumulate."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        shape = tuple(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise GradContractError(f"backward needs a scalar loss, got {shape}")
    if not torch.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss.item()}")
    loss.reshape(()).backward()


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.zero_()


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    point,
    h: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between autograd and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    ``indices`` restricts the comparison to a subset of flat coordinates.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = as_tensor(point).detach().clone()
    x = base.clone().requires_grad_(True)
    y = f(x)
    if not torch.isfinite(y).all():
        raise NumericError("function value is not finite at the check point")
    if y.requires_grad:
        backward(y)
    # a function that ignores its input leaves no graph: its gradient is zero
    analytic = (x.grad if x.grad is not None else torch.zeros_like(x)).detach().reshape(-1)
    flat = base.reshape(-1)
    coords = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in coords:
            plus = flat.clone()
            plus[i] += h
            minus = flat.clone()
            minus[i] -= h
            fp = f(plus.reshape(base.shape))
            fm = f(minus.reshape(base.shape))
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                raise NumericError(f"function value is not finite near coordinate {i}")
            numeric = (fp.item() - fm.item()) / (2.0 * h)
            err = abs(analytic[i].item() - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contains non-finite values")
    return t


def fan_in_uniform(shape: Sequence[int], fan_in: int, generator: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(*shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound
