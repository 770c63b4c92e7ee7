"""Cross-scale fusion, forecast head and the assembled forecaster."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .deformable import (
    DEFAULT_THRESHOLD,
    DeformableScale,
    FixedPatchScale,
    PatchMask,
    apply_mask,
    initial_omegas,
    instance_norm,
)
from .embedding import HybridEmbedding, check_calendar, positional_embed, temporal_embed, token_embed
from .numerics import DTYPE, NumericError, as_tensor, fan_in_uniform, softmax
from .spectral import LinearAttention, SpectralAttention

VARIANTS = ("FULL", "FP", "LM", "LT")


class ModelConfigError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")


@dataclass
class ModelConfig:
    input_len: int
    horizon: int
    scales: int = 3
    d_model: int = 16
    d_k: int = 0  # 0 means scales * d_model
    heads: int = 8
    threshold: float = DEFAULT_THRESHOLD
    e_layers: int = 4
    d_ff: int = 256
    variant: str = "FULL"
    fixed_patch_length: int = 6
    seed: int = 0

    def __post_init__(self):
        if not self.d_k:
            self.d_k = self.scales * self.d_model

    def validate(self) -> "ModelConfig":
        if self.input_len < 2 or self.horizon < 1:
            raise ModelConfigError("input_len must be >= 2 and horizon >= 1")
        if self.scales < 1 or self.e_layers < 1 or self.d_ff < 1:
            raise ModelConfigError("scales, e_layers and d_ff must be positive")
        if self.d_model < 2 or self.d_model % 2:
            raise ModelConfigError(f"d_model must be even, got {self.d_model}")
        if self.heads < 1 or self.d_k % self.heads:
            raise ModelConfigError(f"d_k={self.d_k} is not divisible by heads={self.heads}")
        if not 0.0 < self.threshold < 1.0:
            raise ModelConfigError("threshold must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def multi_head_attention(Z, W_Q, W_K, W_V, heads: int, return_weights: bool = False):
    """Scaled dot-product attention split into ``heads`` equal slices of ``d_k``."""
    d_k = W_Q.shape[-1]
    if d_k % heads:
        raise ModelConfigError(f"d_k={d_k} is not divisible by heads={heads}")
    dh = d_k // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, dh).transpose(-2, -3)

    q, k, v = split(Z @ W_Q), split(Z @ W_K), split(Z @ W_V)
    if return_weights:
        weights = softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        heads_out = weights @ v
    else:
        # fused kernel, same scaling and softmax
        heads_out = F.scaled_dot_product_attention(q, k, v)
    out = heads_out.transpose(-2, -3)
    out = out.reshape(*out.shape[:-2], d_k)
    return (out, weights) if return_weights else out


def fuse_scales(per_scale: Sequence[torch.Tensor], W_Q, W_K, W_V, heads: int, return_weights: bool = False):
    """Concatenate scale outputs feature-wise and mix them with multi-head attention."""
    if not per_scale:
        raise ValueError("need at least one scale")
    Z = torch.cat([as_tensor(z) for z in per_scale], dim=-1)
    return multi_head_attention(Z, W_Q, W_K, W_V, heads, return_weights)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.gain, self.bias, self.eps)


class FusionBlock(nn.Module):
    """Attention + GELU feed-forward with residuals and layer norms."""

    def __init__(self, in_dim: int, d_k: int, heads: int, d_ff: int, g: torch.Generator):
        super().__init__()
        self.heads = heads
        self.W_Q = nn.Parameter(fan_in_uniform((in_dim, d_k), in_dim, g))
        self.W_K = nn.Parameter(fan_in_uniform((in_dim, d_k), in_dim, g))
        self.W_V = nn.Parameter(fan_in_uniform((in_dim, d_k), in_dim, g))
        self.norm1 = LayerNorm(d_k)
        self.ff_in = nn.Parameter(fan_in_uniform((d_k, d_ff), d_k, g))
        self.ff_in_bias = nn.Parameter(torch.zeros(d_ff, dtype=DTYPE))
        self.ff_out = nn.Parameter(fan_in_uniform((d_ff, d_k), d_ff, g))
        self.ff_out_bias = nn.Parameter(torch.zeros(d_k, dtype=DTYPE))
        self.norm2 = LayerNorm(d_k)
        self.residual = in_dim == d_k

    def forward(self, z):
        a = multi_head_attention(z, self.W_Q, self.W_K, self.W_V, self.heads)
        h = self.norm1(z + a if self.residual else a)
        ff = F.gelu(h @ self.ff_in + self.ff_in_bias) @ self.ff_out + self.ff_out_bias
        return self.norm2(h + ff)


class FusionStack(nn.Module):
    def __init__(self, in_dim: int, d_k: int, heads: int, d_ff: int, layers: int, g: torch.Generator):
        super().__init__()
        dims = [in_dim] + [d_k] * (layers - 1)
        self.blocks = nn.ModuleList(FusionBlock(d, d_k, heads, d_ff, g) for d in dims)

    def forward(self, per_scale: Sequence[torch.Tensor]):
        z = torch.cat(list(per_scale), dim=-1)
        for block in self.blocks:
            z = block(z)
        return z


class LinearFusion(nn.Module):
    """Ablation stand-in for the fusion stack: one affine map of the concatenated scales."""

    def __init__(self, in_dim: int, d_k: int, g: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(fan_in_uniform((in_dim, d_k), in_dim, g))
        self.bias = nn.Parameter(torch.zeros(d_k, dtype=DTYPE))

    def forward(self, per_scale: Sequence[torch.Tensor]):
        return torch.cat(list(per_scale), dim=-1) @ self.weight + self.bias


def project_head(Z_tilde, W_flat, bias) -> torch.Tensor:
    """Flatten ``(L, d_k)`` and map affinely to the ``n`` forecast steps."""
    Z_tilde = as_tensor(Z_tilde)
    flat = Z_tilde.reshape(*Z_tilde.shape[:-2], -1)
    return flat @ W_flat + bias


def inverse_norm(Y, mean, std):
    return as_tensor(Y) * std + mean


class DTSFormer(nn.Module):
    """Deformable temporal-spectral forecaster (``variant`` selects ablations)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        c = config
        g = torch.Generator().manual_seed(int(np.random.SeedSequence([c.seed, 1]).generate_state(1)[0]))
        if c.variant == "FP":
            self.scales = nn.ModuleList(
                FixedPatchScale(i, c.fixed_patch_length, c.threshold, c.scales) for i in range(c.scales)
            )
        else:
            phases = torch.rand(c.scales, generator=g, dtype=DTYPE) * 2.0 * math.pi
            self.scales = nn.ModuleList(
                DeformableScale(i, w, float(p), c.threshold)
                for i, (w, p) in enumerate(zip(initial_omegas(c.scales), phases))
            )
        self.embedding = HybridEmbedding(c.d_model, g)
        attn_cls = LinearAttention if c.variant == "LM" else SpectralAttention
        self.spectral = nn.ModuleList(attn_cls(c.input_len, c.d_model, g) for _ in range(c.scales))
        in_dim = c.scales * c.d_model
        if c.variant == "LT":
            self.fusion = LinearFusion(in_dim, c.d_k, g)
        else:
            self.fusion = FusionStack(in_dim, c.d_k, c.heads, c.d_ff, c.e_layers, g)
        flat = c.input_len * c.d_k
        self.head_weight = nn.Parameter(fan_in_uniform((flat, c.horizon), flat, g))
        self.head_bias = nn.Parameter(torch.zeros(c.horizon, dtype=DTYPE))

    def masks(self) -> list[PatchMask]:
        return [s(self.config.input_len) for s in self.scales]

    def forward(self, x, calendar=None, return_normalized: bool = False):
        """Forecast ``(B, n)`` in the input's units from histories ``(B, L)``.

        With ``return_normalized`` the instance-normalized prediction is returned too.
        """
        c = self.config
        stage = "input"
        try:
            x = as_tensor(x)
            if x.shape[-1] != c.input_len:
                raise ValueError(f"history length {x.shape[-1]} != configured input_len {c.input_len}")
            stage = "instance_norm"
            x_norm, mean, std = instance_norm(x)
            stage = "embedding"
            base = positional_embed(c.input_len, c.d_model)
            if calendar is not None:
                cal = check_calendar(calendar)
                if cal.shape[-2] != c.input_len:
                    raise ValueError("calendar length does not match history length")
                base = base + temporal_embed(cal, self.embedding.tables)
            per_scale = []
            for scale, block in zip(self.scales, self.spectral):
                stage = f"deformable[{scale.scale_index}]"
                x_hat = apply_mask(x_norm, scale(c.input_len))
                stage = f"embedding[{scale.scale_index}]"
                E = token_embed(x_hat, self.embedding.kernel) + base
                stage = f"spectral[{scale.scale_index}]"
                per_scale.append(block(E))
            stage = "fusion"
            Z = self.fusion(per_scale)
            stage = "head"
            Y = project_head(Z, self.head_weight, self.head_bias)
            stage = "inverse_norm"
            Y_hat = inverse_norm(Y, mean, std)
            if not torch.isfinite(Y_hat).all():
                raise NumericError("forecast contains non-finite values")
        except (StageError, KeyboardInterrupt):
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        return (Y_hat, Y) if return_normalized else Y_hat

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def forecast(model: DTSFormer, sample) -> np.ndarray:
    """Single-window forecast for a ``WindowSample``."""
    with torch.no_grad():
        cal = None if sample.history_calendar is None else np.asarray(sample.history_calendar)[None]
        y = model(as_tensor(sample.history)[None, :], cal)
    return y[0].numpy()


def save_checkpoint(model: DTSFormer, path, extra: Optional[dict] = None, moments: Optional[dict] = None) -> None:
    """Write config (JSON) and every parameter array under named keys to one ``.npz`` file."""
    arrays = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    if moments:
        for k, (m, v) in moments.items():
            arrays[f"adam_m/{k}"] = m.numpy()
            arrays[f"adam_v/{k}"] = v.numpy()
    meta = {"model": model.config.to_dict(), "extra": extra or {}}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> tuple[DTSFormer, dict]:
    """Rebuild a model; raise ``CheckpointMismatchError`` if anything disagrees."""
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise CheckpointMismatchError(f"{path}: not a model checkpoint (no metadata)")
        meta = json.loads(str(data["__meta__"]))
        config = ModelConfig(**meta["model"])
        if expected is not None:
            mine, theirs = config.to_dict(), expected.to_dict()
            diff = {k: (mine[k], theirs[k]) for k in mine if k != "seed" and mine[k] != theirs[k]}
            if diff:
                raise CheckpointMismatchError(f"{path}: config mismatch {diff}")
        model = DTSFormer(config)
        state = model.state_dict()
        stored = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        if set(stored) != set(state):
            raise CheckpointMismatchError(
                f"{path}: parameter keys differ (missing {sorted(set(state) - set(stored))}, "
                f"unexpected {sorted(set(stored) - set(state))})"
            )
        for k, arr in stored.items():
            if tuple(arr.shape) != tuple(state[k].shape):
                raise CheckpointMismatchError(f"{path}: shape of {k} is {arr.shape}, expected {tuple(state[k].shape)}")
        model.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float64)) for k, v in stored.items()})
    return model, meta.get("extra", {})
