"""Multi-feature generation: dilated-conv branches with channel/spatial attention.

Each branch sums three 3x3 convolutions (dilation 1, 2, 3) that reduce the
channel count by ``reduction``, gates the result with squeeze-excite channel
attention and CBAM-style spatial attention, concatenates the two gated maps,
applies ReLU and maps back to the input channel count with a per-pixel
linear layer. The input map and every branch output are stacked along the
channel axis.

All functions accept a single map ``(C, H, W)`` or a batch ``(N, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pdm import ndnum as nd
from pdm.errors import ContractViolation
from pdm.ndnum import Tensor

DILATIONS = (1, 2, 3)


@dataclass(frozen=True)
class MfgmConfig:
    channels: int
    num_branches: int = 2
    reduction: int = 4
    dilations: tuple[int, ...] = field(default=DILATIONS, init=False)

    def __post_init__(self):
        if self.num_branches < 1:
            raise ContractViolation(f"num_branches must be >= 1, got {self.num_branches}")
        if self.channels < 1 or self.reduction < 1:
            raise ContractViolation("channels and reduction must be positive")
        if self.channels % self.reduction:
            raise ContractViolation(
                f"channels ({self.channels}) must be divisible by reduction ({self.reduction})"
            )

    @property
    def reduced(self) -> int:
        return self.channels // self.reduction

    @property
    def hidden(self) -> int:
        # squeeze-excite bottleneck c/r -> c/(2r), at least one unit
        return max(1, self.reduced // 2)


@dataclass
class BranchParams:
    """Learnable tensors of one branch; nothing is shared between branches."""

    dilated: list[Tensor]  # per dilation: (c/r, c, 3, 3)
    ca_w1: Tensor  # (hidden, c/r)
    ca_b1: Tensor
    ca_w2: Tensor  # (c/r, hidden)
    ca_b2: Tensor
    sa_kernel: Tensor  # (1, 2, 3, 3)
    sa_bias: Tensor  # (1,)
    fc_w: Tensor  # (c, 2c/r)
    fc_b: Tensor  # (c,)

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}dilated{d}": k for d, k in zip(DILATIONS, self.dilated)}
        for name in ("ca_w1", "ca_b1", "ca_w2", "ca_b2", "sa_kernel", "sa_bias", "fc_w", "fc_b"):
            out[prefix + name] = getattr(self, name)
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], prefix: str = "") -> "BranchParams":
        return cls(
            dilated=[named[f"{prefix}dilated{d}"] for d in DILATIONS],
            **{
                name: named[prefix + name]
                for name in ("ca_w1", "ca_b1", "ca_w2", "ca_b2", "sa_kernel", "sa_bias", "fc_w", "fc_b")
            },
        )

    @classmethod
    def zeros(cls, cfg: MfgmConfig) -> "BranchParams":
        c, cr, hid = cfg.channels, cfg.reduced, cfg.hidden
        z = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)
        return cls(
            dilated=[z(cr, c, 3, 3) for _ in DILATIONS],
            ca_w1=z(hid, cr), ca_b1=z(hid), ca_w2=z(cr, hid), ca_b2=z(cr),
            sa_kernel=z(1, 2, 3, 3), sa_bias=z(1),
            fc_w=z(c, 2 * cr), fc_b=z(c),
        )


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_branch(cfg: MfgmConfig, rng: np.random.Generator) -> BranchParams:
    """Kernels ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)); biases zero."""
    c, cr, hid = cfg.channels, cfg.reduced, cfg.hidden
    params = BranchParams.zeros(cfg)
    params.dilated = [_fan_in_uniform(rng, (cr, c, 3, 3), 9 * c) for _ in DILATIONS]
    params.ca_w1 = _fan_in_uniform(rng, (hid, cr), cr)
    params.ca_w2 = _fan_in_uniform(rng, (cr, hid), hid)
    params.sa_kernel = _fan_in_uniform(rng, (1, 2, 3, 3), 18)
    params.fc_w = _fan_in_uniform(rng, (c, 2 * cr), 2 * cr)
    return params


def init_params(cfg: MfgmConfig, rng: np.random.Generator) -> list[BranchParams]:
    return [init_branch(cfg, rng) for _ in range(cfg.num_branches)]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return nd.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ContractViolation(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _unbatched(x: Tensor, single: bool) -> Tensor:
    return nd.reshape(x, x.shape[1:]) if single else x


def dilated_fusion(f: Tensor, branch: BranchParams) -> Tensor:
    x, single = _batched(f)
    expected = branch.dilated[0].shape[1]
    if x.shape[1] != expected:
        raise ContractViolation(f"branch expects {expected} channels, map has {x.shape[1]}")
    out = None
    for d, kernel in zip(DILATIONS, branch.dilated):
        term = nd.conv2d(x, kernel, d)
        out = term if out is None else out + term
    return _unbatched(out, single)


def channel_attention(x: Tensor, branch: BranchParams) -> Tensor:
    xb, single = _batched(x)
    pooled = nd.mean(xb, axis=(2, 3))  # (N, c')
    hidden = nd.relu(nd.matmul(pooled, nd.transpose(branch.ca_w1)) + branch.ca_b1)
    weights = nd.sigmoid(nd.matmul(hidden, nd.transpose(branch.ca_w2)) + branch.ca_b2)
    n, c = weights.shape
    return _unbatched(xb * nd.reshape(weights, (n, c, 1, 1)), single)


def spatial_attention(x: Tensor, branch: BranchParams) -> Tensor:
    xb, single = _batched(x)
    stats = nd.concat(
        [nd.mean(xb, axis=1, keepdims=True), nd.amax(xb, axis=1, keepdims=True)], axis=1
    )
    weights = nd.sigmoid(nd.conv2d(stats, branch.sa_kernel, 1, bias=branch.sa_bias))
    return _unbatched(xb * weights, single)


def pixel_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``weight`` (C_out, C_in) independently at every pixel of (N, C_in, H, W)."""
    n, c, h, w = x.shape
    if weight.shape[1] != c:
        raise ContractViolation(f"pixel_linear expects {weight.shape[1]} channels, got {c}")
    flat = nd.reshape(x, (n, c, h * w))
    out = nd.matmul(weight, flat)
    if bias is not None:
        out = out + nd.reshape(bias, (weight.shape[0], 1))
    return nd.reshape(out, (n, weight.shape[0], h, w))


def branch_forward(f: Tensor, branch: BranchParams) -> Tensor:
    x, single = _batched(f)
    fused = dilated_fusion(x, branch)
    gated = nd.concat([channel_attention(fused, branch), spatial_attention(fused, branch)], axis=1)
    out = pixel_linear(nd.relu(gated), branch.fc_w, branch.fc_b)
    return _unbatched(out, single)


def mfgm_forward_with_branches(f: Tensor, cfg: MfgmConfig, params: list[BranchParams]):
    """Batched forward that also returns the individual branch outputs."""
    if len(params) != cfg.num_branches:
        raise ContractViolation(f"config has {cfg.num_branches} branches, got {len(params)} param sets")
    x, _ = _batched(f)
    if x.shape[1] != cfg.channels:
        raise ContractViolation(f"config expects {cfg.channels} channels, map has {x.shape[1]}")
    branches = [branch_forward(x, b) for b in params]
    return nd.concat([x] + branches, axis=1), branches


def mfgm_forward(f: Tensor, cfg: MfgmConfig, params: list[BranchParams]) -> Tensor:
    """Stack ``f`` with every branch output: (B+1)*C channels, slice 0 is ``f``."""
    out, _ = mfgm_forward_with_branches(f, cfg, params)
    return _unbatched(out, f.ndim == 3)
