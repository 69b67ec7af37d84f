"""Prototype learning: prototype-weighted pooling of pixel features.

A bank of ``m`` learnable prototypes scores every pixel with a sigmoid of the
dot product. Each prototype yields one local feature, the score-weighted mean
of the pixels. The ``m`` local features are concatenated with the
spatial-mean global feature into one ``(m+1)*c`` descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from pdm import ndnum as nd
from pdm.errors import ContractViolation, UnsupportedConfiguration
from pdm.ndnum import Tensor


@dataclass
class PrototypeBank:
    P: Tensor  # (m, c)

    def __post_init__(self):
        if self.P.ndim != 2:
            raise ContractViolation(f"prototype matrix must be 2-D, got {self.P.shape}")
        if self.P.shape[0] < 2:
            raise ContractViolation(f"need at least 2 prototypes, got {self.P.shape[0]}")

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @property
    def channels(self) -> int:
        return self.P.shape[1]

    @classmethod
    def init(cls, m: int, channels: int, rng: np.random.Generator) -> "PrototypeBank":
        """Gaussian rows rescaled to unit norm."""
        rows = rng.normal(size=(m, channels))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(Tensor(rows, requires_grad=True, name="prototypes"))


@lru_cache(maxsize=32)
def _encoding(h: int, w: int, c: int) -> np.ndarray:
    if c % 2:
        raise UnsupportedConfiguration(f"positional encoding needs an even channel count, got {c}")
    half = c // 2

    def axis_code(length: int) -> np.ndarray:
        pos = np.arange(length, dtype=np.float64)[:, None]
        k = np.arange(half)
        freq = 1.0 / 10000.0 ** (2 * (k // 2) / half)
        angles = pos * freq
        return np.where(k % 2 == 0, np.sin(angles), np.cos(angles))

    rows, cols = axis_code(h), axis_code(w)
    enc = np.empty((h, w, c))
    enc[:, :, :half] = rows[:, None, :]
    enc[:, :, half:] = cols[None, :, :]
    enc.setflags(write=False)
    return enc.reshape(h * w, c)


def positional_encoding(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code, (h*w, c); row index in the first c/2 channels."""
    return _encoding(h, w, c)


def encode_positions(f: Tensor) -> Tensor:
    """(C,H,W) -> (H*W, C) or (N,C,H,W) -> (N, H*W, C), plus positional code.

    Pixels are ordered row-major.
    """
    if f.ndim == 3:
        c, h, w = f.shape
        pixels = nd.transpose(nd.reshape(f, (c, h * w)))
    elif f.ndim == 4:
        n, c, h, w = f.shape
        pixels = nd.transpose(nd.reshape(f, (n, c, h * w)), (0, 2, 1))
    else:
        raise ContractViolation(f"expected (C,H,W) or (N,C,H,W), got {f.shape}")
    return pixels + Tensor(positional_encoding(h, w, c))


def prototype_similarity(bank: PrototypeBank, pixels: Tensor) -> Tensor:
    """S = sigmoid(P I^T): (m, n), or (N, m, n) for batched pixels."""
    if pixels.shape[-1] != bank.channels:
        raise ContractViolation(
            f"prototypes have {bank.channels} channels, pixel features have {pixels.shape[-1]}"
        )
    axes = tuple(range(pixels.ndim - 2)) + (pixels.ndim - 1, pixels.ndim - 2)
    return nd.sigmoid(nd.matmul(bank.P, nd.transpose(pixels, axes)))


def local_features(S: Tensor, pixels: Tensor) -> Tensor:
    """p_i = (1/n) sum_j S_ij I_j, i.e. (S @ I) / n."""
    if S.shape[-1] != pixels.shape[-2]:
        raise ContractViolation(f"similarity {S.shape} does not match pixels {pixels.shape}")
    return nd.matmul(S, pixels) / float(pixels.shape[-2])


def global_feature(f: Tensor) -> Tensor:
    return nd.mean(f, axis=(-2, -1))


def assemble_descriptor(p: Tensor, f: Tensor) -> Tensor:
    """Flatten local rows and append the spatial-mean global feature."""
    g = global_feature(f)
    if p.shape[-1] != g.shape[-1]:
        raise ContractViolation(f"local features {p.shape} and map {f.shape} disagree on channels")
    if p.ndim == 2:
        return nd.concat([nd.reshape(p, (-1,)), g], axis=0)
    n = p.shape[0]
    return nd.concat([nd.reshape(p, (n, -1)), g], axis=1)


def plm_forward(bank: PrototypeBank, f: Tensor) -> tuple[Tensor, Tensor]:
    """Descriptor and pixel features for a map or batch of maps."""
    pixels = encode_positions(f)
    S = prototype_similarity(bank, pixels)
    return assemble_descriptor(local_features(S, pixels), f), pixels
