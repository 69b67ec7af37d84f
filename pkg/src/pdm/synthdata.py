"""Synthetic two-modality feature maps and a PK identity-balanced sampler.

Every sample is ``identity base + modality offset + noise``. Base and offset
maps are drawn once per identity / modality; noise is drawn per sample from
a split-specific stream, so train and test splits share identities and
modality offsets but never share noise.

All randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence(seed, spawn_key=(stream,))``; both algorithms are specified
and portable, so a seed reproduces the same data everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from pdm.errors import ContractViolation

VIS, IR = 0, 1
GENERATOR = "PCG64/SeedSequence"
SPLITS = {"train": 0, "test": 1}

_BASE_STREAM, _OFFSET_STREAM = 0, 1
_NOISE_STREAM = {"train": 2, "test": 3}

MAGIC = b"PDMD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIIQ")


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


@dataclass(frozen=True)
class SyntheticSpec:
    """Dataset shape and difficulty.

    Scales are per pixel: an identity's base map has pixel vectors of
    expected squared norm ``identity_separation**2`` (elements drawn with
    standard deviation ``identity_separation / sqrt(channels)``), likewise
    for the modality offset. ``noise_std`` is per element.
    """

    num_identities: int = 8
    samples_per_identity_per_modality: int = 32
    channels: int = 16
    height: int = 9
    width: int = 5
    identity_separation: float = 3.0
    modality_offset_scale: float = 2.0
    noise_std: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 1:
            raise ContractViolation("need at least one identity")
        if self.samples_per_identity_per_modality < 1:
            raise ContractViolation("need at least one sample per identity and modality")
        if min(self.channels, self.height, self.width) < 1:
            raise ContractViolation("map dimensions must be positive")
        if self.noise_std < 0 or self.modality_offset_scale < 0:
            raise ContractViolation("scales must be non-negative")
        if not self.identity_separation > self.noise_std:
            raise ContractViolation("identity_separation must exceed noise_std")
        if not 0 <= self.seed < 2**64:
            raise ContractViolation("seed must be an unsigned 64-bit integer")

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def num_samples(self) -> int:
        return self.num_identities * self.samples_per_identity_per_modality * 2

    def to_dict(self) -> dict:
        return {**asdict(self), "generator": GENERATOR}


@dataclass
class Dataset:
    maps: np.ndarray  # (S, C, H, W) float32
    labels: np.ndarray  # (S,) identity
    modalities: np.ndarray  # (S,) VIS / IR
    spec: SyntheticSpec
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, modality: int) -> tuple[np.ndarray, np.ndarray]:
        keep = self.modalities == modality
        return self.maps[keep], self.labels[keep]


def generate(spec: SyntheticSpec, split: str = "train") -> Dataset:
    """Samples ordered identity-major, then modality (VIS first), then index."""
    spec.validate()
    if split not in SPLITS:
        raise ContractViolation(f"split must be one of {sorted(SPLITS)}")
    shape = spec.map_shape
    pixel_scale = 1.0 / np.sqrt(spec.channels)
    bases = rng_for(spec.seed, _BASE_STREAM).normal(
        scale=spec.identity_separation * pixel_scale, size=(spec.num_identities,) + shape
    )
    offsets = rng_for(spec.seed, _OFFSET_STREAM).normal(
        scale=spec.modality_offset_scale * pixel_scale, size=(2,) + shape
    )
    noise_rng = rng_for(spec.seed, _NOISE_STREAM[split])
    k = spec.samples_per_identity_per_modality
    maps = np.empty((spec.num_samples,) + shape, dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_identities, dtype=np.int64), 2 * k)
    modalities = np.tile(np.repeat(np.array([VIS, IR], dtype=np.int64), k), spec.num_identities)
    row = 0
    for ident in range(spec.num_identities):
        for mod in (VIS, IR):
            noise = noise_rng.normal(scale=spec.noise_std, size=(k,) + shape) if spec.noise_std else 0.0
            maps[row:row + k] = bases[ident] + offsets[mod] + noise
            row += k
    return Dataset(maps=maps, labels=labels, modalities=modalities, spec=spec, split=split)


# ---------------------------------------------------------------------------
# binary container


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Little-endian header, float32 maps in sample order, int32 labels, int32 modalities."""
    s = ds.spec
    header = _HEADER.pack(
        MAGIC, VERSION, SPLITS[ds.split], len(ds), s.num_identities,
        s.samples_per_identity_per_modality, s.channels, s.height, s.width, s.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        # scales as three little-endian doubles so the generator parameters round-trip
        fh.write(struct.pack("<3d", s.identity_separation, s.modality_offset_scale, s.noise_std))
        fh.write(np.ascontiguousarray(ds.maps, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(ds.modalities, dtype="<i4").tobytes())


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ContractViolation(f"{path}: truncated dataset header")
    magic, version, split, n, ids, per, c, h, w, seed = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ContractViolation(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContractViolation(f"{path}: unsupported dataset version {version}")
    return {
        "split": {v: k for k, v in SPLITS.items()}[split], "num_samples": n, "num_identities": ids,
        "samples_per_identity_per_modality": per, "channels": c, "height": h, "width": w, "seed": seed,
    }


def load_dataset(path: str | Path) -> Dataset:
    head = read_header(path)
    data = Path(path).read_bytes()[_HEADER.size:]
    sep, off, noise = struct.unpack_from("<3d", data)
    data = data[24:]
    n, c, h, w = head["num_samples"], head["channels"], head["height"], head["width"]
    nmap = n * c * h * w
    expected = 4 * (nmap + 2 * n)
    if len(data) != expected:
        raise ContractViolation(f"{path}: payload is {len(data)} bytes, expected {expected}")
    maps = np.frombuffer(data, dtype="<f4", count=nmap).reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=4 * nmap).astype(np.int64)
    mods = np.frombuffer(data, dtype="<i4", count=n, offset=4 * (nmap + n)).astype(np.int64)
    spec = SyntheticSpec(
        num_identities=head["num_identities"],
        samples_per_identity_per_modality=head["samples_per_identity_per_modality"],
        channels=c, height=h, width=w,
        identity_separation=sep, modality_offset_scale=off, noise_std=noise, seed=head["seed"],
    )
    return Dataset(maps=maps, labels=labels, modalities=mods, spec=spec, split=head["split"])


# ---------------------------------------------------------------------------
# sampling


def pk_epoch(labels, modalities, P: int, K: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Index batches for one epoch: P identities x K samples x 2 modalities each.

    Every identity's VIS and IR samples are shuffled and cut into K-sized
    chunks; round r pairs each eligible identity's r-th VIS and IR chunks and
    groups identities P at a time. No index repeats within an epoch.
    """
    labels, modalities = np.asarray(labels), np.asarray(modalities)
    if P < 1 or K < 1:
        raise ContractViolation("P and K must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(100, epoch))))
    chunks = {}
    for ident in np.unique(labels):
        per_mod = []
        for mod in (VIS, IR):
            idx = np.flatnonzero((labels == ident) & (modalities == mod))
            idx = idx[rng.permutation(len(idx))]
            per_mod.append([idx[i:i + K] for i in range(0, len(idx) - K + 1, K)])
        rounds = min(len(per_mod[0]), len(per_mod[1]))
        if rounds:
            chunks[int(ident)] = (per_mod[0][:rounds], per_mod[1][:rounds])
    if len(chunks) < P:
        raise ContractViolation(
            f"only {len(chunks)} identities have >= {K} samples in both modalities; need {P}"
        )
    batches = []
    for r in range(max(len(v[0]) for v in chunks.values())):
        eligible = np.array(sorted(i for i, v in chunks.items() if len(v[0]) > r))
        eligible = eligible[rng.permutation(len(eligible))]
        for start in range(0, len(eligible) - P + 1, P):
            group = sorted(eligible[start:start + P])
            batches.append(np.concatenate([np.concatenate([chunks[i][0][r], chunks[i][1][r]]) for i in group]))
    return [batches[i] for i in rng.permutation(len(batches))]


def pk_sample(dataset: Dataset, P: int, K: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    yield from pk_epoch(dataset.labels, dataset.modalities, P, K, seed, epoch)
