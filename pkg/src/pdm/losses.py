"""Training objectives: identity, batch-hard triplet, cosine heterogeneity,
dual-center separation, center-guided pair mining, and their composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from pdm import ndnum as nd
from pdm.errors import ContractViolation, NumericFailure
from pdm.ndnum import Tensor
from pdm.plm import PrototypeBank

VIS, IR = 0, 1
LOSS_NAMES = ("id", "tri", "ch", "dcs", "cpm")
CH_VARIANTS = ("prose", "as-written")


@dataclass
class IdentityBatch:
    """Per-sample features for one mini-batch.

    ``descriptors`` feed the identity and dual-center losses. ``originals``
    and ``branches`` are the pooled backbone features and pooled generated
    embeddings used for pair-mining centers; ``global_features`` feed the
    triplet loss; ``pixels`` feed the cosine heterogeneity loss. The optional
    fields fall back to ``descriptors`` where that makes sense.
    """

    descriptors: Tensor
    labels: np.ndarray
    modalities: np.ndarray
    originals: Tensor | None = None
    branches: Sequence[Tensor] = ()
    global_features: Tensor | None = None
    pixels: Tensor | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.modalities = np.asarray(self.modalities, dtype=np.int64)
        n = self.descriptors.shape[0]
        if self.labels.shape != (n,) or self.modalities.shape != (n,):
            raise ContractViolation("labels and modalities need one entry per descriptor row")
        if not np.isin(self.modalities, (VIS, IR)).all():
            raise ContractViolation("modality labels must be VIS (0) or IR (1)")
        for t in [self.originals, self.global_features, *self.branches]:
            if t is not None and t.shape[0] != n:
                raise ContractViolation("auxiliary features must have one row per sample")

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass
class CenterSet:
    identities: np.ndarray  # (J,) sorted
    vis: Tensor  # (J, c) original-feature centers per modality
    ir: Tensor
    gen_vis: list[Tensor]  # per branch, (J, c)
    gen_ir: list[Tensor]
    joint: Tensor  # (J, d) descriptor centroids over both modalities


def _group_mean(x: Tensor, member: np.ndarray) -> Tensor:
    # member: (J, N) 0/1 matrix; rows become averaging weights
    counts = member.sum(axis=1, keepdims=True)
    return nd.matmul(Tensor(member / counts), x)


def identity_centroids(features: Tensor, labels: np.ndarray) -> tuple[np.ndarray, Tensor]:
    ids = np.unique(labels)
    member = (labels[None, :] == ids[:, None]).astype(np.float64)
    return ids, _group_mean(features, member)


def compute_centers(batch: IdentityBatch) -> CenterSet:
    """Batch-local arithmetic means per (identity, modality) and per identity."""
    ids = batch.identities
    originals = batch.originals if batch.originals is not None else batch.descriptors
    members = {}
    for mod in (VIS, IR):
        m = ((batch.labels[None, :] == ids[:, None]) & (batch.modalities[None, :] == mod)).astype(np.float64)
        empty = ids[m.sum(axis=1) == 0]
        if empty.size:
            name = "VIS" if mod == VIS else "IR"
            raise ContractViolation(f"identities {empty.tolist()} have no {name} samples in the batch")
        members[mod] = m
    _, joint = identity_centroids(batch.descriptors, batch.labels)
    return CenterSet(
        identities=ids,
        vis=_group_mean(originals, members[VIS]),
        ir=_group_mean(originals, members[IR]),
        gen_vis=[_group_mean(b, members[VIS]) for b in batch.branches],
        gen_ir=[_group_mean(b, members[IR]) for b in batch.branches],
        joint=joint,
    )


def cpm_loss(centers: CenterSet, alpha: float = 0.3) -> Tensor:
    """Center-guided pair mining, averaged over (branch, j, k != j), VIS + IR parts.

    VIS hinge: D(c_ir^j, g_v^ij) - D(c_v^j, g_v^ij) - D(c_v^j, c_v^k) + alpha.
    The IR part swaps the modalities.
    """
    J = len(centers.identities)
    if J < 2:
        raise ContractViolation("pair mining needs at least two identities in the batch")
    if not centers.gen_vis:
        raise ContractViolation("pair mining needs at least one generated branch")
    off_diag = Tensor(1.0 - np.eye(J))
    count = len(centers.gen_vis) * J * (J - 1)

    def part(own: Tensor, other: Tensor, generated: list[Tensor]) -> Tensor:
        between = nd.pairwise_euclidean(own, own)
        acc = None
        for g in generated:
            gap = nd.norm(other - g, axis=1) - nd.norm(own - g, axis=1)
            hinge = nd.relu(nd.reshape(gap, (J, 1)) - between + alpha) * off_diag
            s = nd.sum(hinge)
            acc = s if acc is None else acc + s
        return acc / float(count)

    return part(centers.vis, centers.ir, centers.gen_vis) + part(centers.ir, centers.vis, centers.gen_ir)


def cosine_heterogeneity_loss(
    bank: PrototypeBank,
    pixels: Tensor,
    variant: str = "prose",
    modalities: np.ndarray | None = None,
) -> Tensor:
    """Mean pairwise cosine between prototype response vectors P_i I^T.

    ``prose`` returns the mean cosine hinged at zero: minimizing it pushes
    responses apart until they are orthogonal on average (the raw mean is
    bounded below by -1/(m-1), so the hinge keeps the loss non-negative).
    ``as-written`` returns one minus the mean. With batched pixels and
    ``modalities`` the per-modality means are averaged before either form.
    """
    if variant not in CH_VARIANTS:
        raise ContractViolation(f"unknown variant {variant!r}; expected one of {CH_VARIANTS}")
    m = bank.m
    if pixels.shape[-1] != bank.channels:
        raise ContractViolation("prototype and pixel channel counts differ")
    axes = tuple(range(pixels.ndim - 2)) + (pixels.ndim - 1, pixels.ndim - 2)
    responses = nd.matmul(bank.P, nd.transpose(pixels, axes))  # (..., m, n)
    cos = nd.row_cosine_matrix(responses)
    upper = Tensor(np.triu(np.ones((m, m)), 1))
    mean_cos = nd.sum(cos * upper, axis=(-2, -1)) / (m * (m - 1) / 2)
    if mean_cos.ndim == 0:
        value = mean_cos
    elif modalities is None:
        value = nd.mean(mean_cos)
    else:
        modalities = np.asarray(modalities)
        per_mod = [
            nd.mean(mean_cos[np.flatnonzero(modalities == mod)]) for mod in (VIS, IR) if np.any(modalities == mod)
        ]
        value = per_mod[0] if len(per_mod) == 1 else (per_mod[0] + per_mod[1]) / 2.0
    return nd.relu(value) if variant == "prose" else 1.0 - value


def dual_center_separation_loss(
    batch: IdentityBatch,
    centers: CenterSet | None = None,
    rho1: float = 0.1,
    rho2: float = 1.0,
) -> Tensor:
    """Pull samples within ``rho1`` of their identity centroid; push centroids ``rho2`` apart."""
    if rho1 < 0 or rho2 < 0:
        raise ContractViolation("distance thresholds must be non-negative")
    if centers is None:
        ids, joint = identity_centroids(batch.descriptors, batch.labels)
    else:
        ids, joint = centers.identities, centers.joint
    rows = np.searchsorted(ids, batch.labels)
    own = nd.getitem(joint, rows)
    pull = nd.mean(nd.relu(nd.norm(batch.descriptors - own, axis=1) - rho1))
    M = len(ids)
    if M < 2:
        return pull
    upper = Tensor(np.triu(np.ones((M, M)), 1))
    push = nd.sum(nd.relu(rho2 - nd.pairwise_euclidean(joint, joint)) * upper) * (2.0 / (M * (M - 1)))
    return pull + push


def triplet_loss(batch: IdentityBatch, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss on the global features."""
    feats = batch.global_features if batch.global_features is not None else batch.descriptors
    labels = batch.labels
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2 or counts.min() < 2:
        raise ContractViolation("batch-hard triplet needs >= 2 identities with >= 2 samples each")
    dist = nd.pairwise_euclidean(feats, feats)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    hardest_pos = nd.amax(dist * Tensor(same), axis=1)
    # push same-identity entries out of the way for the min
    offset = same * (float(dist.data.max()) + 1.0)
    hardest_neg = nd.amin(dist + Tensor(offset), axis=1)
    return nd.mean(nd.relu(hardest_pos - hardest_neg + margin))


@dataclass
class ClassifierParams:
    gamma: Tensor  # (d,) normalization scale
    beta: Tensor  # (d,) normalization shift
    weight: Tensor  # (C, d)

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator, std: float = 0.01) -> "ClassifierParams":
        return cls(
            gamma=Tensor(np.ones(dim), requires_grad=True, name="bn_gamma"),
            beta=Tensor(np.zeros(dim), requires_grad=True, name="bn_beta"),
            weight=Tensor(rng.normal(scale=std, size=(num_classes, dim)), requires_grad=True, name="classifier"),
        )

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


BN_EPS = 1e-5


def normalize_features(descriptors: Tensor, params: ClassifierParams) -> Tensor:
    """Per-dimension standardization over the batch, then learnable scale and shift."""
    centered = descriptors - nd.mean(descriptors, axis=0, keepdims=True)
    var = nd.mean(centered * centered, axis=0, keepdims=True)
    return centered / nd.sqrt(var + BN_EPS) * params.gamma + params.beta


def identity_loss(descriptors: Tensor, labels, params: ClassifierParams) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (descriptors.shape[0],):
        raise ContractViolation("need one label per descriptor row")
    if labels.min() < 0 or labels.max() >= params.num_classes:
        raise ContractViolation(f"labels must lie in [0, {params.num_classes})")
    logits = nd.matmul(normalize_features(descriptors, params), nd.transpose(params.weight))
    picked = nd.getitem(logits, (np.arange(len(labels)), labels))
    return nd.mean(nd.logsumexp(logits, axis=1) - picked)


@dataclass
class LossReport:
    id: float
    tri: float
    ch: float
    dcs: float
    cpm: float
    plm: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "tensor"}


def total_loss(parts: Mapping[str, Tensor | float | None]) -> LossReport:
    """Compose component losses; missing or ``None`` components count as zero.

    The PLM loss is triplet + heterogeneity + dual-center; the total adds the
    identity and pair-mining losses.
    """
    unknown = set(parts) - set(LOSS_NAMES)
    if unknown:
        raise ContractViolation(f"unknown loss components {sorted(unknown)}")
    values = {}
    tensor = None
    for name in LOSS_NAMES:
        v = parts.get(name)
        if v is None:
            values[name] = 0.0
            continue
        scalar = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(scalar):
            raise NumericFailure(f"L_{name}")
        values[name] = scalar
        if isinstance(v, Tensor):
            tensor = v if tensor is None else tensor + v
    plm = values["tri"] + values["ch"] + values["dcs"]
    total = values["id"] + plm + values["cpm"]
    return LossReport(plm=plm, total=total, tensor=tensor, **values)
