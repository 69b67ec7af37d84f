"""Model assembly, momentum SGD with a stepped learning-rate schedule, and checkpoints.

Pipeline per mini-batch::

    maps -> 3x3 conv stub -> MFGM ((B+1)c channels) -> 1x1 projection to c
         -> PLM -> descriptor ((m+1)c)

With MFGM disabled the projection is skipped; with PLM disabled the
descriptor is the spatial mean of the map alone.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from pdm import ndnum as nd
from pdm.errors import ContractViolation, NumericFailure
from pdm.losses import (
    CH_VARIANTS,
    ClassifierParams,
    IdentityBatch,
    LossReport,
    compute_centers,
    cosine_heterogeneity_loss,
    cpm_loss,
    dual_center_separation_loss,
    identity_loss,
    total_loss,
    triplet_loss,
)
from pdm.mfgm import BranchParams, MfgmConfig, init_params, mfgm_forward_with_branches, pixel_linear
from pdm.ndnum import Tensor
from pdm.plm import PrototypeBank, global_feature, plm_forward
from pdm.synthdata import Dataset, pk_epoch

log = logging.getLogger(__name__)

PAPER_EPOCHS = 150
PAPER_MILESTONES = (10, 80, 120)
CHECKPOINT_MAGIC = b"PDMC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    base_lr: float = 1e-2
    warmup_lr: float = 1e-1
    decay_lrs: tuple[float, float] = (1e-3, 1e-4)
    momentum: float = 0.9
    weight_decay: float = 5e-3
    prototypes: int = 10
    branches: int = 2
    reduction: int = 4
    alpha: float = 0.3
    rho1: float = 0.1
    rho2: float = 1.0
    margin: float = 0.3
    ids_per_batch: int = 4
    samples_per_id: int = 4
    seed: int = 0
    ch_variant: str = "prose"
    use_mfgm: bool = True
    use_plm: bool = True
    use_ch: bool = True
    use_dcs: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractViolation("epochs must be non-negative")
        lrs = (self.base_lr, self.warmup_lr, *self.decay_lrs)
        if not all(lr > 0 and math.isfinite(lr) for lr in lrs):
            raise ContractViolation("learning rates must be positive")
        if not (self.weight_decay >= 0 and math.isfinite(self.weight_decay)):
            raise ContractViolation("weight_decay must be a non-negative finite number")
        if not 0 <= self.momentum < 1:
            raise ContractViolation("momentum must lie in [0, 1)")
        if self.ch_variant not in CH_VARIANTS:
            raise ContractViolation(f"ch_variant must be one of {CH_VARIANTS}")
        if self.use_mfgm and self.branches < 1:
            raise ContractViolation("MFGM needs at least one branch; disable it with use_mfgm=False")

    @property
    def active_branches(self) -> int:
        return self.branches if self.use_mfgm else 0

    def milestones(self) -> tuple[int, int, int]:
        if self.epochs == PAPER_EPOCHS:
            return PAPER_MILESTONES
        return tuple(int(round(m * self.epochs / PAPER_EPOCHS)) for m in PAPER_MILESTONES)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_lrs"] = list(self.decay_lrs)
        return d


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: base, warm-up, then two decays.

    Milestones are (10, 80, 120) at 150 epochs and scale
    proportionally for other run lengths.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ContractViolation(f"epoch {epoch} outside [0, {cfg.epochs})")
    warm, first, second = cfg.milestones()
    if epoch < warm:
        return cfg.base_lr
    if epoch < first:
        return cfg.warmup_lr
    if epoch < second:
        return cfg.decay_lrs[0]
    return cfg.decay_lrs[1]


# ---------------------------------------------------------------------------
# model state


@dataclass
class ModelState:
    backbone_w: Tensor  # (c, c, 3, 3)
    backbone_b: Tensor  # (c,)
    mfgm: list[BranchParams]
    proj_w: Tensor | None  # (c, (B+1)c)
    proj_b: Tensor | None
    bank: PrototypeBank | None
    classifier: ClassifierParams
    channels: int
    velocity: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def num_branches(self) -> int:
        return len(self.mfgm)

    def named(self) -> dict[str, Tensor]:
        out = {"backbone.w": self.backbone_w, "backbone.b": self.backbone_b}
        for i, branch in enumerate(self.mfgm):
            out.update(branch.named(f"mfgm.{i}."))
        if self.proj_w is not None:
            out["proj.w"], out["proj.b"] = self.proj_w, self.proj_b
        if self.bank is not None:
            out["plm.prototypes"] = self.bank.P
        out["cls.gamma"] = self.classifier.gamma
        out["cls.beta"] = self.classifier.beta
        out["cls.weight"] = self.classifier.weight
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    @classmethod
    def from_named(cls, named: dict[str, Tensor], channels: int, branches: int) -> "ModelState":
        bank = PrototypeBank(named["plm.prototypes"]) if "plm.prototypes" in named else None
        return cls(
            backbone_w=named["backbone.w"], backbone_b=named["backbone.b"],
            mfgm=[BranchParams.from_named(named, f"mfgm.{i}.") for i in range(branches)],
            proj_w=named.get("proj.w"), proj_b=named.get("proj.b"),
            bank=bank,
            classifier=ClassifierParams(named["cls.gamma"], named["cls.beta"], named["cls.weight"]),
            channels=channels,
        )


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def init_state(cfg: TrainConfig, channels: int, num_classes: int) -> ModelState:
    """Seeded initialization; every module draws from its own child stream."""
    root = np.random.SeedSequence(cfg.seed, spawn_key=(200,))
    bb_rng, mfgm_rng, proj_rng, plm_rng, cls_rng = (np.random.default_rng(s) for s in root.spawn(5))
    bound = math.sqrt(3.0 / (9 * channels))
    backbone_w = _param(bb_rng.uniform(-bound, bound, size=(channels, channels, 3, 3)), "backbone.w")
    backbone_b = _param(np.zeros(channels), "backbone.b")
    B = cfg.active_branches
    mfgm, proj_w, proj_b = [], None, None
    if B:
        mfgm = init_params(MfgmConfig(channels, B, cfg.reduction), mfgm_rng)
        # identity on the original slice, small weights on the generated ones
        w = np.zeros((channels, (B + 1) * channels))
        w[:, :channels] = np.eye(channels)
        w[:, channels:] = proj_rng.normal(scale=0.01, size=(channels, B * channels))
        proj_w, proj_b = _param(w, "proj.w"), _param(np.zeros(channels), "proj.b")
    bank = PrototypeBank.init(cfg.prototypes, channels, plm_rng) if cfg.use_plm else None
    dim = (cfg.prototypes + 1) * channels if cfg.use_plm else channels
    classifier = ClassifierParams.init(dim, num_classes, cls_rng)
    return ModelState(backbone_w, backbone_b, mfgm, proj_w, proj_b, bank, classifier, channels)


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardOutput:
    descriptors: Tensor  # (N, D)
    originals: Tensor  # (N, c) pooled backbone features
    branches: list[Tensor]  # per branch, (N, c) pooled generated embeddings
    global_features: Tensor  # (N, c)
    pixels: Tensor | None  # (N, n, c) pixel features seen by the prototypes


def forward_pipeline(maps, state: ModelState) -> ForwardOutput:
    x = maps if isinstance(maps, Tensor) else Tensor(np.asarray(maps, dtype=np.float64))
    if x.ndim == 3:
        x = nd.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ContractViolation(f"expected (N, {state.channels}, H, W) maps, got {x.shape}")
    f = nd.conv2d(x, state.backbone_w, 1, bias=state.backbone_b)
    branch_maps: list[Tensor] = []
    g = f
    if state.mfgm:
        reduction = state.channels // state.mfgm[0].dilated[0].shape[0]
        cfg = MfgmConfig(state.channels, len(state.mfgm), reduction)
        stacked, branch_maps = mfgm_forward_with_branches(f, cfg, state.mfgm)
        g = pixel_linear(stacked, state.proj_w, state.proj_b)
    pooled = global_feature(g)
    if state.bank is not None:
        descriptors, pixels = plm_forward(state.bank, g)
    else:
        descriptors, pixels = pooled, None
    return ForwardOutput(
        descriptors=descriptors,
        originals=global_feature(f),
        branches=[global_feature(b) for b in branch_maps],
        global_features=pooled,
        pixels=pixels,
    )


def compute_losses(out: ForwardOutput, labels, modalities, state: ModelState, cfg: TrainConfig) -> LossReport:
    batch = IdentityBatch(
        descriptors=out.descriptors, labels=labels, modalities=modalities,
        originals=out.originals, branches=out.branches,
        global_features=out.global_features, pixels=out.pixels,
    )
    parts: dict[str, Tensor | None] = {
        "id": identity_loss(out.descriptors, batch.labels, state.classifier),
        "tri": triplet_loss(batch, cfg.margin),
    }
    centers = compute_centers(batch) if (out.branches or cfg.use_dcs) else None
    if state.bank is not None and cfg.use_ch:
        parts["ch"] = cosine_heterogeneity_loss(state.bank, out.pixels, cfg.ch_variant, batch.modalities)
    if cfg.use_dcs:
        parts["dcs"] = dual_center_separation_loss(batch, centers, cfg.rho1, cfg.rho2)
    if out.branches:
        parts["cpm"] = cpm_loss(centers, cfg.alpha)
    return total_loss(parts)


# ---------------------------------------------------------------------------
# optimization


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Classical momentum: v <- mu v + g, theta <- theta - lr v.

    With ``weight_decay`` the L2 term is folded into the gradient first,
    g <- g + wd * theta. Pure function; returns new parameter and velocity
    dicts. Raises
    :class:`NumericFailure` naming the first non-finite gradient, in which
    case nothing is updated.
    """
    if set(grads) != set(params):
        raise ContractViolation("gradients and parameters have different names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractViolation(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFailure(name)
    new_params, new_velocity = {}, {}
    for name, theta in params.items():
        g = grads[name] + weight_decay * theta if weight_decay else grads[name]
        v = momentum * velocity.get(name, 0.0) + g
        new_velocity[name] = v
        new_params[name] = theta - lr * v
    return new_params, new_velocity


@dataclass
class EpochLog:
    epoch: int
    lr: float
    report: LossReport

    def row(self) -> dict[str, float]:
        r = self.report
        return {
            "epoch": self.epoch, "lr": self.lr, "L_id": r.id, "L_tri": r.tri, "L_ch": r.ch,
            "L_dcs": r.dcs, "L_cpm": r.cpm, "L_plm": r.plm, "L_total": r.total,
        }


LOG_COLUMNS = ("epoch", "lr", "L_id", "L_tri", "L_ch", "L_dcs", "L_cpm", "L_plm", "L_total")


def _mean_report(reports: Sequence[LossReport]) -> LossReport:
    names = [f.name for f in fields(LossReport) if f.name != "tensor"]
    return LossReport(**{n: math.fsum(getattr(r, n) for r in reports) / len(reports) for n in names})


def train_step(state: ModelState, maps, labels, modalities, cfg: TrainConfig, lr: float) -> LossReport:
    named = state.named()
    for t in named.values():
        t.grad = None
    report = compute_losses(forward_pipeline(maps, state), labels, modalities, state, cfg)
    nd.backward(report.tensor, leaves=named.values())
    params, velocity = sgd_step(
        {k: t.data for k, t in named.items()},
        {k: t.grad for k, t in named.items()},
        state.velocity, lr, cfg.momentum, cfg.weight_decay,
    )
    for k, t in named.items():
        t.data = params[k]
        t.grad = None
    state.velocity = velocity
    report.tensor = None
    return report


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    checkpoint: str | Path | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[ModelState, list[EpochLog]]:
    """Train from a seeded initialization; returns the final state and per-epoch mean losses.

    ``dataset`` needs ``maps`` (N, C, H, W), integer ``labels`` in [0, C) and
    ``modalities``; a generated :class:`~pdm.synthdata.Dataset` qualifies.
    """
    labels = np.asarray(dataset.labels)
    if labels.size == 0 or labels.min() < 0:
        raise ContractViolation("labels must be non-negative integers")
    state = init_state(cfg, dataset.maps.shape[1], int(labels.max()) + 1)
    maps = np.asarray(dataset.maps, dtype=np.float64)
    history: list[EpochLog] = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        batches = pk_epoch(dataset.labels, dataset.modalities, cfg.ids_per_batch, cfg.samples_per_id,
                           cfg.seed, epoch)
        reports = [
            train_step(state, maps[idx], dataset.labels[idx], dataset.modalities[idx], cfg, lr)
            for idx in batches
        ]
        entry = EpochLog(epoch, lr, _mean_report(reports))
        history.append(entry)
        log.info("epoch %d lr %.0e total %.6f", epoch, lr, entry.report.total)
        if on_epoch is not None:
            on_epoch(entry)
    if checkpoint is not None:
        save_checkpoint(state, cfg, checkpoint)
    return state, history


def embed(state: ModelState, maps, batch_size: int = 64) -> np.ndarray:
    """Retrieval descriptors for a stack of maps (no gradients kept)."""
    maps = np.asarray(maps, dtype=np.float64)
    chunks = [forward_pipeline(maps[i:i + batch_size], state).descriptors.data
              for i in range(0, len(maps), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, state.classifier.weight.shape[1]))


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(state: ModelState, cfg: TrainConfig, path: str | Path) -> None:
    """``PDMC`` | version u32 | meta length u32 | JSON meta | tensor count u32 |
    per tensor: name length u16, UTF-8 name, ndim u32, dims u32..., float32 data."""
    named = state.named()
    meta = json.dumps({"train": cfg.to_dict(), "channels": state.channels,
                       "num_classes": state.classifier.num_classes}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelState, TrainConfig]:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise ContractViolation(f"{path}: truncated checkpoint")
    magic, version, meta_len = struct.unpack_from("<4sII", buf)
    if magic != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(buf[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    named = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        named[name] = _param(data, name)
    if pos != len(buf):
        raise ContractViolation(f"{path}: {len(buf) - pos} trailing bytes")
    tc = meta["train"]
    tc["decay_lrs"] = tuple(tc["decay_lrs"])
    cfg = TrainConfig(**tc)
    state = ModelState.from_named(named, meta["channels"], cfg.active_branches)
    return state, cfg
