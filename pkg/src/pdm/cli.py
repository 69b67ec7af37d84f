"""``pdm`` command line: synth, train, eval, gradcheck, print-config.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(including a failing gradient check).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pdm import gradsuite
from pdm.errors import ContractViolation, DegenerateInputError, NumericFailure, UnsupportedConfiguration
from pdm.evalkit import DIRECTIONS, RetrievalProtocol, cmc_map, distance_gap, write_cmc_csv, write_report
from pdm.synthdata import GENERATOR, SyntheticSpec, generate, load_dataset, save_dataset
from pdm.trainer import LOG_COLUMNS, TrainConfig, embed, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

_SPEC_FIELDS = [f.name for f in dataclasses.fields(SyntheticSpec) if f.name != "seed"]
_TRAIN_FIELDS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, flattened into one JSON document."""

    seed: int = 0
    out_dir: str = "runs/default"
    direction: str = "ir2vis"
    # synthetic data
    num_identities: int = 8
    samples_per_identity_per_modality: int = 32
    channels: int = 16
    height: int = 9
    width: int = 5
    identity_separation: float = 3.0
    modality_offset_scale: float = 2.0
    noise_std: float = 0.5
    # training
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
    ch_variant: str = "prose"
    use_mfgm: bool = True
    use_plm: bool = True
    use_ch: bool = True
    use_dcs: bool = True

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ContractViolation(f"direction must be one of {sorted(DIRECTIONS)}, got {self.direction!r}")
        if self.branches < 0:
            raise ContractViolation("branches must be >= 0")
        object.__setattr__(self, "decay_lrs", tuple(self.decay_lrs))
        # build both views once so invalid values surface at load time
        self.spec()
        self.train_config()

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ContractViolation("config must be a JSON object")
        doc = dict(doc)
        gen = doc.pop("generator", GENERATOR)
        if gen != GENERATOR:
            raise ContractViolation(f"unsupported generator {gen!r}; only {GENERATOR} is available")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ContractViolation(f"unknown config fields: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["decay_lrs"] = list(self.decay_lrs)
        doc["generator"] = GENERATOR
        return doc

    def spec(self) -> SyntheticSpec:
        spec = SyntheticSpec(seed=self.seed, **{k: getattr(self, k) for k in _SPEC_FIELDS})
        spec.validate()
        return spec

    def train_config(self) -> TrainConfig:
        kw = {k: getattr(self, k) for k in _TRAIN_FIELDS}
        kw["use_mfgm"] = self.use_mfgm and self.branches > 0
        if not kw["use_mfgm"]:
            kw["branches"] = 0
        return TrainConfig(seed=self.seed, **kw)

    def path(self, name: str) -> Path:
        return Path(self.out_dir) / name


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--direction", choices=sorted(DIRECTIONS))
    common.add_argument("--loss-ch-variant", choices=["prose", "as-written"], dest="ch_variant")
    common.add_argument("--branches", type=int, help="MFGM branches (0 disables the module)")
    common.add_argument("--prototypes", type=int, help="number of learnable prototypes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pdm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("print-config", parents=[common], help="print the effective configuration as JSON")
    sub.add_parser("synth", parents=[common], help="generate train/test dataset files")
    sub.add_parser("train", parents=[common], help="train and write checkpoint + loss CSV")
    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", type=Path, help="defaults to <out>/model.pdmc")
    p_eval.add_argument("--dataset", type=Path, help="defaults to <out>/test.pdmd")
    sub.add_parser("gradcheck", parents=[common], help="run the gradient-check suite")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ContractViolation(f"{args.config}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(doc)
    overrides = {
        "seed": args.seed, "out_dir": args.out, "direction": args.direction,
        "ch_variant": args.ch_variant, "branches": args.branches, "prototypes": args.prototypes,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# commands


def cmd_print_config(cfg: RunConfig) -> int:
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    spec = cfg.spec()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        ds = generate(spec, split)
        path = cfg.path(f"{split}.pdmd")
        save_dataset(ds, path)
        print(f"{split}: {path} ({len(ds)} samples, {spec.num_identities} identities, "
              f"map {spec.channels}x{spec.height}x{spec.width}, generator {GENERATOR}, seed {spec.seed})")
    return EXIT_OK


def write_loss_csv(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for entry in history:
            row = entry.row()
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def cmd_train(cfg: RunConfig, dataset: Path | None = None) -> int:
    data_path = dataset or cfg.path("train.pdmd")
    if not data_path.exists():
        raise ContractViolation(f"dataset {data_path} not found; run `pdm synth` first")
    ds = load_dataset(data_path)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    ckpt = cfg.path("model.pdmc")
    _, history = train(cfg.train_config(), ds, checkpoint=ckpt)
    write_loss_csv(cfg.path("losses.csv"), history)
    last = history[-1].report.total if history else float("nan")
    print(f"trained {len(history)} epochs; final L_total {last:.6f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: Path | None = None, dataset: Path | None = None) -> int:
    ckpt_path = checkpoint or cfg.path("model.pdmc")
    data_path = dataset or cfg.path("test.pdmd")
    for p in (ckpt_path, data_path):
        if not p.exists():
            raise ContractViolation(f"{p} not found")
    state, _ = load_checkpoint(ckpt_path)
    ds = load_dataset(data_path)
    feats = embed(state, ds.maps)
    report = cmc_map(RetrievalProtocol.from_split(feats, ds.labels, ds.modalities, cfg.direction))
    stats = distance_gap(feats, ds.labels, ds.modalities)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / f"report_{cfg.direction}.json", report, stats)
    write_cmc_csv(out / f"cmc_{cfg.direction}.csv", report)
    print(f"{cfg.direction}: Rank-1 {report.rank1:.4f}  mAP {report.map:.4f}  delta {stats.delta:.4f}")
    return EXIT_OK


def cmd_gradcheck() -> int:
    results = gradsuite.run_suite()
    print(gradsuite.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        cfg = load_config(args)
        if args.command == "print-config":
            return cmd_print_config(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_eval(cfg, args.checkpoint, args.dataset)
    except NumericFailure as exc:
        print(f"pdm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractViolation, UnsupportedConfiguration, DegenerateInputError, OSError, TypeError) as exc:
        print(f"pdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
