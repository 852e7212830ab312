"""Command-line experiment harness.

Subcommands:
  gen          write the synthetic calibration set(s) as binary tensors plus manifest
  sensitivity  output SQNR with each quantization point enabled alone
  ablate       SQNR with no correction and with each correction granularity
  scatter      expected quantized softmax sum vs SQNR across a logit_std sweep

Every command reads an optional JSON config (``--config``); command-line flags
override file values. Results land in ``--out`` as CSV with a fixed header.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import tensor
from .attention import (AttentionConfig, Pipeline, QuantPoint, calibrate_softmax_bias, float_calibration,
                        gen_inputs, pipeline_sqnr, quant_plan)
from .bias import PER_HEAD, PER_TENSOR, TS_PER_HEAD, TS_PER_TENSOR, Granularity
from .metrics import DB_MEAN, RATIO_MEAN, mean_row_sum
from .quantizer import MAX_BITS, MIN_BITS, softmax_grid

CORRECTIONS = {
    "none": None,
    "per-tensor": PER_TENSOR,
    "per-head": PER_HEAD,
    "ts-per-tensor": TS_PER_TENSOR,
    "ts-per-head": TS_PER_HEAD,
}

SENSITIVITY_HEADER = ("quant_point", "bitwidth", "sqnr_db", "seed")
ABLATION_HEADER = ("correction", "sqnr_db", "seed")
SCATTER_HEADER = ("logit_std", "expected_sum", "sqnr_db")

DEFAULT_SWEEP = (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0)


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    bits: int = 8
    # bitwidths swept by `sensitivity`; empty means [bits]
    bitwidths: tuple[int, ...] = ()
    corrections: tuple[str, ...] = tuple(CORRECTIONS)
    n_time_bins: int | None = None
    softmax_minmax: bool = False
    logit_std_sweep: tuple[float, ...] = DEFAULT_SWEEP
    seeds: int = 1
    average: str = RATIO_MEAN

    def __post_init__(self):
        for b in (self.bits,) + tuple(self.bitwidths):
            if isinstance(b, bool) or int(b) != b or not MIN_BITS <= b <= MAX_BITS:
                raise UsageError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {b!r}")
        unknown = [c for c in self.corrections if c not in CORRECTIONS]
        if unknown:
            raise UsageError(f"unknown corrections {unknown}; choose from {list(CORRECTIONS)}")
        if isinstance(self.seeds, bool) or int(self.seeds) != self.seeds or self.seeds < 1:
            raise UsageError(f"seeds must be a positive integer, got {self.seeds!r}")
        if self.attention.seed + self.seeds - 1 >= 2**64:
            raise UsageError("seed range exceeds 64 bits")
        if self.average not in (RATIO_MEAN, DB_MEAN):
            raise UsageError(f"average must be {RATIO_MEAN!r} or {DB_MEAN!r}, got {self.average!r}")
        if any(not (s > 0) for s in self.logit_std_sweep):
            raise UsageError("logit_std_sweep values must be positive")
        if self.n_time_bins is not None and self.n_time_bins < 1:
            raise UsageError("n_time_bins must be positive")

    @property
    def seed_list(self) -> list[int]:
        return [self.attention.seed + i for i in range(self.seeds)]

    def sensitivity_bits(self) -> tuple[int, ...]:
        return tuple(self.bitwidths) or (self.bits,)

    def to_json(self) -> dict:
        d = asdict(self)
        d["attention"] = self.attention.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        obj = dict(obj)
        obj["attention"] = AttentionConfig.from_json(obj.get("attention", {}))
        for key in ("bitwidths", "corrections", "logit_std_sweep"):
            if key in obj:
                if not isinstance(obj[key], list):
                    raise UsageError(f"{key} must be a list")
                obj[key] = tuple(obj[key])
        return cls(**obj)


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: top level must be an object")
    cfg = ExperimentConfig.from_json(raw)
    changes = {}
    if args.seed is not None:
        changes["attention"] = cfg.attention.replace(seed=args.seed)
    if args.bits is not None:
        changes.update(bits=args.bits, bitwidths=())
    if args.seeds is not None:
        changes["seeds"] = args.seeds
    return ExperimentConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **changes})


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ------------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """One directory per seed with q/k/v tensors and a manifest."""
    written = []
    for seed in cfg.seed_list:
        acfg = cfg.attention.replace(seed=seed)
        cset = gen_inputs(acfg)
        d = out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, sample in enumerate(cset.samples):
            names = []
            for tag, t in zip("qkv", sample):
                name = f"sample_{i:04d}_{tag}.qbt"
                tensor.save(t, d / name)
                names.append(name)
            files.append(names)
        manifest = {
            "seed": seed,
            "n_samples": len(cset),
            "shape": list(cset.samples[0][0].shape),
            "timesteps": list(cset.timesteps),
            "files": files,
            "config": acfg.to_json(),
        }
        _write_json(d / "manifest.json", manifest)
        written.append(d)
    return written


def sensitivity_rows(cfg: ExperimentConfig) -> list[tuple]:
    points = list(QuantPoint)
    rows = []
    for seed in cfg.seed_list:
        acfg = cfg.attention.replace(seed=seed)
        cset = gen_inputs(acfg)
        pipe = Pipeline(acfg)
        reference, observers = float_calibration(cset, acfg, pipe)
        for b in cfg.sensitivity_bits():
            for point in points:
                outs = pipe.run(cset, quant_plan(observers, point, b, cfg.softmax_minmax))
                rows.append((point.value, b, pipeline_sqnr(reference, outs, cfg.average).mean_db, seed))
    order = {p.value: i for i, p in enumerate(points)}
    rows.sort(key=lambda r: (r[3], r[1], order[r[0]]))
    return rows


def ablation_rows(cfg: ExperimentConfig) -> list[tuple]:
    """First half of each seed's samples calibrates, second half evaluates."""
    rows = []
    names = list(CORRECTIONS)
    for seed in cfg.seed_list:
        acfg = cfg.attention.replace(seed=seed)
        calib, evalset = gen_inputs(acfg).split_half()
        pipe = Pipeline(acfg)
        if cfg.softmax_minmax:
            quant = quant_plan(float_calibration(calib, acfg, pipe)[1], QuantPoint.SOFTMAX, cfg.bits, True)
        else:
            quant = {QuantPoint.SOFTMAX: softmax_grid(cfg.bits)}
        reference = pipe.run(evalset)
        for name in cfg.corrections:
            tag = CORRECTIONS[name]
            corr = None
            if tag is not None:
                g = Granularity(tag, cfg.n_time_bins if tag in (TS_PER_TENSOR, TS_PER_HEAD) else None)
                corr = calibrate_softmax_bias(calib, acfg, quant, g, pipe)
            outs = pipe.run(evalset, quant, corr)
            rows.append((name, pipeline_sqnr(reference, outs, cfg.average).mean_db, seed))
    rows.sort(key=lambda r: (r[2], names.index(r[0])))
    return rows


def scatter_rows(cfg: ExperimentConfig) -> list[tuple]:
    if not cfg.logit_std_sweep:
        raise UsageError("scatter needs a non-empty logit_std_sweep")
    rows = []
    for std in cfg.logit_std_sweep:
        for seed in cfg.seed_list:
            acfg = cfg.attention.replace(seed=seed, logit_std=float(std))
            cset = gen_inputs(acfg)
            pipe = Pipeline(acfg)
            reference = pipe.run(cset)
            sums: list[float] = []

            def hook(_layer, _i, point, _before, after):
                if point is QuantPoint.SOFTMAX:
                    sums.append(mean_row_sum(after))

            outs = pipe.run(cset, {QuantPoint.SOFTMAX: softmax_grid(cfg.bits)}, hook=hook)
            acc = 0.0
            for v in sums:
                acc += v
            rows.append((float(std), seed, acc / len(sums), pipeline_sqnr(reference, outs, cfg.average).mean_db))
    rows.sort(key=lambda r: (r[0], r[1]))
    return [(std, es, db) for std, _seed, es, db in rows]


# -- entry point -----------------------------------------------------------------

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=_u64, metavar="U64", help="base seed (overrides config)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--bits", type=int, metavar="N", help="bitwidth (overrides config)")
    common.add_argument("--seeds", type=_positive, metavar="N", help="number of seeds: seed, seed+1, ...")
    parser = argparse.ArgumentParser(prog="qsoftmax", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write synthetic calibration data")
    sub.add_parser("sensitivity", parents=[common], help="per-quantization-point SQNR -> sensitivity.csv")
    sub.add_parser("ablate", parents=[common], help="bias-correction granularity ablation -> ablation.csv")
    sub.add_parser("scatter", parents=[common], help="expected softmax sum vs SQNR -> scatter.csv")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args)
        if args.command == "gen":
            for d in cmd_gen(cfg, out):
                print(d)
            return 0
        if args.command == "sensitivity":
            path, header, rows = out / "sensitivity.csv", SENSITIVITY_HEADER, sensitivity_rows(cfg)
        elif args.command == "ablate":
            path, header, rows = out / "ablation.csv", ABLATION_HEADER, ablation_rows(cfg)
        else:
            path, header, rows = out / "scatter.csv", SCATTER_HEADER, scatter_rows(cfg)
        write_csv(path, header, rows)
        print(path)
        return 0
    except OSError as e:
        where = f"{e.filename}: " if e.filename else ""
        print(f"qsoftmax {args.command}: {where}{e.strerror or e}", file=sys.stderr)
        return 1
    except (ValueError, TypeError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"qsoftmax {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
