"""Command-line workflows: phantom, train, synth, eval, ablate, gradcheck.

Run configuration is an INI file with sections ``[model]``, ``[train]``,
``[stage.N]`` (one per training stage, N = 1, 2, ...), ``[phantom]`` and
``[eval]``.  Every key has a default; unknown sections or keys are rejected.
The resolved configuration is written to ``config.ini`` in every output
directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (non-finite values, divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (DataError, PhantomSpec, PhantomSpecError, Study, enhancement_contract, load_dataset,
                   load_study, phantom_cohort, save_study, stitch_inference)
from .metrics import reports_to_csv, summary_text
from .models import CheckpointError, ConfigError, HRNet3D, ModelConfig, load_checkpoint
from .trainer import (DivergenceError, Stage, TrainConfig, Trainer, ablate, evaluate,
                      evaluate_predictions)
from .verify import run_all

log = logging.getLogger("cesynth")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
REGIONS = ("brain", "tumor", "whole")


class RunConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


@dataclass
class EvalOptions:
    regions: tuple[str, ...] = ("brain", "tumor")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            dataclasses.replace(self.model, seed=seed),
            dataclasses.replace(self.train, seed=seed),
            dataclasses.replace(self.phantom, seed=seed),
            self.eval,
        )


_SCALAR_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "phantom": PhantomSpec, "eval": EvalOptions}
_STAGE_KEYS = tuple(f.name for f in dataclasses.fields(Stage))


def _coerce(text: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
        return text.strip()
    except ValueError as exc:
        raise RunConfigError(f"{where}: cannot parse {text!r}") from exc


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise RunConfigError(f"{source}: {exc}") from exc
    parts: dict[str, object] = {}
    stages: dict[int, Stage] = {}
    for section in cp.sections():
        if section.startswith("stage."):
            try:
                idx = int(section.split(".", 1)[1])
            except ValueError as exc:
                raise RunConfigError(f"{source}: bad stage section [{section}]") from exc
            values = {}
            for key, raw in cp.items(section):
                if key not in _STAGE_KEYS:
                    raise RunConfigError(f"{source}: unknown key {key!r} in [{section}]")
                values[key] = _coerce(raw, 0 if key == "epochs" else 0.0, f"[{section}] {key}")
            if "epochs" not in values or "learning_rate" not in values:
                raise RunConfigError(f"{source}: [{section}] needs epochs and learning_rate")
            stages[idx] = Stage(**values)
            continue
        cls = _SCALAR_SECTIONS.get(section)
        if cls is None:
            raise RunConfigError(f"{source}: unknown section [{section}]")
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls) if f.name != "stages"}
        values = {}
        for key, raw in cp.items(section):
            if key not in names:
                raise RunConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _coerce(raw, getattr(defaults, key), f"[{section}] {key}")
        parts[section] = values
    if stages and sorted(stages) != list(range(1, len(stages) + 1)):
        raise RunConfigError(f"{source}: stage sections must be numbered 1..N, got {sorted(stages)}")
    try:
        train_kwargs = dict(parts.get("train", {}))
        if stages:
            train_kwargs["stages"] = [stages[i] for i in sorted(stages)]
        cfg = RunConfig(
            ModelConfig(**parts.get("model", {})),
            TrainConfig(**train_kwargs),
            PhantomSpec(**parts.get("phantom", {})),
            EvalOptions(**parts.get("eval", {})),
        )
    except (ValueError, TypeError) as exc:
        raise RunConfigError(f"{source}: {exc}") from exc
    for r in cfg.eval.regions:
        if r not in REGIONS:
            raise RunConfigError(f"{source}: unknown region {r!r}; choose from {REGIONS}")
    return cfg


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise RunConfigError(f"config file {p} not found")
    return parse_run_config(p.read_text(), str(p))


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("phantom", cfg.phantom), ("eval", cfg.eval)):
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            if f.name != "stages":
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    for i, s in enumerate(cfg.train.stages, 1):
        lines.append(f"[stage.{i}]")
        lines += [f"{k} = {getattr(s, k)}" for k in _STAGE_KEYS]
        lines.append("")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise RunConfigError(f"output directory {path} is not empty; pass --force to reuse it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary 8-bit portable graymap of ``image`` clipped to [0, 1]."""
    img = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise DataError(f"{path}: not a binary graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


GRID_COLUMNS = ("t1", "t2", "adc", "truth", "synthetic", "abs_diff")


def slice_grid(study: Study, synthetic: np.ndarray, gap: int = 1) -> np.ndarray:
    """One row per depth slice: T1, T2, ADC, true CE-T1, synthetic CE-T1, |difference|."""
    D, H, W = study.shape
    cols = [study.t1.data, study.t2.data, study.adc.data, study.ce_t1.data, synthetic,
            np.abs(synthetic - study.ce_t1.data)]
    grid = np.zeros((D * (H + gap) - gap, len(cols) * (W + gap) - gap), dtype=np.float32)
    for d in range(D):
        for c, vol in enumerate(cols):
            grid[d * (H + gap) : d * (H + gap) + H, c * (W + gap) : c * (W + gap) + W] = vol[d]
    return grid


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_phantom(args, cfg: RunConfig) -> int:
    out = prepare_out(args.out, args.force)
    studies = phantom_cohort(args.count, cfg.phantom, seed=cfg.phantom.seed)
    for s in studies:
        c = enhancement_contract(s, cfg.train.delta)
        if not (c["tumor_min"] > cfg.train.delta and c["vessel_min"] > cfg.train.delta
                and c["background_max"] <= cfg.train.delta / 2):
            raise DataError(f"phantom {s.id} violates the enhancement contract: {c}")
        save_study(s, out)
    print(f"wrote {len(studies)} studies to {out}")
    return EXIT_OK


def _load(path) -> list[Study]:
    p = Path(path)
    if (p / "manifest.txt").is_file():
        return [load_study(p)]
    return load_dataset(p)


def cmd_train(args, cfg: RunConfig) -> int:
    out = prepare_out(args.out, args.force or args.resume is not None)
    train_set = _load(args.data)
    val_set = _load(args.val_data) if args.val_data else None
    stream = sys.stdout if not args.quiet else None
    if args.resume:
        trainer = Trainer.resume(args.resume, train_set, val_set, out, log_stream=stream)
    else:
        model = HRNet3D(dataclasses.replace(cfg.model, in_modalities=len(cfg.train.modalities)))
        trainer = Trainer(model, train_set, cfg.train, val_set, out, log_stream=stream)
    result = trainer.run(args.steps)
    print(f"trained to step {trainer.step}; checkpoints: {', '.join(str(c) for c in result.checkpoints) or 'none'}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out = prepare_out(args.out, args.force)
    ck = load_checkpoint(args.checkpoint)
    study = load_study(args.study)
    mods = ck.extra.get("trainer", {}).get("config", {}).get("modalities", cfg.train.modalities)
    synth = stitch_inference(ck.model, study, tuple(mods))
    synth.data.astype("<f4").tofile(out / "synthetic_ce_t1.raw")
    (out / "synthetic_ce_t1.txt").write_text(
        f"id={study.id}\nshape={','.join(map(str, study.shape))}\n"
        f"spacing={','.join(map(str, study.t1.spacing))}\ndtype=float32\nendianness=little\n")
    write_pgm(out / "grid.pgm", slice_grid(study, synth.data))
    (out / "grid_columns.txt").write_text(" ".join(GRID_COLUMNS) + "\n")
    print(f"wrote synthetic CE-T1 and slice grid for study {study.id} to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = prepare_out(args.out, args.force)
    studies = _load(args.data)
    regions = tuple(args.regions.split(",")) if args.regions else cfg.eval.regions
    for r in regions:
        if r not in REGIONS:
            raise RunConfigError(f"unknown region {r!r}; choose from {REGIONS}")
    if args.oracle:
        reports = evaluate_predictions([s.ce_t1 for s in studies], studies, regions)
        title = "ground truth as prediction"
    else:
        if not args.checkpoint:
            raise RunConfigError("eval needs --checkpoint or --oracle")
        ck = load_checkpoint(args.checkpoint)
        mods = ck.extra.get("trainer", {}).get("config", {}).get("modalities", cfg.train.modalities)
        reports = evaluate(ck.model, studies, regions, tuple(mods))
        title = f"checkpoint {args.checkpoint}"
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    text = summary_text(reports, title)
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = prepare_out(args.out, args.force)
    train_set = _load(args.data)
    test_set = _load(args.test_data)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    table = ablate(cfg.model, cfg.train, train_set, test_set, args.axis, seeds, progress=print)
    text = table.to_text()
    (out / f"ablation_{args.axis}.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    ok, text = run_all(tol=args.tol, e2e_tol=args.e2e_tol, seed=cfg.model.seed)
    if args.out is not None:
        out = prepare_out(args.out, args.force)
        (out / "gradcheck.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="INI run configuration; omitted keys keep their defaults")
    p.add_argument("--seed", type=int, help="overrides every seed in the configuration (model init, "
                                             "patch sampling, phantom generation)")
    p.add_argument("--threads", type=int, help="BLAS threads; 1 is the bit-exact sequential mode "
                                                "(env CESYNTH_THREADS, default 1)")
    p.add_argument("--out", type=Path, required=False,
                   help="output directory; every file is written below it (env CESYNTH_OUT)"
                   + ("" if out_required else "; optional"))
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    p.set_defaults(out_required=out_required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cesynth", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic studies with known enhancement")
    _common(p)
    p.add_argument("--spec", dest="config", help="alias of --config; the [phantom] section sets the spec")
    p.add_argument("--count", type=int, default=4, help="number of studies (default 4)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="two-stage training of the multi-branch generator",
                       description="Stage 1 trains with lambda = (1, 1, 1) at lr 1e-4 for 40 epochs; "
                                   "stage 2 fine-tunes with lambda = (0.1, 0.1, 10) at lr 1e-5 for 10 epochs, "
                                   "batch size 3.  Override with [stage.N] sections.")
    _common(p)
    p.add_argument("--data", required=True, help="directory of study_* folders used for training")
    p.add_argument("--val-data", help="directory of validation studies, scored at the end of every epoch")
    p.add_argument("--steps", type=int, help="stop after this global step (default: full schedule)")
    p.add_argument("--resume", help="checkpoint written by a previous train run; continues bit-exactly")
    p.add_argument("--quiet", action="store_true", help="do not echo the training log to stdout")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize CE-T1 for one study and write a slice grid image")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--study", required=True, help="study directory (study_<id>)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="per-region MAE / PSNR / SSIM table")
    _common(p)
    p.add_argument("--data", required=True, help="directory of test studies")
    p.add_argument("--checkpoint", help="model checkpoint to evaluate")
    p.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    p.add_argument("--regions", help="comma-separated subset of brain,tumor,whole (default brain,tumor)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="input-modality or loss-ratio ablation table",
                       description="axis 'modalities' trains on T1, T1+T2 and T1+T2+ADC; axis 'ratio' trains "
                                   "(lambda1, lambda3) in (1,1), (1,10), (1,30), (0.1,10), (0.01,10) with "
                                   "lambda2 = lambda1.")
    _common(p)
    p.add_argument("--axis", required=True, choices=("modalities", "ratio"), help="what to vary")
    p.add_argument("--data", required=True, help="training studies")
    p.add_argument("--test-data", required=True, help="held-out studies")
    p.add_argument("--seeds", default="0", help="comma-separated training seeds (default 0)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable kernel")
    _common(p, out_required=False)
    p.add_argument("--tol", type=float, default=1e-3, help="per-op relative error tolerance (default 1e-3)")
    p.add_argument("--e2e-tol", type=float, default=1e-2, help="end-to-end model tolerance (default 1e-2)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None and os.environ.get("CESYNTH_OUT"):
        args.out = Path(os.environ["CESYNTH_OUT"])
    threads = args.threads if args.threads is not None else int(os.environ.get("CESYNTH_THREADS", "1"))
    try:
        if args.out_required and args.out is None:
            raise RunConfigError("--out (or CESYNTH_OUT) is required")
        if threads < 1:
            raise RunConfigError("--threads must be >= 1")
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        with threadpool_limits(threads):
            code = args.func(args, cfg)
        if args.out is not None and args.out.is_dir():
            (args.out / "config.ini").write_text(dump_run_config(cfg))
        return code
    except (RunConfigError, ConfigError, PhantomSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
