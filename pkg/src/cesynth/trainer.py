"""Adam, the two-stage training schedule, evaluation and ablation runs."""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from .data import MODALITIES, PatchSampler, Study, Volume, stitch_inference
from .data.patches import SLAB
from .losses import DEFAULT_SSIM, LossWeights, SsimParams, make_mask, total_loss
from .metrics import RegionReport, region_metrics, summarize
from .models import HRNet3D, ModelConfig, load_checkpoint, save_checkpoint
from .models.layers import Module
from .volgrid import Tape, Tensor

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[tuple[str, Tensor]], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.  Parameters without a gradient are skipped.

    Raises :class:`NonFiniteGradient` before touching anything if a gradient
    contains NaN or Inf.
    """
    params = [(n, p) for n, p in params if p.grad is not None]
    for name, p in params:
        if p.grad.shape != p.shape:
            raise ValueError(f"gradient of {name} has shape {p.grad.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params:
        g = p.grad
        dt = p.dtype.type
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        denom = np.sqrt(v / dt(bc2)) + dt(state.eps)
        p.data -= dt(state.lr / bc1) * m / denom


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class Stage:
    epochs: int
    learning_rate: float
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def weights(self, delta: float) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, delta)

    def describe(self) -> str:
        return (f"epochs={self.epochs} lr={self.learning_rate:g} "
                f"lambda=({self.lambda1:g}, {self.lambda2:g}, {self.lambda3:g})")


DEFAULT_STAGES = (Stage(40, 1e-4, 1.0, 1.0, 1.0), Stage(10, 1e-5, 0.1, 0.1, 10.0))


@dataclass
class TrainConfig:
    stages: list[Stage] = field(default_factory=lambda: [Stage(**asdict(s)) for s in DEFAULT_STAGES])
    batch_size: int = 3
    steps_per_epoch: int = 100
    seed: int = 0
    checkpoint_every: int = 0
    delta: float = 0.1
    modalities: tuple[str, ...] = MODALITIES
    validate: bool = True

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        self.modalities = tuple(self.modalities)
        if not self.stages:
            raise ValueError("TrainConfig needs at least one stage")
        if self.batch_size < 1 or self.steps_per_epoch < 0:
            raise ValueError("batch_size must be >= 1 and steps_per_epoch >= 0")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}")

    @property
    def total_steps(self) -> int:
        return sum(s.epochs for s in self.stages) * self.steps_per_epoch

    def stage_at(self, step: int) -> tuple[int, Stage]:
        """Stage governing 0-based ``step``."""
        edge = 0
        for i, s in enumerate(self.stages):
            edge += s.epochs * self.steps_per_epoch
            if step < edge:
                return i, s
        return len(self.stages) - 1, self.stages[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


LOG_FIELDS = ("step", "stage", "lr", "l_mae", "l_ssim", "l_local", "total")


def format_record(rec: dict) -> str:
    return ",".join(repr(rec[k]) for k in LOG_FIELDS)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Module
    records: list[dict]
    val_records: list[dict]
    checkpoints: list[Path]
    header: list[str]


class Trainer:
    """Owns the model, optimizer and sampler for one training run."""

    def __init__(self, model: Module, train_set: Sequence[Study], config: TrainConfig,
                 val_set: Sequence[Study] | None = None, out_dir=None,
                 ssim_params: SsimParams = DEFAULT_SSIM, log_stream: TextIO | None = None):
        self.model = model
        self.config = config
        self.sampler = PatchSampler(train_set, config.modalities, config.delta, seed=config.seed)
        self.adam = AdamState(lr=config.stages[0].learning_rate)
        self.ssim_params = ssim_params
        self.step = 0
        self.records: list[dict] = []
        self.val_records: list[dict] = []
        self.checkpoints: list[Path] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_stream = log_stream
        self._log_file = None
        self.header = self._header()
        self._val = self._validation_patches(val_set) if (val_set and config.validate) else None
        self._snapshot = None

    # -- logging ---------------------------------------------------------
    def _header(self) -> list[str]:
        lines = [f"# config {json.dumps(self.config.to_dict(), sort_keys=True)}"]
        if isinstance(self.model, HRNet3D):
            lines.append(f"# model {json.dumps(self.model.config.to_dict(), sort_keys=True)}")
        for i, s in enumerate(self.config.stages, 1):
            lines.append(f"# stage {i}: {s.describe()}")
        lines.append("# " + ",".join(LOG_FIELDS))
        return lines

    def _emit(self, line: str) -> None:
        if self.log_stream is not None:
            print(line, file=self.log_stream)
        if self.out_dir is not None:
            if self._log_file is None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                self._log_file = open(self.out_dir / "train.log", "a")
            self._log_file.write(line + "\n")
            self._log_file.flush()

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # -- validation ------------------------------------------------------
    def _validation_patches(self, val_set):
        xs, ys, ms = [], [], []
        for s in val_set:
            d = (s.shape[0] - SLAB) // 2
            xs.append(s.inputs(self.config.modalities)[:, d : d + SLAB])
            ys.append(s.ce_t1.data[None, d : d + SLAB])
            ms.append(make_mask(s.ce_t1.data, s.t1.data, self.config.delta)[None, d : d + SLAB])
        return np.stack(xs), np.stack(ys), np.stack(ms)

    def validate(self, weights: LossWeights) -> float:
        x, y, m = self._val
        pred = self.model.forward(Tensor(x, dtype=np.float32), train=False)
        loss, _ = total_loss(pred, y, None, weights, mask=m, ssim_params=self.ssim_params)
        return float(loss.data)

    # -- stepping --------------------------------------------------------
    def train_step(self) -> dict:
        idx, stage = self.config.stage_at(self.step)
        weights = stage.weights(self.config.delta)
        self.adam.lr = stage.learning_rate
        x, y, m = self.sampler.batch(self.config.batch_size)
        with Tape() as tape:
            pred = self.model.forward(Tensor(x, dtype=np.float32), train=True)
            loss, parts = total_loss(pred, y, None, weights, mask=m, ssim_params=self.ssim_params)
        if not math.isfinite(parts["total"]):
            raise FloatingPointError("non-finite training loss")
        self.model.zero_grad()
        tape.backward(loss)
        adam_step(self.model.named_parameters(), self.adam)
        self.step += 1
        rec = {"step": self.step, "stage": idx + 1, "lr": stage.learning_rate, **parts}
        self.records.append(rec)
        return rec

    def run(self, until: int | None = None) -> TrainResult:
        """Train up to global step ``until`` (default: the configured total)."""
        cfg = self.config
        until = cfg.total_steps if until is None else min(until, cfg.total_steps)
        if self.step == 0:
            for line in self.header:
                self._emit(line)
        self._take_snapshot()
        try:
            while self.step < until:
                idx, stage = cfg.stage_at(self.step)
                if self.step > 0 and cfg.stage_at(self.step - 1)[0] != idx:
                    epoch = self.step // cfg.steps_per_epoch + 1
                    self._emit(f"# stage {idx + 1} begins at epoch {epoch} (step {self.step + 1}): "
                               f"lr={stage.learning_rate:g} lambda=({stage.lambda1:g}, "
                               f"{stage.lambda2:g}, {stage.lambda3:g})")
                try:
                    rec = self.train_step()
                except FloatingPointError as exc:
                    self._restore_snapshot()
                    last = self.checkpoints[-1] if self.checkpoints else None
                    self._emit(f"# diverged at step {self.step + 1}: {exc}; last good checkpoint {last}")
                    raise DivergenceError(f"training diverged at step {self.step + 1}: {exc}", last) from exc
                self._emit(format_record(rec))
                if cfg.steps_per_epoch and self.step % cfg.steps_per_epoch == 0:
                    self._end_of_epoch(stage)
                if self.out_dir is not None and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.checkpoints.append(self.save_checkpoint(self.out_dir / f"step_{self.step:06d}.ckpt"))
                    self._take_snapshot()
            if self.out_dir is not None and self.step == cfg.total_steps and self.step > 0:
                self.checkpoints.append(self.save_checkpoint(self.out_dir / "final.ckpt"))
        finally:
            self.close()
        return TrainResult(self.model, self.records, self.val_records, self.checkpoints, self.header)

    def _end_of_epoch(self, stage: Stage) -> None:
        if self._val is None:
            return
        epoch = self.step // self.config.steps_per_epoch
        val = self.validate(stage.weights(self.config.delta))
        self.val_records.append({"epoch": epoch, "step": self.step, "val_total": val})
        self._emit(f"# val epoch={epoch} step={self.step} total={val!r}")

    # -- state -----------------------------------------------------------
    def _take_snapshot(self) -> None:
        self._snapshot = (
            {n: p.data.copy() for n, p in self.model.named_parameters()},
            {n: (st.mean, st.var) for n, st in self.model.named_bn_states()},
        )

    def _restore_snapshot(self) -> None:
        params, bn = self._snapshot
        for n, p in self.model.named_parameters():
            p.data = params[n].copy()
        for n, st in self.model.named_bn_states():
            st.mean, st.var = bn[n]

    def save_checkpoint(self, path) -> Path:
        arrays = {}
        for name in self.adam.m:
            arrays[f"adam.m/{name}"] = self.adam.m[name]
            arrays[f"adam.v/{name}"] = self.adam.v[name]
        extra = {
            "trainer": {
                "step": self.step,
                "config": self.config.to_dict(),
                "sampler_state": self.sampler.get_state(),
                "adam": {"t": self.adam.t, "lr": self.adam.lr, "beta1": self.adam.beta1,
                         "beta2": self.adam.beta2, "eps": self.adam.eps},
            }
        }
        return save_checkpoint(path, self.model, extra, arrays)

    @classmethod
    def resume(cls, path, train_set: Sequence[Study], val_set=None, out_dir=None,
               config: TrainConfig | None = None, **kwargs) -> "Trainer":
        ck = load_checkpoint(path)
        state = ck.extra["trainer"]
        config = config or TrainConfig.from_dict(state["config"])
        tr = cls(ck.model, train_set, config, val_set, out_dir, **kwargs)
        tr.step = state["step"]
        tr.sampler.set_state(state["sampler_state"])
        a = state["adam"]
        tr.adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"])
        for key, arr in ck.arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                tr.adam.m[name] = arr
            elif kind == "adam.v":
                tr.adam.v[name] = arr
        return tr


def fit(model: Module, train_set: Sequence[Study], val_set: Sequence[Study] | None = None,
        config: TrainConfig | None = None, out_dir=None, **kwargs) -> TrainResult:
    """Run every configured stage; the second stage fine-tunes the first stage's weights."""
    return Trainer(model, train_set, config or TrainConfig(), val_set, out_dir, **kwargs).run()


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

Predictor = Callable[[Study], Volume]


def _region_mask(study: Study, region: str):
    if region == "brain":
        return study.brain_mask.data
    if region == "tumor":
        return None if study.tumor_mask is None or not study.tumor_mask.data.any() else study.tumor_mask.data
    if region == "whole":
        return np.ones(study.shape, dtype=np.float32)
    raise ValueError(f"unknown region {region!r}")


def evaluate_predictions(predictions: Sequence[Volume], studies: Sequence[Study],
                         regions: Sequence[str] = ("brain", "tumor")) -> list[RegionReport]:
    rows = []
    for pred, s in zip(predictions, studies):
        for region in regions:
            mask = _region_mask(s, region)
            if mask is None:
                log.warning("study %s has no tumor mask; skipping tumor region", s.id)
                continue
            rows.append(region_metrics(pred.data, s.ce_t1.data, mask, region, s.id, with_ssim=region != "tumor"))
    return rows


def evaluate(model, test_set: Sequence[Study], regions: Sequence[str] = ("brain", "tumor"),
             modalities: Sequence[str] = MODALITIES) -> list[RegionReport]:
    """Stitched whole-volume inference followed by per-region metrics.

    ``model`` is either a network (run through :func:`stitch_inference`) or a
    callable mapping a study to a predicted volume.
    """
    if hasattr(model, "forward"):
        preds = [stitch_inference(model, s, modalities) for s in test_set]
    else:
        preds = [model(s) for s in test_set]
    return evaluate_predictions(preds, test_set, regions)


# --------------------------------------------------------------------------
# Ablations
# --------------------------------------------------------------------------

MODALITY_SETTINGS = (("T1", ("t1",)), ("T1+T2", ("t1", "t2")), ("T1+T2+ADC", ("t1", "t2", "adc")))
RATIO_SETTINGS = ((1.0, 1.0), (1.0, 10.0), (1.0, 30.0), (0.1, 10.0), (0.01, 10.0))


@dataclass
class AblationRow:
    label: str
    seed: int
    brain_psnr: float
    tumor_psnr: float
    lambdas: tuple[float, float, float] | None = None
    modalities: tuple[str, ...] = MODALITIES


@dataclass
class AblationTable:
    axis: str
    rows: list[AblationRow]

    def labels(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def median(self, label: str, metric: str) -> float:
        return statistics.median(getattr(r, metric) for r in self.rows if r.label == label)

    def to_text(self) -> str:
        lines = [f"ablation over {self.axis}",
                 f"{'setting':<22} {'brain PSNR (median)':>20} {'tumor PSNR (median)':>20}  per-seed brain / tumor"]
        for label in self.labels():
            rows = [r for r in self.rows if r.label == label]
            per = "; ".join(f"s{r.seed}: {r.brain_psnr:.2f}/{r.tumor_psnr:.2f}" for r in rows)
            lines.append(f"{label:<22} {self.median(label, 'brain_psnr'):>20.3f} "
                         f"{self.median(label, 'tumor_psnr'):>20.3f}  {per}")
        return "\n".join(lines)


def _ratio_label(l1: float, l3: float) -> str:
    return f"({l1:g}, {l3:g}) r={l3 / l1:g}"


def ablate(model_config: ModelConfig, train_config: TrainConfig, train_set: Sequence[Study],
           test_set: Sequence[Study], axis: str, seeds: Sequence[int] = (0,), settings=None,
           progress: Callable[[str], None] | None = None) -> AblationTable:
    """Train one model per (setting, seed) and report median brain/tumor PSNR.

    ``axis='modalities'`` varies the input set; ``axis='ratio'`` varies
    ``(lambda1, lambda3)`` with ``lambda2 = lambda1`` in a single stage that
    keeps the first configured stage's epochs and learning rate.
    """
    if axis == "modalities":
        settings = settings or MODALITY_SETTINGS
    elif axis == "ratio":
        settings = settings or RATIO_SETTINGS
    else:
        raise ValueError(f"axis must be 'modalities' or 'ratio', got {axis!r}")
    base_stage = train_config.stages[0]
    total_epochs = sum(s.epochs for s in train_config.stages)
    rows = []
    for setting in settings:
        for seed in seeds:
            if axis == "modalities":
                label, mods = setting
                stages = train_config.stages
                lambdas = None
            else:
                l1, l3 = setting
                label, mods = _ratio_label(l1, l3), train_config.modalities
                stages = [Stage(total_epochs, base_stage.learning_rate, l1, l1, l3)]
                lambdas = (l1, l1, l3)
            tcfg = TrainConfig(**{**train_config.to_dict(), "stages": [asdict(s) for s in stages],
                                  "modalities": list(mods), "seed": seed, "validate": False})
            mcfg = ModelConfig(**{**model_config.to_dict(), "in_modalities": len(mods), "seed": seed})
            model = HRNet3D(mcfg)
            fit(model, train_set, None, tcfg)
            summ = summarize(evaluate(model, test_set, ("brain", "tumor"), mods))
            brain = summ["brain"].mean["psnr_db"]
            tumor = summ["tumor"].mean["psnr_db"] if "tumor" in summ else math.nan
            rows.append(AblationRow(label, seed, brain, tumor, lambdas, tuple(mods)))
            if progress:
                progress(f"{label} seed={seed}: brain {brain:.2f} dB, tumor {tumor:.2f} dB")
    return AblationTable(axis, rows)
