"""Two-stage training: first align fusion + projection against a frozen LM,
then unfreeze the LM (or just its adapters) while the patch embedder stays
frozen throughout. Optimizer is adaptive-moment with decoupled weight decay,
beta (0.9, 0.999), eps 1e-8; learning rate decays by a fixed factor per
epoch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import container
from .autodiff import GradTape, SeededRng, Tensor
from .data import QASample
from .errors import ConfigError, DataError, NumericError
from .lm import InitScales, LoraAdapter, ModelSpec, QuantizedLinear, Tokenizer
from .model import MultiViewQAModel

FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 4
    epochs_per_stage: int = 6
    lr_gamma: float = 0.9
    seed: int = 0
    grad_clip: float | None = 1.0
    reset_optimizer_between_stages: bool = True

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch_size <= 0 or self.epochs_per_stage <= 0:
            raise ConfigError("lr0, batch_size and epochs_per_stage must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 < self.lr_gamma <= 1:
            raise ConfigError(f"lr_gamma must be in (0, 1], got {self.lr_gamma}")


@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]


def stage_plan(stage: int, lora: bool = False) -> StagePlan:
    if stage == 1:
        return StagePlan(1, trainable=("fusion", "proj"), frozen=("vision", "lm", "lora"))
    if stage == 2:
        if lora:
            return StagePlan(2, trainable=("fusion", "proj", "lora"), frozen=("vision", "lm"))
        return StagePlan(2, trainable=("fusion", "proj", "lm"), frozen=("vision",))
    raise ConfigError(f"stage must be 1 or 2, got {stage}")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_gamma ** epoch


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: dict[str, Tensor], state: AdamState, lr_t: float,
                   weight_decay: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> None:
    """One decoupled-weight-decay adaptive-moment update over trainable params.

    Decay is applied to the parameter before the moment update; parameters
    without a gradient this step are left untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if np.isnan(g).any():
            raise NumericError(f"NaN gradient in parameter {name!r}")
        if weight_decay:
            p.data -= lr_t * weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.dot(p.grad, p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class StageResult:
    trace: list[tuple[int, float, float]]  # (epoch, mean loss, lr)
    opt_state: AdamState
    data_rng_state: dict


def run_stage(model: MultiViewQAModel, plan: StagePlan, cfg: TrainConfig,
              samples: list[QASample], *, start_epoch: int = 0,
              opt_state: AdamState | None = None, data_rng: SeededRng | None = None,
              on_epoch_end=None) -> StageResult:
    """Train one stage: seeded shuffles, batches of ``batch_size``, frozen
    groups untouched bit for bit."""
    if not samples:
        raise DataError("cannot train on an empty dataset")
    model.set_trainable(plan.trainable)
    trainable = model.trainable_params()
    if not trainable:
        raise ConfigError(f"stage {plan.stage} has no trainable parameters")
    opt_state = opt_state or AdamState()
    # The data stream is keyed to the stage so stages shuffle independently
    # of each other and of model initialization.
    data_rng = data_rng or SeededRng(cfg.seed).spawn(100 + plan.stage)
    trace: list[tuple[int, float, float]] = []
    n = len(samples)
    for epoch in range(start_epoch, cfg.epochs_per_stage):
        lr_t = lr_schedule(cfg, epoch)
        order = data_rng.permutation(n)
        total_loss = 0.0
        for b0 in range(0, n, cfg.batch_size):
            batch = [samples[i] for i in order[b0:b0 + cfg.batch_size]]
            for p in trainable.values():
                p.zero_grad()
            for s in batch:
                with GradTape() as tape:
                    loss = model.sample_loss(s)
                tape.backward(loss, seed=1.0 / len(batch))
                total_loss += loss.item()
            if cfg.grad_clip is not None:
                clip_global_norm(trainable, cfg.grad_clip)
            optimizer_step(trainable, opt_state, lr_t, cfg.weight_decay)
        mean_loss = total_loss / n
        trace.append((epoch, mean_loss, lr_t))
        if on_epoch_end is not None:
            on_epoch_end(epoch, mean_loss, lr_t, opt_state, data_rng)
    return StageResult(trace=trace, opt_state=opt_state, data_rng_state=data_rng.state)


def run_two_stage(model: MultiViewQAModel, cfg: TrainConfig, samples: list[QASample],
                  lora: bool = False) -> list[tuple[int, int, float, float]]:
    """Stage 1 then stage 2; returns (stage, epoch, mean loss, lr) rows."""
    rows = []
    state: AdamState | None = None
    for stage in (1, 2):
        result = run_stage(model, stage_plan(stage, lora), cfg, samples,
                           opt_state=None if cfg.reset_optimizer_between_stages else state)
        state = result.opt_state
        rows.extend((stage, e, l, lr) for e, l, lr in result.trace)
    return rows


def write_loss_csv(path, rows: list[tuple[int, int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "mean_loss", "lr"])
        for stage, epoch, loss, lr in rows:
            w.writerow([stage, epoch, f"{loss:.10f}", f"{lr:.10e}"])


# -- checkpointing ---------------------------------------------------------


def save_checkpoint(path, model: MultiViewQAModel, *, stage: int = 0, epoch: int = 0,
                    opt_state: AdamState | None = None, rng_state: dict | None = None,
                    store_dtype: str = "f8") -> None:
    """Serialize model (and optionally optimizer/rng) into the container.

    ``store_dtype="f4"`` exists for checkpoint size accounting only; training
    always resumes from full-precision checkpoints.
    """
    if store_dtype not in ("f8", "f4"):
        raise ConfigError(f"store_dtype must be 'f8' or 'f4', got {store_dtype}")
    np_dtype = np.float64 if store_dtype == "f8" else np.float32
    arrays: dict[str, np.ndarray] = {}
    for name, t in model.params().items():
        if name in model.lm.quantized:
            q = model.lm.quantized[name]
            arrays[name] = q.q.reshape(q.shape)
            arrays[f"{name}.qscale"] = np.array([q.scale])
        else:
            arrays[name] = t.view().astype(np_dtype)
    header: dict = {
        "format_version": FORMAT_VERSION,
        "model_spec": model.spec.to_dict(),
        "vocab": model.tokenizer.vocab,
        "stage": stage,
        "epoch": epoch,
        "lora": [{"target": a.target, "rank": a.rank, "alpha": a.alpha}
                 for a in model.lm.lora.values()],
        "quantized": sorted(model.lm.quantized),
    }
    if opt_state is not None:
        header["opt_step"] = opt_state.step
        for name, m in opt_state.m.items():
            arrays[f"opt.m.{name}"] = m
            arrays[f"opt.v.{name}"] = opt_state.v[name]
    if rng_state is not None:
        header["rng_state"] = _encode_rng(rng_state)
    container.write_container(path, header, arrays)


@dataclass
class LoadedCheckpoint:
    model: MultiViewQAModel
    stage: int
    epoch: int
    opt_state: AdamState | None
    rng_state: dict | None


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> LoadedCheckpoint:
    header, arrays = container.read_container(path)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    spec = ModelSpec.from_dict(header["model_spec"])
    if expected_spec is not None and spec != expected_spec:
        raise DataError(f"{path}: checkpoint ModelSpec does not match the requested configuration")
    tokenizer = Tokenizer(header["vocab"])
    model = MultiViewQAModel.create(spec, tokenizer, seed=0)
    lora_entries = header.get("lora", [])
    if lora_entries:
        leaves = tuple(sorted({e["target"].rsplit(".", 1)[-1] for e in lora_entries}))
        model.with_lora(targets=leaves, rank=lora_entries[0]["rank"],
                        alpha=lora_entries[0]["alpha"])
    # Every parameter (adapters included) is overwritten with the stored
    # bytes below, validating shapes as we go.
    params = model.params()
    for name, t in params.items():
        if name in header.get("quantized", []):
            continue
        if name not in arrays:
            raise DataError(f"{path}: checkpoint missing array {name!r}")
        stored = arrays[name]
        if tuple(stored.shape) != t.shape:
            raise DataError(f"{path}: array {name!r} has shape {tuple(stored.shape)}, expected {t.shape}")
        t.data[:] = stored.astype(np.float64).reshape(-1)
    for name in header.get("quantized", []):
        q = arrays[name]
        scale = float(arrays[f"{name}.qscale"][0])
        model.lm.quantized[name] = QuantizedLinear(q=q.astype(np.int8), scale=scale,
                                                   shape=tuple(q.shape))
        model.lm.params[name].requires_grad = False
    opt_state = None
    if "opt_step" in header:
        opt_state = AdamState(step=header["opt_step"])
        for name in params:
            if f"opt.m.{name}" in arrays:
                opt_state.m[name] = arrays[f"opt.m.{name}"].astype(np.float64).reshape(-1)
                opt_state.v[name] = arrays[f"opt.v.{name}"].astype(np.float64).reshape(-1)
    rng_state = _decode_rng(header["rng_state"]) if "rng_state" in header else None
    return LoadedCheckpoint(model=model, stage=header.get("stage", 0),
                            epoch=header.get("epoch", 0), opt_state=opt_state,
                            rng_state=rng_state)


def _encode_rng(state: dict) -> dict:
    # PCG64 state holds 128-bit ints; stringify so the JSON header stays
    # portable across parsers that choke on big numbers.
    enc = {"bit_generator": state["bit_generator"],
           "state": {k: str(v) for k, v in state["state"].items()},
           "has_uint32": state["has_uint32"], "uinteger": state["uinteger"]}
    return enc


def _decode_rng(enc: dict) -> dict:
    return {"bit_generator": enc["bit_generator"],
            "state": {k: int(v) for k, v in enc["state"].items()},
            "has_uint32": enc["has_uint32"], "uinteger": enc["uinteger"]}
