"""Training loop: deterministic batches, AdamW, warmup+cosine, metrics, resume.

Metrics go to ``metrics.csv`` (``step,epoch,lr,train_loss,val_metric,step_ms``,
one row per log interval, LF endings). In deterministic mode the step_ms
column is written as 0.000 so that a resumed run reproduces the metrics file
byte-for-byte; observed timings still go to the echo callback. Checkpoints
land in the output directory as ``ckpt_NNNNNN.bin``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .checkpoint import load_model_checkpoint, save_model_checkpoint
from .model import Model, ModelSpec
from .optim import AdamW, CosineSchedule, clip_grad_norm
from .tasks import TaskSpec, build_task
from .tensor import Tensor, cross_entropy, no_grad, reshape

EVAL_BATCH = 64


class TrainingDivergence(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 50
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    log_interval: int = 50
    checkpoint_interval: int = 0
    dtype: str = "f32"
    deterministic: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0; got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1; got {self.batch_size}")
        if not 0 <= self.warmup_steps <= max(self.steps, 0):
            raise ValueError(
                f"warmup_steps must be in [0, steps={self.steps}]; got {self.warmup_steps}"
            )
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ValueError("need base_lr > 0 and 0 <= min_lr <= base_lr")
        if self.log_interval < 1:
            raise ValueError(f"log_interval must be >= 1; got {self.log_interval}")
        if self.checkpoint_interval < 0 or self.grad_clip < 0:
            raise ValueError("checkpoint_interval and grad_clip must be >= 0")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64; got {self.dtype!r}")

    def to_dict(self) -> dict:
        import dataclasses

        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class EvalResult(NamedTuple):
    metric: float  # accuracy (classification) or perplexity (lm)
    loss: float    # mean cross-entropy in nats


class TrainResult(NamedTuple):
    final_step: int
    final_eval: EvalResult
    metrics_path: Path
    checkpoint_paths: list[Path]


def batch_loss(model: Model, tokens: np.ndarray, targets: np.ndarray, training: bool) -> Tensor:
    logits = model.forward(tokens, training=training)
    if model.spec.objective == "classification":
        return cross_entropy(logits, targets)
    b, l, v = logits.shape
    return cross_entropy(reshape(logits, (b * l, v)), targets.reshape(-1))


def evaluate(model: Model, task) -> EvalResult:
    """Full-validation metric and mean loss in eval mode (banks frozen)."""
    xs, ys = task.val_data()
    total_nll = 0.0
    correct = 0
    count = 0
    with no_grad():
        for i in range(0, xs.shape[0], EVAL_BATCH):
            xb, yb = xs[i:i + EVAL_BATCH], ys[i:i + EVAL_BATCH]
            logits = model.forward(xb, training=False)
            if model.spec.objective == "classification":
                n = xb.shape[0]
                total_nll += float(cross_entropy(logits, yb).data) * n
                correct += int((logits.data.argmax(axis=1) == yb).sum())
            else:
                b, l, v = logits.shape
                n = b * l
                total_nll += float(cross_entropy(reshape(logits, (n, v)), yb.reshape(-1)).data) * n
            count += n
    loss = total_nll / count
    if model.spec.objective == "classification":
        return EvalResult(metric=correct / count, loss=loss)
    return EvalResult(metric=float(np.exp(loss)), loss=loss)


def _check_compatible(spec: ModelSpec, task) -> None:
    problems = []
    if spec.vocab_size != task.vocab_size:
        problems.append(f"vocab_size {spec.vocab_size} != task vocab {task.vocab_size}")
    if spec.objective != task.objective:
        problems.append(f"objective {spec.objective!r} != task objective {task.objective!r}")
    if spec.objective == "classification" and spec.num_classes != task.num_classes:
        problems.append(f"num_classes {spec.num_classes} != task classes {task.num_classes}")
    if task.spec.seq_len > spec.max_seq_len:
        problems.append(f"task seq_len {task.spec.seq_len} > max_seq_len {spec.max_seq_len}")
    if problems:
        raise ValueError("model/task mismatch: " + "; ".join(problems))


def model_spec_for_task(task, **kw) -> ModelSpec:
    """Fill the data-dependent ModelSpec fields from a built task."""
    kw.setdefault("max_seq_len", task.spec.seq_len)
    return ModelSpec(
        vocab_size=task.vocab_size,
        num_classes=task.num_classes,
        objective=task.objective,
        **kw,
    )


def _rng_state_meta(seed: int) -> dict:
    return {"seed": int(seed), "pcg64": np.random.PCG64(seed).state}


def train_loop(model_spec: ModelSpec, task_spec: TaskSpec, cfg: TrainConfig,
               out_dir, resume_from=None, halt_at_step: int | None = None,
               echo: Callable[[str], None] | None = None) -> TrainResult:
    """Run (or resume) a training job, writing metrics and checkpoints.

    ``halt_at_step`` simulates an interruption after that step completes;
    checkpoints already written stay valid for a later ``resume_from``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    say = echo or (lambda s: None)

    task = build_task(task_spec)
    _check_compatible(model_spec, task)

    loaded = None
    if resume_from is not None:
        loaded = load_model_checkpoint(resume_from)
        if loaded.model.spec != model_spec:
            raise ValueError(f"checkpoint spec does not match run spec ({resume_from})")
        model = loaded.model
        start_step = loaded.step
        if start_step > cfg.steps:
            raise ValueError(f"checkpoint step {start_step} beyond configured steps {cfg.steps}")
    else:
        model = Model(model_spec, dtype=cfg.dtype)
        start_step = 0

    named = model.named_parameters()
    no_decay = frozenset(name for name, _ in named if name.endswith(".fusion.weights"))
    opt = AdamW(named, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, no_decay)
    if loaded is not None and loaded.opt_arrays:
        opt.load_state_arrays(loaded.opt_arrays)
    sched = CosineSchedule(cfg.warmup_steps, cfg.steps, cfg.base_lr, cfg.min_lr)

    metrics_path = out_dir / "metrics.csv"
    if resume_from is None or not metrics_path.exists():
        with open(metrics_path, "w", newline="\n") as fh:
            fh.write("step,epoch,lr,train_loss,val_metric,step_ms\n")

    ckpt_paths: list[Path] = []
    extra_meta = {"task_spec": task_spec.to_dict(), "train_config": cfg.to_dict(),
                  "rng_state": _rng_state_meta(task_spec.seed)}

    def save(step: int) -> Path:
        path = out_dir / f"ckpt_{step:06d}.bin"
        save_model_checkpoint(path, model, step=step, optimizer=opt, extra_meta=extra_meta)
        ckpt_paths.append(path)
        return path

    if start_step == 0:
        save(0)

    last_saved = start_step
    window: list[float] = []
    end_step = cfg.steps if halt_at_step is None else min(cfg.steps, halt_at_step)

    with open(metrics_path, "a", newline="\n") as fh:
        for step in range(start_step + 1, end_step + 1):
            t0 = time.perf_counter()
            xb, yb = task.batch(step, cfg.batch_size)
            model.zero_grad()
            loss = batch_loss(model, xb, yb, training=True)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDivergence(
                    f"non-finite training loss {loss_val} at step {step}; aborting"
                )
            loss.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(named, cfg.grad_clip)
            if not opt.step(sched.lr_at(step)):
                say(f"step {step}: non-finite gradient detected; update skipped")
            window.append((time.perf_counter() - t0) * 1000.0)

            if step % cfg.log_interval == 0:
                ev = evaluate(model, task)
                epoch = step * cfg.batch_size // task.train_examples
                mean_ms = sum(window) / len(window)
                logged_ms = 0.0 if cfg.deterministic else mean_ms
                window.clear()
                fh.write(f"{step},{epoch},{sched.lr_at(step):.10g},{loss_val:.8f},"
                         f"{ev.metric:.8f},{logged_ms:.3f}\n")
                fh.flush()
                say(f"step {step}: loss {loss_val:.4f} val {ev.metric:.4f} ({mean_ms:.1f} ms/step)")
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save(step)
                last_saved = step

    if last_saved != end_step:
        save(end_step)
    final_eval = evaluate(model, task)
    return TrainResult(end_step, final_eval, metrics_path, ckpt_paths)
