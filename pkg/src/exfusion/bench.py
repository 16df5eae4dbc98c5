"""Wall-clock step-time comparison of the FFN variants at one model spec.

Every variant keeps its own model/optimizer; timed rounds interleave the
variants (one full optimization step each per round) so that machine-load
drift lands on all of them equally. Warmup rounds are discarded and the
per-variant median over rounds is reported relative to the dense baseline
(x1.00).
"""

from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass

from .model import VARIANTS, Model
from .optim import AdamW, CosineSchedule, clip_grad_norm
from .tasks import build_task
from .train import batch_loss


@dataclass
class BenchRow:
    variant: str
    mean_ms: float   # median over timed rounds, name kept for the table schema
    ratio: float | None  # vs dense; None when dense was not benched


def run_bench(run, variants=VARIANTS) -> list[BenchRow]:
    task = build_task(run.task)
    cfg = run.train
    warmup = run.bench.warmup_steps
    total = warmup + run.bench.timed_steps
    sched = CosineSchedule(0, total, cfg.base_lr, cfg.min_lr)

    lanes = []
    for variant in variants:
        spec = dataclasses.replace(run.model, variant=variant)
        model = Model(spec, dtype=cfg.dtype)
        named = model.named_parameters()
        opt = AdamW(named, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        lanes.append((variant, model, named, opt, []))

    for step in range(1, total + 1):
        xb, yb = task.batch(step, cfg.batch_size)
        for variant, model, named, opt, times in lanes:
            t0 = time.perf_counter()
            model.zero_grad()
            loss = batch_loss(model, xb, yb, training=True)
            loss.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(named, cfg.grad_clip)
            opt.step(sched.lr_at(step))
            elapsed = (time.perf_counter() - t0) * 1000.0
            if step > warmup:
                times.append(elapsed)

    rows = [BenchRow(variant, statistics.median(times), None)
            for variant, _, _, _, times in lanes]
    dense = next((r for r in rows if r.variant == "dense"), None)
    if dense is not None:
        for r in rows:
            r.ratio = r.mean_ms / dense.mean_ms
    return rows


def format_table(rows: list[BenchRow]) -> str:
    lines = [f"{'variant':<8} {'median_ms':>10} {'vs_dense':>9}"]
    for r in rows:
        ratio = f"x{r.ratio:.2f}" if r.ratio is not None else "-"
        lines.append(f"{r.variant:<8} {r.mean_ms:>10.2f} {ratio:>9}")
    if any(r.variant == "moe" for r in rows):
        lines.append("note: the moe baseline routes per token with no auxiliary "
                     "balancing loss and no capacity limit")
    return "\n".join(lines)
