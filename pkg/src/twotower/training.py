"""Training schedules over synthetic pairs, evaluation, and experiments.

Three schedules, each phase running cfg.train.steps of its own:

  contrastive-scratch   one contrastive phase over both towers
  pretrain-then-text    supervised image-tower pretraining (labels allowed
                        here, and only here), then contrastive training of
                        the text tower with the image tower frozen
  hybrid-finetune       the above plus a joint contrastive phase at a tenth
                        of the peak learning rate

The contrastive phases run the microbatched engine and stream each packet
straight into the optimizer's moment slots; there is never a full-size
gradient accumulator. Every random draw comes from a named Rng stream, so
identical configs produce bitwise-identical metrics and checkpoints.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import SyntheticPairSet, gen_data, mean_pool
from .encoders import ClassHead, EncoderNet, classify_loss_grad, save_all
from .errors import ConfigError, DivergenceError, ShapeError
from .ledger import MemoryLedger
from .microbatch import BatchPlan, microbatch_gradients, monolithic_oracle
from .optim import (adafactorw_step, fused_v1_update, fused_v2_update,
                    make_slots)

EVAL_SPLIT_STREAM = 1  # fresh_pairs stream reserved for the eval split


def lr_at(step: int, steps: int, warmup: int, lr_peak: float, lr_min: float,
          decay: str) -> float:
    """Linear warmup to lr_peak, then cosine or linear decay to lr_min."""
    if warmup > 0 and step < warmup:
        return lr_peak * (step + 1) / warmup
    if steps <= warmup:
        return lr_peak
    t = (step - warmup) / (steps - warmup)
    if decay == "cosine":
        return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + math.cos(math.pi * t))
    return lr_peak + (lr_min - lr_peak) * t


def build_towers(model, input_dim: int, rng: nm.Rng):
    dims = [input_dim] + [model.width] * (model.depth - 1) + [model.embed_dim]
    f = EncoderNet.build(rng.split("img"), dims, name="img")
    g = EncoderNet.build(rng.split("txt"), dims, name="txt")
    return f, g


def zero_shot_eval(f: EncoderNet, g: EncoderNet, images: np.ndarray,
                   labels: np.ndarray, prompt_texts: np.ndarray) -> float:
    """Fraction of rows whose nearest prompt (by similarity) is their class.

    prompt_texts holds one pooled prompt vector per class, row j standing
    for class j. Ties go to the lowest class index.
    """
    labels = np.asarray(labels)
    c = prompt_texts.shape[0]
    if labels.size and labels.max() >= c:
        raise ConfigError(
            f"labels reach class {labels.max()} but only {c} prompts given"
        )
    ex, _ = f.forward(images, project=True)
    ep, _ = g.forward(prompt_texts, project=True)
    sims = nm.matmul(ex, ep.T)
    pred = np.argmax(sims, axis=1)
    return float(np.mean(pred == labels))


@dataclass
class TrainResult:
    config: TrainConfig
    metrics: list[dict] = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    final_accuracy: float = 0.0
    metrics_path: str | None = None
    checkpoint_path: str | None = None


def write_metrics(path: str, rows: list[dict]):
    """CSV with header step,loss,eval_accuracy,peak_elements.

    eval_accuracy is empty on steps without an evaluation. Floats are
    written with repr, so identical runs produce identical bytes.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "eval_accuracy", "peak_elements"])
        for row in rows:
            acc = row["eval_accuracy"]
            writer.writerow([
                row["step"],
                repr(float(row["loss"])),
                "" if acc is None else repr(float(acc)),
                row["peak_elements"],
            ])


class _Trainer:
    def __init__(self, cfg: TrainConfig, data: SyntheticPairSet,
                 eval_every: int | None, eval_size: int):
        tc = cfg.train
        if tc.batch_size > data.size:
            raise ConfigError(
                f"batch_size {tc.batch_size} exceeds dataset size {data.size}"
            )
        self.cfg = cfg
        self.data = data
        self.rng = nm.Rng(tc.seed)
        self.f, self.g = build_towers(cfg.model, data.input_dim,
                                      self.rng.split("init"))
        self.head: ClassHead | None = None
        self.images = data.images
        self.texts = data.pooled_texts()
        self.labels = data.labels
        ev_images, ev_tokens, ev_labels = data.fresh_pairs(
            eval_size, EVAL_SPLIT_STREAM)
        self.eval_images = ev_images
        self.eval_labels = ev_labels
        del ev_tokens  # zero-shot scoring goes through prompts, not pair texts
        self.prompts = data.pooled_prompts()
        self.eval_every = eval_every
        self.metrics: list[dict] = []
        self.global_step = 0

    def _eval_now(self) -> float:
        return zero_shot_eval(self.f, self.g, self.eval_images,
                              self.eval_labels, self.prompts)

    def _record(self, loss: float, peak: int, step_in_phase: int,
                phase_steps: int):
        cadence = self.eval_every or max(1, phase_steps // 8)
        due = (step_in_phase + 1) % cadence == 0 or step_in_phase == phase_steps - 1
        self.metrics.append({
            "step": self.global_step,
            "loss": loss,
            "eval_accuracy": self._eval_now() if due else None,
            "peak_elements": peak,
        })
        self.global_step += 1

    def _guard(self, loss: float, initial: float | None, phase: str) -> float:
        if not np.isfinite(loss):
            raise DivergenceError(f"{phase}: loss became non-finite")
        if initial is None:
            return loss
        if loss > 10.0 * max(abs(initial), 1e-12):
            raise DivergenceError(
                f"{phase}: loss {loss:.4g} exceeded 10x its initial "
                f"{initial:.4g}; lower the learning rate"
            )
        return initial

    def _batch_indices(self, phase: str, step: int) -> np.ndarray:
        return self.rng.split("batch", phase, step).choice(
            self.data.size, self.cfg.train.batch_size, replace=False)

    def pretrain_phase(self, phase: str = "pretrain"):
        """Supervised classification on the image tower (labels allowed)."""
        tc = self.cfg.train
        if self.cfg.model.num_classes != self.data.num_classes:
            raise ConfigError(
                f"model.num_classes {self.cfg.model.num_classes} != data "
                f"classes {self.data.num_classes}"
            )
        if self.head is None:
            self.head = ClassHead.build(self.rng.split("init", "head"),
                                        self.data.num_classes,
                                        self.cfg.model.embed_dim)
        slots_f = make_slots(self.f.param_arrays(), tc.beta1, tc.beta2,
                             tc.precision_emulation)
        slots_h = make_slots(self.head.param_arrays(), tc.beta1, tc.beta2,
                             tc.precision_emulation)
        initial = None
        for s in range(tc.steps):
            idx = self._batch_indices(phase, s)
            led = MemoryLedger()
            emb, tape = self.f.forward(self.images[idx], policy=save_all(self.f),
                                       project=True, ledger=led)
            loss, grads = classify_loss_grad(self.head, emb, self.labels[idx])
            demb = grads.pop("embeddings")
            led.alloc("grad", demb.size)
            gf = self.f.backward(tape, demb, ledger=led)
            led.free("act", emb.size)
            led.free("grad", demb.size)
            for name, c in grads.items():
                fused_v1_update(slots_h[name], c, 1, 1)
                fused_v2_update(slots_h[name], c, None, 1, 1)
            for name, c in gf.items():
                fused_v1_update(slots_f[name], c, 1, 1)
                fused_v2_update(slots_f[name], c, None, 1, 1)
            led.free("grad", sum(a.size for a in gf.values()))
            # pretraining decays linearly regardless of the contrastive decay
            lr = lr_at(s, tc.steps, tc.warmup, tc.lr_peak, tc.lr_min, "linear")
            adafactorw_step(self.f.param_arrays(), slots_f, lr, tc.weight_decay)
            adafactorw_step(self.head.param_arrays(), slots_h, lr,
                            tc.weight_decay)
            initial = self._guard(loss, initial, phase)
            self._record(loss, led.total_peak, s, tc.steps)

    def contrastive_phase(self, towers=("img", "txt"), lr_scale: float = 1.0,
                          phase: str = "contrastive"):
        tc = self.cfg.train
        plan = BatchPlan(tc.batch_size, tc.microbatch_img, tc.microbatch_txt,
                         tc.replicas)
        nets = {"img": self.f, "txt": self.g}
        slots = {t: make_slots(nets[t].param_arrays(), tc.beta1, tc.beta2,
                               tc.precision_emulation)
                 for t in towers}
        initial = None
        for s in range(tc.steps):
            idx = self._batch_indices(phase, s)
            led = MemoryLedger()
            loss, packets = microbatch_gradients(
                self.f, self.g, self.images[idx], self.texts[idx], plan,
                tc.temperature, towers=towers,
                with_variance=tc.variance_correction, ledger=led)
            for packet in packets:
                tower_slots = slots[packet.tower]
                for name, c in packet.grads.items():
                    var = None if packet.var is None else packet.var[name]
                    fused_v1_update(tower_slots[name], c, packet.index,
                                    packet.count)
                    fused_v2_update(tower_slots[name], c, var, packet.index,
                                    packet.count)
                packet.release(led)
            lr = lr_scale * lr_at(s, tc.steps, tc.warmup, tc.lr_peak,
                                  tc.lr_min, tc.decay)
            for t in towers:
                adafactorw_step(nets[t].param_arrays(), slots[t], lr,
                                tc.weight_decay)
            initial = self._guard(loss, initial, phase)
            self._record(loss, led.total_peak, s, tc.steps)

    def all_weights(self) -> dict:
        out = {}
        out.update(self.f.param_arrays())
        out.update(self.g.param_arrays())
        if self.head is not None:
            out.update(self.head.param_arrays())
        return out


def train(cfg: TrainConfig, data: SyntheticPairSet, *,
          eval_every: int | None = None, eval_size: int = 256,
          out_dir: str | None = None) -> TrainResult:
    """Run the configured schedule; optionally write metrics + checkpoint."""
    trainer = _Trainer(cfg, data, eval_every, eval_size)
    schedule = cfg.train.schedule
    if schedule == "contrastive-scratch":
        trainer.contrastive_phase()
    elif schedule == "pretrain-then-text":
        trainer.pretrain_phase()
        trainer.contrastive_phase(towers=("txt",), phase="text-only")
    else:  # hybrid-finetune
        trainer.pretrain_phase()
        trainer.contrastive_phase(towers=("txt",), phase="text-only")
        trainer.contrastive_phase(towers=("img", "txt"), lr_scale=0.1,
                                  phase="finetune")

    result = TrainResult(
        config=cfg,
        metrics=trainer.metrics,
        weights=trainer.all_weights(),
        final_accuracy=trainer._eval_now(),
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.metrics_path = os.path.join(out_dir, "metrics.csv")
        write_metrics(result.metrics_path, result.metrics)
        result.checkpoint_path = os.path.join(out_dir, "final.ckpt")
        save_checkpoint(result.checkpoint_path, result.weights)
    return result


def fit_microbatch(batch: int, preferred: int) -> int:
    """Largest divisor of batch that is <= preferred."""
    if batch < 1 or preferred < 1:
        raise ConfigError("batch and preferred microbatch must be >= 1")
    for m in range(min(batch, preferred), 0, -1):
        if batch % m == 0:
            return m
    return 1


def scale_batch_experiment(cfg: TrainConfig, batches, budget: int,
                           seeds=(0,), eval_size: int = 256) -> list[dict]:
    """One run per (batch, seed) at a fixed examples-seen budget.

    steps = budget / batch must divide exactly; microbatch sizes are fitted
    down to divisors. The dataset is regenerated from cfg.data for every
    cell, so cells differ only in batch size and training seed.
    """
    rows = []
    for b in batches:
        if budget % b:
            raise ConfigError(f"budget {budget} is not divisible by batch {b}")
        steps = budget // b
        for seed in seeds:
            cell = cfg.with_train(
                batch_size=b,
                steps=steps,
                microbatch_img=fit_microbatch(b, cfg.train.microbatch_img),
                microbatch_txt=fit_microbatch(b, cfg.train.microbatch_txt),
                warmup=min(cfg.train.warmup, steps // 4),
                seed=seed,
            )
            data = gen_data(cfg.data.classes, cfg.data.size,
                            cfg.data.input_dim, cfg.data.noise, cfg.data.seed)
            result = train(cell, data, eval_size=eval_size)
            rows.append({
                "batch": b,
                "steps": steps,
                "seed": seed,
                "examples": b * steps,
                "accuracy": result.final_accuracy,
            })
    return rows


def write_scale_rows(path: str, rows: list[dict]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "steps", "seed", "examples", "accuracy"])
        for row in rows:
            writer.writerow([row["batch"], row["steps"], row["seed"],
                             row["examples"], repr(float(row["accuracy"]))])


def verify_gradients(depth: int = 2, width: int = 16, embed_dim: int = 8,
                     batch: int = 16, m_img: int = 4, m_txt: int = 8,
                     replicas: int = 1, seed: int = 0,
                     tolerance: float = 1e-10) -> dict:
    """Engine-vs-oracle check on random towers; the CLI surface for it.

    Returns per-tensor relative L2 errors between the mean of the engine's
    microbatch packets and a whole-batch reference backprop, plus the worst
    error and a pass flag at `tolerance`.
    """
    rng = nm.Rng(seed)
    dims = [width] + [width] * (depth - 1) + [embed_dim]
    f = EncoderNet.build(rng.split("f"), dims, name="img")
    g = EncoderNet.build(rng.split("g"), dims, name="txt")
    images = rng.split("x").normal((batch, width))
    texts = rng.split("y").normal((batch, width))
    plan = BatchPlan(batch, m_img, m_txt, replicas)
    tau = 0.1

    loss_ref, oracle_f, oracle_g = monolithic_oracle(f, g, images, texts, tau)
    loss, packets = microbatch_gradients(f, g, images, texts, plan, tau)
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for packet in packets:
        for name, arr in packet.grads.items():
            if name in sums:
                sums[name] = sums[name] + arr
            else:
                sums[name] = arr.copy()
            counts[name] = packet.count
    errors = {}
    for name, total in sums.items():
        mean = total / counts[name]
        ref = oracle_f[name] if name in oracle_f else oracle_g[name]
        denom = max(float(np.sqrt(np.sum(ref * ref))), 1e-30)
        errors[name] = float(np.sqrt(np.sum((mean - ref) ** 2))) / denom
    worst = max(errors.values())
    return {
        "loss_engine": loss,
        "loss_oracle": loss_ref,
        "errors": errors,
        "worst": worst,
        "tolerance": tolerance,
        "passed": bool(worst <= tolerance
                       and abs(loss - loss_ref) <= tolerance * max(1.0, abs(loss_ref))),
    }
