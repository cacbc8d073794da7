"""Training loop: decoupled-weight-decay adaptive moments, per-layer set
loss, stepped learning-rate schedule, epoch checkpoints, CSV loss log.

Everything is deterministic given (config, dataset, seed): the scene
order for epoch e comes from a generator seeded with (seed, e), and the
optimizer state lives inside checkpoints, so a resumed run reproduces
the uninterrupted one bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .head import Detector
from .loss import set_loss
from .synth import read_manifest, read_scene


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name in sorted(params):
            p = params[name].data
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            params[name] = ad.parameter(p - lr * (update + self.weight_decay * p))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients down to a shared global norm cap; returns the
    pre-clip norm. Counters occasional loss spikes when the bipartite
    matching reshuffles."""
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float((g * g).sum())
    total = np.sqrt(total)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return total


def schedule_lr(step: int, cfg: RunConfig) -> float:
    lr = cfg.learning_rate
    for frac in cfg.milestones:
        if step >= int(frac * cfg.steps):
            lr *= cfg.decay_factor
    return lr


def scene_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log_path: str
    steps: int
    first_loss: float
    final_loss: float


def _load_scenes(cfg: RunConfig):
    manifest = read_manifest(cfg.dataset)
    if not manifest.get("train"):
        raise FileNotFoundError(f"no train scenes listed in {cfg.dataset}")
    scenes = [read_scene(p) for p in manifest["train"]]
    for s in scenes:
        if tuple(map(tuple, s.spec.bounds)) != tuple(map(tuple, cfg.bounds)):
            raise ValueError("scene bounds differ from run config bounds")
        if s.spec.num_classes > cfg.num_classes:
            raise ValueError("dataset has more classes than the model")
    return scenes


def optimizer_state_arrays(opt: AdamW, step: int) -> dict:
    out = {"train.step": np.array(float(step)), "opt.t": np.array(float(opt.t))}
    for name in sorted(opt.m):
        out[f"opt.m.{name}"] = opt.m[name]
        out[f"opt.v.{name}"] = opt.v[name]
    return out


def model_arrays_from_checkpoint(arrays: dict) -> dict:
    return {
        k: v for k, v in arrays.items() if not k.startswith(("opt.", "train."))
    }


def load_detector(path: str, cfg: RunConfig) -> Detector:
    """Rebuild a Detector from a checkpoint, enforcing the model hash."""
    arrays, stored_hash = load_checkpoint(path)
    if stored_hash and stored_hash != cfg.model_hash():
        raise ValueError(
            f"checkpoint {path} was trained with a different head configuration"
        )
    det = Detector.create(cfg.head_config(), seed=cfg.seed)
    model = model_arrays_from_checkpoint(arrays)
    missing = set(det.params) - set(model)
    extra = set(model) - set(det.params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, value in model.items():
        if det.params[name].data.shape != value.shape:
            raise ValueError(f"checkpoint {path}: shape mismatch for {name}")
        det.params[name] = ad.parameter(value)
    return det


def train_run(
    cfg: RunConfig,
    resume: str | None = None,
    progress=None,
    scenes=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or resume) training; returns paths of the final checkpoint and
    loss log. Aborts with TrainingDiverged on a non-finite loss.

    ``stop_after`` interrupts the run after that many total steps (the
    learning-rate schedule still follows ``cfg.steps``); resuming from the
    written checkpoint with the same config reproduces the uninterrupted
    run bit for bit."""
    if scenes is None:
        scenes = _load_scenes(cfg)
    n = len(scenes)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_every = cfg.checkpoint_every or n

    det = Detector.create(cfg.head_config(), seed=cfg.seed)
    opt = AdamW(weight_decay=cfg.weight_decay)
    loss_cfg = cfg.loss_config()
    start_step = 0
    if resume is not None:
        arrays, stored_hash = load_checkpoint(resume)
        if stored_hash and stored_hash != cfg.model_hash():
            raise ValueError("resume checkpoint has a different head configuration")
        for name, value in model_arrays_from_checkpoint(arrays).items():
            det.params[name] = ad.parameter(value)
        opt.t = int(arrays["opt.t"])
        start_step = int(arrays["train.step"])
        for key, value in arrays.items():
            if key.startswith("opt.m."):
                opt.m[key[6:]] = value.copy()
            elif key.startswith("opt.v."):
                opt.v[key[6:]] = value.copy()

    log_path = os.path.join(cfg.out_dir, "loss_log.csv")
    mode = "a" if (resume is not None and os.path.exists(log_path)) else "w"
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.bin")
    first_loss = final_loss = float("nan")
    with open(log_path, mode, encoding="ascii") as log:
        if mode == "w":
            log.write("step,lr,loss_total,loss_cls,loss_box\n")
        last_step = cfg.steps if stop_after is None else min(stop_after, cfg.steps)
        for step in range(start_step, last_step):
            epoch = step // n
            scene = scenes[scene_order(cfg.seed, epoch, n)[step % n]]
            images = scene.images.astype(np.float64) / 255.0
            lr = schedule_lr(step, cfg)
            with ad.record() as tape:
                outputs = det.forward(images, scene.rig)
                breakdown, _ = set_loss(outputs, scene.boxes, scene.labels, loss_cfg)
            total = float(breakdown.total.data)
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (scene seed {scene.seed}); "
                    f"per-layer terms: {breakdown.per_layer}"
                )
            grads_map = tape.backward(breakdown.total)
            grads = {name: grads_map.get(t) for name, t in det.params.items()}
            clip_gradients(grads, cfg.grad_clip)
            opt.step(det.params, grads, lr)
            if step == start_step:
                first_loss = total
            final_loss = total
            log.write(
                f"{step},{lr:.10g},{total:.10g},{breakdown.cls_part:.10g},{breakdown.box_part:.10g}\n"
            )
            if progress is not None and (step % 50 == 0 or step == cfg.steps - 1):
                progress(step, total)
            if (step + 1) % ckpt_every == 0 or step + 1 == last_step:
                state = dict(det.params)
                state.update(optimizer_state_arrays(opt, step + 1))
                save_checkpoint(ckpt_path, state, cfg.model_hash())
    return TrainResult(
        checkpoint_path=ckpt_path,
        loss_log_path=log_path,
        steps=cfg.steps,
        first_loss=first_loss,
        final_loss=final_loss,
    )
