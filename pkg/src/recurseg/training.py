"""Staged training: bootstraps for each subnet, then the joint loop.

Stages:
  0  preprocessor on foreground and angle targets, frozen afterwards by default
  1  box net against padded ground-truth boxes, fed ground-truth canvases
  2  seg net inside fixed ground-truth attention windows
  3  joint loss over full rollouts, with ground-truth canvas feedback fading
     out on the sampling schedule

Batch members only build forward graphs in worker threads; backward passes and
optimizer updates stay on the calling thread and run in batch order, so a fixed
seed gives the same result for any thread count.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as at
from . import autodiff as ad
from .losses import LossConfig, joint_loss, pad_box, render_box, soft_iou, soft_iou_value
from .metrics import InstanceSet, sbd
from .model import Segmenter, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    """Constants of the ground-truth feedback decay."""

    epoch_offset: int = 10000
    decay_const: float = 2885.0
    step_growth: float = 3.0

    def __post_init__(self):
        if self.decay_const <= 0:
            raise ValueError("decay_const must be positive")
        if self.step_growth < 0:
            raise ValueError("step_growth must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch: int = 8
    lr_decay: float = 0.85
    lr_decay_every: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    stage_epochs: tuple[int, int, int, int] = (2, 2, 2, 6)
    seed: int = 0
    threads: int = 1
    sched_sample: bool = True
    sched_unit: str = "step"
    freeze_preproc: bool = True
    bootstrap_gamma: float = 7.0
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be at least 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if len(self.stage_epochs) != 4 or any(e < 0 for e in self.stage_epochs):
            raise ValueError("stage_epochs must be four non-negative counts")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.sched_unit not in ("step", "epoch"):
            raise ValueError("sched_unit must be 'step' or 'epoch'")


def scheduled_sampling_prob(t: int, epoch: int, cfg: ScheduleConfig) -> float:
    """Probability of feeding ground truth to the canvas at rollout step t.

    Stays at 1 until the training index passes the offset, then decays
    exponentially; later steps keep their ground truth longer.
    """
    if t < 0:
        raise ValueError("step index must be non-negative")
    if epoch < 0:
        raise ValueError("training index must be non-negative")
    growth = 1.0 + math.log1p(cfg.step_growth * t)
    return min(growth * math.exp(-(epoch - cfg.epoch_offset) / cfg.decay_const), 1.0)


def sample_canvas_input(y_prev, gt_masks, theta: float, rng, exclude=()):
    """Pick what the canvas absorbs: ground truth with probability theta.

    The chosen ground-truth mask is the one overlapping the prediction most
    (ties to the lowest index).  A prediction overlapping nothing falls back
    to the largest instance not in `exclude`.  Returns (mask, index), index
    None when the model's own output is kept.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    if not gt_masks or theta <= 0.0 or rng.random() >= theta:
        return y_prev, None
    y = np.asarray(y_prev, dtype=np.float64).reshape(np.asarray(gt_masks[0]).shape)
    overlaps = [soft_iou_value(y, np.asarray(g, dtype=np.float64)) for g in gt_masks]
    j = int(np.argmax(overlaps))
    if overlaps[j] <= 0.0:
        fresh = [i for i in range(len(gt_masks)) if i not in exclude]
        if fresh:
            j = max(fresh, key=lambda i: (int(np.asarray(gt_masks[i]).sum()), -i))
    return np.asarray(gt_masks[j], dtype=np.float64), j


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Step-decayed rate, constant on each window of lr_decay_every steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return cfg.lr * cfg.lr_decay ** (step // cfg.lr_decay_every)


def clip_gradients(store, names, max_norm: float) -> float:
    """Scale gradients so their global norm is at most max_norm; returns the norm."""
    total = 0.0
    for n in names:
        g = store[n].grad
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for n in names:
            store[n].grad *= scale
    return norm


def adam_step(store, step: int, cfg: TrainConfig, names=None) -> bool:
    """One Adam update over `names`; skipped entirely on non-finite gradients."""
    names = list(names) if names is not None else list(store.names())
    for n in names:
        if not np.isfinite(store[n].grad).all():
            log.warning("non-finite gradient in %s at step %d; update skipped", n, step)
            return False
    lr = learning_rate(step, cfg)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = step + 1
    for n in names:
        p = store[n]
        g = p.grad.astype(np.float64)
        m, v = store.moments.get(n, (np.zeros(p.value.shape), np.zeros(p.value.shape)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        store.moments[n] = (m, v)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.value.dtype)
    return True


def _largest_first(scene):
    areas = [int(m.sum()) for m in scene.masks]
    return sorted(range(len(areas)), key=lambda i: (-areas[i], i))


def _gt_canvases(scene, order):
    """Canvas contents before each step when ground truth is replayed in order."""
    h, w = scene.foreground.shape
    canvases = []
    acc = np.zeros((h, w))
    for idx in order:
        canvases.append(acc.copy())
        acc = np.maximum(acc, scene.masks[idx].astype(np.float64))
    return canvases


def preproc_loss(model: Segmenter, scene):
    """Foreground cross-entropy plus angle-bin cross-entropy over foreground."""
    fg_logit, ang_logit = model.preprocess_logits(scene.rgb)
    target = ad.constant(scene.foreground.astype(np.float64)[:, :, None])
    p = ad.clip(ad.sigmoid(fg_logit), 1e-6, 1.0 - 1e-6)
    bce = -ad.mean(target * ad.log(p) + (1.0 - target) * ad.log(1.0 - p))
    n_fg = int(scene.foreground.sum())
    if n_fg == 0:
        return bce, {"fg": float(bce.value), "angle": 0.0}
    onehot = scene.angle_map.astype(np.float64)
    probs = ad.softmax(ang_logit, axis=2)
    picked = ad.sum_(probs * ad.constant(onehot), axis=2)
    mask = ad.constant(scene.foreground.astype(np.float64))
    ce = -(ad.sum_(mask * ad.log(ad.clip(picked, 1e-6, 1.0))) / float(n_fg))
    return bce + ce, {"fg": float(bce.value), "angle": float(ce.value)}


def box_bootstrap_loss(model: Segmenter, scene, loss_cfg: LossConfig):
    """Soft box IoU against padded ground-truth boxes, largest instance first."""
    order = _largest_first(scene)
    if not order:
        return ad.constant(0.0), {"box_iou": 0.0}
    h, w = model.cfg.img_h, model.cfg.img_w
    x = model.input_features(scene.rgb)
    total = ad.constant(0.0)
    for canvas, idx in zip(_gt_canvases(scene, order), order):
        d = ad.concat([ad.constant(canvas[:, :, None]), x], axis=2)
        box, _, _ = model.box_net_step(d)
        denorm = at.denormalize_box(box, h, w)
        fb = at.build_filterbank(denorm, model.geometry, h, w)
        soft = at.box_mask(fb, denorm.gamma, loss_cfg.beta)
        hard = render_box(pad_box(scene.masks[idx], loss_cfg.box_pad_factor), h, w)
        total = total + soft_iou(soft, ad.constant(hard[:, :, None]))
    loss = -(total / float(len(order)))
    return loss, {"box_iou": float(loss.value)}


def gt_window(mask, patch_h: int, patch_w: int, pad_factor: float, gamma: float):
    """Fixed attention window covering a ground-truth instance's padded box."""
    y0, x0, y1, x1 = pad_box(mask, pad_factor)
    dy, dx = y1 - y0, x1 - x0
    return at.DenormalizedBox(
        g_x=ad.constant((x0 + x1) / 2.0),
        g_y=ad.constant((y0 + y1) / 2.0),
        delta_x=ad.constant(dx),
        delta_y=ad.constant(dy),
        sigma_x=ad.constant(max(dx / patch_w, 0.05)),
        sigma_y=ad.constant(max(dy / patch_h, 0.05)),
        gamma=ad.constant(gamma),
    )


def seg_bootstrap_loss(model: Segmenter, scene, loss_cfg: LossConfig, gamma: float):
    """Soft IoU of seg-net output inside ground-truth windows, largest first."""
    order = _largest_first(scene)
    if not order:
        return ad.constant(0.0), {"seg_iou": 0.0}
    cfg = model.cfg
    x = model.input_features(scene.rgb)
    rgb = ad.constant(np.asarray(scene.rgb, dtype=np.float64))
    total = ad.constant(0.0)
    for canvas, idx in zip(_gt_canvases(scene, order), order):
        d = ad.concat([ad.constant(canvas[:, :, None]), x], axis=2)
        box = gt_window(scene.masks[idx], cfg.patch_h, cfg.patch_w, loss_cfg.box_pad_factor, gamma)
        fb = at.build_filterbank(box, model.geometry, cfg.img_h, cfg.img_w)
        patch = at.extract_patch(ad.concat([rgb, d], axis=2), fb)
        y, _ = model.seg_net_forward(patch, fb, box.gamma)
        gt = scene.masks[idx].astype(np.float64)[:, :, None]
        total = total + soft_iou(y, ad.constant(gt))
    loss = -(total / float(len(order)))
    return loss, {"seg_iou": float(loss.value)}


def joint_episode_loss(model: Segmenter, scene, cfg: TrainConfig, sched_index: int, rng):
    """Full rollout under the stochastic canvas switch, scored by the joint loss."""
    gt = [m.astype(np.float64) for m in scene.masks]
    h, w = model.cfg.img_h, model.cfg.img_w
    used = set()

    def source(t, y):
        theta = 1.0
        if cfg.sched_sample:
            theta = scheduled_sampling_prob(t, sched_index, cfg.schedule)
        mask, j = sample_canvas_input(y.value, gt, theta, rng, exclude=used)
        if j is None:
            return y
        used.add(j)
        return ad.constant(mask.reshape(h, w, 1))

    t_steps = len(gt) + 1
    ep = model.run_episode(scene.rgb, mode="train", t_steps=t_steps, canvas_source=source)
    total, parts, _ = joint_loss(ep.masks, ep.denorm_boxes, ep.scores, gt,
                                 cfg.loss, model.geometry, h, w)
    values = {k: float(v.value) for k, v in parts.items()}
    values["theta0"] = scheduled_sampling_prob(0, sched_index, cfg.schedule) if cfg.sched_sample else 1.0
    return total, values


def validate(model: Segmenter, scenes) -> dict:
    """Mean SBD and absolute count error of inference rollouts."""
    if not scenes:
        return {}
    sbd_total, dic_total = 0.0, 0.0
    with ad.no_grad():
        for scene in scenes:
            ep = model.run_episode(scene.rgb, mode="infer")
            masks = [st.mask.value[:, :, 0] for st in ep.steps if st.emitted]
            scores = [float(st.score.value) for st in ep.steps if st.emitted]
            pred = InstanceSet(masks, scores=scores)
            gt = InstanceSet(list(scene.masks))
            sbd_total += sbd(pred, gt)
            dic_total += abs(pred.count - gt.count)
    n = len(scenes)
    return {"val_sbd": sbd_total / n, "val_dic": dic_total / n}


def stage_param_names(model: Segmenter, stage: int, cfg: TrainConfig):
    prefixes = {
        0: ("pre.",),
        1: ("box.",),
        2: ("seg.",),
        3: ("box.", "seg.", "score.") + (() if cfg.freeze_preproc else ("pre.",)),
    }[stage]
    skipped = ()
    if not model.cfg.use_box_net:
        skipped += ("box.",)
    if not model.cfg.use_preproc:
        skipped += ("pre.",)
    return [n for n in model.store.names()
            if n.startswith(prefixes) and not n.startswith(skipped)]


def _stage_enabled(model: Segmenter, stage: int) -> bool:
    if stage == 0:
        return model.cfg.use_preproc
    if stage == 1:
        return model.cfg.use_box_net
    return True


@dataclass
class TrainResult:
    store: object
    records: list
    global_step: int
    sched_step: int
    aborted: bool = False


def train(model: Segmenter, scenes, cfg: TrainConfig, val_scenes=(), out_dir=None,
          log_stream=None, start_step: int = 0, start_sched_step: int = 0) -> TrainResult:
    """Run the four-stage curriculum; returns the updated store and the log.

    A non-finite batch loss aborts training and restores the parameters saved
    after the last completed epoch.  When out_dir is given, a checkpoint and
    state file are written after every stage and at the end.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    out_dir = Path(out_dir) if out_dir is not None else None
    records = []

    def emit(rec):
        records.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec, sort_keys=True) + "\n")
            log_stream.flush()

    def snapshot():
        return {n: p.value.copy() for n, p in model.store.items()}

    def restore(snap):
        for n, v in snap.items():
            model.store[n].value[...] = v

    def save_state(stage):
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.ckpt", model.cfg, model.store)
        state = {"global_step": global_step, "sched_step": sched_step, "stage": stage}
        (out_dir / "state.json").write_text(json.dumps(state, sort_keys=True) + "\n")

    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    global_step = start_step
    sched_step = start_sched_step
    last_good = snapshot()
    aborted = False
    try:
        for stage in range(4):
            if not _stage_enabled(model, stage) or cfg.stage_epochs[stage] == 0:
                continue
            names = stage_param_names(model, stage, cfg)
            for epoch in range(cfg.stage_epochs[stage]):
                shuffle = np.random.default_rng([cfg.seed, stage, epoch])
                order = shuffle.permutation(len(scenes))
                for lo in range(0, len(order), cfg.batch):
                    chunk = order[lo:lo + cfg.batch]
                    sched_index = sched_step if cfg.sched_unit == "step" else epoch

                    def sample_loss(scene_idx):
                        scene = scenes[scene_idx]
                        if stage == 0:
                            return preproc_loss(model, scene)
                        if stage == 1:
                            return box_bootstrap_loss(model, scene, cfg.loss)
                        if stage == 2:
                            return seg_bootstrap_loss(model, scene, cfg.loss, cfg.bootstrap_gamma)
                        rng = np.random.default_rng([cfg.seed, 0x5C, epoch, int(scene_idx)])
                        return joint_episode_loss(model, scene, cfg, sched_index, rng)

                    try:
                        if executor is not None:
                            results = list(executor.map(sample_loss, chunk))
                        else:
                            results = [sample_loss(i) for i in chunk]
                        batch_value = float(np.mean([float(r.value) for r, _ in results]))
                    except (ad.NonFiniteError, ValueError) as exc:
                        # non-finite activations can surface as a matcher error
                        # before the loss value itself turns NaN
                        if "non-finite" not in str(exc) and not isinstance(exc, ad.NonFiniteError):
                            raise
                        batch_value = float("nan")
                    if not math.isfinite(batch_value):
                        restore(last_good)
                        emit({"event": "diverged", "stage": stage, "epoch": epoch,
                              "step": global_step, "loss": None})
                        aborted = True
                        save_state(stage)
                        return TrainResult(model.store, records, global_step, sched_step, aborted=True)

                    model.store.zero_grad()
                    for root, _ in results:
                        ad.backward(root)
                    inv = 1.0 / len(results)
                    for n in names:
                        p = model.store[n]
                        if p.grad is None:
                            p.grad = np.zeros_like(p.value)
                        else:
                            p.grad = p.grad * inv
                    grad_norm = clip_gradients(model.store, names, cfg.clip_norm)
                    adam_step(model.store, global_step, cfg, names)

                    rec = {"step": global_step, "stage": stage, "epoch": epoch,
                           "loss": batch_value, "lr": learning_rate(global_step, cfg),
                           "grad_norm": grad_norm}
                    for _, parts in results[-1:]:
                        rec.update(parts)
                    emit(rec)
                    global_step += 1
                    if stage == 3:
                        sched_step += 1

                last_good = snapshot()
                if val_scenes and (stage == 3 or epoch == cfg.stage_epochs[stage] - 1):
                    rec = {"event": "validation", "stage": stage, "epoch": epoch,
                           "step": global_step}
                    rec.update(validate(model, val_scenes))
                    emit(rec)
            save_state(stage)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    save_state(3)
    return TrainResult(model.store, records, global_step, sched_step, aborted=aborted)
