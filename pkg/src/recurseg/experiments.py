"""Desk-scale experiment protocols: proxy benchmark and glimpse ablation.

Both protocols train on generated occluded-shape scenes, so they run on a
laptop in minutes rather than needing a real segmentation corpus. The proxy
run trains the full pipeline once and scores a held-out split; the ablation
repeats a shorter run over glimpse counts and seeds to expose the refinement
trend. Data seeds are fixed independently of the model seed so every run in
a comparison sees identical scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import autodiff as ad
from .data import SceneSpec, generate_dataset
from .metrics import InstanceSet, MetricReport, evaluate_dataset
from .model import ModelConfig, Segmenter
from .training import ScheduleConfig, TrainConfig, TrainResult, train

# Pass thresholds for the proxy benchmark, pinned from the first complete run.
PROXY_SBD_MIN = 0.75
PROXY_DIC_MAX = 0.5

# The refinement trend must be non-decreasing in glimpse count up to this
# much seed noise on seed-averaged MUCov.
MUCOV_GAP_TOLERANCE = -0.02


@dataclass(frozen=True)
class ProxyConfig:
    train_count: int = 500
    val_count: int = 100
    img_h: int = 64
    img_w: int = 64
    n_min: int = 1
    n_max: int = 5
    glimpses: int = 5
    batch: int = 8
    lr: float = 0.001
    stage_epochs: tuple = (4, 4, 4, 16)
    sched_offset: int = 300
    sched_decay: float = 250.0
    sched_growth: float = 3.0
    threads: int = 4
    seed: int = 0
    data_seed: int = 2026

    def __post_init__(self):
        if self.train_count < 1 or self.val_count < 1:
            raise ValueError("both splits must be nonempty")


@dataclass(frozen=True)
class AblationConfig:
    glimpse_settings: tuple = (1, 3, 5)
    seeds: tuple = (0, 1, 2)
    stage_epochs: tuple = (2, 2, 2, 8)


@dataclass
class ProxyOutcome:
    report: MetricReport
    train_result: TrainResult
    model: Segmenter

    @property
    def passed(self) -> bool:
        return self.report.sbd >= PROXY_SBD_MIN and self.report.dic_abs <= PROXY_DIC_MAX


@dataclass
class AblationOutcome:
    reports: dict
    glimpse_settings: tuple
    seeds: tuple

    def mucov_by_glimpses(self) -> dict:
        return {g: [self.reports[(g, s)].mucov for s in self.seeds]
                for g in self.glimpse_settings}

    def mean_mucov(self) -> dict:
        return {g: sum(vals) / len(vals) for g, vals in self.mucov_by_glimpses().items()}

    def trend_gaps(self) -> list:
        """MUCov differences between consecutive glimpse settings, ascending."""
        means = self.mean_mucov()
        ordered = sorted(self.glimpse_settings)
        return [means[b] - means[a] for a, b in zip(ordered, ordered[1:])]

    @property
    def passed(self) -> bool:
        return all(gap >= MUCOV_GAP_TOLERANCE for gap in self.trend_gaps())


def proxy_scenes(cfg: ProxyConfig):
    """Train and held-out splits from disjoint generator seeds."""
    base = dict(img_h=cfg.img_h, img_w=cfg.img_w, n_min=cfg.n_min, n_max=cfg.n_max)
    train_split = generate_dataset(SceneSpec(seed=cfg.data_seed, **base), cfg.train_count)
    val_split = generate_dataset(SceneSpec(seed=cfg.data_seed + 1, **base), cfg.val_count)
    return train_split, val_split


def proxy_model_config(cfg: ProxyConfig) -> ModelConfig:
    return ModelConfig(img_h=cfg.img_h, img_w=cfg.img_w,
                       glimpse_count=cfg.glimpses, max_steps=cfg.n_max + 3)


def proxy_train_config(cfg: ProxyConfig) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr, batch=cfg.batch, stage_epochs=cfg.stage_epochs,
        seed=cfg.seed, threads=cfg.threads,
        schedule=ScheduleConfig(epoch_offset=cfg.sched_offset,
                                decay_const=cfg.sched_decay,
                                step_growth=cfg.sched_growth),
    )


def predict_instance_sets(model: Segmenter, scenes) -> list:
    """Run inference and keep only the emitted masks with their scores."""
    preds = []
    with ad.no_grad():
        for scene in scenes:
            ep = model.run_episode(scene.rgb, mode="infer")
            masks = [st.mask.value[:, :, 0] for st in ep.steps if st.emitted]
            scores = [float(st.score.value) for st in ep.steps if st.emitted]
            preds.append(InstanceSet(masks, scores=scores))
    return preds


def run_proxy(cfg: ProxyConfig = ProxyConfig(), out_dir=None, log_stream=None) -> ProxyOutcome:
    train_split, val_split = proxy_scenes(cfg)
    model = Segmenter(proxy_model_config(cfg), seed=cfg.seed)
    result = train(model, train_split, proxy_train_config(cfg),
                   val_scenes=val_split, out_dir=out_dir, log_stream=log_stream)
    preds = predict_instance_sets(model, val_split)
    gts = [InstanceSet(list(s.masks)) for s in val_split]
    return ProxyOutcome(report=evaluate_dataset(preds, gts), train_result=result, model=model)


def run_ablation(cfg: ProxyConfig = ProxyConfig(), ab: AblationConfig = AblationConfig(),
                 out_dir=None, progress=None) -> AblationOutcome:
    """Train one shortened proxy per (glimpse count, seed) on identical data."""
    reports = {}
    for glimpses in ab.glimpse_settings:
        for seed in ab.seeds:
            run_cfg = replace(cfg, glimpses=glimpses, seed=seed, stage_epochs=ab.stage_epochs)
            run_dir = None if out_dir is None else out_dir / f"g{glimpses}_s{seed}"
            outcome = run_proxy(run_cfg, out_dir=run_dir)
            reports[(glimpses, seed)] = outcome.report
            if progress is not None:
                progress(glimpses, seed, outcome.report)
    return AblationOutcome(reports, ab.glimpse_settings, ab.seeds)
