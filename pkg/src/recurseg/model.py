"""Recurrent instance segmenter.

One object per step: a box network with glimpse attention proposes a window,
a segmentation network labels the window's pixels, a scoring network says
whether the step found anything. A parameter-free canvas keeps the pixelwise
max of everything segmented so far and is fed back as input, which is the
only memory between steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import attention as at
from . import autodiff as ad
from .autodiff import LstmState, ShapeError, Tensor
from .params import ParamStore

CHECKPOINT_MAGIC = "recurseg-checkpoint 1"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    img_h: int = 64
    img_w: int = 64
    patch_h: int = 16
    patch_w: int = 16
    glimpse_count: int = 5
    lstm_dim: int = 64
    preproc_channels: tuple = (12, 24)
    box_channels: tuple = (16, 24, 32)
    seg_channels: tuple = (16, 32)
    max_steps: int = 8
    score_threshold: float = 0.5
    beta: float = 5.0
    use_preproc: bool = True
    use_angles: bool = True
    use_box_net: bool = True

    def __post_init__(self):
        if self.glimpse_count < 1:
            raise ValueError("glimpse_count must be at least 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        for dim, chans, what in (
            (self.img_h, self.box_channels, "box_channels vs img_h"),
            (self.img_w, self.box_channels, "box_channels vs img_w"),
            (self.img_h, self.preproc_channels, "preproc_channels vs img_h"),
            (self.patch_h, self.seg_channels, "seg_channels vs patch_h"),
            (self.patch_w, self.seg_channels, "seg_channels vs patch_w"),
        ):
            if dim % (2 ** len(chans)) != 0:
                raise ValueError(f"{what}: {dim} not divisible by 2^{len(chans)}")
        if not self.preproc_channels or not self.box_channels or not self.seg_channels:
            raise ValueError("channel plans must be nonempty")

    @property
    def feature_h(self) -> int:
        return self.img_h >> len(self.box_channels)

    @property
    def feature_w(self) -> int:
        return self.img_w >> len(self.box_channels)

    @property
    def feature_dim(self) -> int:
        return self.box_channels[-1]

    @property
    def x_channels(self) -> int:
        if not self.use_preproc:
            return 3
        return 9 if self.use_angles else 1

    @property
    def d_channels(self) -> int:
        return 1 + self.x_channels

    @property
    def patch_channels(self) -> int:
        return 3 + self.d_channels


@dataclass
class StepOutput:
    mask: Tensor
    box: at.BoxParams
    denorm_box: at.DenormalizedBox
    soft_box: Tensor
    score: Tensor
    v_feature: Tensor
    z_end: LstmState
    alphas: list
    emitted: bool = True


@dataclass
class EpisodeState:
    x: Tensor
    canvases: list
    steps: list = field(default_factory=list)

    @property
    def canvas(self) -> Tensor:
        return self.canvases[-1]

    @property
    def masks(self):
        return [s.mask for s in self.steps]

    @property
    def boxes(self):
        return [s.box for s in self.steps]

    @property
    def denorm_boxes(self):
        return [s.denorm_box for s in self.steps]

    @property
    def soft_boxes(self):
        return [s.soft_box for s in self.steps]

    @property
    def scores(self):
        return [s.score for s in self.steps]

    @property
    def emitted_masks(self):
        return [s.mask for s in self.steps if s.emitted]


def canvas_update(c_prev, y_prev) -> Tensor:
    """Pixelwise max; the canvas only ever grows."""
    return ad.maximum(c_prev, y_prev)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _param_specs(cfg: ModelConfig):
    """Every parameter's name, shape, and init recipe, in a fixed order."""
    specs = []

    def conv(name, kh, kw, cin, cout, feeds_relu=True):
        specs.append((f"{name}.w", (kh, kw, cin, cout), ("conv", kh * kw * cin)))
        specs.append((f"{name}.b", (cout,), ("relu_bias" if feeds_relu else "zeros", None)))

    def dense(name, din, dout, feeds_relu=True):
        specs.append((f"{name}.w", (din, dout), ("dense", din)))
        specs.append((f"{name}.b", (dout,), ("relu_bias" if feeds_relu else "zeros", None)))

    pc = cfg.preproc_channels
    prev = 3
    for i, c in enumerate(pc):
        conv(f"pre.enc{i}", 3, 3, prev, c)
        prev = c
    conv("pre.mid", 3, 3, pc[-1], pc[-1])
    for i in reversed(range(len(pc))):
        conv(f"pre.dec{i}", 3, 3, pc[i], pc[i - 1] if i > 0 else pc[0])
    conv("pre.fg", 1, 1, pc[0], 1, feeds_relu=False)
    conv("pre.ang", 1, 1, pc[0], 8, feeds_relu=False)

    bc = cfg.box_channels
    prev = cfg.d_channels
    for i, c in enumerate(bc):
        conv(f"box.enc{i}", 3, 3, prev, c)
        prev = c
    h = cfg.lstm_dim
    specs.append(("box.lstm.wx", (cfg.feature_dim, 4 * h), ("dense", cfg.feature_dim)))
    specs.append(("box.lstm.wh", (h, 4 * h), ("dense", h)))
    specs.append(("box.lstm.b", (4 * h,), ("lstm_bias", None)))
    dense("box.glimpse0", h, h)
    dense("box.glimpse1", h, cfg.feature_h * cfg.feature_w, feeds_relu=False)
    specs.append(("box.head.w", (h, 7), ("zeros", None)))
    specs.append(("box.head.b", (7,), ("box_bias", None)))

    sc = cfg.seg_channels
    prev = cfg.patch_channels
    for i, c in enumerate(sc):
        conv(f"seg.enc{i}", 3, 3, prev, c)
        prev = c
    for i in reversed(range(len(sc))):
        conv(f"seg.dec{i}", 3, 3, sc[i], sc[i - 1] if i > 0 else sc[0])
    conv("seg.head", 1, 1, sc[0], 1, feeds_relu=False)

    specs.append(("score.wz", (cfg.lstm_dim,), ("dense", cfg.lstm_dim)))
    specs.append(("score.wv", (cfg.seg_channels[-1],), ("dense", cfg.seg_channels[-1])))
    specs.append(("score.b", (), ("zeros", None)))
    return specs


def _init_value(rng, shape, recipe, cfg: ModelConfig):
    kind, fan = recipe
    if kind == "conv" or kind == "dense":
        return _he(rng, shape, fan)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "relu_bias":
        # small positive start keeps narrow layers off the dead-relu manifold
        return np.full(shape, 0.01)
    if kind == "lstm_bias":
        b = np.zeros(shape)
        h = shape[0] // 4
        b[h:2 * h] = 1.0  # open forget gates at the start
        return b
    if kind == "box_bias":
        # start with a full-image box: center, delta = image size,
        # sigma matching the filter spacing, mild gamma
        b = np.zeros(7)
        b[4] = math.log(cfg.img_h / cfg.patch_h)
        b[5] = math.log(cfg.img_w / cfg.patch_w)
        b[6] = 1.0
        return b
    raise AssertionError(f"unknown init recipe {kind}")


def build_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng([seed, 0x5E6])
    store = ParamStore()
    for name, shape, recipe in _param_specs(cfg):
        store.add(name, _init_value(rng, shape, recipe, cfg))
    return store


class Segmenter:
    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        if store is None:
            store = build_params(cfg, seed)
        else:
            self._validate_store(cfg, store)
        self.store = store
        self.geometry = at.PatchGeometry(cfg.patch_h, cfg.patch_w)

    @staticmethod
    def _validate_store(cfg: ModelConfig, store: ParamStore):
        expected = {name: shape for name, shape, _ in _param_specs(cfg)}
        present = {name: store[name].shape for name in store.names()}
        missing = sorted(set(expected) - set(present))
        extra = sorted(set(present) - set(expected))
        if missing or extra:
            raise CheckpointError(f"parameter names disagree: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if present[name] != shape:
                raise CheckpointError(f"{name}: shape {present[name]} does not match config {shape}")

    def p(self, name: str) -> Tensor:
        return self.store[name]

    # -- preprocessor -------------------------------------------------------

    def preprocess_logits(self, x0):
        x0 = self._check_image(x0)
        pc = self.cfg.preproc_channels
        h = x0
        skips = []
        for i in range(len(pc)):
            h = ad.relu(ad.conv2d(h, self.p(f"pre.enc{i}.w"), stride=2) + self.p(f"pre.enc{i}.b"))
            skips.append(h)
        h = ad.relu(ad.conv2d(h, self.p("pre.mid.w")) + self.p("pre.mid.b"))
        for i in reversed(range(len(pc))):
            h = ad.deconv2d(h, self.p(f"pre.dec{i}.w")) + self.p(f"pre.dec{i}.b")
            if i > 0:
                h = h + skips[i - 1]
            h = ad.relu(h)
        fg = ad.conv2d(h, self.p("pre.fg.w")) + self.p("pre.fg.b")
        ang = ad.conv2d(h, self.p("pre.ang.w")) + self.p("pre.ang.b")
        return fg, ang

    def preprocess(self, x0) -> Tensor:
        """Foreground probability plus eight angle-class probabilities per pixel."""
        fg, ang = self.preprocess_logits(x0)
        return ad.concat([ad.sigmoid(fg), ad.softmax(ang, axis=2)], axis=2)

    # -- box network --------------------------------------------------------

    def box_net_step(self, d: Tensor):
        cfg = self.cfg
        if d.shape != (cfg.img_h, cfg.img_w, cfg.d_channels):
            raise ShapeError(f"box net input {d.shape}, expected {(cfg.img_h, cfg.img_w, cfg.d_channels)}")
        u = d
        for i in range(len(cfg.box_channels)):
            u = ad.relu(ad.conv2d(u, self.p(f"box.enc{i}.w"), stride=2) + self.p(f"box.enc{i}.b"))
        n_pos = cfg.feature_h * cfg.feature_w
        u_flat = ad.reshape(u, (n_pos, cfg.feature_dim))

        z = LstmState.zeros(cfg.lstm_dim)
        alpha = ad.constant(np.full(n_pos, 1.0 / n_pos))
        alphas = [alpha]
        for _ in range(cfg.glimpse_count):
            # the pooling weights lag one glimpse behind the LSTM
            pooled = ad.matmul(alpha, u_flat)
            z = ad.lstm_step(z, pooled, self.p("box.lstm.wx"), self.p("box.lstm.wh"), self.p("box.lstm.b"))
            hidden = ad.relu(ad.matmul(z.hidden, self.p("box.glimpse0.w")) + self.p("box.glimpse0.b"))
            alpha = ad.softmax(ad.matmul(hidden, self.p("box.glimpse1.w")) + self.p("box.glimpse1.b"), axis=-1)
            alphas.append(alpha)
        vec = ad.matmul(z.hidden, self.p("box.head.w")) + self.p("box.head.b")
        return at.BoxParams.from_vector(vec), z, alphas

    def _fixed_full_image_box(self) -> at.BoxParams:
        cfg = self.cfg
        return at.BoxParams(
            g_tilde_x=ad.constant(0.0),
            g_tilde_y=ad.constant(0.0),
            log_delta_x=ad.constant(0.0),
            log_delta_y=ad.constant(0.0),
            log_sigma_x=ad.constant(math.log(cfg.img_w / cfg.patch_w)),
            log_sigma_y=ad.constant(math.log(cfg.img_h / cfg.patch_h)),
            gamma=ad.constant(2.0),
        )

    # -- segmentation network ------------------------------------------------

    def seg_net_forward(self, patch: Tensor, fb: at.FilterBank, gamma):
        cfg = self.cfg
        want = (cfg.patch_h, cfg.patch_w, cfg.patch_channels)
        if patch.shape != want:
            raise ShapeError(f"seg net input {patch.shape}, expected {want}")
        sc = cfg.seg_channels
        h = patch
        skips = []
        for i in range(len(sc)):
            h = ad.relu(ad.conv2d(h, self.p(f"seg.enc{i}.w"), stride=2) + self.p(f"seg.enc{i}.b"))
            skips.append(h)
        feat = h
        n = feat.shape[0] * feat.shape[1]
        v = ad.mean(ad.reshape(feat, (n, sc[-1])), axis=0)
        for i in reversed(range(len(sc))):
            h = ad.deconv2d(h, self.p(f"seg.dec{i}.w")) + self.p(f"seg.dec{i}.b")
            if i > 0:
                h = h + skips[i - 1]
            h = ad.relu(h)
        heat = ad.conv2d(h, self.p("seg.head.w")) + self.p("seg.head.b")
        y = at.reproject_patch(heat, fb, gamma, cfg.beta)
        return y, v

    # -- scoring network -----------------------------------------------------

    def score_net_forward(self, z_end: LstmState, v: Tensor) -> Tensor:
        logit = ad.sum_(self.p("score.wz") * z_end.hidden) + ad.sum_(self.p("score.wv") * v) + self.p("score.b")
        return ad.sigmoid(logit)

    # -- rollout ---------------------------------------------------------------

    def _check_image(self, x0) -> Tensor:
        t = x0 if isinstance(x0, Tensor) else ad.constant(x0)
        if t.shape != (self.cfg.img_h, self.cfg.img_w, 3):
            raise ShapeError(f"image {t.shape}, expected {(self.cfg.img_h, self.cfg.img_w, 3)}")
        return t

    def input_features(self, x0) -> Tensor:
        """The per-pixel evidence the recurrent loop sees, honoring ablation flags."""
        x0 = self._check_image(x0)
        if not self.cfg.use_preproc:
            return x0
        x = self.preprocess(x0)
        return x if self.cfg.use_angles else x[:, :, 0:1]

    def run_episode(self, x0, mode: str = "train", t_steps: int | None = None, canvas_source=None) -> EpisodeState:
        """Run the segment-one-object loop.

        Train mode runs exactly t_steps steps. Infer mode stops at the first
        score below the threshold; that step is kept for diagnostics but
        flagged as not emitted. canvas_source, when given, maps (t, y_t) to
        the mask fed into the canvas, which lets a trainer substitute ground
        truth for the model's own output.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        cfg = self.cfg
        t_max = t_steps if t_steps is not None else cfg.max_steps
        x0 = self._check_image(x0)
        x = self.input_features(x0)
        canvas = ad.constant(np.zeros((cfg.img_h, cfg.img_w, 1)))
        state = EpisodeState(x=x, canvases=[canvas])
        for t in range(t_max):
            d = ad.concat([canvas, x], axis=2)
            if cfg.use_box_net:
                box, z_end, alphas = self.box_net_step(d)
            else:
                box = self._fixed_full_image_box()
                z_end, alphas = LstmState.zeros(cfg.lstm_dim), []
            denorm = at.denormalize_box(box, cfg.img_h, cfg.img_w)
            fb = at.build_filterbank(denorm, self.geometry, cfg.img_h, cfg.img_w)
            xtilde = ad.concat([x0, d], axis=2)
            patch = at.extract_patch(xtilde, fb)
            y, v = self.seg_net_forward(patch, fb, box.gamma)
            s = self.score_net_forward(z_end, v)
            soft_box = at.box_mask(fb, box.gamma, cfg.beta)
            step = StepOutput(mask=y, box=box, denorm_box=denorm, soft_box=soft_box,
                              score=s, v_feature=v, z_end=z_end, alphas=alphas)
            if mode == "infer" and float(s.value) < cfg.score_threshold:
                step.emitted = False
                state.steps.append(step)
                break
            state.steps.append(step)
            fed = y if canvas_source is None else canvas_source(t, y)
            canvas = canvas_update(canvas, fed)
            state.canvases.append(canvas)
        return state


# -- checkpoint format: text header, blank line, parameter container ---------

_TUPLE_FIELDS = {"preproc_channels", "box_channels", "seg_channels"}


def _config_to_lines(cfg: ModelConfig):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            v = ",".join(str(int(c)) for c in v)
        lines.append(f"{f.name}={v}")
    return lines


def _config_from_lines(lines) -> ModelConfig:
    kwargs = {}
    types = {f.name: f.type for f in fields(ModelConfig)}
    for line in lines:
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"bad config line {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in types:
            raise CheckpointError(f"unknown config key {key!r}")
        if key in _TUPLE_FIELDS:
            kwargs[key] = tuple(int(c) for c in raw.split(",") if c)
        elif types[key] == "bool":
            kwargs[key] = raw == "True"
        elif types[key] == "int":
            kwargs[key] = int(raw)
        elif types[key] == "float":
            kwargs[key] = float(raw)
        else:
            raise CheckpointError(f"unhandled config field type for {key}")
    return ModelConfig(**kwargs)


def save_checkpoint(path, cfg: ModelConfig, store: ParamStore) -> None:
    Segmenter._validate_store(cfg, store)
    header = CHECKPOINT_MAGIC + "\n" + "\n".join(_config_to_lines(cfg)) + "\n\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(store.to_bytes())


def load_checkpoint(path):
    """Read (config, params), checking that the two agree on every shape."""
    with open(path, "rb") as f:
        blob = f.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError("no header terminator found")
    header = blob[:sep].decode("ascii", errors="replace").splitlines()
    if not header or header[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"wrong checkpoint format or version: {header[:1]}")
    cfg = _config_from_lines(header[1:])
    store = ParamStore.from_bytes(blob[sep + 2:])
    Segmenter._validate_store(cfg, store)
    return cfg, store
