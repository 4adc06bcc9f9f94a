import math

import numpy as np
import pytest

from recurseg import attention as at
from recurseg import autodiff as ad
from recurseg.autodiff import grad_check
from recurseg.data import SceneSpec, generate_scene
from recurseg.losses import LossConfig, joint_loss
from recurseg.model import (
    CheckpointError,
    ModelConfig,
    Segmenter,
    build_params,
    canvas_update,
    load_checkpoint,
    save_checkpoint,
)

TINY = dict(img_h=16, img_w=16, patch_h=8, patch_w=8, glimpse_count=2, lstm_dim=4,
            preproc_channels=(2,), box_channels=(2, 3), seg_channels=(2, 3), max_steps=3)


def tiny_model(seed=0, **overrides):
    cfg = ModelConfig(**{**TINY, **overrides})
    return Segmenter(cfg, seed=seed)


def tiny_scene(seed=9, n=2):
    return generate_scene(SceneSpec(img_h=16, img_w=16, n_min=n, n_max=n, seed=seed), 0)


class _StoreView:
    """grad_check adapter exposing a chosen subset of a ParamStore."""

    def __init__(self, store, names):
        self._pairs = [(n, store[n]) for n in names]

    def items(self):
        return list(self._pairs)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.feature_h == 8 and cfg.feature_w == 8
        assert cfg.feature_dim == 32
        assert cfg.x_channels == 9 and cfg.d_channels == 10 and cfg.patch_channels == 13

    def test_ablation_channel_plans(self):
        assert ModelConfig(use_angles=False).x_channels == 1
        assert ModelConfig(use_preproc=False).x_channels == 3
        assert ModelConfig(use_preproc=False).patch_channels == 7

    @pytest.mark.parametrize("kwargs", [
        {"glimpse_count": 0},
        {"max_steps": 0},
        {"img_h": 61},
        {"patch_h": 12, "seg_channels": (4, 4, 4)},
        {"box_channels": ()},
    ])
    def test_rejects_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**{**TINY, **kwargs})


class TestPreprocess:
    def test_output_layout(self):
        m = tiny_model()
        x = m.preprocess(tiny_scene().rgb)
        assert x.shape == (16, 16, 9)
        fg = x.value[:, :, 0]
        assert np.all(fg > 0) and np.all(fg < 1)
        assert np.allclose(x.value[:, :, 1:].sum(axis=2), 1.0, atol=1e-6)

    def test_shape_mismatch(self):
        m = tiny_model()
        with pytest.raises(ad.ShapeError, match="image"):
            m.preprocess(np.zeros((8, 8, 3)))

    def test_logits_match_probabilities(self):
        m = tiny_model()
        rgb = tiny_scene().rgb
        fg, ang = m.preprocess_logits(rgb)
        x = m.preprocess(rgb)
        assert np.allclose(1 / (1 + np.exp(-fg.value[:, :, 0])), x.value[:, :, 0], atol=1e-6)


class TestCanvasUpdate:
    def test_zero_canvas_passes_mask_through(self):
        y = ad.constant(np.array([[0.3], [0.9]]))
        c = canvas_update(ad.constant(np.zeros((2, 1))), y)
        assert np.array_equal(c.value, y.value)

    def test_idempotent(self):
        c = ad.constant(np.array([[0.2], [0.8]]))
        assert np.array_equal(canvas_update(c, c).value, c.value)

    def test_elementwise_max(self):
        c = ad.constant(np.array([0.2, 0.8]))
        y = ad.constant(np.array([0.5, 0.3]))
        assert np.allclose(canvas_update(c, y).value, [0.5, 0.8])


class TestBoxNet:
    def d_input(self, m):
        scene = tiny_scene()
        x = m.input_features(scene.rgb)
        canvas = ad.constant(np.zeros((16, 16, 1)))
        return ad.concat([canvas, x], axis=2)

    def test_attention_maps_are_distributions(self):
        m = tiny_model(seed=3)
        _, _, alphas = m.box_net_step(self.d_input(m))
        assert len(alphas) == m.cfg.glimpse_count + 1
        n_pos = m.cfg.feature_h * m.cfg.feature_w
        first = alphas[0].value
        assert np.allclose(first, 1.0 / n_pos)
        for a in alphas:
            assert np.all(a.value >= 0)
            assert abs(float(a.value.sum()) - 1.0) < 1e-6

    def test_zero_head_emits_centered_full_box(self):
        m = tiny_model(seed=4)
        m.store["box.head.w"].value[:] = 0.0
        m.store["box.head.b"].value[:] = 0.0
        box, _, _ = m.box_net_step(self.d_input(m))
        denorm = at.denormalize_box(box, 16, 16)
        assert float(denorm.g_x.value) == pytest.approx(8.0)
        assert float(denorm.g_y.value) == pytest.approx(8.0)
        assert float(denorm.delta_x.value) == pytest.approx(16.0)
        assert float(denorm.delta_y.value) == pytest.approx(16.0)

    def test_pooling_lags_one_glimpse(self):
        # with a single glimpse the LSTM must see the uniform alpha_0 pooling,
        # not the freshly computed alpha_1
        m = tiny_model(seed=5, glimpse_count=1)
        d = self.d_input(m)
        box, z, alphas = m.box_net_step(d)

        u = d
        for i in range(len(m.cfg.box_channels)):
            u = ad.relu(ad.conv2d(u, m.p(f"box.enc{i}.w"), stride=2) + m.p(f"box.enc{i}.b"))
        n_pos = m.cfg.feature_h * m.cfg.feature_w
        u_flat = ad.reshape(u, (n_pos, m.cfg.feature_dim))
        pooled = ad.matmul(ad.constant(np.full(n_pos, 1.0 / n_pos)), u_flat)
        z0 = ad.LstmState.zeros(m.cfg.lstm_dim)
        z1 = ad.lstm_step(z0, pooled, m.p("box.lstm.wx"), m.p("box.lstm.wh"), m.p("box.lstm.b"))
        vec = ad.matmul(z1.hidden, m.p("box.head.w")) + m.p("box.head.b")
        assert np.array_equal(z.hidden.value, z1.hidden.value)
        assert np.array_equal(box.gamma.value, vec.value[6])


class TestSegNet:
    def test_output_in_unit_interval(self):
        m = tiny_model(seed=6)
        ep = m.run_episode(tiny_scene().rgb, mode="train", t_steps=2)
        for y in ep.masks:
            assert y.shape == (16, 16, 1)
            assert np.all(y.value > 0) and np.all(y.value < 1)

    def test_far_outside_window_saturates_at_beta_floor(self):
        m = tiny_model(seed=7)
        scene = tiny_scene()
        x = m.input_features(scene.rgb)
        canvas = ad.constant(np.zeros((16, 16, 1)))
        d = ad.concat([canvas, x], axis=2)
        box = at.BoxParams(
            g_tilde_x=ad.constant(-0.6), g_tilde_y=ad.constant(-0.6),
            log_delta_x=ad.constant(math.log(4 / 16)), log_delta_y=ad.constant(math.log(4 / 16)),
            log_sigma_x=ad.constant(math.log(0.5)), log_sigma_y=ad.constant(math.log(0.5)),
            gamma=ad.constant(5.0),
        )
        fb = at.build_filterbank(at.denormalize_box(box, 16, 16), m.geometry, 16, 16)
        patch = at.extract_patch(ad.concat([ad.constant(scene.rgb), d], axis=2), fb)
        y, v = m.seg_net_forward(patch, fb, box.gamma)
        floor = 1 / (1 + math.exp(m.cfg.beta))
        assert abs(float(y.value[15, 15, 0]) - floor) < 1e-3
        assert v.shape == (m.cfg.seg_channels[-1],)

    def test_rejects_wrong_patch_shape(self):
        m = tiny_model()
        scene = tiny_scene()
        ep = m.run_episode(scene.rgb, t_steps=1)
        fb = at.build_filterbank(ep.steps[0].denorm_box, m.geometry, 16, 16)
        with pytest.raises(ad.ShapeError, match="seg net input"):
            m.seg_net_forward(ad.constant(np.zeros((8, 8, 4))), fb, ad.constant(1.0))


class TestScoreNet:
    def test_zero_weights_give_half(self):
        m = tiny_model(seed=8)
        for name in ("score.wz", "score.wv", "score.b"):
            m.store[name].value[...] = 0.0
        ep = m.run_episode(tiny_scene().rgb, t_steps=2)
        for s in ep.scores:
            assert float(s.value) == pytest.approx(0.5)

    def test_strictly_inside_unit_interval(self):
        m = tiny_model(seed=9)
        ep = m.run_episode(tiny_scene().rgb, t_steps=3)
        for s in ep.scores:
            assert 0.0 < float(s.value) < 1.0

    def test_monotone_in_bias(self):
        m = tiny_model(seed=10)
        ep_lo = m.run_episode(tiny_scene().rgb, t_steps=1)
        m.store["score.b"].value[...] += 2.0
        ep_hi = m.run_episode(tiny_scene().rgb, t_steps=1)
        assert float(ep_hi.scores[0].value) > float(ep_lo.scores[0].value)


class TestRunEpisode:
    def test_train_mode_runs_exactly_t_steps(self):
        m = tiny_model(seed=11)
        for t in (1, 2, 4):
            ep = m.run_episode(tiny_scene().rgb, mode="train", t_steps=t)
            assert len(ep.steps) == t
            assert all(s.emitted for s in ep.steps)

    def test_canvas_is_running_max_of_masks(self):
        m = tiny_model(seed=12)
        ep = m.run_episode(tiny_scene().rgb, mode="train", t_steps=3)
        running = np.zeros((16, 16, 1))
        for t, y in enumerate(ep.masks):
            running = np.maximum(running, y.value)
            assert np.allclose(ep.canvases[t + 1].value, running)

    def test_canvas_monotone(self):
        m = tiny_model(seed=13)
        ep = m.run_episode(tiny_scene().rgb, t_steps=4)
        for a, b in zip(ep.canvases, ep.canvases[1:]):
            assert np.all(b.value >= a.value)

    def test_infer_terminates_on_low_score(self):
        m = tiny_model(seed=14)
        m.store["score.b"].value[...] = -10.0
        ep = m.run_episode(tiny_scene().rgb, mode="infer")
        assert len(ep.steps) == 1
        assert not ep.steps[0].emitted
        assert ep.emitted_masks == []

    def test_infer_runs_to_cap_on_high_score(self):
        m = tiny_model(seed=15)
        m.store["score.b"].value[...] = 10.0
        ep = m.run_episode(tiny_scene().rgb, mode="infer")
        assert len(ep.steps) == m.cfg.max_steps
        assert all(s.emitted for s in ep.steps)

    def test_canvas_source_override(self):
        m = tiny_model(seed=16)
        fed = np.zeros((16, 16, 1))
        fed[4:9, 4:9, 0] = 1.0
        calls = []

        def source(t, y):
            calls.append(t)
            return ad.constant(fed)

        ep = m.run_episode(tiny_scene().rgb, mode="train", t_steps=2, canvas_source=source)
        assert calls == [0, 1]
        assert np.allclose(ep.canvases[1].value, np.maximum(0.0, fed))

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            tiny_model().run_episode(tiny_scene().rgb, mode="test")


def episode_loss(m, scene, t_steps):
    gt = [g.astype(np.float64) for g in scene.masks]

    def f(_):
        ep = m.run_episode(scene.rgb, mode="train", t_steps=t_steps)
        total, _, _ = joint_loss(ep.masks, ep.denorm_boxes, ep.scores, gt,
                                 LossConfig(), m.geometry, m.cfg.img_h, m.cfg.img_w)
        return total

    return f


class TestDifferentiability:
    def test_representative_parameter_gradients(self):
        # finite differences need a generic point: the symmetric zero-weight
        # box head at init keeps the window identical across steps, parking the
        # canvas max on exact ties, so jitter every parameter first
        with ad.using_dtype(np.float64):
            m = tiny_model(seed=37)
            rng = np.random.default_rng(123)
            for _, p in m.store.items():
                p.value += rng.normal(0.0, 0.1, size=p.value.shape)
            scene = tiny_scene(seed=21)
            f = episode_loss(m, scene, t_steps=3)
            names = ["pre.enc0.b", "pre.fg.w", "pre.ang.b", "box.enc0.b", "box.lstm.b",
                     "box.glimpse1.b", "box.head.w", "box.head.b", "seg.enc0.b",
                     "seg.dec0.b", "seg.head.w", "seg.head.b", "score.wz", "score.wv", "score.b"]
            report = grad_check(f, _StoreView(m.store, names), eps=1e-5, tol=1e-4)
            assert report.passed, str(report)

    def test_gt_permutation_leaves_loss_unchanged(self):
        m = tiny_model(seed=18)
        scene = tiny_scene(seed=22, n=3)
        ep = m.run_episode(scene.rgb, mode="train", t_steps=4)
        gt = [g.astype(np.float64) for g in scene.masks]

        def value(masks):
            total, _, _ = joint_loss(ep.masks, ep.denorm_boxes, ep.scores, masks,
                                     LossConfig(), m.geometry, 16, 16)
            return float(total.value)

        base = value(gt)
        assert value(gt[::-1]) == base
        assert value([gt[1], gt[2], gt[0]]) == base


class TestAblations:
    def test_no_preprocessor_feeds_raw_rgb(self):
        m = tiny_model(seed=19, use_preproc=False)
        scene = tiny_scene()
        x = m.input_features(scene.rgb)
        assert x.shape == (16, 16, 3)
        assert np.allclose(x.value, scene.rgb, atol=1e-6)
        ep = m.run_episode(scene.rgb, t_steps=2)
        assert len(ep.steps) == 2

    def test_no_angles_keeps_only_foreground(self):
        m = tiny_model(seed=20, use_angles=False)
        x = m.input_features(tiny_scene().rgb)
        assert x.shape == (16, 16, 1)

    def test_no_box_net_uses_fixed_full_image_window(self):
        m = tiny_model(seed=21, use_box_net=False)
        ep = m.run_episode(tiny_scene().rgb, t_steps=3)
        for st in ep.steps:
            assert float(st.denorm_box.g_x.value) == pytest.approx(8.0)
            assert float(st.denorm_box.delta_x.value) == pytest.approx(16.0)
            assert st.alphas == []

    @pytest.mark.parametrize("glimpses", [1, 3, 5])
    def test_glimpse_count_variants(self, glimpses):
        m = tiny_model(seed=22, glimpse_count=glimpses)
        ep = m.run_episode(tiny_scene().rgb, t_steps=1)
        assert len(ep.steps[0].alphas) == glimpses + 1

    def test_glimpse_count_changes_output(self):
        a = tiny_model(seed=23, glimpse_count=1)
        b = tiny_model(seed=23, glimpse_count=3)
        sa = a.run_episode(tiny_scene().rgb, t_steps=1).scores[0]
        sb = b.run_episode(tiny_scene().rgb, t_steps=1).scores[0]
        assert float(sa.value) != float(sb.value)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = ModelConfig(**TINY)
        store = build_params(cfg, seed=24)
        p = tmp_path / "model.ckpt"
        save_checkpoint(p, cfg, store)
        cfg2, store2 = load_checkpoint(p)
        assert cfg2 == cfg
        for name in store.names():
            assert np.array_equal(store[name].value, store2[name].value)
            assert store[name].value.dtype == store2[name].value.dtype

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        cfg = ModelConfig(**TINY)
        save_checkpoint(p, cfg, build_params(cfg))
        raw = p.read_bytes()
        p.write_bytes(b"something-else 9\n" + raw.split(b"\n", 1)[1])
        with pytest.raises(CheckpointError, match="format or version"):
            load_checkpoint(p)

    def test_shape_mismatch_between_header_and_params(self, tmp_path):
        cfg = ModelConfig(**TINY)
        p = tmp_path / "model.ckpt"
        save_checkpoint(p, cfg, build_params(cfg))
        raw = p.read_bytes().replace(b"lstm_dim=4", b"lstm_dim=8")
        p.write_bytes(raw)
        with pytest.raises(CheckpointError, match="shape|missing"):
            load_checkpoint(p)

    def test_save_rejects_mismatched_store(self, tmp_path):
        cfg = ModelConfig(**TINY)
        other = build_params(ModelConfig(**{**TINY, "lstm_dim": 8}))
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "x.ckpt", cfg, other)

    def test_segmenter_validates_loaded_store(self):
        cfg = ModelConfig(**TINY)
        other = build_params(ModelConfig(**{**TINY, "seg_channels": (3, 3)}))
        with pytest.raises(CheckpointError):
            Segmenter(cfg, store=other)
