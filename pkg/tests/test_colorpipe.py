import math

import numpy as np
import pytest

from chromabrush import colorpipe
from chromabrush.colorpipe import (
    CHANNEL_MEANS_BGR,
    ImageBuffer,
    LossLayerConfig,
    RunConfig,
    StyleWeightSchedule,
    compare_optimizers,
    deprocess,
    initialize_canvas,
    prepare_targets,
    preprocess,
    resize_buffer,
    run_colorization,
    trace_csv_text,
    write_trace_csv,
)
from chromabrush.errors import ConfigError, DecodeError, SizeError
from chromabrush.tensorcore import Tensor
from conftest import (
    color_image,
    gray_image,
    random_store,
    standin_layers,
    standin_topology,
    two_conv_topology,
    write_image,
)
from oracles import central_diff, max_rel_err


class TestSchedule:
    def test_first_ratio_exact(self):
        s = StyleWeightSchedule(1000.0, 0.0025)
        assert s.beta(0) == 1000.0
        assert s.beta(1) == 997.5
        assert s.beta(1) / s.beta(0) == 0.9975

    def test_thousand_iterations(self):
        s = StyleWeightSchedule(1000.0, 0.0025)
        expected = 0.9975 ** 1000
        assert expected == pytest.approx(0.08183, abs=5e-6)
        assert abs(s.beta(1000) / s.beta(0) - expected) < 1e-12

    def test_ratio_exact_for_all_k(self):
        s = StyleWeightSchedule(1000.0, 0.0025)
        r = s.ratio_exact()
        assert float(r) == 0.9975
        for k in range(1000):
            assert s.beta_exact(k + 1) / s.beta_exact(k) == r

    def test_strictly_decreasing_and_positive(self):
        s = StyleWeightSchedule(7.5, 0.0025)
        betas = [s.beta(k) for k in range(0, 2000, 97)]
        assert all(b > 0 for b in betas)
        assert all(b2 < b1 for b1, b2 in zip(betas, betas[1:]))

    def test_zero_decay_is_constant(self):
        s = StyleWeightSchedule(3.0, 0.0)
        assert s.beta(0) == s.beta(123) == 3.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            StyleWeightSchedule(-1.0, 0.1)
        with pytest.raises(ConfigError):
            StyleWeightSchedule(1.0, 1.0)


class TestRunConfig:
    def test_beta0_defaults_to_1000x_alpha(self):
        cfg = RunConfig("c", "s", "o", alpha=2.0)
        assert cfg.beta0 == 2000.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            RunConfig("c", "s", "o", iterations=0)
        with pytest.raises(ConfigError):
            RunConfig("c", "s", "o", decay_per_iter=1.0)
        with pytest.raises(ConfigError):
            RunConfig("c", "s", "o", max_side=16)
        with pytest.raises(ConfigError):
            RunConfig("c", "s", "o", optimizer="adam")
        with pytest.raises(ConfigError):
            RunConfig("c", "s", "o", alpha=0.0, beta0=0.0)


class TestPreprocess:
    def test_uniform_gray_means(self, tmp_path):
        path = tmp_path / "gray.png"
        write_image(path, np.full((20, 20, 3), 128, dtype=np.uint8))
        buf = preprocess(path, max_side=64)
        expected = [128.0 - m for m in CHANNEL_MEANS_BGR]
        for c in range(3):
            assert np.allclose(buf.pixels.array[c], expected[c], atol=1e-9)
        assert buf.pixels.array[0, 0, 0] == pytest.approx(24.061)
        assert buf.pixels.array[1, 0, 0] == pytest.approx(11.221)
        assert buf.pixels.array[2, 0, 0] == pytest.approx(4.32)

    def test_black_image_exact(self, tmp_path):
        path = tmp_path / "black.png"
        write_image(path, np.zeros((16, 16, 3), dtype=np.uint8))
        buf = preprocess(path, max_side=64)
        for c, m in enumerate(CHANNEL_MEANS_BGR):
            assert np.all(buf.pixels.array[c] == -m)

    def test_too_small_source(self, tmp_path):
        path = tmp_path / "tiny.png"
        write_image(path, np.zeros((8, 8, 3), dtype=np.uint8))
        with pytest.raises(SizeError):
            preprocess(path, max_side=64)

    def test_downscales_longer_side(self, tmp_path):
        path = tmp_path / "wide.png"
        write_image(path, color_image(128))
        buf = preprocess(path, max_side=64)
        assert (buf.height, buf.width) == (64, 64)
        assert buf.source_size == (128, 128)

    def test_never_upscales(self, tmp_path):
        path = tmp_path / "small.png"
        write_image(path, color_image(40))
        buf = preprocess(path, max_side=512)
        assert (buf.height, buf.width) == (40, 40)

    def test_grayscale_source_replicates(self, tmp_path):
        path = tmp_path / "l.png"
        write_image(path, gray_image(24))
        buf = preprocess(path, max_side=64)
        b, g, r = buf.pixels.array
        assert np.allclose(b + CHANNEL_MEANS_BGR[0], g + CHANNEL_MEANS_BGR[1])
        assert np.allclose(b + CHANNEL_MEANS_BGR[0], r + CHANNEL_MEANS_BGR[2])

    def test_force_grayscale_on_color(self, tmp_path):
        path = tmp_path / "c.png"
        write_image(path, color_image(24))
        buf = preprocess(path, max_side=64, force_grayscale=True)
        b, g, r = buf.pixels.array
        assert np.allclose(b + CHANNEL_MEANS_BGR[0], g + CHANNEL_MEANS_BGR[1])

    def test_bgr_channel_order(self, tmp_path):
        arr = np.zeros((16, 16, 3), dtype=np.uint8)
        arr[..., 0] = 200  # red channel in the source
        path = tmp_path / "red.png"
        write_image(path, arr)
        buf = preprocess(path, max_side=64)
        assert np.all(buf.pixels.array[2] == 200.0 - CHANNEL_MEANS_BGR[2])
        assert np.all(buf.pixels.array[0] == -CHANNEL_MEANS_BGR[0])

    def test_undecodable_file(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not an image")
        with pytest.raises(DecodeError):
            preprocess(path, max_side=64)

    def test_jpeg_supported(self, tmp_path):
        from PIL import Image

        path = tmp_path / "img.jpg"
        Image.fromarray(color_image(32)).save(path, format="JPEG")
        buf = preprocess(path, max_side=64)
        assert buf.pixels.shape == (3, 32, 32)


class TestDeprocess:
    def test_round_trip_within_one(self, tmp_path):
        arr = color_image(48, seed=9)
        path = tmp_path / "img.png"
        write_image(path, arr)
        buf = preprocess(path, max_side=64)
        back = deprocess(buf)
        assert np.max(np.abs(back.astype(int) - arr.astype(int))) <= 1

    def test_clamp_ceiling(self):
        buf = ImageBuffer(Tensor(np.full((3, 16, 16), 1e6)), (16, 16), "canvas")
        assert np.all(deprocess(buf) == 255)

    def test_clamp_floor(self):
        buf = ImageBuffer(Tensor(np.full((3, 16, 16), -1e6)), (16, 16), "canvas")
        assert np.all(deprocess(buf) == 0)


class TestCanvas:
    def _content(self, tmp_path):
        path = tmp_path / "c.png"
        write_image(path, gray_image(32))
        return preprocess(path, max_side=64)

    def test_content_init_copies_buffer(self, tmp_path):
        content = self._content(tmp_path)
        cfg = RunConfig("c", "s", "o", init="content")
        canvas = initialize_canvas(cfg, content)
        assert np.array_equal(canvas.pixels.array, content.pixels.array)
        assert canvas.provenance == "canvas"

    def test_noise_is_seeded(self, tmp_path):
        content = self._content(tmp_path)
        cfg = RunConfig("c", "s", "o", init="noise", seed=7)
        a = initialize_canvas(cfg, content)
        b = initialize_canvas(cfg, content)
        assert np.array_equal(a.pixels.array, b.pixels.array)
        c = initialize_canvas(RunConfig("c", "s", "o", seed=8), content)
        assert not np.array_equal(a.pixels.array, c.pixels.array)

    def test_noise_mean_within_clt_bound(self, tmp_path):
        content = self._content(tmp_path)
        for seed in range(5):
            cfg = RunConfig("c", "s", "o", init="noise", seed=seed)
            canvas = initialize_canvas(cfg, content)
            n = canvas.pixels.size
            bound = 3.0 * 30.0 / math.sqrt(n)
            assert abs(float(np.mean(canvas.pixels.array))) < bound


class TestResizeAndTargets:
    def test_resize_buffer_exact_dims(self, tmp_path):
        path = tmp_path / "c.png"
        write_image(path, color_image(48))
        buf = preprocess(path, max_side=64)
        out = resize_buffer(buf, 20, 36)
        assert (out.height, out.width) == (20, 36)

    def test_default_has_five_style_targets(self, vgg19_store, image_pair):
        content, style = image_pair
        topo = colorpipe.vgg19_topology()
        targets = prepare_targets(
            preprocess(content, 64, force_grayscale=True),
            preprocess(style, 64),
            topo,
            vgg19_store,
        )
        assert len(targets.style_targets) == 5
        assert set(targets.style_targets) == {
            "conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"
        }
        assert targets.content_layer == "conv4_2"

    def test_content_target_is_flattened(self, standin_net, image_pair):
        topo, store, layers = standin_net
        content, style = image_pair
        targets = prepare_targets(
            preprocess(content, 64, force_grayscale=True),
            preprocess(style, 64),
            topo, store, layers,
        )
        # conv3_1 sits under two pools: 64 -> 16x16 positions, 12 channels
        assert targets.content_target.shape == (12, 256)

    def test_style_resized_to_content_dims(self, standin_net, tmp_path):
        topo, store, layers = standin_net
        cpath, spath = tmp_path / "c.png", tmp_path / "s.png"
        write_image(cpath, gray_image(64))
        write_image(spath, color_image(48))
        targets = prepare_targets(
            preprocess(cpath, 64, force_grayscale=True),
            preprocess(spath, 64),
            topo, store, layers,
        )
        # Gram targets are N x N regardless, but position counts must match
        # the content dimensions; recompute a feature to confirm no error.
        assert targets.style_targets["conv1_1"].shape == (8, 8)


def _write_pair(tmp_path, size=48):
    cpath, spath = tmp_path / "c.png", tmp_path / "s.png"
    write_image(cpath, gray_image(size, seed=21))
    write_image(spath, color_image(size, seed=22))
    return cpath, spath


def _mini_config(tmp_path, **kw):
    cpath, spath = _write_pair(tmp_path)
    defaults = dict(iterations=6, max_side=64, seed=3)
    defaults.update(kw)
    return RunConfig(cpath, spath, tmp_path / "out.png", **defaults)


class TestRunColorization:
    def test_produces_image_and_trace(self, standin_net, tmp_path):
        topo, store, layers = standin_net
        cfg = _mini_config(tmp_path)
        result = run_colorization(cfg, topology=topo, weights=store, layers=layers)
        assert result.output_path.exists()
        assert len(result.trace) == 6
        assert not result.failed
        betas = [row.beta for row in result.trace]
        assert betas[0] == cfg.beta0
        for b1, b2 in zip(betas, betas[1:]):
            assert b2 == pytest.approx(b1 * 0.9975, rel=1e-12)
        for row in result.trace:
            assert row.total == pytest.approx(
                cfg.alpha * row.content + row.beta * row.style, rel=1e-9
            )

    def test_fixed_point_zero_loss(self, standin_net, tmp_path):
        topo, store, layers = standin_net
        gray = gray_image(48, seed=33)
        cpath = tmp_path / "same.png"
        write_image(cpath, gray)
        cfg = RunConfig(
            cpath, cpath, tmp_path / "out.png",
            iterations=4, init="content", max_side=64, seed=0,
        )
        result = run_colorization(cfg, topology=topo, weights=store, layers=layers)
        assert not result.failed
        for row in result.trace:
            assert row.total == 0.0
            assert row.grad_norm == 0.0
            assert row.step == 0.0
        out = np.asarray(__import__("PIL.Image", fromlist=["Image"]).open(
            result.output_path
        ))
        gray_rgb = np.stack([gray] * 3, axis=-1).astype(int)
        assert np.max(np.abs(out.astype(int) - gray_rgb)) <= 1

    def test_content_fixed_point_gradient_zero(self, standin_net, tmp_path):
        # alpha > 0, beta = 0, init = content: iteration-0 gradient is zero.
        topo, store, layers = standin_net
        cfg = _mini_config(tmp_path, iterations=1, init="content",
                           alpha=1.0, beta0=0.0)
        result = run_colorization(cfg, topology=topo, weights=store, layers=layers)
        assert result.trace[0].grad_norm == 0.0
        assert result.trace[0].content == 0.0

    def test_targets_invariant_across_run(self, standin_net, tmp_path):
        topo, store, layers = standin_net
        cfg = _mini_config(tmp_path, iterations=2)
        content = preprocess(cfg.content_path, 64, force_grayscale=True)
        style = preprocess(cfg.style_path, 64)
        t1 = prepare_targets(content, style, topo, store, layers)
        run_colorization(cfg, topology=topo, weights=store, layers=layers)
        t2 = prepare_targets(content, style, topo, store, layers)
        assert np.array_equal(t1.content_target.array, t2.content_target.array)
        for name in t1.style_targets:
            assert np.array_equal(
                t1.style_targets[name].array, t2.style_targets[name].array
            )

    def test_deterministic_runs(self, standin_net, tmp_path):
        topo, store, layers = standin_net
        out1, out2 = tmp_path / "r1.png", tmp_path / "r2.png"
        cpath, spath = _write_pair(tmp_path)

        def run(out):
            cfg = RunConfig(cpath, spath, out, iterations=4, max_side=64, seed=12)
            return run_colorization(cfg, topology=topo, weights=store, layers=layers)

        r1, r2 = run(out1), run(out2)
        assert out1.read_bytes() == out2.read_bytes()
        assert trace_csv_text(r1.trace) == trace_csv_text(r2.trace)

    def test_decaying_loss_actually_decreases(self, standin_net, tmp_path):
        topo, store, layers = standin_net
        cfg = _mini_config(tmp_path, iterations=8)
        result = run_colorization(cfg, topology=topo, weights=store, layers=layers)
        assert result.trace[-1].total < result.trace[0].total

    def test_missing_weights_config(self, tmp_path):
        cfg = _mini_config(tmp_path)
        with pytest.raises(ConfigError):
            run_colorization(cfg)


class TestFullPipelineGradient:
    def test_matches_finite_differences(self):
        # Two-conv trunk over an 8x8 canvas: d(total)/d(pixels) via the tape
        # must match central differences on every coordinate.
        topo = two_conv_topology()
        store = random_store(topo, seed=14)
        rng = np.random.default_rng(15)
        layers = LossLayerConfig.uniform("conv2_1", ("conv1_1", "conv2_1"))
        content = ImageBuffer(Tensor(rng.normal(0, 30, (3, 8, 8))), (8, 8), "content")
        style = ImageBuffer(Tensor(rng.normal(0, 30, (3, 8, 8))), (8, 8), "style")
        targets = prepare_targets(content, style, topo, store, layers)
        schedule = StyleWeightSchedule(10.0, 0.0)
        objective = colorpipe._PixelObjective(
            (3, 8, 8), topo, store, layers, targets, alpha=1.0, schedule=schedule,
        )
        x0 = rng.normal(0, 20, 192)
        _, analytic = objective(x0)
        numeric = central_diff(lambda x: objective(x)[0], x0.copy(), step=1e-5)
        assert max_rel_err(analytic, numeric, floor=1e-2) < 1e-4


@pytest.fixture(scope="module")
def comparison(standin_net, tmp_path_factory):
    topo, store, layers = standin_net
    tmp_path = tmp_path_factory.mktemp("compare")
    cfg = _mini_config(tmp_path, iterations=5)
    comp = compare_optimizers(
        cfg, topology=topo, weights=store, layers=layers,
        sgd_lr_grid=(0.01, 0.1, 1.0),
    )
    return cfg, comp, (topo, store, layers)


class TestCompareOptimizers:
    def test_four_images_and_trace(self, comparison):
        _, comp, _ = comparison
        assert sorted(comp.runs) == ["a", "b", "c", "d"]
        for panel in "abcd":
            assert comp.image_paths[panel].exists()
        assert comp.trace_path.exists()
        header = comp.trace_path.read_text().splitlines()[0]
        assert header == "panel,iter,beta,total,content,style,grad_norm,step"

    def test_shared_iteration_zero_loss(self, comparison):
        _, comp, _ = comparison
        first = {p: comp.runs[p].trace[0].total for p in "abcd"}
        assert len(set(first.values())) == 1

    def test_decay_panels_share_schedule(self, comparison):
        _, comp, _ = comparison
        assert comp.runs["a"].trace[1].beta == comp.runs["a"].trace[0].beta
        assert comp.runs["b"].trace[1].beta < comp.runs["b"].trace[0].beta
        assert comp.runs["d"].trace[1].beta < comp.runs["d"].trace[0].beta

    def test_panel_d_matches_run_colorization(self, comparison, tmp_path):
        cfg, comp, (topo, store, layers) = comparison
        solo = run_colorization(
            RunConfig(
                cfg.content_path, cfg.style_path, tmp_path / "solo.png",
                iterations=cfg.iterations, max_side=cfg.max_side, seed=cfg.seed,
            ),
            topology=topo, weights=store, layers=layers,
        )
        assert comp.image_paths["d"].read_bytes() == solo.output_path.read_bytes()
        assert trace_csv_text(comp.runs["d"].trace) == trace_csv_text(solo.trace)

    def test_sgd_sweeps_recorded(self, comparison):
        _, comp, _ = comparison
        assert [lr for lr, _ in comp.sweeps["a"]] == [0.01, 0.1, 1.0]
        best = min(loss for _, loss in comp.sweeps["a"])
        assert comp.runs["a"].final_total == best

    def test_panel_failures_do_not_stop_others(self, standin_net, tmp_path,
                                               monkeypatch):
        # Sabotage the SGD runs with an engine error: those panels must be
        # marked failed while the L-BFGS panels still complete.
        from chromabrush.errors import NonFiniteError

        topo, store, layers = standin_net
        orig = colorpipe.optim.minimize

        def sabotaged(objective, x0, method="lbfgs", **kw):
            if method == "sgd":
                raise NonFiniteError("sabotaged sgd run")
            return orig(objective, x0, method=method, **kw)

        monkeypatch.setattr(colorpipe.optim, "minimize", sabotaged)
        cfg = _mini_config(tmp_path, iterations=3)
        comp = compare_optimizers(
            cfg, topology=topo, weights=store, layers=layers,
            sgd_lr_grid=(0.01,),
        )
        assert comp.runs["a"].failed and comp.runs["b"].failed
        assert "sabotaged" in comp.runs["a"].message
        assert not comp.runs["c"].failed and not comp.runs["d"].failed
        assert comp.image_paths["d"].exists()


class TestTraceCsv:
    def test_header_and_digits(self, tmp_path):
        row = colorpipe.TraceRow(0, 1000.0, 0.123456789123456, 1.0, 2.0,
                                 3.14159265358979, 1.0)
        path = tmp_path / "t.csv"
        write_trace_csv(path, [row])
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,beta,total,content,style,grad_norm,step"
        fields = lines[1].split(",")
        assert fields[0] == "0"
        assert fields[2] == "0.123456789"
        assert fields[5] == "3.14159265"
