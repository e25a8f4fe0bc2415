from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmcsds.errors import ConfigError, DivergenceError, ValidationError
from lmcsds.losses import GradResult
from lmcsds.optimize import (
    DirectPixels,
    LatentGrid,
    OptimConfig,
    View,
    adjoint_separable,
    apply_separable,
    cosine_lr,
    finite_difference_check,
    optimize,
    resample_matrix,
    run_edit,
    run_synthesis,
    run_variants,
    sample_patches,
)

FAST = OptimConfig(steps=8, whole_steps=3, canvas=48, model_res=32, seed=1, loss="sds")


def zero_loss(views, t, ref=None):
    g = np.zeros_like(views)
    return GradResult(g, {"proj": g})


class TestResampling:
    @settings(max_examples=40)
    @given(st.integers(8, 96), st.data())
    def test_rows_normalised_and_in_bounds(self, src, data):
        side = data.draw(st.integers(1, src))
        start = data.draw(st.integers(0, src - side))
        out = data.draw(st.integers(1, 64))
        m = resample_matrix(src, float(start), float(side), out)
        assert m.shape == (out, src)
        assert np.allclose(m.sum(axis=1), 1.0)
        assert np.all(m >= 0)

    def test_adjoint(self, rng):
        ry = resample_matrix(40, 3.0, 33.0, 32)
        rx = resample_matrix(40, 5.0, 33.0, 32)
        x = rng.standard_normal((1, 40, 40))
        y = rng.standard_normal((1, 32, 32))
        lhs = np.sum(apply_separable(ry, rx, x) * y)
        rhs = np.sum(x * adjoint_separable(ry, rx, y))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_identity_resample(self, rng):
        m = resample_matrix(32, 0.0, 32.0, 32)
        assert np.allclose(m, np.eye(32))

    def test_view_bounds(self):
        with pytest.raises(ValidationError):
            View.make((32, 32), 10, 0, 32, 32)

    def test_patches_cover_canvas(self):
        rng = np.random.default_rng(0)
        hits = np.zeros((96, 96))
        for _ in range(300):
            for v in sample_patches(rng, (96, 96), 32, 2):
                assert 32 <= v.side <= 96
                assert v.top + v.side <= 96 and v.left + v.side <= 96
                hits += v.footprint()
        assert hits.min() > 0


class TestParameterizations:
    def test_latent_pullback_fd(self, rng):
        p = LatentGrid(1, 8, 32)
        theta = rng.standard_normal((1, 8, 8))
        assert finite_difference_check(p, theta, rng.uniform(0.5, 1.5, (1, 32, 32)), h=1e-3) <= 1e-3

    def test_pixels_pullback_fd(self, rng):
        p = DirectPixels(1, 8)
        theta = rng.standard_normal((1, 8, 8))
        assert finite_difference_check(p, theta, rng.uniform(0.5, 1.5, (1, 8, 8)), h=1e-3) <= 1e-3

    def test_latent_fit_recovers_grid(self, rng):
        p = LatentGrid(1, 8, 32)
        theta = rng.standard_normal((1, 8, 8))
        assert np.allclose(p.fit(p.render(theta)), theta, atol=1e-8)

    def test_latent_pullback_is_transpose(self, rng):
        p = LatentGrid(1, 8, 32)
        th, g = rng.standard_normal((1, 8, 8)), rng.standard_normal((1, 32, 32))
        assert np.sum(p.render(th) * g) == pytest.approx(np.sum(th * p.pullback(th, g)), rel=1e-12)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 0.1, 0.03, 99) == pytest.approx(0.1)
        assert cosine_lr(99, 0.1, 0.03, 99) == pytest.approx(0.003)
        assert cosine_lr(500, 0.1, 0.03, 99) == pytest.approx(0.003)

    def test_last_step_reaches_floor(self):
        cfg = replace(FAST, lr=0.05, lr_floor=0.2)
        res = optimize(DirectPixels(1, 48), np.zeros((1, 48, 48)), cfg, zero_loss)
        assert res.trace[-1]["lr"] == pytest.approx(0.05 * 0.2, rel=1e-12)
        assert res.trace[0]["lr"] == pytest.approx(0.05)

    def test_config_guards(self):
        with pytest.raises(ConfigError):
            OptimConfig(steps=0)
        with pytest.raises(ConfigError):
            OptimConfig(canvas=16, model_res=32)


class TestDrivers:
    def test_zero_gradient_keeps_init(self):
        res = run_synthesis(0, DirectPixels(1, 48), FAST, loss_fn=zero_loss)
        assert np.array_equal(res.image, np.zeros((1, 48, 48)))
        assert [r["phase"] for r in res.trace[:4]] == ["whole"] * 3 + ["patch"]

    def test_deterministic(self, tiny_denoiser):
        a = run_synthesis(1, DirectPixels(1, 48), FAST, tiny_denoiser).image
        b = run_synthesis(1, DirectPixels(1, 48), FAST, tiny_denoiser).image
        assert a.tobytes() == b.tobytes()
        c = run_synthesis(1, DirectPixels(1, 48), replace(FAST, seed=2), tiny_denoiser).image
        assert not np.array_equal(a, c)

    def test_latent_synthesis(self, tiny_denoiser):
        res = run_synthesis(1, LatentGrid(1, 8, 48), FAST, tiny_denoiser)
        assert res.image.shape == (1, 48, 48) and np.all(np.isfinite(res.image))

    def test_anchor_dominance(self, tiny_denoiser, shapes):
        img = shapes.images[0].astype(np.float64)
        cfg = replace(FAST, canvas=32, anchor_weight=1e6, lr=1e-5, steps=30)
        res = run_edit(img, 1, DirectPixels(1, 32), cfg, tiny_denoiser)
        assert np.max(np.abs(res.image - img)) < 1e-2

    def test_trace_has_component_norms(self, tiny_denoiser, tiny_corrective, shapes):
        cfg = replace(FAST, canvas=32, loss="lmc_sds")
        res = run_edit(shapes.images[0], 1, DirectPixels(1, 32), cfg, tiny_denoiser, tiny_corrective)
        assert {"norm_cond", "norm_lmc", "t", "omega"} <= set(res.trace[0])
        assert res.trace[0]["overlap"] == "coverage-mean"

    def test_lmc_needs_corrective(self, tiny_denoiser):
        with pytest.raises(ConfigError):
            run_synthesis(1, DirectPixels(1, 48), replace(FAST, loss="lmc_sds"), tiny_denoiser)

    def test_dds_needs_source(self, tiny_denoiser, shapes):
        with pytest.raises(ConfigError):
            run_edit(shapes.images[0], 1, DirectPixels(1, 32), replace(FAST, canvas=32, loss="dds"),
                     tiny_denoiser)

    def test_dds_edit_runs(self, tiny_denoiser, shapes):
        res = run_edit(shapes.images[0], 1, DirectPixels(1, 32),
                       replace(FAST, canvas=32, loss="dds"), tiny_denoiser, y_source=0)
        assert np.all(np.isfinite(res.image))

    def test_variants_n1_matches_edit(self, tiny_denoiser, tiny_corrective, shapes):
        cfg = replace(FAST, canvas=32, loss="lmc_sds")
        img = shapes.images[1]
        (v,) = run_variants(img, 2, 1, DirectPixels(1, 32), cfg, tiny_denoiser, tiny_corrective)
        e = run_edit(img, 2, DirectPixels(1, 32), replace(cfg, epsilon="fixed_cond_only"),
                     tiny_denoiser, tiny_corrective)
        assert np.array_equal(v.image, e.image)

    def test_variants_differ(self, tiny_denoiser, tiny_corrective, shapes):
        cfg = replace(FAST, canvas=32, loss="lmc_sds")
        vs = run_variants(shapes.images[1], 2, 2, DirectPixels(1, 32), cfg, tiny_denoiser,
                          tiny_corrective)
        assert not np.array_equal(vs[0].image, vs[1].image)
        with pytest.raises(ValidationError):
            run_variants(shapes.images[1], 2, 0, DirectPixels(1, 32), cfg, tiny_denoiser)

    def test_divergence(self):
        def nan_loss(views, t, ref=None):
            g = np.full_like(views, np.nan)
            return GradResult(g, {"proj": g})

        with pytest.raises(DivergenceError):
            run_synthesis(0, DirectPixels(1, 48), FAST, loss_fn=nan_loss)

    def test_snapshots(self):
        res = run_synthesis(0, DirectPixels(1, 48), replace(FAST, snapshot_every=4), loss_fn=zero_loss)
        assert [s for s, _ in res.snapshots] == [4, 8]
