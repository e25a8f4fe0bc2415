import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmcsds.diffusion import VarianceSchedule
from lmcsds.errors import ConfigError, ValidationError
from lmcsds.losses import (
    EpsilonPolicy,
    DiagnosticsWriter,
    LossConfig,
    compute,
    grad_cond,
    grad_dds,
    grad_lmc,
    grad_lmc_sds,
    grad_mssds,
    grad_proj,
    grad_proj_x0,
    grad_sds,
    multistep_x0,
)
from stubs import OracleDenoiser, TableDenoiser

RAW = LossConfig(rescale_by_inv_omega=False)
SHAPE = (1, 6, 6)


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


class PassThrough:
    """Corrective whose normalised output is the reference itself."""

    mean_mode = "own"

    def apply(self, z, t, ref):
        return np.array(ref, copy=True)


class ShiftCorrective:
    mean_mode = "own"

    def apply(self, z, t, ref):
        return np.asarray(z) * 0.5


def table(rng, shape=SHAPE):
    ec, eu = rng.standard_normal((2,) + shape)
    return TableDenoiser(ec, eu), ec, eu


class TestSds:
    def test_formula(self, rng):
        d, ec, eu = table(rng)
        z, e = rng.uniform(-1, 1, SHAPE), rng.standard_normal(SHAPE)
        t, w = 0.4, 7.5
        a = d.schedule.alpha_bar(t)
        r = grad_sds(d, z, 1, t, LossConfig(omega=w, rescale_by_inv_omega=False), eps=e)
        want = w * (ec - eu) * np.sqrt(a) + (eu - e) * np.sqrt(a)
        assert rel(r.grad, want) < 1e-12
        assert rel(r.component_sum(), r.grad) < 1e-12

    def test_oracle_zero(self, rng):
        z = rng.uniform(-1, 1, SHAPE)
        d = OracleDenoiser(z)
        r = grad_sds(d, z, 0, 0.5, RAW, eps=rng.standard_normal(SHAPE))
        assert np.max(np.abs(r.grad)) < 1e-12

    def test_omega_one(self, rng):
        d, ec, eu = table(rng)
        r = grad_sds(d, np.zeros(SHAPE), 2, 0.3, LossConfig(omega=1.0), eps=np.zeros(SHAPE))
        a = d.schedule.alpha_bar(0.3)
        assert np.allclose(r.components["cond"], (ec - eu) * np.sqrt(a), atol=1e-14)

    def test_rescale(self, rng):
        d, _, _ = table(rng)
        e = rng.standard_normal(SHAPE)
        a = grad_sds(d, np.zeros(SHAPE), 0, 0.5, LossConfig(omega=8.0), eps=e).grad
        b = grad_sds(d, np.zeros(SHAPE), 0, 0.5, RAW.__class__(omega=8.0, rescale_by_inv_omega=False),
                     eps=e).grad
        assert np.linalg.norm(a) == pytest.approx(np.linalg.norm(b) / 8, rel=1e-12)

    def test_batched_t(self, rng):
        d, _, _ = table(rng)
        z = rng.uniform(-1, 1, (3,) + SHAPE)
        e = rng.standard_normal(z.shape)
        t = np.array([0.1, 0.5, 0.9])
        r = grad_sds(d, z, [0, 1, 2], t, RAW, eps=e)
        for i in range(3):
            ri = grad_sds(d, z[i], [0, 1, 2][i], t[i], RAW, eps=e[i])
            assert np.allclose(r.grad[i], ri.grad)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(1.0, 30.0), st.floats(0.0, 1.0))
    def test_decomposition_property(self, seed, w, t):
        rng = np.random.default_rng(seed)
        d, _, _ = table(rng)
        r = grad_sds(d, rng.uniform(-1, 1, SHAPE), 0, t, LossConfig(omega=w), eps=rng.standard_normal(SHAPE))
        assert rel(r.grad, r.components["cond"] + r.components["proj"]) <= 1e-6

    def test_decomposition_real_net(self, tiny_denoiser, rng):
        for _ in range(10):
            z = rng.uniform(-1, 1, (1, 32, 32))
            r = grad_sds(tiny_denoiser, z, 1, rng.uniform(0.02, 0.98),
                         LossConfig(omega=rng.uniform(1, 20)), eps=rng.standard_normal(z.shape))
            assert rel(r.grad, r.component_sum()) <= 1e-6


class TestCondProj:
    def test_null_label_zero(self, tiny_denoiser, rng):
        r = grad_cond(tiny_denoiser, rng.uniform(-1, 1, (1, 32, 32)), None, 0.5, RAW,
                      eps=rng.standard_normal((1, 32, 32)))
        assert np.all(r.grad == 0.0)

    def test_linear_in_omega(self, rng):
        d, _, _ = table(rng)
        e = rng.standard_normal(SHAPE)
        g1 = grad_cond(d, np.zeros(SHAPE), 1, 0.5, LossConfig(omega=3.0), eps=e).grad
        g2 = grad_cond(d, np.zeros(SHAPE), 1, 0.5, LossConfig(omega=6.0), eps=e).grad
        assert np.array_equal(g2, 2 * g1)

    def test_proj_omega_independent(self, rng):
        d, _, _ = table(rng)
        e = rng.standard_normal(SHAPE)
        a = grad_proj(d, np.zeros(SHAPE), 1, 0.5, LossConfig(omega=3.0), eps=e).grad
        b = grad_proj(d, np.zeros(SHAPE), 2, 0.5, LossConfig(omega=9.0), eps=e).grad
        assert np.array_equal(a, b)

    def test_scalar_example(self):
        d = TableDenoiser(np.full((1, 1, 1), 0.2), np.full((1, 1, 1), 0.2),
                          schedule=VarianceSchedule(np.array([0.25, 0.25])))
        z, e = np.full((1, 1, 1), 0.8), np.full((1, 1, 1), 0.1)
        cfg = LossConfig(drop_proj_weight=False)
        p = grad_proj(d, z, None, 0.5, cfg, eps=e).grad.item()
        x0 = grad_proj_x0(d, z, None, 0.5, cfg, eps=e)
        assert p / 0.5 == pytest.approx(0.1, abs=1e-12)
        assert x0.extras["xhat"].item() == pytest.approx(0.6267949192, abs=1e-9)
        assert x0.grad.item() == pytest.approx(p, rel=1e-12)

    def test_x0_form_equivalence(self, tiny_denoiser, rng):
        cfg = LossConfig(drop_proj_weight=False)
        for t in (0.05, 0.3, 0.6, 0.95):
            z = rng.uniform(-1, 1, (2, 1, 32, 32))
            e = rng.standard_normal(z.shape)
            a = grad_proj(tiny_denoiser, z, None, t, cfg, eps=e).grad
            b = grad_proj_x0(tiny_denoiser, z, None, t, cfg, eps=e).grad
            assert rel(a, b) <= 1e-5

    def test_oracle_both_zero(self, rng):
        z = rng.uniform(-1, 1, SHAPE)
        d = OracleDenoiser(z)
        e = rng.standard_normal(SHAPE)
        cfg = LossConfig(drop_proj_weight=False)
        assert np.max(np.abs(grad_proj(d, z, None, 0.4, cfg, eps=e).grad)) < 1e-12
        assert np.max(np.abs(grad_proj_x0(d, z, None, 0.4, cfg, eps=e).grad)) < 1e-12

    def test_drop_weight_toggle(self, tiny_denoiser, rng):
        z = rng.uniform(-1, 1, (1, 32, 32))
        e = rng.standard_normal(z.shape)
        a = tiny_denoiser.schedule.alpha_bar(0.3)
        r = grad_proj_x0(tiny_denoiser, z, None, 0.3, LossConfig(drop_proj_weight=True), eps=e)
        assert r.diagnostics["proj_weight_dropped"] is True
        assert np.allclose(r.grad, (z - r.extras["xhat"]) * np.sqrt(a), atol=1e-12)
        p = grad_proj(tiny_denoiser, z, None, 0.3, eps=e).grad
        assert rel(r.grad, p) > 1e-3


class TestLmc:
    def test_needs_corrective(self, rng):
        d, _, _ = table(rng)
        with pytest.raises(ConfigError):
            grad_lmc(d, np.zeros(SHAPE), 0, 0.5, eps=np.zeros(SHAPE))
        with pytest.raises(ConfigError):
            grad_lmc_sds(d, np.zeros(SHAPE), 0, 0.5, eps=np.zeros(SHAPE))

    def test_pass_through_zero(self, rng):
        d, _, _ = table(rng)
        r = grad_lmc(d, rng.uniform(-1, 1, SHAPE), 0, 0.5, eps=rng.standard_normal(SHAPE),
                     corrective=PassThrough())
        assert np.all(r.grad == 0.0)

    def test_formula(self, rng):
        d, _, eu = table(rng)
        z, e = rng.uniform(-1, 1, SHAPE), rng.standard_normal(SHAPE)
        a = d.schedule.alpha_bar(0.5)
        xhat = (np.sqrt(a) * z + np.sqrt(1 - a) * e - np.sqrt(1 - a) * eu) / np.sqrt(a)
        r = grad_lmc(d, z, 0, 0.5, eps=e, corrective=ShiftCorrective())
        assert np.allclose(r.grad, (0.5 * z - xhat) * np.sqrt(a), atol=1e-12)

    def test_lmc_sds_components(self, tiny_denoiser, tiny_corrective, rng):
        z = rng.uniform(-1, 1, (2, 1, 32, 32))
        e = rng.standard_normal(z.shape)
        scaled = grad_lmc_sds(tiny_denoiser, z, 1, 0.5, LossConfig(omega=8.0), eps=e,
                              corrective=tiny_corrective)
        raw = grad_lmc_sds(tiny_denoiser, z, 1, 0.5, LossConfig(omega=8.0, rescale_by_inv_omega=False),
                           eps=e, corrective=tiny_corrective)
        assert rel(scaled.grad, scaled.component_sum()) <= 1e-6
        assert np.linalg.norm(scaled.grad) == pytest.approx(np.linalg.norm(raw.grad) / 8, rel=1e-9)
        assert set(scaled.components) == {"cond", "lmc"}

    def test_fixed_cond_only(self, tiny_denoiser, tiny_corrective, rng):
        z = rng.uniform(-1, 1, (1, 32, 32))
        pol = EpsilonPolicy("fixed_cond_only", seed=3)
        r1 = grad_lmc_sds(tiny_denoiser, z, 1, 0.5, policy=pol, corrective=tiny_corrective)
        r2 = grad_lmc_sds(tiny_denoiser, z, 1, 0.5, policy=pol, corrective=tiny_corrective)
        assert np.array_equal(r1.components["cond"], r2.components["cond"])
        assert not np.allclose(r1.components["lmc"], r2.components["lmc"])
        assert r1.diagnostics["shared_noise"] is False

    def test_fixed_cond_only_seeds(self, tiny_denoiser, tiny_corrective, rng):
        z = rng.uniform(-1, 1, (1, 32, 32))
        a = grad_lmc_sds(tiny_denoiser, z, 1, 0.5, policy=EpsilonPolicy("fixed_cond_only", 3),
                         corrective=tiny_corrective)
        b = grad_lmc_sds(tiny_denoiser, z, 1, 0.5, policy=EpsilonPolicy("fixed_cond_only", 3),
                         corrective=tiny_corrective)
        c = grad_lmc_sds(tiny_denoiser, z, 1, 0.5, policy=EpsilonPolicy("fixed_cond_only", 4),
                         corrective=tiny_corrective)
        assert np.array_equal(a.grad, b.grad)
        assert not np.allclose(a.components["cond"], c.components["cond"])


class TestPolicies:
    def test_fixed_identical(self, tiny_denoiser, rng):
        z = rng.uniform(-1, 1, (1, 32, 32))
        pol = EpsilonPolicy("fixed", 0)
        assert np.array_equal(grad_sds(tiny_denoiser, z, 0, 0.5, policy=pol).grad,
                              grad_sds(tiny_denoiser, z, 0, 0.5, policy=pol).grad)

    def test_resample_differs(self, tiny_denoiser, rng):
        z = rng.uniform(-1, 1, (1, 32, 32))
        pol = EpsilonPolicy("resample", 0)
        a = grad_sds(tiny_denoiser, z, 0, 0.5, policy=pol)
        b = grad_sds(tiny_denoiser, z, 0, 0.5, policy=pol)
        assert not np.allclose(a.components["cond"], b.components["cond"])

    def test_fixed_broadcast_and_shape_guard(self):
        pol = EpsilonPolicy("fixed", 0)
        e, _ = pol.draw((3, 1, 4, 4))
        assert np.array_equal(e[0], e[2])
        with pytest.raises(ValidationError):
            pol.draw((1, 1, 5, 5))

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            EpsilonPolicy("sometimes")

    def test_missing_noise(self, rng):
        d, _, _ = table(rng)
        with pytest.raises(ValidationError):
            grad_sds(d, np.zeros(SHAPE), 0, 0.5)


class TestDds:
    def test_identical_terms_cancel(self, tiny_denoiser, rng):
        z = rng.uniform(-1, 1, (1, 32, 32))
        r = grad_dds(tiny_denoiser, z, z, 2, 2, 0.5, eps=rng.standard_normal(z.shape))
        assert np.max(np.abs(r.grad)) == 0.0

    def test_proj_noise_cancels(self, tiny_denoiser, rng):
        z, zr = rng.uniform(-1, 1, (2, 1, 32, 32))
        for _ in range(5):
            r = grad_dds(tiny_denoiser, z, zr, 1, 0, rng.uniform(0.02, 0.98), RAW,
                         eps=rng.standard_normal(z.shape))
            assert r.diagnostics["proj_noise_residual"] < 1e-6
            assert rel(r.grad, r.components["pos"] + r.components["neg"]) < 1e-6

    def test_proj_cancels_at_start(self, tiny_denoiser, rng):
        z = rng.uniform(-1, 1, (1, 32, 32))
        r = grad_dds(tiny_denoiser, z, z, 1, 0, 0.5, eps=rng.standard_normal(z.shape))
        assert np.linalg.norm(r.extras["pos_proj"] + (-r.extras["neg_proj"])) < 1e-6
        assert r.diagnostics["proj_delta_norm"] < 1e-6

    def test_needs_reference(self, tiny_denoiser):
        with pytest.raises(ConfigError):
            grad_dds(tiny_denoiser, np.zeros((1, 32, 32)), None, 0, 1, 0.5, eps=np.zeros((1, 32, 32)))
        with pytest.raises(ConfigError):
            compute("dds", tiny_denoiser, np.zeros((1, 32, 32)), 0, 0.5, LossConfig(),
                    eps=np.zeros((1, 32, 32)))


class TestMsSds:
    def test_k1_reduces(self, tiny_denoiser, rng):
        for drop in (True, False):
            cfg = LossConfig(drop_proj_weight=drop)
            z = rng.uniform(-1, 1, (2, 1, 32, 32))
            e = rng.standard_normal(z.shape)
            ms = grad_mssds(tiny_denoiser, z, 1, 0.6, cfg, k=1, eps=e)
            x0 = grad_proj_x0(tiny_denoiser, z, 1, 0.6, cfg, eps=e)
            assert rel(ms.components["proj"], x0.grad * cfg.scale) <= 1e-6

    def test_bad_k(self, tiny_denoiser):
        with pytest.raises(ValidationError):
            multistep_x0(tiny_denoiser, np.zeros((1, 1, 32, 32)), 0.5, 0)
        with pytest.raises(ConfigError):
            LossConfig(mssds_k=0)

    def test_multistep_changes_estimate(self, tiny_denoiser, rng):
        z_t = rng.standard_normal((1, 1, 32, 32))
        assert not np.allclose(multistep_x0(tiny_denoiser, z_t, 0.8, 1),
                               multistep_x0(tiny_denoiser, z_t, 0.8, 3))


class TestDispatch:
    def test_unknown(self, tiny_denoiser):
        with pytest.raises(ConfigError):
            compute("nope", tiny_denoiser, np.zeros((1, 32, 32)), 0, 0.5, LossConfig())

    @pytest.mark.parametrize("kind", ["sds", "cond", "proj", "mssds", "lmc", "lmc_sds"])
    def test_kinds(self, kind, tiny_denoiser, tiny_corrective, rng):
        z = rng.uniform(-1, 1, (2, 1, 32, 32))
        r = compute(kind, tiny_denoiser, z, 1, 0.5, LossConfig(mssds_k=2),
                    policy=EpsilonPolicy("resample", 0), corrective=tiny_corrective)
        assert r.grad.shape == z.shape and np.all(np.isfinite(r.grad))
        assert all(f"norm_{k}" in r.diagnostics for k in r.components)

    def test_diagnostics_csv(self, tiny_denoiser, rng, tmp_path):
        with DiagnosticsWriter(tmp_path / "d.csv") as w:
            for step in range(3):
                w.write(step, grad_sds(tiny_denoiser, rng.uniform(-1, 1, (1, 32, 32)), 0, 0.5,
                                       eps=rng.standard_normal((1, 32, 32))))
        rows = list(csv.DictReader(open(tmp_path / "d.csv")))
        assert len(rows) == 3 and float(rows[0]["norm_cond"]) > 0
