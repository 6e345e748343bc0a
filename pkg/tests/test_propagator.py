"""Semigroup decomposition: bundle stations, the three parts, rate fits."""

import numpy as np
import pytest
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from blochstab.bloch import BlochField, apply_J, bloch_forward
from blochstab.fields import CoverFn, gaussian_bump
from blochstab.fixtures import (balanced_crossroll, conserved_crossroll,
                                scalar_heat)
from blochstab.profiles import solve_profile, wave_family
from blochstab.propagator import (FrequencyCutoff, TimeLayer,
                                  apply_S1, apply_S2, apply_full_semigroup,
                                  apply_s, build_bundle, load_bundle,
                                  measure_linear_rates, phase_advect,
                                  save_bundle)
from blochstab.propagator import _fit_series, _phase_probe
from blochstab.spectra import GramBreakdown


@pytest.fixture(scope="module")
def ccross_bundle():
    fx = conserved_crossroll()
    prof = solve_profile(fx.system, fx.reference_profile(6),
                         speed=fx.speed, masses=[0.0])
    return build_bundle(prof, 8, family=wave_family(prof), xi0=2.0)


@pytest.fixture(scope="module")
def balanced_bundle():
    fx = balanced_crossroll()
    prof = solve_profile(fx.system, fx.reference_profile(6),
                         speed=fx.speed, masses=[0.0])
    return build_bundle(prof, 16, family=wave_family(prof), xi0=2.0,
                        contour_radius=1.6)


@pytest.fixture(scope="module")
def heat_bundle():
    fx = scalar_heat()
    prof = solve_profile(fx.system, fx.reference_profile(6))
    return build_bundle(prof, 8, xi0=2.0)


def sparse_probe(bundle, rng, indices):
    """Real-symmetric Bloch stack supported on a few fibers and mirrors."""
    n = bundle.ncells
    nc = bundle.profile.n
    mc = bundle.profile.spec.m
    data = np.zeros((n, n, nc, mc, mc), dtype=complex)
    for k1, k2 in indices:
        blob = (rng.standard_normal((nc, mc, mc))
                + 1j * rng.standard_normal((nc, mc, mc)))
        data[k1 % n, k2 % n] = blob
        data[(-k1) % n, (-k2) % n] = np.conj(blob)
    return BlochField(bundle.cover, data)


def stack_norm(field):
    return float(np.sqrt(np.sum(np.abs(field.data) ** 2)))


def three_part_sum(bundle, t, gb):
    phase = apply_s(bundle, t, gb)
    total = apply_S1(bundle, t, gb).data + apply_S2(bundle, t, gb).data
    return BlochField(bundle.cover, total + phase_advect(bundle, phase).data)


class TestCutoffAndLayer:
    """Shape of the frequency cutoff and the time layer."""

    def test_cutoff_plateau_and_support(self):
        chi = FrequencyCutoff(2.0)
        assert chi(0.0) == 1.0
        assert chi(0.999) == 1.0
        assert chi(2.0) == 0.0
        assert chi(2.7) == 0.0
        mid = chi(np.linspace(1.1, 1.9, 30))
        assert np.all(np.diff(mid) < 0.0)
        assert np.all((mid > 0.0) & (mid < 1.0))

    def test_cutoff_flat_ends(self):
        # C-infinity matching: vanishing slope where the ramp meets 0 and 1
        chi = FrequencyCutoff(2.0)
        assert abs(chi(1.0 + 1e-4) - 1.0) < 1e-12
        assert chi(2.0 - 1e-4) < 1e-12

    def test_time_layer_window(self):
        lay = TimeLayer()
        assert lay(0.0) == 1.0 and lay(0.5) == 1.0 and lay(1.0) == 0.0
        ts = np.linspace(0.55, 0.95, 9)
        vals = np.array([lay(t) for t in ts])
        assert np.all(np.diff(vals) < 0.0)
        for t in ts:
            fd = (lay(t + 1e-6) - lay(t - 1e-6)) / 2e-6
            assert abs(fd - lay.derivative(t)) < 1e-5


class TestBundleBuild:
    """Station structure, floors, persistence, and failure modes."""

    def test_blocks_live_inside_cutoff(self, ccross_bundle):
        b = ccross_bundle
        ax = b.cover.floquet_axis()
        for (k1, k2), blk in b.blocks.items():
            rho = float(np.hypot(ax[k1], ax[k2]))
            assert 0.0 < rho < b.xi0
            assert abs(blk.rho - rho) < 1e-12
            assert abs(blk.chi - b.cutoff(rho)) < 1e-12

    def test_conjugate_partner_blocks(self, ccross_bundle):
        b = ccross_bundle
        n = b.ncells
        for (k1, k2), blk in b.blocks.items():
            partner = b.blocks[((n - k1) % n, (n - k2) % n)]
            assert np.allclose(partner.Delta, np.conj(blk.Delta), atol=1e-14)
            assert np.allclose(partner.basis_scaled, np.conj(blk.basis_scaled),
                               atol=1e-14)

    def test_zero_fiber_nilpotent_generator(self, ccross_bundle):
        # cluster generator at frequency zero: phases driven by the mass,
        # no other couplings survive, so its square vanishes
        d0 = ccross_bundle.zero.D0
        scale = np.max(np.abs(d0))
        assert np.max(np.abs(d0 @ d0)) < 1e-6 * scale

    def test_zero_fiber_mass_drives_phase_at_family_rate(self, ccross_bundle):
        # the conserved mean tilts the rotation rates: in cell coordinates
        # each phase column advances at mass_twist/(2 pi) per unit mean
        two_pi = 2.0 * np.pi
        d0 = ccross_bundle.zero.D0
        coup = np.abs(d0[:2, 2])
        assert abs(coup[0] - 0.5 / two_pi) < 1e-6
        assert abs(coup[1] - 0.4 / two_pi) < 1e-6

    def test_theta_prime_floor_frozen(self, ccross_bundle):
        # frozen from this build; positive and below the amplitude gap
        assert abs(ccross_bundle.theta_prime - 0.11354210) < 1e-6

    def test_degenerate_contour_raises(self):
        fx = conserved_crossroll()
        prof = solve_profile(fx.system, fx.reference_profile(6),
                             speed=fx.speed, masses=[0.0])
        with pytest.raises(GramBreakdown):
            build_bundle(prof, 8, family=wave_family(prof), xi0=2.0,
                         contour_radius=1e-3)

    def test_save_load_round_trip(self, ccross_bundle, tmp_path):
        save_bundle(tmp_path / "bb", ccross_bundle)
        back = load_bundle(tmp_path / "bb")
        assert back.ncells == ccross_bundle.ncells
        assert back.xi0 == ccross_bundle.xi0
        assert abs(back.theta_prime - ccross_bundle.theta_prime) < 1e-12
        assert set(back.blocks) == set(ccross_bundle.blocks)
        key = sorted(ccross_bundle.blocks)[1]
        assert np.allclose(back.blocks[key].Delta,
                           ccross_bundle.blocks[key].Delta, atol=1e-12)

    def test_heat_bundle_has_no_critical_cluster(self, heat_bundle):
        assert not heat_bundle.has_phase
        assert heat_bundle.zero is None
        assert heat_bundle.blocks == {}


class TestSemigroupParts:
    """Partition, reconstruction, commutation, and annihilation."""

    def test_partition_of_identity_at_zero(self, ccross_bundle, rng):
        gb = sparse_probe(ccross_bundle, rng, [(1, 0), (1, 2), (3, 3)])
        total = three_part_sum(ccross_bundle, 0.0, gb)
        err = np.max(np.abs(total.data - gb.data))
        assert err < 1e-10 * np.max(np.abs(gb.data))

    @pytest.mark.parametrize("t", [0.3, 1.0, 5.0, 20.0])
    def test_reconstruction_matches_full_semigroup(self, ccross_bundle, rng, t):
        gb = sparse_probe(ccross_bundle, rng, [(1, 0), (2, 2)])
        total = three_part_sum(ccross_bundle, t, gb)
        full = apply_full_semigroup(ccross_bundle, t, gb)
        err = stack_norm(BlochField(ccross_bundle.cover, total.data - full.data))
        assert err < 1e-8 * stack_norm(full)

    def test_full_semigroup_against_dense_exponential(self, ccross_bundle, rng):
        gb = sparse_probe(ccross_bundle, rng, [(2, 1)])
        out = apply_full_semigroup(ccross_bundle, 1.0, gb)
        v = gb.data[2, 1].reshape(-1)
        a = np.asarray(ccross_bundle.symbol((2, 1)).matrix, dtype=complex)
        ref = sla.expm(a) @ v
        err = np.linalg.norm(out.data[2, 1].reshape(-1) - ref)
        assert err < 1e-9 * np.linalg.norm(ref)

    def test_full_semigroup_against_stiff_integrator(self, ccross_bundle, rng):
        v = (rng.standard_normal(ccross_bundle.dim)
             + 1j * rng.standard_normal(ccross_bundle.dim))
        a = np.asarray(ccross_bundle.symbol((1, 1)).matrix, dtype=complex)
        sol = solve_ivp(lambda _, y: a @ y, (0.0, 0.5), v,
                        method="DOP853", rtol=1e-10, atol=1e-12)
        ref = sol.y[:, -1]
        out = ccross_bundle.propagate_fiber((1, 1), 0.5, v)
        assert np.linalg.norm(out - ref) < 1e-6 * np.linalg.norm(ref)

    def test_semigroup_property(self, ccross_bundle, rng):
        gb = sparse_probe(ccross_bundle, rng, [(1, 1), (0, 2)])
        one = apply_full_semigroup(ccross_bundle, 0.7, gb)
        two = apply_full_semigroup(ccross_bundle, 0.9, one)
        direct = apply_full_semigroup(ccross_bundle, 1.6, gb)
        err = stack_norm(BlochField(ccross_bundle.cover, two.data - direct.data))
        assert err < 1e-9 * stack_norm(direct)

    def test_identity_at_time_zero(self, ccross_bundle, rng):
        gb = sparse_probe(ccross_bundle, rng, [(1, 3)])
        out = apply_full_semigroup(ccross_bundle, 0.0, gb)
        assert np.max(np.abs(out.data - gb.data)) == 0.0

    def test_J_commutes_with_parts(self, ccross_bundle, rng):
        gb = sparse_probe(ccross_bundle, rng, [(1, 0), (2, 3)])
        gamma = (1, 0)
        for op in (apply_S2, apply_S1, apply_full_semigroup):
            left = apply_J(op(ccross_bundle, 1.3, gb), gamma)
            right = op(ccross_bundle, 1.3, apply_J(gb, gamma))
            err = np.max(np.abs(left.data - right.data))
            assert err < 1e-11 * max(np.max(np.abs(left.data)), 1e-30)

    def test_cutoff_annihilation_outside_support(self, ccross_bundle, rng):
        # fiber (4, 4) sits at rho ~ 4.44 > xi0: no phase, no critical part
        gb = sparse_probe(ccross_bundle, rng, [(4, 3)])
        assert stack_norm(apply_s(ccross_bundle, 0.7, gb)) == 0.0
        assert stack_norm(apply_S2(ccross_bundle, 0.7, gb)) == 0.0
        s1 = apply_S1(ccross_bundle, 0.7, gb)
        full = apply_full_semigroup(ccross_bundle, 0.7, gb)
        assert np.max(np.abs(s1.data - full.data)) < 1e-12 * np.max(np.abs(full.data))

    def test_negative_time_rejected(self, ccross_bundle, rng):
        gb = sparse_probe(ccross_bundle, rng, [(1, 0)])
        for op in (apply_s, apply_S1, apply_S2, apply_full_semigroup):
            with pytest.raises(ValueError):
                op(ccross_bundle, -0.5, gb)

    def test_real_cover_input_gives_real_output(self, ccross_bundle):
        g = gaussian_bump(ccross_bundle.cover, (3.3, 4.1), 0.7, 1.0)
        vals = np.concatenate([g.values] * ccross_bundle.profile.n)
        g = CoverFn(ccross_bundle.cover, vals)
        for op in (apply_S1, apply_S2, apply_full_semigroup):
            out = op(ccross_bundle, 0.8, g)
            assert isinstance(out, CoverFn)
            scale = np.max(np.abs(out.values)) + 1e-30
            assert np.max(np.abs(np.imag(out.values))) < 1e-11 * scale

    def test_scalar_heat_multiplier_closed_form(self, heat_bundle):
        g = gaussian_bump(heat_bundle.cover, (3.7, 4.4), 0.6, 1.0)
        t = 0.9
        out = apply_full_semigroup(heat_bundle, t, g)
        nm = heat_bundle.ncells * heat_bundle.profile.spec.m
        freq = 2.0 * np.pi * np.fft.fftfreq(nm, d=1.0 / heat_bundle.profile.spec.m)
        mult = np.exp(-t * (freq[:, None] ** 2 + freq[None, :] ** 2))
        ref = np.real(np.fft.ifft2(mult * np.fft.fft2(g.values[0])))
        assert np.max(np.abs(out.values[0] - ref)) < 1e-9 * np.max(np.abs(ref))

    def test_heat_damped_part_is_everything(self, heat_bundle):
        g = gaussian_bump(heat_bundle.cover, (2.5, 5.5), 0.8, -0.7)
        s1 = apply_S1(heat_bundle, 0.6, g)
        full = apply_full_semigroup(heat_bundle, 0.6, g)
        assert np.max(np.abs(s1.values - full.values)) < 1e-12
        assert stack_norm(apply_S2(heat_bundle, 0.6, bloch_forward(g))) == 0.0


class TestPhaseCoupling:
    """Phase advection and the short-time phase identity."""

    def test_phase_advect_pointwise(self, ccross_bundle, rng):
        cover = ccross_bundle.cover
        n = ccross_bundle.ncells
        phi = CoverFn(cover, np.stack([
            gaussian_bump(cover, (3.0, 3.0), 1.0, 0.8).values[0],
            gaussian_bump(cover, (5.0, 4.0), 1.2, -0.5).values[0],
        ]))
        out = phase_advect(ccross_bundle, phi)
        ref = np.zeros_like(out.values)
        for a in range(2):
            tiled = np.tile(ccross_bundle.translations[a], (1, n, n))
            ref += phi.values[a][None] * tiled
        assert np.max(np.abs(out.values - ref)) < 1e-13 * np.max(np.abs(ref))

    def test_phase_advect_bloch_route_matches_cover_route(self, ccross_bundle):
        cover = ccross_bundle.cover
        phi = CoverFn(cover, np.stack([
            gaussian_bump(cover, (4.0, 3.5), 0.9, 1.0).values[0],
            gaussian_bump(cover, (3.5, 4.5), 1.1, 0.6).values[0],
        ]))
        direct = bloch_forward(phase_advect(ccross_bundle, phi))
        via_bloch = phase_advect(ccross_bundle, bloch_forward(phi))
        assert np.max(np.abs(direct.data - via_bloch.data)) < 1e-11

    def test_short_time_phase_identity(self, balanced_bundle):
        # s(0)[(phi.grad)Ubar] recovers phi up to the cutoff truncation
        rng = np.random.default_rng(7)
        phib = _phase_probe(balanced_bundle, rng, "critical")
        g = phase_advect(balanced_bundle, phib)
        s0 = apply_s(balanced_bundle, 0.0, g)
        diff = s0.data - phib.data
        rel = np.sqrt(np.sum(np.abs(diff) ** 2) / np.sum(np.abs(phib.data) ** 2))
        assert rel < 0.02

    def test_heat_has_no_phase_part(self, heat_bundle):
        g = gaussian_bump(heat_bundle.cover, (4.0, 4.0), 0.7, 1.0)
        assert stack_norm(apply_s(heat_bundle, 0.5, bloch_forward(g))) == 0.0
        phi = CoverFn(heat_bundle.cover, np.concatenate([g.values, g.values]))
        assert np.max(np.abs(phase_advect(heat_bundle, phi).values)) == 0.0


class TestRateFitting:
    """The fit kernel and the rate harness on synthetic and small covers."""

    def test_fit_recovers_power_law(self):
        ts = np.geomspace(1.0, 200.0, 40)
        ys = 3.0 * (1.0 + ts) ** -0.7
        slope, ci, sat = _fit_series(ts, ys, (10.0, 200.0), "loglog")
        assert not sat
        assert abs(slope + 0.7) < 1e-9
        assert ci < 1e-9

    def test_fit_recovers_exponential_rate(self):
        ts = np.linspace(0.0, 80.0, 60)
        ys = 0.5 * np.exp(-0.31 * ts)
        slope, _, sat = _fit_series(ts, ys, (10.0, 80.0), "explinear")
        assert not sat
        assert abs(slope + 0.31) < 1e-9

    def test_fit_marks_saturated_series(self):
        ts = np.geomspace(1.0, 200.0, 30)
        ys = np.full_like(ts, 1e-18)
        ys[0] = 1.0
        slope, _, sat = _fit_series(ts, ys, (10.0, 200.0), "loglog")
        assert sat and np.isnan(slope)

    def test_fit_excludes_saturation_decade(self):
        # clean decay then a rounding floor from t = 60 on; the fit must
        # not see the flat tail
        ts = np.geomspace(1.0, 200.0, 60)
        ys = (1.0 + ts) ** -1.0
        ys[ts >= 60.0] = 1e-17
        slope, _, sat = _fit_series(ts, ys, (1.0, 200.0), "loglog")
        assert not sat
        assert abs(slope + 1.0) < 0.02

    def test_rate_table_layout_and_determinism(self, balanced_bundle):
        kwargs = dict(preset="critical", probes=2, seed=3,
                      t_grid=np.geomspace(0.5, 30.0, 12),
                      fit_window=(5.0, 30.0))
        table = measure_linear_rates(balanced_bundle, **kwargs)
        again = measure_linear_rates(balanced_bundle, **kwargs)
        assert table.to_csv() == again.to_csv()
        ops = [(r.operator, r.probe, r.norm) for r in table.rows]
        assert ("S2", "general", "l2") in ops
        assert ("S2", "first-r-vanishing", "l2") in ops
        assert ("s", "phase-critical", "l4") in ops
        assert ("s0-defect", "phase-critical", "l2") in ops
        header = table.to_csv().splitlines()[0].split(",")
        assert header[:6] == ["operator", "norm", "alpha", "gamma", "q", "p"]

    def test_small_cover_slopes_are_diffusive(self, balanced_bundle):
        # coarse cover: the algebraic window closes early, so fit on [4, 28];
        # the harness should still see diffusive decay within a wide band
        table = measure_linear_rates(
            balanced_bundle, preset="critical", probes=2, seed=1,
            t_grid=np.geomspace(0.5, 28.0, 14), fit_window=(4.0, 28.0))
        s2 = table.row("S2", "general")
        assert not s2.saturated
        assert abs(s2.fitted - (-0.5)) < 0.3
        s1 = table.row("S1", "general")
        assert s1.fitted <= -0.5 * balanced_bundle.theta_prime + 0.02

    def test_unknown_preset_rejected(self, balanced_bundle):
        with pytest.raises(ValueError):
            measure_linear_rates(balanced_bundle, preset="bogus")
