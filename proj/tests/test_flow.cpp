#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "ibs/flow_engine.hpp"
#include "test_util.hpp"

using namespace ibs;
using ibs_test::companion_surface;
using ibs_test::theta_bump;

namespace {

struct Fixture {
    const SurfaceSM& s = companion_surface();
    GridSM g;
    Fft3 fft;
    SpectralTablesSM tab;
    GlueTablesSM glue;
    Fixture(int n = 8, int S = 9)
        : g(make_grid_sm(companion_surface(), n, S)),
          fft(n),
          tab(make_spectral_tables(companion_surface(), n)),
          glue(make_glue_tables(companion_surface(), n)) {}
};

// homogeneous reference family a*alpha + b*beta in coordinates
CoordinateMetricField family_coord(const GridSM& g, double a, double b) {
    CoordinateMetricField m;
    m.gzz.resize(g.total());
    m.gww.resize(g.total());
    m.gzw.assign(g.total(), cplx(0, 0));
    const std::size_t N = g.per_slice();
    for (int j = 0; j < g.S; ++j) {
        double y2 = g.y2[j];
        std::fill_n(m.gzz.begin() + std::size_t(j) * N, N, b * y2);
        std::fill_n(m.gww.begin() + std::size_t(j) * N, N, a / (4.0 * y2 * y2));
    }
    return m;
}

HermitianMetricField family_frame(const GridSM& g, double a, double b) {
    HermitianMetricField f;
    f.r.assign(g.total(), b);
    f.s.assign(g.total(), a / 4.0);
    f.u.assign(g.total(), cplx(0, 0));
    return f;
}

// seam-compatible band-limited potential (theta-bump times fiber cosines)
std::vector<double> test_potential(const Fixture& fx, double amp, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const auto& g = fx.g;
    std::vector<double> psi(g.total(), 0.0);
    for (int mode = 0; mode < 3; ++mode) {
        int k1 = int(unif(rng) * 3) - 1, k2 = int(unif(rng) * 3) - 1,
            k3 = int(unif(rng) * 3) - 1;
        if (k1 == 0 && k2 == 0 && k3 == 0) k1 = 1;
        double phase = 2.0 * M_PI * unif(rng);
        double scale = 0.5 + unif(rng);
        std::size_t idx = 0;
        for (int j = 0; j < g.S; ++j) {
            double prof = amp * scale * theta_bump(g.theta[j] / std::log(g.Lambda));
            for (int i1 = 0; i1 < g.n; ++i1)
                for (int i2 = 0; i2 < g.n; ++i2)
                    for (int i3 = 0; i3 < g.n; ++i3, ++idx)
                        psi[idx] += prof * std::cos(2.0 * M_PI *
                                        (k1 * i1 + k2 * i2 + k3 * i3) / double(g.n) +
                                        phase);
        }
    }
    return psi;
}

double family_flow_error(const Fixture& fx, double t_end, double dt) {
    FlowOptions opt;
    opt.t_end = t_end;
    opt.dt = dt;
    opt.sample_interval = 1000000;  // endpoints only
    opt.track_curvature = false;
    auto tr = ncrf_run(fx.s, fx.g, omega_tv_frame(fx.g), fx.fft, fx.tab,
                       fx.glue, opt);
    const double a = 1.0 + 3.0 * std::exp(-t_end), b = std::exp(-t_end);
    double err = 0;
    for (std::size_t i = 0; i < fx.g.total(); ++i) {
        err = std::max(err, std::abs(tr.final_metric.r[i] - b));
        err = std::max(err, std::abs(tr.final_metric.s[i] - a / 4.0));
        err = std::max(err, std::abs(tr.final_metric.u[i]));
    }
    return err;
}

} // namespace

TEST_CASE("chern_ricci_form: -alpha on the reference family, scale invariant") {
    Fixture fx;
    auto tv = frame_to_coord_sm(fx.g, omega_tv_frame(fx.g));
    auto ric = chern_ricci_form(fx.s, fx.g, tv, fx.fft, fx.tab, fx.glue);
    const std::size_t N = fx.g.per_slice();
    double err = 0;
    for (int j = 0; j < fx.g.S; ++j) {
        double aww = -1.0 / (4.0 * fx.g.y2[j] * fx.g.y2[j]);
        for (std::size_t i = std::size_t(j) * N; i < std::size_t(j + 1) * N; ++i) {
            err = std::max(err, std::abs(ric.gzz[i]));
            err = std::max(err, std::abs(ric.gww[i] - aww));
            err = std::max(err, std::abs(ric.gzw[i]));
        }
    }
    CHECK(err <= 1e-8);   // observed ~1e-14: the theta-profile is exactly linear

    // constant conformal scaling leaves the Ricci form unchanged
    auto scaled = tv;
    for (auto& v : scaled.gzz) v *= 3.7;
    for (auto& v : scaled.gww) v *= 3.7;
    for (auto& v : scaled.gzw) v *= 3.7;
    auto ric2 = chern_ricci_form(fx.s, fx.g, scaled, fx.fft, fx.tab, fx.glue);
    double diff = 0;
    for (std::size_t i = 0; i < fx.g.total(); ++i) {
        diff = std::max(diff, std::abs(ric2.gzz[i] - ric.gzz[i]));
        diff = std::max(diff, std::abs(ric2.gww[i] - ric.gww[i]));
        diff = std::max(diff, std::abs(ric2.gzw[i] - ric.gzw[i]));
    }
    CHECK(diff <= 1e-12);

    // whole family a*alpha + b*beta maps to -alpha
    auto fam = family_coord(fx.g, 2.5, 0.7);
    auto ric3 = chern_ricci_form(fx.s, fx.g, fam, fx.fft, fx.tab, fx.glue);
    err = 0;
    for (int j = 0; j < fx.g.S; ++j) {
        double aww = -1.0 / (4.0 * fx.g.y2[j] * fx.g.y2[j]);
        for (std::size_t i = std::size_t(j) * N; i < std::size_t(j + 1) * N; ++i) {
            err = std::max(err, std::abs(ric3.gzz[i]));
            err = std::max(err, std::abs(ric3.gww[i] - aww));
            err = std::max(err, std::abs(ric3.gzw[i]));
        }
    }
    CHECK(err <= 1e-10);

    // degenerate input is rejected
    auto bad = tv;
    bad.gzz[5] = 0.0;
    CHECK_THROWS_AS(chern_ricci_form(fx.s, fx.g, bad, fx.fft, fx.tab, fx.glue),
                    NotPositive);
    bad.gzz.pop_back();
    CHECK_THROWS_AS(chern_ricci_form(fx.s, fx.g, bad, fx.fft, fx.tab, fx.glue),
                    ShapeMismatch);
}

TEST_CASE("frozen linearization solve: residual of (I - gd L) dg = r") {
    Fixture fx;
    const auto& g = fx.g;
    const std::size_t N = g.per_slice();
    const int Su = g.S - 1;

    // background: perturbed omega_TV (its fiber-mean gzw vanishes, so the
    // frozen inverse has B21 = 0 on every slice)
    auto psi = test_potential(fx, 5e-4, 7);
    auto back = frame_to_coord_sm(
        g, metric_from_potential(fx.s, g, psi, fx.fft, fx.tab, fx.glue));
    auto B = detail::frozen_inverse(g, back);
    auto chains = detail::make_spectral_chains(fx.s, g);
    const double gd = 0.85 * 2e-3;  // gamma * dt scale used by the flow
    auto fac = detail::factor_stiff(g, fx.tab, chains, B, gd);

    // right-hand side: a homogeneous part plus a scaled band-limited bump
    auto psir = test_potential(fx, 5e-4, 11);
    auto rf = frame_to_coord_sm(
        g, metric_from_potential(fx.s, g, psir, fx.fft, fx.tab, fx.glue));
    auto tv = frame_to_coord_sm(g, omega_tv_frame(g));
    auto fam = family_coord(g, 0.4, 0.15);
    CoordinateMetricField r = fam;
    for (std::size_t i = 0; i < g.total(); ++i) {
        r.gzz[i] += 10.0 * (rf.gzz[i] - tv.gzz[i]);
        r.gww[i] += 10.0 * (rf.gww[i] - tv.gww[i]);
        r.gzw[i] += 10.0 * (rf.gzw[i] - tv.gzw[i]);
    }

    CoordinateMetricField dg = r;
    detail::linear_stage_solve(g, fx.fft, fx.tab, chains, B, fac, gd, r, dg);

    // independent residual check: recompute phi = tr(B dg) in physical
    // space, fill theta ghosts by physical seam transport of the scalar,
    // and apply the del-delbar reconstruction operators slice by slice
    std::vector<double> phi(std::size_t(Su) * N);
    for (int j = 0; j < Su; ++j)
        for (std::size_t i = 0; i < N; ++i) {
            std::size_t gi = std::size_t(j) * N + i;
            phi[gi] = B.B11[j] * dg.gzz[gi] +
                      2.0 * (B.B21[j] * dg.gzw[gi]).real() +
                      B.B22[j] * dg.gww[gi];
        }
    auto slice_hat = [&](int j) {
        std::vector<cplx> h(N);
        if (j == -1)
            for (std::size_t i = 0; i < N; ++i)
                h[i] = phi[std::size_t(Su - 1) * N + fx.glue.perm_dn[i]];
        else if (j == Su)
            for (std::size_t i = 0; i < N; ++i) h[i] = phi[fx.glue.perm_up[i]];
        else
            for (std::size_t i = 0; i < N; ++i)
                h[i] = phi[std::size_t(j) * N + i];
        fx.fft.forward(h.data());
        return h;
    };
    double err = 0;
    std::vector<cplx> prev = slice_hat(-1), cur = slice_hat(0), next;
    std::vector<cplx> bzz(N), bww(N), bzw(N);
    for (int j = 0; j < Su; ++j) {
        next = slice_hat(j + 1);
        const double y2 = g.y2[j], h = g.h;
        for (std::size_t i = 0; i < N; ++i) {
            cplx dth = (next[i] - prev[i]) / (2.0 * h);
            cplx dth2 = (next[i] - 2.0 * cur[i] + prev[i]) / (h * h);
            bzz[i] = -M_PI * M_PI * fx.tab.zk[i] * cur[i];
            bww[i] = -M_PI * M_PI * fx.tab.kC[i] * fx.tab.kC[i] * cur[i] +
                     (dth2 - dth) / (4.0 * y2 * y2);
            cplx mz(M_PI * fx.tab.kB[i], M_PI * fx.tab.kA[i]);
            cplx mw(0, M_PI * fx.tab.kC[i]);
            bzw[i] = mz * (mw * cur[i] + cplx(0, 0.5) * dth / y2);
        }
        fx.fft.inverse(bzz.data());
        fx.fft.inverse(bww.data());
        fx.fft.inverse(bzw.data());
        for (std::size_t i = 0; i < N; ++i) {
            std::size_t gi = std::size_t(j) * N + i;
            err = std::max(err, std::abs((1.0 + gd) * dg.gzz[gi] -
                                         gd * bzz[i].real() - r.gzz[gi]));
            err = std::max(err, std::abs((1.0 + gd) * dg.gww[gi] -
                                         gd * bww[i].real() - r.gww[gi]));
            err = std::max(err, std::abs((1.0 + gd) * dg.gzw[gi] - gd * bzw[i] -
                                         r.gzw[gi]));
        }
        prev.swap(cur);
        cur.swap(next);
    }
    CHECK(err <= 1e-10);

    // on fiber-constant input the scalar correction vanishes slice-wise
    // only when tr(B r) is theta-independent; with a large gd the solve
    // must still reproduce the plain damped identity for zero rhs
    CoordinateMetricField zero;
    zero.gzz.assign(g.total(), 0.0);
    zero.gww.assign(g.total(), 0.0);
    zero.gzw.assign(g.total(), cplx(0, 0));
    CoordinateMetricField out = zero;
    detail::linear_stage_solve(g, fx.fft, fx.tab, chains, B, fac, gd, zero, out);
    double z = 0;
    for (std::size_t i = 0; i < std::size_t(Su) * N; ++i)
        z = std::max({z, std::abs(out.gzz[i]), std::abs(out.gww[i]),
                      std::abs(out.gzw[i])});
    CHECK(z <= 1e-14);
}

TEST_CASE("flow from omega_TV follows the closed-form family") {
    Fixture fx;
    FlowOptions opt;
    opt.t_end = 1.0;
    opt.dt = 2e-3;
    opt.sample_interval = 50;
    opt.curvature_interval = 125;
    opt.track_stretch = true;
    auto tr = ncrf_run(fx.s, fx.g, omega_tv_frame(fx.g), fx.fft, fx.tab,
                       fx.glue, opt);

    // final metric vs (1 + 3e^{-t}) alpha + e^{-t} beta
    const double a = 1.0 + 3.0 * std::exp(-1.0), b = std::exp(-1.0);
    double err = 0;
    for (std::size_t i = 0; i < fx.g.total(); ++i) {
        err = std::max(err, std::abs(tr.final_metric.r[i] - b));
        err = std::max(err, std::abs(tr.final_metric.s[i] - a / 4.0));
        err = std::max(err, std::abs(tr.final_metric.u[i]));
    }
    CHECK(err <= 2e-5);  // pure O(dt^2): the family is spatially exact

    // sup distance to omega_inf = alpha is e^{-t} on the family
    for (const auto& sm : tr.samples)
        CHECK(sm.sup_dist == doctest::Approx(std::exp(-sm.t)).epsilon(1e-4));
    CHECK(tr.decay_rate_fit == doctest::Approx(1.0).epsilon(1e-3));

    // trapezoidal step residual is O(dt^2)
    for (std::size_t i = 1; i < tr.samples.size(); ++i)
        CHECK(tr.samples[i].residual <= 1e-5);

    // curvature along the run: sqrt(5)/a(t)
    for (const auto& sm : tr.samples) {
        double want = std::sqrt(5.0) / (1.0 + 3.0 * std::exp(-sm.t));
        // curvature is refreshed every 125 steps = 0.25 time units
        CHECK(sm.curvature == doctest::Approx(want).epsilon(0.3));
    }

    // collapse diagnostics at the endpoint
    const auto& last = tr.samples.back();
    CHECK(last.fiber_diam_z ==
          doctest::Approx(std::sqrt(b * fx.g.Lambda)).epsilon(1e-5));
    CHECK(last.fiber_diam_x2 == doctest::Approx(std::sqrt(a) / 2.0).epsilon(1e-5));
    CHECK(last.base_length ==
          doctest::Approx(std::sqrt(a) * std::log(fx.g.Lambda) / 2.0).epsilon(1e-5));

    // stretched comparability: c0 = max(1, 4/(1+3e^{-t})) <= 4, c2 = 0
    REQUIRE(!tr.stretch.empty());
    for (const auto& st : tr.stretch) {
        double want = std::max(1.0, 4.0 / (1.0 + 3.0 * std::exp(-st.t)));
        CHECK(st.c0 == doctest::Approx(want).epsilon(1e-4));
        CHECK(st.c2 <= 1e-9);
    }

    // halving dt divides the error by ~4 (no spatial error on this family)
    double e1 = family_flow_error(fx, 0.5, 4e-3);
    double e2 = family_flow_error(fx, 0.5, 2e-3);
    CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.3));
}

TEST_CASE("flow error paths: oversized steps and bad configuration") {
    Fixture fx;
    FlowOptions opt;
    opt.t_end = 2.0;
    opt.dt = 1.0;
    CHECK_THROWS_AS(ncrf_run(fx.s, fx.g, omega_tv_frame(fx.g), fx.fft, fx.tab,
                             fx.glue, opt),
                    StepTooLarge);
    opt.dt = -1e-3;
    CHECK_THROWS_AS(ncrf_run(fx.s, fx.g, omega_tv_frame(fx.g), fx.fft, fx.tab,
                             fx.glue, opt),
                    BadConfig);
}

TEST_CASE("flow from a del-delbar perturbation of omega_TV stays tame") {
    Fixture fx;
    auto psi = test_potential(fx, 5e-4, 23);
    auto omega0 = metric_from_potential(fx.s, fx.g, psi, fx.fft, fx.tab, fx.glue);
    FlowOptions opt;
    opt.t_end = 0.5;
    opt.dt = 2e-3;
    opt.sample_interval = 25;
    opt.track_curvature = false;
    opt.track_stretch = true;
    auto tr = ncrf_run(fx.s, fx.g, omega0, fx.fft, fx.tab, fx.glue, opt);
    CHECK(tr.samples.back().sup_dist < tr.samples.front().sup_dist);
    for (const auto& sm : tr.samples) {
        CHECK(std::isfinite(sm.sup_dist));
        CHECK(std::isfinite(sm.residual));
    }
    // perturbation decays toward the homogeneous family: stretched geometry
    // stays within the engineering envelope
    double c2_first = tr.stretch.front().c2;
    for (const auto& st : tr.stretch) {
        CHECK(st.c0 <= 10.0);
        CHECK(st.c2 <= std::max(10.0 * c2_first, 1.0));
    }
}

TEST_CASE("curvature_sup: symbolic oracle, grid refinement, homogeneity") {
    // |Rm|^2 = 5/a^2 on a*alpha + b*beta (symbolic oracle; independent of
    // b and y2), so curvature_sup(omega_TV) = sqrt(5)/4
    const double oracle = std::sqrt(5.0) / 4.0;
    Fixture c8(8, 9);
    double v8 = curvature_sup(c8.s, c8.g, family_coord(c8.g, 4.0, 1.0), c8.fft,
                              c8.tab, c8.glue);
    double err8 = std::abs(v8 - oracle);
    CHECK(err8 <= 2e-3);  // observed 6.8e-4 (second-order theta stencils)

    Fixture c16(16, 17);
    double v16 = curvature_sup(c16.s, c16.g, family_coord(c16.g, 4.0, 1.0),
                               c16.fft, c16.tab, c16.glue);
    double err16 = std::abs(v16 - oracle);
    CHECK(err16 <= 5e-4);  // observed 1.7e-4
    CHECK(err16 <= err8 / 2.5);  // second-order theta stencils

    // independent of the beta coefficient, homogeneous in the alpha one
    double vb = curvature_sup(c8.s, c8.g, family_coord(c8.g, 4.0, 0.5), c8.fft,
                              c8.tab, c8.glue);
    CHECK(vb == doctest::Approx(v8).epsilon(1e-3));
    double va = curvature_sup(c8.s, c8.g, family_coord(c8.g, 2.0, 1.0), c8.fft,
                              c8.tab, c8.glue);
    CHECK(va == doctest::Approx(2.0 * v8).epsilon(1e-3));

    // exact scaling law under constant conformal change
    auto scaled = family_coord(c8.g, 4.0, 1.0);
    for (auto& v : scaled.gzz) v *= 2.0;
    for (auto& v : scaled.gww) v *= 2.0;
    double vs = curvature_sup(c8.s, c8.g, scaled, c8.fft, c8.tab, c8.glue);
    CHECK(vs == doctest::Approx(v8 / 2.0).epsilon(1e-12));
}

TEST_CASE("collapse diagnostics: exact values on reference forms") {
    Fixture fx;
    const double loglam = std::log(fx.g.Lambda);
    // omega_TV: sqrt(g_ww) * y2 = 1, base length = log(Lambda) exactly
    auto tv = frame_to_coord_sm(fx.g, omega_tv_frame(fx.g));
    auto d = collapse_diagnostics(fx.s, fx.g, tv);
    CHECK(d.base_length == doctest::Approx(loglam).epsilon(1e-14));
    CHECK(d.fiber_diam_z == doctest::Approx(std::sqrt(fx.g.Lambda)).epsilon(1e-14));
    CHECK(d.fiber_diam_x2 == doctest::Approx(1.0).epsilon(1e-14));

    // alpha: z-direction fully collapsed, x2-circle survives, base (log l)/2
    CoordinateMetricField al;
    al.gzz.assign(fx.g.total(), 0.0);
    al.gzw.assign(fx.g.total(), cplx(0, 0));
    al.gww.resize(fx.g.total());
    const std::size_t N = fx.g.per_slice();
    for (int j = 0; j < fx.g.S; ++j)
        std::fill_n(al.gww.begin() + std::size_t(j) * N, N,
                    alpha_ww(fx.g.y2[j]));
    auto da = collapse_diagnostics(fx.s, fx.g, al);
    CHECK(da.fiber_diam_z == 0.0);
    CHECK(da.fiber_diam_x2 == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(da.base_length == doctest::Approx(loglam / 2.0).epsilon(1e-14));
}

TEST_CASE("stretch diagnostic: explicit family and t = 0 comparability") {
    Fixture fx;
    std::vector<double> times;
    std::vector<HermitianMetricField> snaps;
    for (double t : {0.0, 1.0, 2.0, 4.0}) {
        times.push_back(t);
        snaps.push_back(family_frame(fx.g, 1.0 + 3.0 * std::exp(-t),
                                     std::exp(-t)));
    }
    auto rep = stretch_diagnostic(fx.s, fx.g, times, snaps, fx.fft, fx.tab);
    REQUIRE(rep.samples.size() == 4);
    for (const auto& sm : rep.samples) {
        double want = std::max(1.0, 4.0 / (1.0 + 3.0 * std::exp(-sm.t)));
        CHECK(sm.c0 == doctest::Approx(want).epsilon(1e-12));
        CHECK(sm.c2 <= 1e-10);
    }
    CHECK(rep.c0_max <= 4.0 + 1e-9);
    CHECK(rep.bounded);

    // at t = 0 the diagnostic is the plain omega_TV-comparability constant
    HermitianMetricField f = omega_tv_frame(fx.g);
    for (auto& v : f.r) v *= 2.0;
    for (auto& v : f.s) v *= 2.0;
    auto one = stretch_sample(fx.s, fx.g, 0.0, f, fx.fft, fx.tab);
    CHECK(one.c0 == doctest::Approx(2.0).epsilon(1e-12));
}
