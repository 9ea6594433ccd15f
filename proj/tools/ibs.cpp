// Command-line driver: surface construction, Gauduchon checks, leafwise
// solves, flow runs, and combined reports.  One command per process; all
// output files are plain text / CSV and bitwise reproducible for a fixed
// config + seed (every floating point value is printed with %.17g and all
// randomness flows through a single seeded generator recorded in the
// report).
//
// Exit codes: 0 success, 2 construction/validation error, 3 flow failure,
// 4 obstruction violation.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ibs/algebraic_core.hpp"
#include "ibs/errors.hpp"
#include "ibs/fft.hpp"
#include "ibs/flow_engine.hpp"
#include "ibs/metric_fields.hpp"
#include "ibs/slf_solver.hpp"
#include "ibs/splus_solver.hpp"
#include "ibs/surface_sm.hpp"
#include "ibs/surface_splus.hpp"

namespace {

using namespace ibs;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string family = "SM";
    // SM matrix (default: companion matrix of t^3 - t - 1)
    long m[3][3] = {{0, 1, 0}, {0, 0, 1}, {1, 1, 0}};
    // SPlus data
    long n2[2][2] = {{1, 1}, {1, 2}};
    long p = 0, q = 0, r = 1;
    double t_re = 0, t_im = 0;
    // grids
    int n_torus = 32;
    int n_y2 = 33;
    int truncation_k = 8;
    // tolerances
    double tolerance = 1e-10;       // solver target
    double gauduchon_tol = 1e-6;    // R-spread pass threshold
    double obstruction_tol = 1e-7;  // pairing threshold for solve-slf
    // flow
    double t_end = 5.0;
    double dt = 1e-3;
    int sample_interval = 50;
    int curvature_interval = 250;
    // metric recipe: tv | tv_plus_potential | custom
    std::string recipe = "tv";
    double potential_amp = 1e-3;
    int potential_modes = 3;
    // custom recipe: r(theta) = r_const + r_cos_amp cos(2 pi f theta/log L)
    double r_const = 1.0;
    double r_cos_amp = 0.0;
    int r_cos_freq = 1;
    // output
    std::string out_dir = "ibs-out";
    std::uint64_t seed = 12345;
};

long to_long(const std::string& k, const std::string& v) {
    try {
        std::size_t pos = 0;
        long x = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw BadConfig("key '" + k + "': expected integer, got '" + v + "'");
    }
}

double to_double(const std::string& k, const std::string& v) {
    try {
        std::size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw BadConfig("key '" + k + "': expected number, got '" + v + "'");
    }
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

RunConfig load_config(const std::string& path) {
    RunConfig c;
    if (path.empty()) return c;
    std::ifstream in(path);
    if (!in) throw BadConfig("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw BadConfig("config line " + std::to_string(lineno) +
                            " is not key=value: " + t);
        std::string k = trim(t.substr(0, eq)), v = trim(t.substr(eq + 1));
        if (k == "family") c.family = v;
        else if (k.size() == 3 && k[0] == 'm' && k[1] >= '1' && k[1] <= '3' &&
                 k[2] >= '1' && k[2] <= '3')
            c.m[k[1] - '1'][k[2] - '1'] = to_long(k, v);
        else if (k.size() == 3 && k[0] == 'n' && k[1] >= '1' && k[1] <= '2' &&
                 k[2] >= '1' && k[2] <= '2')
            c.n2[k[1] - '1'][k[2] - '1'] = to_long(k, v);
        else if (k == "p") c.p = to_long(k, v);
        else if (k == "q") c.q = to_long(k, v);
        else if (k == "r") c.r = to_long(k, v);
        else if (k == "t_re") c.t_re = to_double(k, v);
        else if (k == "t_im") c.t_im = to_double(k, v);
        else if (k == "n_torus") c.n_torus = int(to_long(k, v));
        else if (k == "n_y2") c.n_y2 = int(to_long(k, v));
        else if (k == "truncation_k") c.truncation_k = int(to_long(k, v));
        else if (k == "tolerance") c.tolerance = to_double(k, v);
        else if (k == "gauduchon_tol") c.gauduchon_tol = to_double(k, v);
        else if (k == "obstruction_tol") c.obstruction_tol = to_double(k, v);
        else if (k == "t_end") c.t_end = to_double(k, v);
        else if (k == "dt") c.dt = to_double(k, v);
        else if (k == "sample_interval") c.sample_interval = int(to_long(k, v));
        else if (k == "curvature_interval")
            c.curvature_interval = int(to_long(k, v));
        else if (k == "recipe") c.recipe = v;
        else if (k == "potential_amp") c.potential_amp = to_double(k, v);
        else if (k == "potential_modes")
            c.potential_modes = int(to_long(k, v));
        else if (k == "r_const") c.r_const = to_double(k, v);
        else if (k == "r_cos_amp") c.r_cos_amp = to_double(k, v);
        else if (k == "r_cos_freq") c.r_cos_freq = int(to_long(k, v));
        else if (k == "out_dir") c.out_dir = v;
        else if (k == "seed") c.seed = std::uint64_t(to_long(k, v));
        else throw BadConfig("unknown config key: " + k);
    }
    return c;
}

void validate_config(const RunConfig& c) {
    if (c.family != "SM" && c.family != "SPlus")
        throw BadConfig("family must be SM or SPlus");
    auto pow2 = [](int n) { return n > 0 && (n & (n - 1)) == 0; };
    if (!pow2(c.n_torus))
        throw BadConfig("n_torus must be a power of two");
    if (!pow2(c.n_y2 - 1))
        throw BadConfig("n_y2 must be 2^k + 1");
    if (!(c.tolerance > 0) || !(c.gauduchon_tol > 0) ||
        !(c.obstruction_tol > 0))
        throw BadConfig("all tolerances must be positive");
    if (c.recipe != "tv" && c.recipe != "tv_plus_potential" &&
        c.recipe != "custom")
        throw BadConfig("recipe must be tv, tv_plus_potential, or custom");
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_out(const std::string& dir, const std::string& name) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir + "/" + name);
    if (!out) throw BadConfig("cannot write " + dir + "/" + name);
    return out;
}

void echo_config(std::ostream& out, const RunConfig& c) {
    out << "family " << c.family << "\n";
    if (c.family == "SM") {
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                out << "m" << i + 1 << j + 1 << " " << c.m[i][j] << "\n";
    } else {
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                out << "n" << i + 1 << j + 1 << " " << c.n2[i][j] << "\n";
        out << "p " << c.p << "\nq " << c.q << "\nr " << c.r << "\n";
        out << "t_re " << fmt(c.t_re) << "\nt_im " << fmt(c.t_im) << "\n";
    }
    out << "n_torus " << c.n_torus << "\nn_y2 " << c.n_y2 << "\n";
    out << "truncation_k " << c.truncation_k << "\n";
    out << "recipe " << c.recipe << "\n";
    out << "t_end " << fmt(c.t_end) << "\ndt " << fmt(c.dt) << "\n";
    out << "seed " << c.seed << "\n";
}

// ---------------------------------------------------------------------------
// Shared SM context and metric recipes
// ---------------------------------------------------------------------------

struct SmContext {
    SurfaceSM s;
    GridSM g;
    Fft3 fft;
    SpectralTablesSM tab;
    GlueTablesSM glue;
    explicit SmContext(const RunConfig& c)
        : s(build_sm((Mat3i() << c.m[0][0], c.m[0][1], c.m[0][2], c.m[1][0],
                      c.m[1][1], c.m[1][2], c.m[2][0], c.m[2][1], c.m[2][2])
                         .finished())),
          g(make_grid_sm(s, c.n_torus, c.n_y2)),
          fft(c.n_torus),
          tab(make_spectral_tables(s, c.n_torus)),
          glue(make_glue_tables(s, c.n_torus)) {}
};

double theta_bump(double x) {
    if (x <= 0.05 || x >= 0.95) return 0.0;
    double t = (x - 0.05) / 0.9;
    return std::exp(-1.0 / (t * (1.0 - t)) + 4.0);
}

/** Seam-compatible band-limited random potential (theta bump times fiber
 * cosines); the only consumer of the run's random generator. */
std::vector<double> random_potential(const GridSM& g, double amp, int modes,
                                     std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> psi(g.total(), 0.0);
    for (int mode = 0; mode < modes; ++mode) {
        int k1 = int(unif(rng) * 3) - 1, k2 = int(unif(rng) * 3) - 1,
            k3 = int(unif(rng) * 3) - 1;
        if (!k1 && !k2 && !k3) k1 = 1;
        double phase = 2.0 * M_PI * unif(rng);
        double scale = 0.5 + unif(rng);
        std::size_t idx = 0;
        for (int j = 0; j < g.S; ++j) {
            double prof =
                amp * scale * theta_bump(g.theta[j] / std::log(g.Lambda));
            for (int i1 = 0; i1 < g.n; ++i1)
                for (int i2 = 0; i2 < g.n; ++i2)
                    for (int i3 = 0; i3 < g.n; ++i3, ++idx)
                        psi[idx] += prof * std::cos(2.0 * M_PI *
                                                    (k1 * i1 + k2 * i2 +
                                                     k3 * i3) /
                                                    double(g.n) + phase);
        }
    }
    return psi;
}

HermitianMetricField recipe_metric(const SmContext& cx, const RunConfig& c,
                                   std::mt19937_64& rng) {
    if (c.recipe == "tv") return omega_tv_frame(cx.g);
    if (c.recipe == "tv_plus_potential") {
        auto psi = random_potential(cx.g, c.potential_amp, c.potential_modes,
                                    rng);
        return metric_from_potential(cx.s, cx.g, psi, cx.fft, cx.tab,
                                     cx.glue);
    }
    // custom: r profile in theta over the tv background
    HermitianMetricField f = omega_tv_frame(cx.g);
    const std::size_t N = cx.g.per_slice();
    for (int j = 0; j < cx.g.S; ++j) {
        double rv = c.r_const +
                    c.r_cos_amp * std::cos(2.0 * M_PI * c.r_cos_freq *
                                           cx.g.theta[j] /
                                           std::log(cx.g.Lambda));
        for (std::size_t i = 0; i < N; ++i)
            f.r[std::size_t(j) * N + i] = rv;
    }
    validate_positive(cx.g, f);
    return f;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_surface(const RunConfig& c) {
    auto out = open_out(c.out_dir, "surface_report.txt");
    echo_config(out, c);
    if (c.family == "SM") {
        SmContext cx(c);
        const auto& sp = cx.s.spec;
        // kernel identity |Z l| / |l| and rank of Z
        double kres = (cx.s.Z * sp.ell).norm() / sp.ell.norm();
        Eigen::SelfAdjointEigenSolver<Mat3d> es(cx.s.Z);
        int rank = 0;
        for (int i = 0; i < 3; ++i)
            if (es.eigenvalues()[i] > 1e-12 * es.eigenvalues()[2]) ++rank;
        out << "lambda " << fmt(sp.lambda) << "\n";
        out << "mu_re " << fmt(sp.mu.real()) << "\n";
        out << "mu_im " << fmt(sp.mu.imag()) << "\n";
        out << "degree_d " << sp.degree_d << "\n";
        out << "eps " << fmt(cx.s.eps) << "\n";
        out << "kernel_residual " << fmt(kres) << "\n";
        out << "rank_Z " << rank << "\n";
        out << "liouville_check "
            << fmt(liouville_check_sm(cx.s, c.truncation_k)) << "\n";
    } else {
        Mat2i N2;
        N2 << c.n2[0][0], c.n2[0][1], c.n2[1][0], c.n2[1][1];
        auto s = build_splus(N2, c.p, c.q, c.r, cplx(c.t_re, c.t_im));
        out << "gamma " << fmt(s.spec.gamma) << "\n";
        out << "c1 " << fmt(s.c1) << "\nc2 " << fmt(s.c2) << "\nc3 "
            << fmt(s.c3) << "\n";
        out << "e1 " << fmt(s.e1) << "\ne2 " << fmt(s.e2) << "\n";
        out << "m_twist " << fmt(s.m_twist) << "\n";
        out << "liouville_check "
            << fmt(liouville_check_splus(s, c.truncation_k)) << "\n";
    }
    return 0;
}

int cmd_check_gauduchon(const RunConfig& c) {
    if (c.family != "SM")
        throw BadConfig("check-gauduchon runs on family SM");
    SmContext cx(c);
    std::mt19937_64 rng(c.seed);
    auto omega = recipe_metric(cx, c, rng);
    auto rep = gauduchon_defect(cx.s, cx.g, omega, c.gauduchon_tol);
    for (int i = 0; i < 8; ++i)
        rep.pairings.push_back(obstruction_pairing(
            cx.s, cx.g, omega, kernel_test_function(cx.g, i)));

    auto csv = open_out(c.out_dir, "obstruction.csv");
    csv << "y2,R,G_fiber_integral\n";
    for (int j = 0; j < cx.g.S; ++j)
        csv << fmt(cx.g.y2[j]) << "," << fmt(rep.R_values[j]) << ","
            << fmt(rep.G_fiber_integral[j]) << "\n";

    auto out = open_out(c.out_dir, "gauduchon_report.txt");
    echo_config(out, c);
    out << "R_spread " << fmt(rep.R_spread) << "\n";
    double pmax = 0;
    for (double p : rep.pairings) pmax = std::max(pmax, std::abs(p));
    for (std::size_t i = 0; i < rep.pairings.size(); ++i)
        out << "pairing_" << i << " " << fmt(rep.pairings[i]) << "\n";
    out << "pairing_max_abs " << fmt(pmax) << "\n";
    out << "verdict " << (rep.pass ? "pass" : "fail") << "\n";
    return 0;
}

int cmd_solve_slf(const RunConfig& c) {
    if (c.family == "SPlus") {
        if (c.recipe != "tv")
            throw BadConfig(
                "solve-slf on SPlus supports only the tv recipe "
                "(quantitative runs are SM-based)");
        Mat2i N2;
        N2 << c.n2[0][0], c.n2[0][1], c.n2[1][0], c.n2[1][1];
        auto s = build_splus(N2, c.p, c.q, c.r, cplx(c.t_re, c.t_im));
        auto g = make_grid_splus(s, c.n_torus, c.n_torus, c.n_y2);
        std::vector<double> rhs(g.total(), 0.0);
        auto [pot, rep] = solve_splus(s, g, rhs);
        auto out = open_out(c.out_dir, "solver_report.txt");
        echo_config(out, c);
        out << "residual_linf " << fmt(rep.residual_linf) << "\n";
        out << "seam_residual " << fmt(pot.seam_residual) << "\n";
        out << "u_max "
            << fmt(*std::max_element(pot.u.begin(), pot.u.end())) << "\n";
        return 0;
    }
    SmContext cx(c);
    std::mt19937_64 rng(c.seed);
    auto omega = recipe_metric(cx, c, rng);

    // obstruction gate (necessity of the Gauduchon condition)
    double pmax = 0;
    for (int i = 0; i < 8; ++i)
        pmax = std::max(pmax, std::abs(obstruction_pairing(
                                  cx.s, cx.g, omega,
                                  kernel_test_function(cx.g, i))));
    if (pmax > c.obstruction_tol) {
        std::ostringstream os;
        os << "input metric violates the leafwise-flatness obstruction: "
              "max |pairing| = "
           << fmt(pmax) << " > " << fmt(c.obstruction_tol);
        throw ObstructionViolated(os.str());
    }

    auto G = g_of_omega(cx.s, cx.g, omega);
    auto [pot, rep] =
        solve_sm(cx.s, cx.g, G, cx.fft, cx.tab, cx.glue, c.tolerance);

    // defect of the corrected form omega + i del delbar u
    double defect;
    {
        std::vector<double> zero(cx.g.total(), 0.0);
        auto du = metric_from_potential(cx.s, cx.g, pot.u, cx.fft, cx.tab,
                                        cx.glue);
        auto tv = omega_tv_frame(cx.g);
        HermitianMetricField corrected = omega;
        for (std::size_t i = 0; i < corrected.r.size(); ++i) {
            corrected.r[i] += du.r[i] - tv.r[i];
            corrected.s[i] += du.s[i] - tv.s[i];
            corrected.u[i] += du.u[i] - tv.u[i];
        }
        defect = slf_defect(cx.g, corrected);
    }

    auto csv = open_out(c.out_dir, "decay.csv");
    csv << "mode_norm,abs_coeff,divisor\n";
    for (const auto& d : rep.decay_curve)
        csv << fmt(d.mode_norm) << "," << fmt(d.abs_coeff) << ","
            << fmt(d.divisor) << "\n";

    auto out = open_out(c.out_dir, "solver_report.txt");
    echo_config(out, c);
    out << "truncation_K " << rep.truncation_K << "\n";
    out << "min_divisor " << fmt(rep.min_divisor) << "\n";
    out << "liouville_check " << fmt(rep.liouville_check) << "\n";
    out << "residual_linf " << fmt(rep.residual_linf) << "\n";
    out << "seam_residual " << fmt(pot.seam_residual) << "\n";
    out << "obstruction_pairing_max " << fmt(pmax) << "\n";
    out << "slf_defect " << fmt(defect) << "\n";
    return 0;
}

int cmd_flow(const RunConfig& c) {
    if (c.family != "SM")
        throw BadConfig("flow runs on family SM");
    SmContext cx(c);
    std::mt19937_64 rng(c.seed);
    auto omega0 = recipe_metric(cx, c, rng);
    FlowOptions opt;
    opt.t_end = c.t_end;
    opt.dt = c.dt;
    opt.sample_interval = c.sample_interval;
    opt.curvature_interval = c.curvature_interval;
    auto tr = ncrf_run(cx.s, cx.g, omega0, cx.fft, cx.tab, cx.glue, opt);

    auto csv = open_out(c.out_dir, "flow.csv");
    csv << "t,sup_dist_to_omega_inf,ncrf_residual,curvature_sup,"
           "fiber_diam_z,fiber_diam_x2,base_length,decay_rate_fit\n";
    for (const auto& sm : tr.samples)
        csv << fmt(sm.t) << "," << fmt(sm.sup_dist) << ","
            << fmt(sm.residual) << "," << fmt(sm.curvature) << ","
            << fmt(sm.fiber_diam_z) << "," << fmt(sm.fiber_diam_x2) << ","
            << fmt(sm.base_length) << "," << fmt(tr.decay_rate_fit) << "\n";

    auto out = open_out(c.out_dir, "flow_report.txt");
    echo_config(out, c);
    out << "final_time " << fmt(tr.final_time) << "\n";
    out << "decay_rate_fit " << fmt(tr.decay_rate_fit) << "\n";
    out << "final_sup_dist " << fmt(tr.samples.back().sup_dist) << "\n";
    return 0;
}

int cmd_report(const RunConfig& c) {
    using clock = std::chrono::steady_clock;
    auto out = open_out(c.out_dir, "run_report.txt");
    echo_config(out, c);
    auto timed = [&](const char* phase, auto&& fn) {
        auto t0 = clock::now();
        fn();
        auto t1 = clock::now();
        out << "time_" << phase << "_s "
            << fmt(std::chrono::duration<double>(t1 - t0).count()) << "\n";
    };
    timed("surface", [&] { cmd_surface(c); });
    if (c.family == "SM") {
        timed("check_gauduchon", [&] { cmd_check_gauduchon(c); });
        timed("solve_slf", [&] { cmd_solve_slf(c); });
        timed("flow", [&] { cmd_flow(c); });
    }
    out << "status ok\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Inoue-Bombieri surface toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    int resolution = 0;
    double tmax = 0, dt = 0;
    bool have_seed = false, have_out = false, have_res = false,
         have_tmax = false, have_dt = false;

    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--out", out_dir, "output directory")
        ->each([&](const std::string&) { have_out = true; });
    app.add_option("--seed", seed, "random seed")
        ->each([&](const std::string&) { have_seed = true; });
    app.add_option("--resolution", resolution,
                   "torus resolution n (y2 slices become n+1)")
        ->each([&](const std::string&) { have_res = true; });
    app.add_option("--tmax", tmax, "flow end time")
        ->each([&](const std::string&) { have_tmax = true; });
    app.add_option("--dt", dt, "flow time step")
        ->each([&](const std::string&) { have_dt = true; });

    auto* c_surface = app.add_subcommand("surface", "build the surface");
    auto* c_check =
        app.add_subcommand("check-gauduchon", "fiber-integral check");
    auto* c_solve = app.add_subcommand("solve-slf", "leafwise-flat solve");
    auto* c_flow = app.add_subcommand("flow", "normalized Chern-Ricci flow");
    auto* c_report = app.add_subcommand("report", "run all phases");
    for (auto* sc : {c_surface, c_check, c_solve, c_flow, c_report})
        sc->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_config(config_path);
        if (have_out) cfg.out_dir = out_dir;
        if (have_seed) cfg.seed = seed;
        if (have_res) {
            cfg.n_torus = resolution;
            cfg.n_y2 = resolution + 1;
        }
        if (have_tmax) cfg.t_end = tmax;
        if (have_dt) cfg.dt = dt;
        validate_config(cfg);

        if (c_surface->parsed()) return cmd_surface(cfg);
        if (c_check->parsed()) return cmd_check_gauduchon(cfg);
        if (c_solve->parsed()) return cmd_solve_slf(cfg);
        if (c_flow->parsed()) return cmd_flow(cfg);
        if (c_report->parsed()) return cmd_report(cfg);
    } catch (const ibs::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_category();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
