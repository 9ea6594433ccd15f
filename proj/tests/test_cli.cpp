#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

#ifndef IBS_CLI_PATH
#error "IBS_CLI_PATH must point at the driver binary"
#endif

/** Run the driver with arguments, return the process exit code. */
int run_cli(const std::string& args) {
    std::string cmd = std::string(IBS_CLI_PATH) + " " + args + " 2>/dev/null";
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

fs::path scratch_dir() {
    fs::path p = fs::temp_directory_path() / "ibs-cli-test";
    fs::create_directories(p);
    return p;
}

fs::path write_config(const std::string& name, const std::string& body) {
    fs::path p = scratch_dir() / name;
    std::ofstream(p) << body;
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const std::string small_sm =
    "family = SM\n"
    "n_torus = 8\n"
    "n_y2 = 9\n"
    "t_end = 0.05\n"
    "dt = 1e-3\n"
    "sample_interval = 10\n"
    "curvature_interval = 25\n"
    "recipe = tv\n"
    "seed = 7\n";

} // namespace

TEST_CASE("surface: report fields for the companion matrix") {
    auto cfg = write_config("sm.txt", small_sm);
    auto out = scratch_dir() / "surface";
    REQUIRE(run_cli("surface --config " + cfg.string() + " --out " +
                    out.string()) == 0);
    std::string rep = slurp(out / "surface_report.txt");
    CHECK(rep.find("lambda 1.32471795") != std::string::npos);
    CHECK(rep.find("rank_Z 2") != std::string::npos);
    CHECK(rep.find("kernel_residual") != std::string::npos);
}

TEST_CASE("surface: invalid inputs exit with code 2") {
    auto ident = write_config("ident.txt",
                              "family = SM\n"
                              "m11 = 1\nm12 = 0\nm13 = 0\n"
                              "m21 = 0\nm22 = 1\nm23 = 0\n"
                              "m31 = 0\nm32 = 0\nm33 = 1\n");
    auto out = scratch_dir() / "bad";
    CHECK(run_cli("surface --config " + ident.string() + " --out " +
                  out.string()) == 2);

    auto r0 = write_config("r0.txt", "family = SPlus\nr = 0\n");
    CHECK(run_cli("surface --config " + r0.string() + " --out " +
                  out.string()) == 2);

    auto junk = write_config("junk.txt", "no_such_key = 1\n");
    CHECK(run_cli("surface --config " + junk.string() + " --out " +
                  out.string()) == 2);
}

TEST_CASE("check-gauduchon: tv passes, nonconstant r fails") {
    auto cfg = write_config("sm.txt", small_sm);
    auto out = scratch_dir() / "check";
    REQUIRE(run_cli("check-gauduchon --config " + cfg.string() + " --out " +
                    out.string()) == 0);
    CHECK(slurp(out / "gauduchon_report.txt").find("verdict pass") !=
          std::string::npos);
    std::string csv = slurp(out / "obstruction.csv");
    CHECK(csv.find("y2,R,G_fiber_integral") == 0);

    auto bad = write_config("badr.txt",
                            "family = SM\nn_torus = 8\nn_y2 = 9\n"
                            "recipe = custom\nr_const = 1\n"
                            "r_cos_amp = 0.5\nr_cos_freq = 1\n");
    REQUIRE(run_cli("check-gauduchon --config " + bad.string() + " --out " +
                    out.string()) == 0);
    CHECK(slurp(out / "gauduchon_report.txt").find("verdict fail") !=
          std::string::npos);
}

TEST_CASE("solve-slf: Gauduchon input solves, obstructed input exits 4") {
    auto cfg = write_config("sm.txt", small_sm);
    auto out = scratch_dir() / "solve";
    REQUIRE(run_cli("solve-slf --config " + cfg.string() + " --out " +
                    out.string()) == 0);
    std::string rep = slurp(out / "solver_report.txt");
    CHECK(rep.find("slf_defect 0\n") != std::string::npos); // tv: u == 0
    CHECK(slurp(out / "decay.csv").find("mode_norm,abs_coeff,divisor") == 0);

    auto bad = write_config("badr.txt",
                            "family = SM\nn_torus = 8\nn_y2 = 9\n"
                            "recipe = custom\nr_const = 1\n"
                            "r_cos_amp = 0.5\nr_cos_freq = 1\n");
    CHECK(run_cli("solve-slf --config " + bad.string() + " --out " +
                  out.string()) == 4);
}

TEST_CASE("flow: short run emits trace, oversized dt exits 3") {
    auto cfg = write_config("sm.txt", small_sm);
    auto out = scratch_dir() / "flow";
    REQUIRE(run_cli("flow --config " + cfg.string() + " --out " +
                    out.string()) == 0);
    std::string csv = slurp(out / "flow.csv");
    CHECK(csv.find("t,sup_dist_to_omega_inf,ncrf_residual,curvature_sup,"
                   "fiber_diam_z,fiber_diam_x2,base_length,decay_rate_fit") ==
          0);
    // header plus at least initial and final samples
    CHECK(std::count(csv.begin(), csv.end(), '\n') >= 3);

    CHECK(run_cli("flow --config " + cfg.string() + " --out " + out.string() +
                  " --dt 1.0 --tmax 3.0") == 3);
}

TEST_CASE("flow: identical config and seed reproduce the CSV bitwise") {
    auto cfg = write_config("pot.txt",
                            "family = SM\nn_torus = 8\nn_y2 = 9\n"
                            "recipe = tv_plus_potential\n"
                            "potential_amp = 1e-3\nt_end = 0.02\n"
                            "dt = 1e-3\nsample_interval = 5\n"
                            "curvature_interval = 10\n");
    auto o1 = scratch_dir() / "rep1", o2 = scratch_dir() / "rep2";
    REQUIRE(run_cli("flow --config " + cfg.string() + " --out " + o1.string() +
                    " --seed 3") == 0);
    REQUIRE(run_cli("flow --config " + cfg.string() + " --out " + o2.string() +
                    " --seed 3") == 0);
    CHECK(slurp(o1 / "flow.csv") == slurp(o2 / "flow.csv"));

    auto o3 = scratch_dir() / "rep3";
    REQUIRE(run_cli("flow --config " + cfg.string() + " --out " + o3.string() +
                    " --seed 4") == 0);
    CHECK(slurp(o1 / "flow.csv") != slurp(o3 / "flow.csv"));
}

TEST_CASE("report: runs all phases and records timings") {
    auto cfg = write_config("sm.txt", small_sm);
    auto out = scratch_dir() / "report";
    REQUIRE(run_cli("report --config " + cfg.string() + " --out " +
                    out.string()) == 0);
    std::string rep = slurp(out / "run_report.txt");
    CHECK(rep.find("time_surface_s") != std::string::npos);
    CHECK(rep.find("time_flow_s") != std::string::npos);
    CHECK(rep.find("status ok") != std::string::npos);
    CHECK(fs::exists(out / "flow.csv"));
    CHECK(fs::exists(out / "obstruction.csv"));
}
