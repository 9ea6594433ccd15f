#ifndef IBS_SLF_SOLVER_HPP
#define IBS_SLF_SOLVER_HPP

#include <algorithm>
#include <cmath>
#include <vector>

#include "ibs/metric_fields.hpp"
#include "ibs/surface_sm.hpp"

namespace ibs {

struct LeafPotential {
    std::vector<double> u;
    double seam_residual = 0;
    std::vector<double> mean_per_slice;
};

struct DecayPoint {
    double mode_norm = 0;  // |k|
    double abs_coeff = 0;  // max over slices of |a_k|
    double divisor = 0;    // z_k
};

struct SolverReport {
    int truncation_K = 0;
    double min_divisor = 0;     // min z_k (SM) or normalized (n a1 - m a2)^2
    double liouville_check = 0; // min z_k |k|^{2(d-1)} over used modes
    double residual_linf = 0;
    std::vector<DecayPoint> decay_curve;
};

/** min over 0 < |k|_inf <= K of z_k * (k.k)^(d-1): the empirical Liouville
 * lower-bound monitor for the small divisors. */
inline double liouville_check_sm(const SurfaceSM& s, int K) {
    double best = std::numeric_limits<double>::infinity();
    const int d = s.spec.degree_d;
    for (int k1 = -K; k1 <= K; ++k1)
        for (int k2 = -K; k2 <= K; ++k2)
            for (int k3 = -K; k3 <= K; ++k3) {
                if (k1 == 0 && k2 == 0 && k3 == 0) continue;
                Vec3d k(k1, k2, k3);
                double zk = std::pow(k.dot(s.A), 2) + std::pow(k.dot(s.B), 2);
                best = std::min(best, zk * std::pow(k.squaredNorm(), d - 1));
            }
    return best;
}

/** Solve Delta_D u = rhs on S_M by per-slice Fourier division:
 * a_k = -32 y2 d_k / (4 pi^2 z_k), a_0 = 0. */
inline std::pair<LeafPotential, SolverReport> solve_sm(
        const SurfaceSM& s, const GridSM& g, const std::vector<double>& rhs,
        const Fft3& fft, const SpectralTablesSM& tab, const GlueTablesSM& glue,
        double tolerance = 1e-10) {
    const std::size_t N = g.per_slice();
    if (rhs.size() != g.total())
        throw ShapeMismatch("rhs size does not match grid");

    LeafPotential pot;
    pot.u.resize(g.total());
    pot.mean_per_slice.resize(g.S);
    SolverReport rep;
    rep.truncation_K = g.n / 2;

    // z_k vanishes only at k=0 for accepted surfaces; an underflow at any
    // other mode means corrupted spectral data
    double min_div = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < N; ++i) {
        if (tab.zk[i] < 1e-14)
            throw DivisorUnderflow("z_k underflow at a nonzero mode");
        min_div = std::min(min_div, tab.zk[i]);
    }
    rep.min_divisor = min_div;
    rep.liouville_check = liouville_check_sm(s, std::min(rep.truncation_K, 16));

    std::vector<cplx> buf(N);
    std::vector<double> max_coeff(N, 0.0);
    double rhs_scale = 0;
    for (double v : rhs) rhs_scale = std::max(rhs_scale, std::abs(v));
    for (int j = 0; j < g.S; ++j) {
        const double* rj = rhs.data() + std::size_t(j) * N;
        double mean = std::accumulate(rj, rj + N, 0.0) / double(N);
        if (std::abs(mean) > 1e-8 * std::max(1.0, rhs_scale))
            throw NonZeroMean("rhs has nonzero fiber mean on a slice");
        for (std::size_t i = 0; i < N; ++i) buf[i] = rj[i];
        fft.forward(buf.data());
        const double c = -32.0 * g.y2[j] / (4.0 * M_PI * M_PI);
        buf[0] = 0;
        for (std::size_t i = 1; i < N; ++i) {
            buf[i] *= c / tab.zk[i];
            max_coeff[i] = std::max(max_coeff[i], std::abs(buf[i]) / double(N));
        }
        fft.inverse(buf.data());
        double* uj = pot.u.data() + std::size_t(j) * N;
        for (std::size_t i = 0; i < N; ++i) uj[i] = buf[i].real();
        pot.mean_per_slice[j] =
            std::accumulate(uj, uj + N, 0.0) / double(N);
    }

    // seam check: u(t, 1) should equal u(M^T t, Lambda)
    {
        std::vector<double> top(N);
        transport_seam(glue, pot.u.data(), top.data(), /*up=*/true);
        double res = 0;
        const double* utop = pot.u.data() + std::size_t(g.S - 1) * N;
        for (std::size_t i = 0; i < N; ++i)
            res = std::max(res, std::abs(top[i] - utop[i]));
        pot.seam_residual = res;
        double uscale = 0;
        for (double v : pot.u) uscale = std::max(uscale, std::abs(v));
        if (res > 1e2 * tolerance * std::max(1.0, uscale))
            throw SeamMismatch("solution violates the mapping-torus seam");
    }

    // residual and coefficient-decay diagnostics
    {
        auto back = leafwise_laplacian_apply(s, g, pot.u, fft, tab);
        double res = 0;
        for (std::size_t i = 0; i < rhs.size(); ++i)
            res = std::max(res, std::abs(back[i] - rhs[i]));
        rep.residual_linf = res;

        double cmax = *std::max_element(max_coeff.begin(), max_coeff.end());
        std::size_t idx = 0;
        for (int m1 = 0; m1 < g.n; ++m1)
            for (int m2 = 0; m2 < g.n; ++m2)
                for (int m3 = 0; m3 < g.n; ++m3, ++idx) {
                    if (idx == 0 || max_coeff[idx] < 1e-14 * cmax) continue;
                    Vec3d k(signed_freq(m1, g.n), signed_freq(m2, g.n),
                            signed_freq(m3, g.n));
                    rep.decay_curve.push_back(
                        {k.norm(), max_coeff[idx], tab.zk[idx]});
                }
        std::sort(rep.decay_curve.begin(), rep.decay_curve.end(),
                  [](const DecayPoint& a, const DecayPoint& b) {
                      return a.mode_norm < b.mode_norm;
                  });
    }
    return {std::move(pot), std::move(rep)};
}

} // namespace ibs

#endif
