#ifndef IBS_METRIC_FIELDS_HPP
#define IBS_METRIC_FIELDS_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "ibs/surface_sm.hpp"

namespace ibs {

/** Hermitian (1,1) field in the global frame (phi1, phi2):
 * omega = i r phi1^phibar1 + i s phi2^phibar2 + u phi1^phibar2 - conj(u) phi2^phibar1.
 * Metric positivity means r > 0 and r s - |u|^2 > 0; degenerate forms such
 * as alpha = (0, 1/4, 0) are representable but flagged by validate(). */
struct HermitianMetricField {
    std::vector<double> r, s;
    std::vector<cplx> u;
};

/** Same object in the coordinate coframe (dz, dw). */
struct CoordinateMetricField {
    std::vector<double> gzz, gww;
    std::vector<cplx> gzw;
};

// --- reference forms -------------------------------------------------------

inline double alpha_ww(double y2) { return 1.0 / (4.0 * y2 * y2); }
inline double beta_zz_sm(double y2) { return y2; }

inline HermitianMetricField omega_tv_frame(const GridSM& g) {
    HermitianMetricField m;
    m.r.assign(g.total(), 1.0);
    m.s.assign(g.total(), 1.0);
    m.u.assign(g.total(), cplx(0, 0));
    return m;
}

/** alpha in frame components: (i/4) phi2^phibar2 -> (r,s,u) = (0, 1/4, 0). */
inline HermitianMetricField alpha_frame(const GridSM& g) {
    HermitianMetricField m;
    m.r.assign(g.total(), 0.0);
    m.s.assign(g.total(), 0.25);
    m.u.assign(g.total(), cplx(0, 0));
    return m;
}

/** Multiple of alpha attained by the normalized flow: omega_inf = c * alpha
 * with c = 1 on S_M (closed-form family) and c = 2 on S^+ (determined by the
 * homogeneous reduction da/dt = 2 - a of the flow, see flow_engine). */
inline double omega_inf_alpha_multiple(bool splus) { return splus ? 2.0 : 1.0; }

// --- frame <-> coordinate conversion (S_M: phi1 = sqrt(y2) dz, phi2 = dw/y2)

inline CoordinateMetricField frame_to_coord_sm(const GridSM& g,
                                               const HermitianMetricField& f) {
    const std::size_t N = g.per_slice();
    if (f.r.size() != g.total() || f.s.size() != g.total() || f.u.size() != g.total())
        throw ShapeMismatch("frame field size does not match grid");
    CoordinateMetricField c;
    c.gzz.resize(g.total());
    c.gww.resize(g.total());
    c.gzw.resize(g.total());
    for (int j = 0; j < g.S; ++j) {
        const double y2 = g.y2[j], rt = std::sqrt(y2);
        for (std::size_t i = j * N; i < (j + 1) * N; ++i) {
            c.gzz[i] = f.r[i] * y2;
            c.gww[i] = f.s[i] / (y2 * y2);
            c.gzw[i] = cplx(0, -1) * f.u[i] / rt;
        }
    }
    return c;
}

inline HermitianMetricField coord_to_frame_sm(const GridSM& g,
                                              const CoordinateMetricField& c) {
    const std::size_t N = g.per_slice();
    if (c.gzz.size() != g.total() || c.gww.size() != g.total() || c.gzw.size() != g.total())
        throw ShapeMismatch("coordinate field size does not match grid");
    HermitianMetricField f;
    f.r.resize(g.total());
    f.s.resize(g.total());
    f.u.resize(g.total());
    for (int j = 0; j < g.S; ++j) {
        const double y2 = g.y2[j], rt = std::sqrt(y2);
        for (std::size_t i = j * N; i < (j + 1) * N; ++i) {
            f.r[i] = c.gzz[i] / y2;
            f.s[i] = c.gww[i] * y2 * y2;
            f.u[i] = cplx(0, 1) * c.gzw[i] * rt;
        }
    }
    return f;
}

inline void validate_positive(const GridSM& g, const HermitianMetricField& f) {
    const std::size_t N = g.per_slice();
    for (std::size_t i = 0; i < f.r.size(); ++i) {
        double det = f.r[i] * f.s[i] - std::norm(f.u[i]);
        if (!(f.r[i] > 0) || !(f.s[i] > 0) || !(det > 0)) {
            std::ostringstream os;
            os << "metric fails positivity at slice " << i / N << " node " << i % N
               << " (r=" << f.r[i] << ", s=" << f.s[i] << ", rs-|u|^2=" << det << ")";
            throw NotPositive(os.str());
        }
    }
}

// --- quadrature in the omega_TV^2 volume -----------------------------------

/** omega_TV^2 = 8 |eps| dt^3 dtheta in (lattice, log y2) coordinates, so the
 * volume average is a flat fiber mean with a theta trapezoid. */
inline double theta_weight(const GridSM& g, int j) {
    return (j == 0 || j == g.S - 1) ? 0.5 : 1.0;
}

inline double mean_omega_tv2(const GridSM& g, const std::vector<double>& f) {
    const std::size_t N = g.per_slice();
    double acc = 0, wsum = 0;
    for (int j = 0; j < g.S; ++j) {
        double w = theta_weight(g, j);
        const double* fj = f.data() + std::size_t(j) * N;
        double m = std::accumulate(fj, fj + N, 0.0) / double(N);
        acc += w * m;
        wsum += w;
    }
    return acc / wsum;
}

inline double volume_omega_tv2(const SurfaceSM& s, const GridSM& g) {
    return 8.0 * std::abs(s.eps) * std::log(g.Lambda);
}

inline double integral_omega_tv2(const SurfaceSM& s, const GridSM& g,
                                 const std::vector<double>& f) {
    return mean_omega_tv2(g, f) * volume_omega_tv2(s, g);
}

// --- core scalar quantities -------------------------------------------------

/** G(omega) = -(1/8) r + (1/8) volume average of r. */
inline std::vector<double> g_of_omega(const SurfaceSM& s, const GridSM& g,
                                      const HermitianMetricField& omega) {
    (void)s;
    const double rbar = mean_omega_tv2(g, omega.r);
    std::vector<double> out(omega.r.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (rbar - omega.r[i]) / 8.0;
    return out;
}

/** Pointwise ratio (omega_u ^ alpha)/omega_TV^2 = r/8; returns its relative
 * spread (max - min)/mean, which vanishes exactly on strongly leafwise flat
 * forms. */
inline double slf_defect(const GridSM& g, const HermitianMetricField& omega_u) {
    double lo = omega_u.r[0] / 8.0, hi = lo, acc = 0;
    for (double r : omega_u.r) {
        double v = r / 8.0;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        acc += v;
    }
    double mean = acc / double(omega_u.r.size());
    return (hi - lo) / std::abs(mean);
}

struct ObstructionReport {
    std::vector<double> R_values;        // fiber integral of r per slice
    std::vector<double> G_fiber_integral;
    double R_spread = 0;                 // (max-min)/mean
    std::vector<double> pairings;        // against supplied kernel functions
    bool pass = false;
};

/** Fiber integral R(y2) = |eps| * fiber mean of r per slice; Gauduchon
 * metrics make this constant in y2 (Lemma of the fiber-integrated Gauduchon
 * condition). */
inline ObstructionReport gauduchon_defect(const SurfaceSM& s, const GridSM& g,
                                          const HermitianMetricField& omega,
                                          double tolerance = 1e-6) {
    const std::size_t N = g.per_slice();
    ObstructionReport rep;
    rep.R_values.resize(g.S);
    rep.G_fiber_integral.resize(g.S);
    auto G = g_of_omega(s, g, omega);
    for (int j = 0; j < g.S; ++j) {
        const double* rj = omega.r.data() + std::size_t(j) * N;
        const double* Gj = G.data() + std::size_t(j) * N;
        rep.R_values[j] = std::abs(s.eps) *
                          std::accumulate(rj, rj + N, 0.0) / double(N);
        rep.G_fiber_integral[j] = std::abs(s.eps) *
                                  std::accumulate(Gj, Gj + N, 0.0) / double(N);
    }
    auto [lo, hi] = std::minmax_element(rep.R_values.begin(), rep.R_values.end());
    double mean = std::accumulate(rep.R_values.begin(), rep.R_values.end(), 0.0) /
                  double(g.S);
    rep.R_spread = (*hi - *lo) / std::abs(mean);
    rep.pass = rep.R_spread <= tolerance;
    return rep;
}

/** Obstruction pairing: quadrature of psi(y2) G(omega) omega_TV^2 for a
 * kernel test function psi given by its per-slice values. */
inline double obstruction_pairing(const SurfaceSM& s, const GridSM& g,
                                  const HermitianMetricField& omega,
                                  const std::vector<double>& psi_slices) {
    if (psi_slices.size() != std::size_t(g.S))
        throw ShapeMismatch("psi must be sampled per y2 slice");
    const std::size_t N = g.per_slice();
    auto G = g_of_omega(s, g, omega);
    double acc = 0, wsum = 0;
    for (int j = 0; j < g.S; ++j) {
        const double* Gj = G.data() + std::size_t(j) * N;
        double m = std::accumulate(Gj, Gj + N, 0.0) / double(N);
        acc += theta_weight(g, j) * psi_slices[j] * m;
        wsum += theta_weight(g, j);
    }
    return acc / wsum * volume_omega_tv2(s, g);
}

/** First 8 Fourier modes in theta = log y2 (the default kernel family). */
inline std::vector<double> kernel_test_function(const GridSM& g, int mode_index) {
    std::vector<double> psi(g.S);
    int m = mode_index / 2 + 1;
    bool use_sin = mode_index % 2;
    for (int j = 0; j < g.S; ++j) {
        double phase = 2.0 * M_PI * m * g.theta[j] / std::log(g.Lambda);
        psi[j] = use_sin ? std::sin(phase) : std::cos(phase);
    }
    return psi;
}

// --- i del delbar of a potential --------------------------------------------

/** omega_TV + i del delbar psi in frame components. Fiber derivatives are
 * spectral; y2 derivatives use centered differences in theta with ghost
 * slices filled by scalar seam transport. Throws NotPositive (with node
 * location) if the result is not a metric. */
inline HermitianMetricField metric_from_potential(
        const SurfaceSM& s, const GridSM& g, const std::vector<double>& psi,
        const Fft3& fft, const SpectralTablesSM& tab, const GlueTablesSM& glue) {
    const std::size_t N = g.per_slice();
    if (psi.size() != g.total())
        throw ShapeMismatch("potential size does not match grid");

    // spectra of all slices plus one ghost on each side
    std::vector<std::vector<cplx>> hat(g.S + 2, std::vector<cplx>(N));
    std::vector<double> ghost(N);
    for (int j = -1; j <= g.S; ++j) {
        const double* src;
        if (j == -1) {
            transport_seam(glue, psi.data() + std::size_t(g.S - 2) * N,
                           ghost.data(), /*up=*/false);
            src = ghost.data();
        } else if (j == g.S) {
            transport_seam(glue, psi.data() + std::size_t(1) * N, ghost.data(),
                           /*up=*/true);
            src = ghost.data();
        } else {
            src = psi.data() + std::size_t(j) * N;
        }
        auto& h = hat[j + 1];
        for (std::size_t i = 0; i < N; ++i) h[i] = src[i];
        fft.forward(h.data());
    }

    CoordinateMetricField c;
    c.gzz.resize(g.total());
    c.gww.resize(g.total());
    c.gzw.resize(g.total());
    std::vector<cplx> buf(N);
    const double h = g.h;
    for (int j = 0; j < g.S; ++j) {
        const double y2 = g.y2[j];
        const auto& pj = hat[j + 1];
        const auto& pm = hat[j];
        const auto& pp = hat[j + 2];
        // gzz = (psi_x1x1 + psi_y1y1)/4  and  gww = (psi_x2x2 + psi_y2y2)/4,
        // packed as one inverse transform (both are real fields)
        for (std::size_t i = 0; i < N; ++i) {
            cplx dth = (pp[i] - pm[i]) / (2.0 * h);
            cplx dth2 = (pp[i] - 2.0 * pj[i] + pm[i]) / (h * h);
            cplx gzz = -M_PI * M_PI * tab.zk[i] * pj[i];
            cplx gww = (-4.0 * M_PI * M_PI * tab.kC[i] * tab.kC[i] * pj[i] +
                        (dth2 - dth) / (y2 * y2)) / 4.0;
            buf[i] = gzz + cplx(0, 1) * gww;
        }
        fft.inverse(buf.data());
        for (std::size_t i = 0; i < N; ++i) {
            c.gzz[j * N + i] = buf[i].real() + beta_zz_sm(y2);
            c.gww[j * N + i] = buf[i].imag() + 1.0 / (y2 * y2); // omega_TV part
        }
        // gzw = (d/dx1 - i d/dy1)(d/dx2 + i d/dy2) psi / 4
        for (std::size_t i = 0; i < N; ++i) {
            cplx m1(0, 2.0 * M_PI * tab.kA[i]);
            m1 += cplx(2.0 * M_PI * tab.kB[i], 0); // -i * (2 pi i kB)
            cplx m2(0, 2.0 * M_PI * tab.kC[i]);
            cplx dth = (pp[i] - pm[i]) / (2.0 * h);
            buf[i] = m1 * (m2 * pj[i] + cplx(0, 1) * dth / y2) / 4.0;
        }
        fft.inverse(buf.data());
        for (std::size_t i = 0; i < N; ++i) c.gzw[j * N + i] = buf[i];
    }
    auto frame = coord_to_frame_sm(g, c);
    validate_positive(g, frame);
    return frame;
}

} // namespace ibs

#endif
