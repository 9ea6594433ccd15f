#ifndef IBS_SPLUS_SOLVER_HPP
#define IBS_SPLUS_SOLVER_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "ibs/fft.hpp"
#include "ibs/slf_solver.hpp"
#include "ibs/surface_splus.hpp"

namespace ibs {

// ---------------------------------------------------------------------------
// Bounded solutions of u'' - a^2 u = g on a y1 line
// ---------------------------------------------------------------------------

namespace detail {

/** Moments M_r = int_0^1 xi^r e^{-q xi} d(xi), r = 0..3. The downward part
 * of the recursion cancels catastrophically for small q, so a short series
 * is used there. */
inline std::array<double, 4> exp_moments(double q) {
    std::array<double, 4> M{};
    if (q < 0.5) {
        for (int r = 0; r < 4; ++r) {
            double term = 1.0, sum = 0.0;
            for (int j = 0; j < 40; ++j) {
                sum += term / double(r + j + 1);
                term *= -q / double(j + 1);
                if (std::abs(term) < 1e-20) break;
            }
            M[r] = sum;
        }
    } else {
        const double E = std::exp(-q);
        M[0] = (1.0 - E) / q;
        for (int r = 1; r < 4; ++r) M[r] = (double(r) * M[r - 1] - E) / q;
    }
    return M;
}

/** Weights integrating the cubic Lagrange interpolant through four nodes
 * (in panel units) exactly against e^{-q xi} over the panel [0, 1]. */
inline std::array<double, 4> exp_panel_weights(const std::array<double, 4>& nodes,
                                               double q, double delta) {
    const auto M = exp_moments(q);
    std::array<double, 4> w{};
    for (int l = 0; l < 4; ++l) {
        std::array<double, 4> coef{};
        coef[0] = 1.0;
        int deg = 0;
        double den = 1.0;
        for (int i = 0; i < 4; ++i) {
            if (i == l) continue;
            den *= nodes[l] - nodes[i];
            for (int r = deg + 1; r >= 1; --r)
                coef[r] = coef[r - 1] - nodes[i] * coef[r];
            coef[0] = -nodes[i] * coef[0];
            ++deg;
        }
        double v = 0.0;
        for (int r = 0; r < 4; ++r) v += coef[r] * M[r];
        w[l] = delta * v / den;
    }
    return w;
}

} // namespace detail

/** Quadrature weights w such that
 *   int_{-L}^{L} e^{-a|s|} f(s) ds ~= sum_i w[i] f(s_i),  s_i = (i - m) delta,
 * L = m delta. Each panel integrates the local cubic interpolant of f
 * against the exact exponential kernel, so the rule is exact for cubic f
 * and any a. */
inline std::vector<double> exp_kernel_weights(double a, double delta, int m) {
    if (m < 3)
        throw WindowTooSmall("kernel window must span at least three panels");
    const double q = a * delta;
    const auto wA = detail::exp_panel_weights({-1.0, 0.0, 1.0, 2.0}, q, delta);
    const auto wB = detail::exp_panel_weights({-2.0, -1.0, 0.0, 1.0}, q, delta);

    // right-side weights by offset d from the center, d in [-1, m]
    std::vector<double> cr(std::size_t(m) + 2, 0.0);
    for (int j = 0; j < m; ++j) {
        const double fac = std::exp(-q * double(j));
        if (j < m - 1)
            for (int l = 0; l < 4; ++l) cr[std::size_t(j - 1 + l) + 1] += fac * wA[l];
        else
            for (int l = 0; l < 4; ++l) cr[std::size_t(j - 2 + l) + 1] += fac * wB[l];
    }
    // mirror: the left half integral uses the reflected samples
    std::vector<double> w(2 * std::size_t(m) + 1, 0.0);
    for (int d = -1; d <= m; ++d) {
        const double v = cr[std::size_t(d) + 1];
        w[std::size_t(m + d)] += v;
        w[std::size_t(m - d)] += v;
    }
    return w;
}

struct BoundedOdeResult {
    double u = 0;
    double truncation_bound = 0;
};

/** Evaluate the unique bounded solution of u'' - a^2 u = g at the center of
 * a sampled window: u(y) = -(1/2a) int e^{-a|y-s|} g(s) ds, truncated to
 * |s - y| <= L = m delta. g holds 2m+1 uniform samples centered at y.
 * Throws WindowTooSmall when the truncation tail alone exceeds tol. */
inline BoundedOdeResult bounded_ode_solve(double a, const std::vector<double>& g,
                                          double delta, double tol = 1e-9) {
    if (a <= 0 || delta <= 0)
        throw BadConfig("bounded_ode_solve needs a > 0 and delta > 0");
    if (g.size() < 7 || g.size() % 2 == 0)
        throw ShapeMismatch("window must hold an odd number (>= 7) of samples");
    const int m = int((g.size() - 1) / 2);
    const double L = double(m) * delta;
    double gmax = 0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    BoundedOdeResult res;
    res.truncation_bound = gmax * std::exp(-a * L) / (a * a);
    if (res.truncation_bound > tol)
        throw WindowTooSmall("truncation tail exceeds the requested tolerance");
    const auto w = exp_kernel_weights(a, delta, m);
    double acc = 0;
    for (std::size_t i = 0; i < g.size(); ++i) acc += w[i] * g[i];
    res.u = -acc / (2.0 * a);
    return res;
}

// ---------------------------------------------------------------------------
// Quasi-periodic fiber sections
// ---------------------------------------------------------------------------

/** Phase exponent accumulated when a weight-k section is continued q lattice
 * steps along v_j = (a_j, y2 b_j) starting at a point with abscissa x2:
 *   f(P + q v_j) = f(P) exp(-2 pi i k xi / c3),
 *   xi = q (b_j x2 + c_j) + a_j b_j q(q-1)/2,   q in Z. */
inline double section_walk_xi(double a_j, double b_j, double c_j, double x2,
                              long q) {
    return double(q) * (b_j * x2 + c_j) +
           a_j * b_j * 0.5 * double(q) * double(q - 1);
}

/** Sampler for one Fourier weight k of a fiber section given on the n x n
 * fundamental-cell grid of the lattice v_1, v_2 at height y2. Values outside
 * the base cell are produced by the quasi-periodicity phases; a padded
 * extension is precomputed so interpolation involves no trigonometry. */
class SectionSampler {
  public:
    SectionSampler(const SurfaceSPlus& s, double y2, int k, int n,
                   const cplx* cell_data, int pad1, int pad2)
        : n_(n), p1_(pad1), p2_(pad2), W2_(n + 2 * pad2),
          a1_(s.spec.a_vec[0]), a2_(s.spec.a_vec[1]),
          b1_(s.spec.b_vec[0]), b2_(s.spec.b_vec[1]),
          c1_(s.c1), c2_(s.c2), k_over_c3_(double(k) / s.c3), y2_(y2) {
        const double det = y2 * (a1_ * b2_ - a2_ * b1_);
        if (std::abs(det) < 1e-14)
            throw DegenerateLattice("fiber lattice is degenerate");
        Linv_ << y2 * b2_ / det, -a2_ / det, -y2 * b1_ / det, a1_ / det;
        E_.resize(std::size_t(n + 2 * pad1) * W2_);
        for (long I1 = -pad1; I1 < n + pad1; ++I1)
            for (long I2 = -pad2; I2 < n + pad2; ++I2)
                E_[std::size_t(I1 + pad1) * W2_ + std::size_t(I2 + pad2)] =
                    raw(cell_data, I1, I2);
    }

    /** Order-8 tensor Lagrange interpolation at cell-index coordinates
     * (X1, X2) = n * (s1, s2); requires the stencil to stay inside the
     * padded extension. */
    cplx interp_index(double X1, double X2) const {
        const long i0 = long(std::floor(X1)) - 3;
        const long j0 = long(std::floor(X2)) - 3;
        std::array<double, 8> wx, wy;
        lagrange8(X1 - double(i0), wx);
        lagrange8(X2 - double(j0), wy);
        cplx acc = 0;
        const std::size_t base =
            std::size_t(i0 + p1_) * W2_ + std::size_t(j0 + p2_);
        for (int l = 0; l < 8; ++l) {
            const cplx* row = E_.data() + base + std::size_t(l) * W2_;
            cplx r = 0;
            for (int m = 0; m < 8; ++m) r += wy[std::size_t(m)] * row[m];
            acc += wx[std::size_t(l)] * r;
        }
        return acc;
    }

    /** Value at an arbitrary fiber point (x2, y1): folds into the base cell
     * with the quasi-periodicity phases, then interpolates. */
    cplx value_at(double x2, double y1) const {
        Eigen::Vector2d sc = Linv_ * Eigen::Vector2d(x2, y1);
        const long q1 = long(std::floor(sc[0]));
        const long q2 = long(std::floor(sc[1]));
        const cplx base = interp_index((sc[0] - double(q1)) * n_,
                                       (sc[1] - double(q2)) * n_);
        const double x2b = x2 - double(q1) * a1_ - double(q2) * a2_;
        double xi = section_walk_xi(a1_, b1_, c1_, x2b, q1);
        xi += section_walk_xi(a2_, b2_, c2_, x2b + double(q1) * a1_, q2);
        return base * std::polar(1.0, -2.0 * M_PI * k_over_c3_ * xi);
    }

  private:
    static void lagrange8(double u, std::array<double, 8>& w) {
        // uniform nodes 0..7; denominators (-1)^(7-l) l! (7-l)!
        static constexpr std::array<double, 8> den = {
            -5040.0, 720.0, -240.0, 144.0, -144.0, 240.0, -720.0, 5040.0};
        std::array<double, 8> pre, suf;
        pre[0] = 1.0;
        for (int i = 1; i < 8; ++i) pre[std::size_t(i)] = pre[std::size_t(i - 1)] * (u - double(i - 1));
        suf[7] = 1.0;
        for (int i = 6; i >= 0; --i) suf[std::size_t(i)] = suf[std::size_t(i + 1)] * (u - double(i + 1));
        for (int l = 0; l < 8; ++l)
            w[std::size_t(l)] = pre[std::size_t(l)] * suf[std::size_t(l)] / den[std::size_t(l)];
    }

    cplx raw(const cplx* data, long I1, long I2) const {
        const long i1m = ((I1 % n_) + n_) % n_;
        const long i2m = ((I2 % n_) + n_) % n_;
        const long q1 = (I1 - i1m) / n_;
        const long q2 = (I2 - i2m) / n_;
        const cplx v = data[std::size_t(i1m) * n_ + std::size_t(i2m)];
        if (q1 == 0 && q2 == 0) return v;
        const double x2b = (a1_ * double(i1m) + a2_ * double(i2m)) / double(n_);
        double xi = section_walk_xi(a1_, b1_, c1_, x2b, q1);
        xi += section_walk_xi(a2_, b2_, c2_, x2b + double(q1) * a1_, q2);
        return v * std::polar(1.0, -2.0 * M_PI * k_over_c3_ * xi);
    }

    int n_, p1_, p2_, W2_;
    double a1_, a2_, b1_, b2_, c1_, c2_, k_over_c3_, y2_;
    Eigen::Matrix2d Linv_;
    std::vector<cplx> E_;
};

// ---------------------------------------------------------------------------
// Leafwise solver on S^+
// ---------------------------------------------------------------------------

/** min over 0 < |(m,n)|_inf <= K of (n a1 - m a2)^2 (m^2+n^2)^(d-1): the
 * small-divisor monitor for the lattice (weight-zero) modes. */
inline double liouville_check_splus(const SurfaceSPlus& s, int K) {
    double best = std::numeric_limits<double>::infinity();
    const int d = s.spec.degree_d;
    const double a1 = s.spec.a_vec[0], a2 = s.spec.a_vec[1];
    for (int m = -K; m <= K; ++m)
        for (int n = -K; n <= K; ++n) {
            if (m == 0 && n == 0) continue;
            const double D = double(n) * a1 - double(m) * a2;
            best = std::min(best, D * D * std::pow(double(m) * m + double(n) * n,
                                                   d - 1));
        }
    return best;
}

struct SPlusOptions {
    double tolerance = 1e-8; // target accuracy driving the kernel window
    double delta = 0.01;     // kernel quadrature spacing along y1
    int residual_stride = 4; // node subsampling for the residual diagnostic
};

/** Solve Delta_D u = rhs on S^+, where on each slice
 *   Delta_D = (d^2/dx1^2 + d^2/dy1^2) / 32.
 * Weight-zero (x1-independent) content is solved spectrally in the fiber
 * lattice modes; each nonzero Fourier weight k along the central direction
 * satisfies u_k'' - (2 pi k / c3)^2 u_k = 32 rhs_k along y1 lines and is
 * evaluated through the bounded-kernel quadrature. */
inline std::pair<LeafPotential, SolverReport> solve_splus(
        const SurfaceSPlus& s, const GridSPlus& g, const std::vector<double>& rhs,
        const SPlusOptions& opt = {}) {
    const int n = g.n_cell, nx = g.n_x1;
    const std::size_t Nc = g.cell_nodes();
    const std::size_t Ns = g.per_slice();
    if (rhs.size() != g.total())
        throw ShapeMismatch("rhs size does not match grid");

    const double a1 = s.spec.a_vec[0], a2 = s.spec.a_vec[1];
    const double b1 = s.spec.b_vec[0], b2 = s.spec.b_vec[1];
    const double Delta = a1 * b2 - a2 * b1;
    if (std::abs(Delta) < 1e-14)
        throw DegenerateLattice("eigenvector lattice is degenerate");

    double rhs_scale = 0;
    for (double v : rhs) rhs_scale = std::max(rhs_scale, std::abs(v));

    LeafPotential pot;
    pot.u.assign(g.total(), 0.0);
    pot.mean_per_slice.resize(std::size_t(g.S));
    SolverReport rep;
    rep.truncation_K = nx / 2;
    rep.liouville_check = liouville_check_splus(s, 16);

    Fft2 fft2(n);
    std::vector<double> lattice_mode_max(Nc, 0.0);
    double min_div = std::numeric_limits<double>::infinity();
    double resid = 0;

    // x1-DFT twiddles, normalized so f = sum_k fhat_k e^{2 pi i k ix / nx}
    std::vector<cplx> tw(std::size_t(nx) * nx);
    for (int k = 0; k < nx; ++k)
        for (int ix = 0; ix < nx; ++ix)
            tw[std::size_t(k) * nx + ix] =
                std::polar(1.0, -2.0 * M_PI * double(k) * ix / double(nx));

    // kernel weights per Fourier weight (slice independent)
    struct KernelRule {
        int m = 0;
        double a = 0;
        std::vector<double> w;
    };
    std::vector<KernelRule> rules(std::size_t(nx / 2) + 1);
    for (int kp = 1; kp <= nx / 2; ++kp) {
        KernelRule& r = rules[std::size_t(kp)];
        r.a = 2.0 * M_PI * double(kp) / std::abs(s.c3);
        const double gref = 32.0 * std::max(rhs_scale, 1e-300);
        double L = std::max(
            3.0, std::log(gref / (r.a * r.a * opt.tolerance)) / r.a + 0.5 / r.a);
        r.m = std::max(3, int(std::ceil(L / opt.delta)));
        r.w = exp_kernel_weights(r.a, opt.delta, r.m);
    }

    std::vector<std::vector<cplx>> ghat, uhat;
    ghat.resize(std::size_t(nx));
    uhat.resize(std::size_t(nx));
    for (int k = 0; k < nx; ++k) {
        ghat[std::size_t(k)].resize(Nc);
        uhat[std::size_t(k)].resize(Nc);
    }

    for (int j = 0; j < g.S; ++j) {
        const double y2 = g.y2[std::size_t(j)];
        const double* rj = rhs.data() + std::size_t(j) * Ns;

        double mean = std::accumulate(rj, rj + Ns, 0.0) / double(Ns);
        if (std::abs(mean) > 1e-8 * std::max(1.0, rhs_scale))
            throw NonZeroMean("rhs has nonzero fiber mean on a slice");

        // Fourier transform along x1 per cell node
        for (int k = 0; k < nx; ++k) {
            const cplx* tk = tw.data() + std::size_t(k) * nx;
            cplx* gk = ghat[std::size_t(k)].data();
            std::fill(gk, gk + Nc, cplx(0));
            for (int ix = 0; ix < nx; ++ix) {
                const double* slab = rj + std::size_t(ix) * Nc;
                const cplx t = tk[ix] / double(nx);
                for (std::size_t i = 0; i < Nc; ++i) gk[i] += t * slab[i];
            }
        }

        // weight zero: spectral division in the fiber lattice modes
        {
            std::vector<cplx>& buf = ghat[0];
            fft2.forward(buf.data());
            const double c = -32.0 * std::pow(y2 * Delta, 2) /
                             (4.0 * M_PI * M_PI);
            std::size_t idx = 0;
            for (int m1 = 0; m1 < n; ++m1)
                for (int m2 = 0; m2 < n; ++m2, ++idx) {
                    const int mf = signed_freq(m1, n);
                    const int nf = signed_freq(m2, n);
                    if (mf == 0 && nf == 0) {
                        buf[idx] = 0;
                        continue;
                    }
                    const double D = double(nf) * a1 - double(mf) * a2;
                    if (std::abs(D) < 1e-14)
                        throw DivisorUnderflow(
                            "lattice divisor underflow at a nonzero mode");
                    min_div = std::min(min_div, D * D);
                    buf[idx] *= c / (D * D);
                    lattice_mode_max[idx] = std::max(
                        lattice_mode_max[idx], std::abs(buf[idx]) / double(Nc));
                }
            fft2.inverse(buf.data());
            uhat[0] = buf;
        }

        // nonzero weights: bounded kernel along y1 lines
        // line direction in cell-index units per quadrature step delta
        const double e1 = -a2 / (y2 * Delta) * double(n) * opt.delta;
        const double e2 = a1 / (y2 * Delta) * double(n) * opt.delta;
        for (int kp = 1; kp <= nx / 2; ++kp) {
            std::vector<cplx>& gk = ghat[std::size_t(kp)];
            std::vector<cplx>& uk = uhat[std::size_t(kp)];
            double gmax = 0;
            for (const cplx& v : gk) gmax = std::max(gmax, std::abs(v));
            if (gmax <= 1e-13 * std::max(1.0, rhs_scale)) {
                std::fill(uk.begin(), uk.end(), cplx(0));
                continue;
            }
            const KernelRule& kr = rules[std::size_t(kp)];
            const int m = kr.m, ext = m + 2;
            const int pad1 = int(std::ceil(std::abs(e1) * double(ext))) + 5;
            const int pad2 = int(std::ceil(std::abs(e2) * double(ext))) + 5;
            SectionSampler samp(s, y2, kp, n, gk.data(), pad1, pad2);

            std::vector<cplx> line(2 * std::size_t(ext) + 1);
            std::size_t node = 0;
            for (int i1 = 0; i1 < n; ++i1)
                for (int i2 = 0; i2 < n; ++i2, ++node) {
                    for (int t = -ext; t <= ext; ++t)
                        line[std::size_t(t + ext)] = samp.interp_index(
                            double(i1) + double(t) * e1,
                            double(i2) + double(t) * e2);
                    auto center_sum = [&](int c) {
                        cplx acc = 0;
                        for (int d = -m; d <= m; ++d)
                            acc += kr.w[std::size_t(d + m)] *
                                   line[std::size_t(c + d + ext)];
                        return acc;
                    };
                    const cplx s0 = center_sum(0);
                    uk[node] = -(32.0 / (2.0 * kr.a)) * s0;
                    if (i1 % opt.residual_stride == 0 &&
                        i2 % opt.residual_stride == 0) {
                        // fourth-order second difference of the kernel
                        // solution, reusing the shifted window sums
                        const double f = -(32.0 / (2.0 * kr.a));
                        const cplx um2 = f * center_sum(-2), um1 = f * center_sum(-1);
                        const cplx up1 = f * center_sum(1), up2 = f * center_sum(2);
                        const cplx upp = (-up2 + 16.0 * up1 - 30.0 * uk[node] +
                                          16.0 * um1 - um2) /
                                         (12.0 * opt.delta * opt.delta);
                        const cplx r = upp - kr.a * kr.a * uk[node] -
                                       32.0 * line[std::size_t(ext)];
                        // a weight-k pair contributes 2 Re(.) to the field
                        resid = std::max(resid, 2.0 * std::abs(r) / 32.0);
                    }
                }
        }
        // reassemble the real field on the slice; conjugate weights are
        // synthesized from u_{-k} = conj(u_k)
        double* uj = pot.u.data() + std::size_t(j) * Ns;
        for (int ix = 0; ix < nx; ++ix) {
            double* slab = uj + std::size_t(ix) * Nc;
            for (std::size_t i = 0; i < Nc; ++i) {
                double v = uhat[0][i].real();
                for (int kp = 1; kp < nx / 2; ++kp) {
                    const cplx ph = std::conj(tw[std::size_t(kp) * nx + ix]);
                    v += 2.0 * (uhat[std::size_t(kp)][i] * ph).real();
                }
                // Nyquist weight: real cosine bin
                const cplx phN = std::conj(tw[std::size_t(nx / 2) * nx + ix]);
                v += (uhat[std::size_t(nx / 2)][i] * phN).real();
                slab[i] = v;
            }
        }
        pot.mean_per_slice[std::size_t(j)] =
            std::accumulate(uj, uj + Ns, 0.0) / double(Ns);
    }

    rep.min_divisor = min_div;
    rep.residual_linf = resid;

    // decay curve from the lattice-mode coefficients
    {
        double cmax = 0;
        for (double v : lattice_mode_max) cmax = std::max(cmax, v);
        std::size_t idx = 0;
        for (int m1 = 0; m1 < n; ++m1)
            for (int m2 = 0; m2 < n; ++m2, ++idx) {
                if (idx == 0 || lattice_mode_max[idx] < 1e-14 * cmax) continue;
                const int mf = signed_freq(m1, n);
                const int nf = signed_freq(m2, n);
                const double D = double(nf) * a1 - double(mf) * a2;
                rep.decay_curve.push_back(
                    {std::hypot(double(mf), double(nf)), lattice_mode_max[idx],
                     D * D});
            }
        std::sort(rep.decay_curve.begin(), rep.decay_curve.end(),
                  [](const DecayPoint& x, const DecayPoint& y) {
                      return x.mode_norm < y.mode_norm;
                  });
    }

    // seam: u(x2, y1, x1; y2=1) must equal u(gamma x2, y1 + Im t,
    // x1 + Re t; y2 = gamma)
    {
        double uscale = 0;
        for (double v : pot.u) uscale = std::max(uscale, std::abs(v));

        const double* utop = pot.u.data() + std::size_t(g.S - 1) * Ns;
        for (int k = 0; k < nx; ++k) {
            const cplx* tk = tw.data() + std::size_t(k) * nx;
            cplx* uk = ghat[std::size_t(k)].data(); // reuse as scratch
            std::fill(uk, uk + Nc, cplx(0));
            for (int ix = 0; ix < nx; ++ix) {
                const cplx t = tk[ix] / double(nx);
                const double* slab = utop + std::size_t(ix) * Nc;
                for (std::size_t i = 0; i < Nc; ++i) uk[i] += t * slab[i];
            }
        }
        std::vector<SectionSampler> samp;
        samp.reserve(std::size_t(nx / 2) + 1);
        const double yt = g.y2[std::size_t(g.S - 1)];
        for (int kp = 0; kp <= nx / 2; ++kp)
            samp.emplace_back(s, yt, kp, n, ghat[std::size_t(kp)].data(), 5, 5);

        const Eigen::Matrix2d Lb = splus_lattice(s, g.y2[0]);
        const double t1 = s.t_param.real(), t2 = s.t_param.imag();
        double res = 0;
        for (int ix = 0; ix < nx; ++ix)
            for (int i1 = 0; i1 < n; ++i1)
                for (int i2 = 0; i2 < n; ++i2) {
                    const Eigen::Vector2d P =
                        Lb * Eigen::Vector2d(double(i1) / n, double(i2) / n);
                    const double x1p = double(ix) * s.c3 / double(nx) + t1;
                    const double x2p = s.Lambda * P[0];
                    const double y1p = P[1] + t2;
                    double v = samp[0].value_at(x2p, y1p).real();
                    for (int kp = 1; kp < nx / 2; ++kp) {
                        const cplx ph = std::polar(
                            1.0, 2.0 * M_PI * double(kp) * x1p / s.c3);
                        v += 2.0 * (samp[std::size_t(kp)].value_at(x2p, y1p) * ph)
                                       .real();
                    }
                    const cplx phN = std::polar(
                        1.0, 2.0 * M_PI * double(nx / 2) * x1p / s.c3);
                    v += (samp[std::size_t(nx / 2)].value_at(x2p, y1p) * phN).real();
                    const double ub =
                        pot.u[(std::size_t(ix) * Nc) +
                              std::size_t(i1) * n + std::size_t(i2)];
                    res = std::max(res, std::abs(v - ub));
                }
        pot.seam_residual = res;
        if (res > 1e2 * opt.tolerance * std::max(1.0, uscale))
            throw SeamMismatch("solution violates the mapping-torus seam");
    }

    return {std::move(pot), std::move(rep)};
}

} // namespace ibs

#endif
