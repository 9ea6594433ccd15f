#ifndef IBS_SURFACE_SPLUS_HPP
#define IBS_SURFACE_SPLUS_HPP

#include <cmath>
#include <complex>

#include "ibs/algebraic_core.hpp"
#include "ibs/errors.hpp"

namespace ibs {

/** Geometric package of the surface S^+ built from N in SL(2,Z) and the
 * integers (p, q, r), r != 0, plus the translation parameter t of the
 * extra generator f0(z,w) = (z + t, gamma w).
 *
 * Generators of the fiber group act on (x2, y1, x1) by
 *   T_j: (x2 + a_j, y1 + y2 b_j, x1 + b_j x2 + c_j), j = 1,2
 * and the central T_3: x1 -> x1 + c3. The constants (c1, c2) solve
 *   (c1,c2) = (c1,c2) N^T + (e1,e2) + c3 (p,q)
 * which has a unique solution since 1 is not an eigenvalue of N. */
struct SurfaceSPlus {
    SpectralDataSPlus spec;
    std::int64_t p = 0, q = 0, r = 0;
    cplx t_param;
    double c1 = 0, c2 = 0;
    double c3 = 0;      // (b1 a2 - b2 a1)/r
    double e1 = 0, e2 = 0;
    double m_twist = 0; // Im(t)/log gamma
    double Lambda = 0;  // = gamma
};

inline SurfaceSPlus build_splus(const Mat2i& N, std::int64_t p, std::int64_t q,
                                std::int64_t r, cplx t_param) {
    if (r == 0) throw InvalidR("the integer r must be nonzero");
    SurfaceSPlus s;
    s.spec = spectral_splus(N);
    s.p = p; s.q = q; s.r = r;
    s.t_param = t_param;
    s.Lambda = s.spec.gamma;
    const double a1 = s.spec.a_vec[0], a2 = s.spec.a_vec[1];
    const double b1 = s.spec.b_vec[0], b2 = s.spec.b_vec[1];
    s.c3 = (b1 * a2 - b2 * a1) / double(r);
    if (std::abs(s.c3) < 1e-14)
        throw DegenerateLattice("c3 vanishes: eigenvectors are parallel");

    auto ej = [&](int j) {
        double nj1 = double(N(j, 0)), nj2 = double(N(j, 1));
        return 0.5 * nj1 * (nj1 - 1.0) * a1 * b1 +
               0.5 * nj2 * (nj2 - 1.0) * a2 * b2 + nj1 * nj2 * b1 * a2;
    };
    s.e1 = ej(0);
    s.e2 = ej(1);

    // row-vector equation c (I - N^T) = e + c3 (p,q)
    Eigen::Matrix2d Asys =
        Eigen::Matrix2d::Identity() - N.cast<double>().transpose();
    Eigen::Vector2d rhsv(s.e1 + s.c3 * double(p), s.e2 + s.c3 * double(q));
    Eigen::Vector2d c = Asys.transpose().colPivHouseholderQr().solve(rhsv);
    s.c1 = c[0];
    s.c2 = c[1];
    Eigen::Vector2d resid =
        Asys.transpose() * c - rhsv; // residual of the defining system
    if (resid.norm() > 1e-12)
        throw DegenerateLattice("c-system residual too large");

    s.m_twist = t_param.imag() / std::log(s.spec.gamma);
    return s;
}

/** Fiber lattice at height y2: columns v_j = (a_j, y2 b_j) in (x2, y1). */
inline Eigen::Matrix2d splus_lattice(const SurfaceSPlus& s, double y2) {
    Eigen::Matrix2d L;
    L << s.spec.a_vec[0], s.spec.a_vec[1],
         y2 * s.spec.b_vec[0], y2 * s.spec.b_vec[1];
    return L;
}

/** Grid on S^+: per y2 slice, an n_x1 grid along x1 in [0, c3) and an
 * n_cell x n_cell affine grid over the fundamental cell of the fiber
 * lattice. */
struct GridSPlus {
    int n_x1 = 0, n_cell = 0, S = 0;
    double Lambda = 0, h = 0;
    std::vector<double> y2, theta;
    std::size_t per_slice() const {
        return std::size_t(n_x1) * n_cell * n_cell;
    }
    std::size_t cell_nodes() const { return std::size_t(n_cell) * n_cell; }
    std::size_t total() const { return per_slice() * std::size_t(S); }
};

inline GridSPlus make_grid_splus(const SurfaceSPlus& s, int n_x1, int n_cell,
                                 int S) {
    if (n_x1 < 2 || (n_x1 & (n_x1 - 1)) != 0 || n_cell < 2 ||
        (n_cell & (n_cell - 1)) != 0)
        throw BadConfig("fiber resolutions must be powers of two");
    if (S < 3 || ((S - 1) & (S - 2)) != 0)
        throw BadConfig("slice count must be 2^k + 1");
    GridSPlus g;
    g.n_x1 = n_x1;
    g.n_cell = n_cell;
    g.S = S;
    g.Lambda = s.Lambda;
    g.h = std::log(s.Lambda) / double(S - 1);
    g.theta.resize(S);
    g.y2.resize(S);
    for (int j = 0; j < S; ++j) {
        g.theta[j] = g.h * j;
        g.y2[j] = std::exp(g.theta[j]);
    }
    return g;
}

} // namespace ibs

#endif
