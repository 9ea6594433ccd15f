#ifndef IBS_ALGEBRAIC_CORE_HPP
#define IBS_ALGEBRAIC_CORE_HPP

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <complex>
#include <cstdint>
#include <sstream>

#include "ibs/errors.hpp"

namespace ibs {

using Mat3i = Eigen::Matrix3<std::int64_t>;
using Mat2i = Eigen::Matrix2<std::int64_t>;
using Mat3d = Eigen::Matrix3d;
using Vec3d = Eigen::Vector3d;
using Vec2d = Eigen::Vector2d;
using cplx = std::complex<double>;
using Vec3c = Eigen::Vector3<cplx>;

inline std::int64_t det3i(const Mat3i& M) {
    return M(0,0)*(M(1,1)*M(2,2) - M(1,2)*M(2,1))
         - M(0,1)*(M(1,0)*M(2,2) - M(1,2)*M(2,0))
         + M(0,2)*(M(1,0)*M(2,1) - M(1,1)*M(2,0));
}

/** Empirical Liouville constant: min over 2 <= q <= q_bound of
 * q^d |x - p/q| with p = round(qx). A positive stable value certifies
 * (heuristically) that x behaves like an algebraic irrational of degree d. */
struct LiouvilleMargin {
    double x = 0;
    int degree_d = 0;
    std::int64_t q_bound = 0;
    double margin = 0;
};

inline LiouvilleMargin liouville_margin(double x, int degree_d, std::int64_t q_bound) {
    if (degree_d < 2 || q_bound < 2)
        throw BadConfig("liouville_margin requires degree_d >= 2 and q_bound >= 2");
    double margin = std::numeric_limits<double>::infinity();
    for (std::int64_t q = 2; q <= q_bound; ++q) {
        double p = std::round(q * x);
        double gap = std::abs(x - p / double(q));
        double val = std::pow(double(q), degree_d) * gap;
        if (val < margin) margin = val;
    }
    if (margin < 1e-14) {
        std::ostringstream os;
        os << "value " << x << " admits a rational approximation to working precision";
        throw RationalInput(os.str());
    }
    return {x, degree_d, q_bound, margin};
}

/** Denominator sweep: true when no p/q with q <= q_bound matches x to tol. */
inline bool is_irrational_to_precision(double x, std::int64_t q_bound = 1000000,
                                       double tol = 1e-15) {
    for (std::int64_t q = 1; q <= q_bound; ++q) {
        double p = std::round(q * x);
        if (std::abs(x - p / double(q)) <= tol) return false;
    }
    return true;
}

namespace detail {

// Degree of the minimal polynomial of the Perron root of a monic integer
// cubic t^3 + c2 t^2 + c1 t + c0, by the rational root theorem: an integer
// cubic with no rational root is irreducible over Q.
inline int cubic_root_degree(std::int64_t c2, std::int64_t c1, std::int64_t c0,
                             double lambda) {
    auto divisors_of = [](std::int64_t v) {
        std::vector<std::int64_t> ds;
        v = std::llabs(v);
        for (std::int64_t d = 1; d * d <= v; ++d)
            if (v % d == 0) { ds.push_back(d); ds.push_back(v / d); }
        return ds;
    };
    if (c0 == 0) return 2; // t = 0 is a root; lambda satisfies a quadratic
    for (std::int64_t d : divisors_of(c0)) {
        for (std::int64_t r : {d, -d}) {
            if (((r * r + c2 * r + c1) * r + c0) == 0) {
                // factor out (t - r); lambda satisfies the remaining quadratic
                // unless lambda itself is the rational root
                if (std::abs(lambda - double(r)) < 1e-9) return 1;
                std::int64_t b = c2 + r, c = c1 + r * (c2 + r);
                std::int64_t disc = b * b - 4 * c;
                if (disc >= 0) {
                    auto s = std::int64_t(std::llround(std::sqrt(double(disc))));
                    for (std::int64_t ss : {s - 1, s, s + 1})
                        if (ss >= 0 && ss * ss == disc) return 1;
                }
                return 2;
            }
        }
    }
    return 3;
}

} // namespace detail

struct SpectralDataSM {
    Mat3i M;
    double lambda = 0;          // real eigenvalue > 1
    cplx mu;                    // complex eigenvalue, lambda*|mu|^2 = 1
    Vec3d ell;                  // eigenvector for lambda
    Vec3c m_vec;                // eigenvector for mu
    int degree_d = 0;           // algebraic degree of ell[i]/ell[j]
    int ratio_i = 0, ratio_j = 0;
};

inline SpectralDataSM spectral_sm(const Mat3i& M) {
    if (det3i(M) != 1)
        throw NotUnimodular("det(M) must equal 1");
    Mat3d Md = M.cast<double>();
    Eigen::EigenSolver<Mat3d> es(Md);
    auto ev = es.eigenvalues();

    int real_idx = -1, cplx_idx = -1;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(ev[i].imag()) < 1e-9) {
            if (ev[i].real() > 1.0 + 1e-9) real_idx = i;
        } else if (cplx_idx < 0 || ev[i].imag() > 0) {
            cplx_idx = i;
        }
    }
    if (real_idx < 0 || cplx_idx < 0 || std::abs(ev[cplx_idx].imag()) < 1e-9)
        throw NoInoueSpectrum(
            "M must have one real eigenvalue > 1 and a complex conjugate pair");

    SpectralDataSM out;
    out.M = M;
    out.lambda = ev[real_idx].real();
    out.mu = ev[cplx_idx];
    if (std::abs(out.lambda * std::norm(out.mu) - 1.0) > 1e-12)
        throw NoInoueSpectrum("eigenvalues fail lambda*|mu|^2 = 1");

    // Polish lambda by Newton on the characteristic polynomial, then derive
    // |mu| from the product relation so the triple is consistent to 1e-15.
    const auto c2 = -(M(0,0) + M(1,1) + M(2,2));
    const std::int64_t c1 = (M(0,0)*M(1,1) - M(0,1)*M(1,0))
                          + (M(0,0)*M(2,2) - M(0,2)*M(2,0))
                          + (M(1,1)*M(2,2) - M(1,2)*M(2,1));
    const std::int64_t c0 = -1;
    double l = out.lambda;
    for (int it = 0; it < 50; ++it) {
        double f = ((l + double(c2)) * l + double(c1)) * l + double(c0);
        double fp = (3 * l + 2 * double(c2)) * l + double(c1);
        double step = f / fp;
        l -= step;
        if (std::abs(step) < 1e-16 * std::abs(l)) break;
    }
    out.lambda = l;
    double mu_abs = 1.0 / std::sqrt(l);
    out.mu = mu_abs * (out.mu / std::abs(out.mu));

    // Eigenvectors: real one via the nullspace of (M - lambda I), complex one
    // from the eigensolver; both normalized deterministically.
    Eigen::FullPivLU<Mat3d> lu(Md - l * Mat3d::Identity());
    lu.setThreshold(1e-7);
    if (lu.kernel().cols() < 1)
        throw DegenerateEigenvector("no eigenvector for lambda");
    out.ell = lu.kernel().col(0).normalized();
    for (int i = 0; i < 3; ++i) {
        if (std::abs(out.ell[i]) > 1e-10) {
            if (out.ell[i] < 0) out.ell = -out.ell;
            break;
        }
    }

    Vec3c mv = es.eigenvectors().col(cplx_idx);
    // refine eigenvector by one inverse-iteration pass at the polished mu
    Eigen::Matrix3cd Ac = Md.cast<cplx>() - out.mu * Eigen::Matrix3cd::Identity();
    Vec3c mv2 = Ac.fullPivLu().solve(mv);
    if (mv2.norm() > 1e3 * mv.norm()) mv = mv2; // accept only if it sharpened
    mv.normalize();
    for (int i = 0; i < 3; ++i) {
        if (std::abs(mv[i]) > 1e-10) {
            cplx phase = mv[i] / std::abs(mv[i]);
            mv = mv / phase; // first significant entry made real positive
            break;
        }
    }
    out.m_vec = mv;

    if ((Md * out.ell - l * out.ell).norm() > 1e-12 * out.ell.norm())
        throw DegenerateEigenvector("real eigen-equation residual too large");
    if ((Md.cast<cplx>() * out.m_vec - out.mu * out.m_vec).norm() > 1e-12)
        throw DegenerateEigenvector("complex eigen-equation residual too large");

    out.degree_d = detail::cubic_root_degree(c2, c1, c0, l);

    // lexicographically first defined ratio ell[i]/ell[j]
    bool found = false;
    for (int i = 0; i < 3 && !found; ++i)
        for (int j = 0; j < 3 && !found; ++j) {
            if (i == j || std::abs(out.ell[j]) <= 1e-10) continue;
            out.ratio_i = i; out.ratio_j = j; found = true;
        }
    if (!found)
        throw DegenerateEigenvector("all eigenvector ratios undefined");
    double ratio = out.ell[out.ratio_i] / out.ell[out.ratio_j];
    if (!is_irrational_to_precision(ratio))
        throw RationalInput("eigenvector ratio matches a rational to 1e-15");
    return out;
}

struct SpectralDataSPlus {
    Mat2i N;
    double gamma = 0;   // real eigenvalue > 1
    Vec2d a_vec;        // eigenvector for gamma
    Vec2d b_vec;        // eigenvector for 1/gamma
    int degree_d = 0;
};

inline SpectralDataSPlus spectral_splus(const Mat2i& N) {
    if (N(0,0)*N(1,1) - N(0,1)*N(1,0) != 1)
        throw NotUnimodular("det(N) must equal 1");
    const double tr = double(N(0,0) + N(1,1));
    if (std::abs(tr) <= 2)
        throw NoHyperbolicSpectrum("|trace| <= 2: no real eigenvalue > 1");

    SpectralDataSPlus out;
    out.N = N;
    const double disc = tr * tr - 4.0;
    out.gamma = (std::abs(tr) + std::sqrt(disc)) / 2.0;
    if (tr < 0)
        throw NoHyperbolicSpectrum("negative trace: no eigenvalue > 1");

    auto eigvec = [&](double lam) {
        Vec2d v;
        double a = double(N(0,0)) - lam, b = double(N(0,1));
        double c = double(N(1,0)), d = double(N(1,1)) - lam;
        if (std::hypot(a, b) > std::hypot(c, d)) v = Vec2d(-b, a);
        else v = Vec2d(-d, c);
        v.normalize();
        for (int i = 0; i < 2; ++i)
            if (std::abs(v[i]) > 1e-10) { if (v[i] < 0) v = -v; break; }
        return v;
    };
    out.a_vec = eigvec(out.gamma);
    out.b_vec = eigvec(1.0 / out.gamma);

    Eigen::Matrix2d Nd = N.cast<double>();
    if ((Nd * out.a_vec - out.gamma * out.a_vec).norm() > 1e-12 ||
        (Nd * out.b_vec - out.b_vec / out.gamma).norm() > 1e-12)
        throw DegenerateEigenvector("eigen-equation residual too large");

    // gamma solves t^2 - tr t + 1; rational only if the discriminant is a square
    auto s = std::int64_t(std::llround(std::sqrt(disc)));
    out.degree_d = 2;
    for (std::int64_t ss : {s - 1, s, s + 1})
        if (ss >= 0 && double(ss) * double(ss) == disc) out.degree_d = 1;
    if (out.degree_d != 2)
        throw NoHyperbolicSpectrum("gamma is rational; surface data degenerate");

    for (double slope : {out.a_vec[1] / out.a_vec[0], out.b_vec[1] / out.b_vec[0]})
        if (!is_irrational_to_precision(slope))
            throw RationalInput("eigenvector slope matches a rational to 1e-15");
    return out;
}

} // namespace ibs

#endif
