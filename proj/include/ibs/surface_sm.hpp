#ifndef IBS_SURFACE_SM_HPP
#define IBS_SURFACE_SM_HPP

#include <array>
#include <cmath>
#include <complex>
#include <vector>

#include "ibs/algebraic_core.hpp"
#include "ibs/errors.hpp"
#include "ibs/fft.hpp"

namespace ibs {

/** Geometric package of the surface S_M built from M in SL(3,Z):
 * lattice basis P (columns (Re m_j, Im m_j, l_j)), the change-of-basis
 * vectors A, B, C expressing d/dx1, d/dy1, d/dx2 in the lattice basis,
 * the PSD rank-2 matrix Z controlling the leafwise Laplacian symbol, and
 * the integer torus map M^T realizing the mapping-torus seam. */
struct SurfaceSM {
    SpectralDataSM spec;
    Mat3d P;
    double eps = 0;           // det(P)
    Vec3d A, B, C;
    Mat3d Z;                  // Z_jh = A_j A_h + B_j B_h
    Mat3i glue;               // = M^T, action of f0 on lattice coordinates
    Mat3i glue_inv;           // = M^{-T}
    double Lambda = 0;        // = lambda, seam ratio in y2
};

inline Mat3i adjugate3i(const Mat3i& M) {
    Mat3i a;
    a(0,0) =  (M(1,1)*M(2,2) - M(1,2)*M(2,1));
    a(0,1) = -(M(0,1)*M(2,2) - M(0,2)*M(2,1));
    a(0,2) =  (M(0,1)*M(1,2) - M(0,2)*M(1,1));
    a(1,0) = -(M(1,0)*M(2,2) - M(1,2)*M(2,0));
    a(1,1) =  (M(0,0)*M(2,2) - M(0,2)*M(2,0));
    a(1,2) = -(M(0,0)*M(1,2) - M(0,2)*M(1,0));
    a(2,0) =  (M(1,0)*M(2,1) - M(1,1)*M(2,0));
    a(2,1) = -(M(0,0)*M(2,1) - M(0,1)*M(2,0));
    a(2,2) =  (M(0,0)*M(1,1) - M(0,1)*M(1,0));
    return a;
}

inline SurfaceSM build_sm(const Mat3i& M) {
    SurfaceSM s;
    s.spec = spectral_sm(M);
    s.Lambda = s.spec.lambda;
    for (int j = 0; j < 3; ++j) {
        s.P(0, j) = s.spec.m_vec[j].real();
        s.P(1, j) = s.spec.m_vec[j].imag();
        s.P(2, j) = s.spec.ell[j];
    }
    s.eps = s.P.determinant();
    if (std::abs(s.eps) < 1e-12)
        throw DegenerateEigenvector("lattice basis is not R-linearly independent");
    Mat3d Pinv = s.P.inverse();
    s.A = Pinv.col(0);
    s.B = Pinv.col(1);
    s.C = Pinv.col(2);
    s.Z = s.A * s.A.transpose() + s.B * s.B.transpose();
    if ((s.Z * s.spec.ell).norm() > 1e-8 * s.spec.ell.norm())
        throw KernelMismatch("Z does not annihilate the lambda-eigenvector");
    s.glue = M.transpose();
    s.glue_inv = adjugate3i(M).transpose(); // det(M)=1 so adj(M) = M^{-1}
    return s;
}

/** Fundamental-domain grid: n^3 torus nodes in lattice coordinates
 * t in [0,1)^3 times S slices with y2 log-uniform on [1, Lambda]. The last
 * slice is the seam image of the first. */
struct GridSM {
    int n = 0;
    int S = 0;
    double Lambda = 0;
    double h = 0; // log(Lambda)/(S-1), spacing in theta = log y2
    std::vector<double> y2, theta;

    std::size_t per_slice() const { return std::size_t(n) * n * n; }
    std::size_t total() const { return per_slice() * std::size_t(S); }
    std::size_t flat(int i1, int i2, int i3) const {
        return (std::size_t(i1) * n + i2) * n + i3;
    }
};

inline GridSM make_grid_sm(const SurfaceSM& s, int n, int S) {
    if (n < 2 || (n & (n - 1)) != 0)
        throw BadConfig("torus resolution must be a power of two >= 2");
    if (S < 3 || ((S - 1) & (S - 2)) != 0)
        throw BadConfig("slice count must be 2^k + 1");
    GridSM g;
    g.n = n;
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

/** Per-mode spectral tables on the n^3 torus: signed frequency k per node
 * in FFT layout, contracted with A, B, C, plus z_k = <k,A>^2 + <k,B>^2. */
struct SpectralTablesSM {
    int n = 0;
    std::vector<double> kA, kB, kC, zk;
};

inline int signed_freq(int m, int n) { return m < (n + 1) / 2 ? m : m - n; }

inline SpectralTablesSM make_spectral_tables(const SurfaceSM& s, int n) {
    SpectralTablesSM t;
    t.n = n;
    const std::size_t N = std::size_t(n) * n * n;
    t.kA.resize(N); t.kB.resize(N); t.kC.resize(N); t.zk.resize(N);
    std::size_t idx = 0;
    for (int m1 = 0; m1 < n; ++m1)
        for (int m2 = 0; m2 < n; ++m2)
            for (int m3 = 0; m3 < n; ++m3, ++idx) {
                Vec3d k(signed_freq(m1, n), signed_freq(m2, n), signed_freq(m3, n));
                t.kA[idx] = k.dot(s.A);
                t.kB[idx] = k.dot(s.B);
                t.kC[idx] = k.dot(s.C);
                t.zk[idx] = t.kA[idx] * t.kA[idx] + t.kB[idx] * t.kB[idx];
            }
    return t;
}

/** Seam transport tables. perm_dn gathers along t -> M^T t (used to fill
 * ghost slices below y2 = 1), perm_up along t -> M^{-T} t (ghosts above
 * y2 = Lambda). fac_up/fac_dn are the f0-pullback factors per metric
 * component (zz, zw, ww); scalars transport with factor 1. */
struct GlueTablesSM {
    int n = 0;
    std::vector<std::uint32_t> perm_dn, perm_up;
    std::array<cplx, 3> fac_up, fac_dn;
};

inline GlueTablesSM make_glue_tables(const SurfaceSM& s, int n) {
    GlueTablesSM g;
    g.n = n;
    const std::size_t N = std::size_t(n) * n * n;
    g.perm_dn.resize(N);
    g.perm_up.resize(N);
    auto fill = [&](const Mat3i& T, std::vector<std::uint32_t>& perm) {
        std::size_t idx = 0;
        for (int i1 = 0; i1 < n; ++i1)
            for (int i2 = 0; i2 < n; ++i2)
                for (int i3 = 0; i3 < n; ++i3, ++idx) {
                    Eigen::Vector3<std::int64_t> v(i1, i2, i3), w = T * v;
                    auto md = [&](std::int64_t a) {
                        std::int64_t r = a % n;
                        return int(r < 0 ? r + n : r);
                    };
                    perm[idx] = std::uint32_t(
                        (std::size_t(md(w[0])) * n + md(w[1])) * n + md(w[2]));
                }
    };
    fill(s.glue, g.perm_dn);
    fill(s.glue_inv, g.perm_up);
    const double lam = s.Lambda;
    const cplx mu = s.spec.mu;
    // eta(f0 q) = eta(q) / fac with fac = (1/lam, mu*lam, lam^2) per component
    g.fac_up = {cplx(lam, 0), 1.0 / (mu * lam), cplx(1.0 / (lam * lam), 0)};
    g.fac_dn = {cplx(1.0 / lam, 0), mu * lam, cplx(lam * lam, 0)};
    return g;
}

/** Transport a per-slice field across the seam. `up` fills values above the
 * top slice from a slice near the bottom; `component` selects the pullback
 * factor: -1 scalar, 0 zz, 1 zw, 2 ww. */
template <typename T>
inline void transport_seam(const GlueTablesSM& g, const T* src, T* dst,
                           bool up, int component = -1) {
    const auto& perm = up ? g.perm_up : g.perm_dn;
    const std::size_t N = perm.size();
    if (component < 0) {
        for (std::size_t i = 0; i < N; ++i) dst[i] = src[perm[i]];
    } else {
        const cplx f = up ? g.fac_up[component] : g.fac_dn[component];
        if constexpr (std::is_same_v<T, double>) {
            const double fr = f.real();
            for (std::size_t i = 0; i < N; ++i) dst[i] = fr * src[perm[i]];
        } else {
            for (std::size_t i = 0; i < N; ++i) dst[i] = f * src[perm[i]];
        }
    }
}

/** Leafwise Laplacian on S_M applied spectrally:
 * mode k on slice y2 is multiplied by -4 pi^2 z_k / (32 y2). */
inline std::vector<double> leafwise_laplacian_apply(
        const SurfaceSM& s, const GridSM& grid, const std::vector<double>& u,
        const Fft3& fft, const SpectralTablesSM& tab) {
    const std::size_t N = grid.per_slice();
    if (u.size() != grid.total())
        throw ShapeMismatch("field size does not match grid");
    std::vector<double> out(u.size());
    std::vector<cplx> buf(N);
    for (int j = 0; j < grid.S; ++j) {
        const double c = -4.0 * M_PI * M_PI / (32.0 * grid.y2[j]);
        const double* us = u.data() + std::size_t(j) * N;
        for (std::size_t i = 0; i < N; ++i) buf[i] = us[i];
        fft.forward(buf.data());
        for (std::size_t i = 0; i < N; ++i) buf[i] *= c * tab.zk[i];
        fft.inverse(buf.data());
        double* os = out.data() + std::size_t(j) * N;
        for (std::size_t i = 0; i < N; ++i) os[i] = buf[i].real();
    }
    return out;
}

} // namespace ibs

#endif
