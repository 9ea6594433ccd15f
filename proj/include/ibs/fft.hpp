#ifndef IBS_FFT_HPP
#define IBS_FFT_HPP

#include <complex>
#include <vector>

#include <fftw3.h>

namespace ibs {

/** Cached in-place 3D complex-to-complex FFT of size n^3.
 * forward() is unnormalized; inverse() divides by n^3. Two plan pairs are
 * created once and reused on caller arrays: SIMD-aligned FFTW_PATIENT
 * plans for arrays matching fftw_malloc alignment (large vector
 * allocations are page-aligned, so the hot paths take this one), and an
 * FFTW_MEASURE | FFTW_UNALIGNED fallback for everything else. */
class Fft3 {
  public:
    explicit Fft3(int n) : n_(n) {
        const std::size_t N = std::size_t(n) * n * n;
        buf_ = fftw_alloc_complex(N);
        align_ = fftw_alignment_of(reinterpret_cast<double*>(buf_));
        fwd_a_ = fftw_plan_dft_3d(n, n, n, buf_, buf_, FFTW_FORWARD,
                                  FFTW_PATIENT);
        bwd_a_ = fftw_plan_dft_3d(n, n, n, buf_, buf_, FFTW_BACKWARD,
                                  FFTW_PATIENT);
        unsigned flags = FFTW_MEASURE | FFTW_UNALIGNED;
        fwd_u_ = fftw_plan_dft_3d(n, n, n, buf_, buf_, FFTW_FORWARD, flags);
        bwd_u_ = fftw_plan_dft_3d(n, n, n, buf_, buf_, FFTW_BACKWARD, flags);
    }
    ~Fft3() {
        fftw_destroy_plan(fwd_a_);
        fftw_destroy_plan(bwd_a_);
        fftw_destroy_plan(fwd_u_);
        fftw_destroy_plan(bwd_u_);
        fftw_free(buf_);
    }
    Fft3(const Fft3&) = delete;
    Fft3& operator=(const Fft3&) = delete;

    int n() const { return n_; }
    std::size_t size() const { return std::size_t(n_) * n_ * n_; }

    void forward(std::complex<double>* inout) const {
        auto* p = reinterpret_cast<fftw_complex*>(inout);
        fftw_execute_dft(aligned(p) ? fwd_a_ : fwd_u_, p, p);
    }
    void inverse(std::complex<double>* inout) const {
        auto* p = reinterpret_cast<fftw_complex*>(inout);
        fftw_execute_dft(aligned(p) ? bwd_a_ : bwd_u_, p, p);
        const double scale = 1.0 / double(size());
        for (std::size_t i = 0; i < size(); ++i) inout[i] *= scale;
    }
    /** Unnormalized inverse; callers fold the 1/n^3 into their multipliers. */
    void inverse_raw(std::complex<double>* inout) const {
        auto* p = reinterpret_cast<fftw_complex*>(inout);
        fftw_execute_dft(aligned(p) ? bwd_a_ : bwd_u_, p, p);
    }

  private:
    bool aligned(fftw_complex* p) const {
        return fftw_alignment_of(reinterpret_cast<double*>(p)) == align_;
    }
    int n_;
    int align_ = 0;
    fftw_complex* buf_;
    fftw_plan fwd_a_, bwd_a_, fwd_u_, bwd_u_;
};

/** Single-precision counterpart of Fft3, used by the flow stepping loop
 * where the stage algebra runs in float (the accuracy analysis lives with
 * the callers).  Same two-plan scheme: aligned FFTW_PATIENT plus an
 * unaligned FFTW_MEASURE fallback. */
class Fft3f {
  public:
    explicit Fft3f(int n) : n_(n) {
        const std::size_t N = std::size_t(n) * n * n;
        buf_ = fftwf_alloc_complex(N);
        align_ = fftwf_alignment_of(reinterpret_cast<float*>(buf_));
        fwd_a_ = fftwf_plan_dft_3d(n, n, n, buf_, buf_, FFTW_FORWARD,
                                   FFTW_PATIENT);
        bwd_a_ = fftwf_plan_dft_3d(n, n, n, buf_, buf_, FFTW_BACKWARD,
                                   FFTW_PATIENT);
        unsigned flags = FFTW_MEASURE | FFTW_UNALIGNED;
        fwd_u_ = fftwf_plan_dft_3d(n, n, n, buf_, buf_, FFTW_FORWARD, flags);
        bwd_u_ = fftwf_plan_dft_3d(n, n, n, buf_, buf_, FFTW_BACKWARD, flags);
    }
    ~Fft3f() {
        fftwf_destroy_plan(fwd_a_);
        fftwf_destroy_plan(bwd_a_);
        fftwf_destroy_plan(fwd_u_);
        fftwf_destroy_plan(bwd_u_);
        fftwf_free(buf_);
    }
    Fft3f(const Fft3f&) = delete;
    Fft3f& operator=(const Fft3f&) = delete;

    int n() const { return n_; }
    std::size_t size() const { return std::size_t(n_) * n_ * n_; }

    void forward(std::complex<float>* inout) const {
        auto* p = reinterpret_cast<fftwf_complex*>(inout);
        fftwf_execute_dft(aligned(p) ? fwd_a_ : fwd_u_, p, p);
    }
    /** Unnormalized inverse; callers fold the 1/n^3 into their multipliers. */
    void inverse_raw(std::complex<float>* inout) const {
        auto* p = reinterpret_cast<fftwf_complex*>(inout);
        fftwf_execute_dft(aligned(p) ? bwd_a_ : bwd_u_, p, p);
    }

  private:
    bool aligned(fftwf_complex* p) const {
        return fftwf_alignment_of(reinterpret_cast<float*>(p)) == align_;
    }
    int n_;
    int align_ = 0;
    fftwf_complex* buf_;
    fftwf_plan fwd_a_, bwd_a_, fwd_u_, bwd_u_;
};

/** Cached in-place 2D complex-to-complex FFT of size n^2, with the same
 * conventions as Fft3. */
class Fft2 {
  public:
    explicit Fft2(int n) : n_(n) {
        std::vector<std::complex<double>> buf(std::size_t(n) * n);
        auto* p = reinterpret_cast<fftw_complex*>(buf.data());
        unsigned flags = FFTW_MEASURE | FFTW_UNALIGNED;
        fwd_ = fftw_plan_dft_2d(n, n, p, p, FFTW_FORWARD, flags);
        bwd_ = fftw_plan_dft_2d(n, n, p, p, FFTW_BACKWARD, flags);
    }
    ~Fft2() {
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(bwd_);
    }
    Fft2(const Fft2&) = delete;
    Fft2& operator=(const Fft2&) = delete;

    int n() const { return n_; }
    std::size_t size() const { return std::size_t(n_) * n_; }

    void forward(std::complex<double>* inout) const {
        auto* p = reinterpret_cast<fftw_complex*>(inout);
        fftw_execute_dft(fwd_, p, p);
    }
    void inverse(std::complex<double>* inout) const {
        auto* p = reinterpret_cast<fftw_complex*>(inout);
        fftw_execute_dft(bwd_, p, p);
        const double scale = 1.0 / double(size());
        for (std::size_t i = 0; i < size(); ++i) inout[i] *= scale;
    }

  private:
    int n_;
    fftw_plan fwd_, bwd_;
};

} // namespace ibs

#endif
