// Reference implementations of the arithmetic inner loops. Every SIMD lane
// is equivalence-tested against these.

#include <cstddef>

namespace longiseg::kernels::scalar_impl {

template <class T>
static void axpy_t(T* dst, const T* src, T a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

template <class T>
static T dot_t(const T* a, const T* b, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <class T>
static double sum_t(const T* x, std::size_t n) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]);
    return acc;
}

template <class T>
static double sumsq_diff_t(const T* x, double mean, std::size_t n) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(x[i]) - mean;
        acc += d * d;
    }
    return acc;
}

template <class T>
static void add_t(T* dst, const T* a, const T* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

template <class T>
static void mul_t(T* dst, const T* a, const T* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

template <class T>
static void madd_t(T* dst, const T* a, const T* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

template <class T>
static void scale_t(T* x, T a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

template <class T>
static void relu_t(T* dst, const T* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
static void relu_backward_t(T* dx, const T* x, const T* dy, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (x[i] > T(0)) dx[i] += dy[i];
}

void axpy_f32(float* dst, const float* src, float a, std::size_t n) { axpy_t(dst, src, a, n); }
void axpy_f64(double* dst, const double* src, double a, std::size_t n) { axpy_t(dst, src, a, n); }
float dot_f32(const float* a, const float* b, std::size_t n) { return dot_t(a, b, n); }
double dot_f64(const double* a, const double* b, std::size_t n) { return dot_t(a, b, n); }
double sum_f32(const float* x, std::size_t n) { return sum_t(x, n); }
double sum_f64(const double* x, std::size_t n) { return sum_t(x, n); }
double sumsq_diff_f32(const float* x, double mean, std::size_t n) { return sumsq_diff_t(x, mean, n); }
double sumsq_diff_f64(const double* x, double mean, std::size_t n) { return sumsq_diff_t(x, mean, n); }
void add_f32(float* dst, const float* a, const float* b, std::size_t n) { add_t(dst, a, b, n); }
void add_f64(double* dst, const double* a, const double* b, std::size_t n) { add_t(dst, a, b, n); }
void mul_f32(float* dst, const float* a, const float* b, std::size_t n) { mul_t(dst, a, b, n); }
void mul_f64(double* dst, const double* a, const double* b, std::size_t n) { mul_t(dst, a, b, n); }
void madd_f32(float* dst, const float* a, const float* b, std::size_t n) { madd_t(dst, a, b, n); }
void madd_f64(double* dst, const double* a, const double* b, std::size_t n) { madd_t(dst, a, b, n); }
void scale_f32(float* x, float a, std::size_t n) { scale_t(x, a, n); }
void scale_f64(double* x, double a, std::size_t n) { scale_t(x, a, n); }
void relu_f32(float* dst, const float* x, std::size_t n) { relu_t(dst, x, n); }
void relu_f64(double* dst, const double* x, std::size_t n) { relu_t(dst, x, n); }
void relu_backward_f32(float* dx, const float* x, const float* dy, std::size_t n) { relu_backward_t(dx, x, dy, n); }
void relu_backward_f64(double* dx, const double* x, const double* dy, std::size_t n) { relu_backward_t(dx, x, dy, n); }

}  // namespace longiseg::kernels::scalar_impl
