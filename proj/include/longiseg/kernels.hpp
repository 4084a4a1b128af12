#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace longiseg::kernels {

/// Instruction-set backend for the arithmetic inner loops. `scalar` is the
/// portable reference; `avx2` requires x86-64 with AVX2+FMA and is selected
/// automatically at startup when the CPU supports it. LONGISEG_KERNELS=scalar
/// or =avx2 overrides the automatic pick.
enum class Backend { scalar, avx2 };

bool available(Backend b);
Backend active();
void set_active(Backend b);  // throws UnsupportedError if unavailable
const char* name(Backend b);
std::vector<Backend> all_available();

// Dispatched entry points. Both precisions share one contract; the float
// lane is the hot path, the double lane backs verification mode.

// dst[i] += a * src[i]
void axpy(float* dst, const float* src, float a, std::size_t n);
void axpy(double* dst, const double* src, double a, std::size_t n);

// sum_i a[i] * b[i]
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);

// sum_i x[i], accumulated in double
double sum(const float* x, std::size_t n);
double sum(const double* x, std::size_t n);

// sum_i (x[i] - mean)^2, accumulated in double
double sumsq_diff(const float* x, double mean, std::size_t n);
double sumsq_diff(const double* x, double mean, std::size_t n);

// dst[i] = a[i] + b[i]
void add(float* dst, const float* a, const float* b, std::size_t n);
void add(double* dst, const double* a, const double* b, std::size_t n);

// dst[i] = a[i] * b[i]
void mul(float* dst, const float* a, const float* b, std::size_t n);
void mul(double* dst, const double* a, const double* b, std::size_t n);

// dst[i] += a[i] * b[i]
void madd(float* dst, const float* a, const float* b, std::size_t n);
void madd(double* dst, const double* a, const double* b, std::size_t n);

// x[i] *= a
void scale(float* x, float a, std::size_t n);
void scale(double* x, double a, std::size_t n);

// dst[i] = max(x[i], 0)
void relu(float* dst, const float* x, std::size_t n);
void relu(double* dst, const double* x, std::size_t n);

// dx[i] += x[i] > 0 ? dy[i] : 0
void relu_backward(float* dx, const float* x, const float* dy, std::size_t n);
void relu_backward(double* dx, const double* x, const double* dy, std::size_t n);

}  // namespace longiseg::kernels
