#include "longiseg/kernels.hpp"

#include <cstdlib>
#include <cstring>

#include "longiseg/error.hpp"

namespace longiseg::kernels {

namespace scalar_impl {
void axpy_f32(float*, const float*, float, std::size_t);
void axpy_f64(double*, const double*, double, std::size_t);
float dot_f32(const float*, const float*, std::size_t);
double dot_f64(const double*, const double*, std::size_t);
double sum_f32(const float*, std::size_t);
double sum_f64(const double*, std::size_t);
double sumsq_diff_f32(const float*, double, std::size_t);
double sumsq_diff_f64(const double*, double, std::size_t);
void add_f32(float*, const float*, const float*, std::size_t);
void add_f64(double*, const double*, const double*, std::size_t);
void mul_f32(float*, const float*, const float*, std::size_t);
void mul_f64(double*, const double*, const double*, std::size_t);
void madd_f32(float*, const float*, const float*, std::size_t);
void madd_f64(double*, const double*, const double*, std::size_t);
void scale_f32(float*, float, std::size_t);
void scale_f64(double*, double, std::size_t);
void relu_f32(float*, const float*, std::size_t);
void relu_f64(double*, const double*, std::size_t);
void relu_backward_f32(float*, const float*, const float*, std::size_t);
void relu_backward_f64(double*, const double*, const double*, std::size_t);
}  // namespace scalar_impl

#if defined(__x86_64__) || defined(_M_X64)
#define LONGISEG_HAVE_AVX2_TU 1
namespace avx2_impl {
void axpy_f32(float*, const float*, float, std::size_t);
void axpy_f64(double*, const double*, double, std::size_t);
float dot_f32(const float*, const float*, std::size_t);
double dot_f64(const double*, const double*, std::size_t);
double sum_f32(const float*, std::size_t);
double sum_f64(const double*, std::size_t);
double sumsq_diff_f32(const float*, double, std::size_t);
double sumsq_diff_f64(const double*, double, std::size_t);
void add_f32(float*, const float*, const float*, std::size_t);
void mul_f32(float*, const float*, const float*, std::size_t);
void madd_f32(float*, const float*, const float*, std::size_t);
void scale_f32(float*, float, std::size_t);
void relu_f32(float*, const float*, std::size_t);
void relu_backward_f32(float*, const float*, const float*, std::size_t);
}  // namespace avx2_impl
#endif

namespace {

struct Table {
    void (*axpy_f32)(float*, const float*, float, std::size_t);
    void (*axpy_f64)(double*, const double*, double, std::size_t);
    float (*dot_f32)(const float*, const float*, std::size_t);
    double (*dot_f64)(const double*, const double*, std::size_t);
    double (*sum_f32)(const float*, std::size_t);
    double (*sum_f64)(const double*, std::size_t);
    double (*sumsq_diff_f32)(const float*, double, std::size_t);
    double (*sumsq_diff_f64)(const double*, double, std::size_t);
    void (*add_f32)(float*, const float*, const float*, std::size_t);
    void (*add_f64)(double*, const double*, const double*, std::size_t);
    void (*mul_f32)(float*, const float*, const float*, std::size_t);
    void (*mul_f64)(double*, const double*, const double*, std::size_t);
    void (*madd_f32)(float*, const float*, const float*, std::size_t);
    void (*madd_f64)(double*, const double*, const double*, std::size_t);
    void (*scale_f32)(float*, float, std::size_t);
    void (*scale_f64)(double*, double, std::size_t);
    void (*relu_f32)(float*, const float*, std::size_t);
    void (*relu_f64)(double*, const double*, std::size_t);
    void (*relu_backward_f32)(float*, const float*, const float*, std::size_t);
    void (*relu_backward_f64)(double*, const double*, const double*, std::size_t);
};

constexpr Table scalar_table = {
    scalar_impl::axpy_f32,        scalar_impl::axpy_f64,
    scalar_impl::dot_f32,         scalar_impl::dot_f64,
    scalar_impl::sum_f32,         scalar_impl::sum_f64,
    scalar_impl::sumsq_diff_f32,  scalar_impl::sumsq_diff_f64,
    scalar_impl::add_f32,         scalar_impl::add_f64,
    scalar_impl::mul_f32,         scalar_impl::mul_f64,
    scalar_impl::madd_f32,        scalar_impl::madd_f64,
    scalar_impl::scale_f32,       scalar_impl::scale_f64,
    scalar_impl::relu_f32,        scalar_impl::relu_f64,
    scalar_impl::relu_backward_f32, scalar_impl::relu_backward_f64,
};

#if LONGISEG_HAVE_AVX2_TU
// f64 elementwise ops stay scalar; only the loops that dominate verification
// mode (axpy/dot/sum) get a 4-wide variant.
constexpr Table avx2_table = {
    avx2_impl::axpy_f32,          avx2_impl::axpy_f64,
    avx2_impl::dot_f32,           avx2_impl::dot_f64,
    avx2_impl::sum_f32,           avx2_impl::sum_f64,
    avx2_impl::sumsq_diff_f32,    avx2_impl::sumsq_diff_f64,
    avx2_impl::add_f32,           scalar_impl::add_f64,
    avx2_impl::mul_f32,           scalar_impl::mul_f64,
    avx2_impl::madd_f32,          scalar_impl::madd_f64,
    avx2_impl::scale_f32,         scalar_impl::scale_f64,
    avx2_impl::relu_f32,          scalar_impl::relu_f64,
    avx2_impl::relu_backward_f32, scalar_impl::relu_backward_f64,
};
#endif

bool cpu_has_avx2() {
#if LONGISEG_HAVE_AVX2_TU && (defined(__GNUC__) || defined(__clang__))
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend pick_initial() {
    if (const char* env = std::getenv("LONGISEG_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
        if (std::strcmp(env, "avx2") == 0 && cpu_has_avx2()) return Backend::avx2;
    }
    return cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
}

const Table* table_for(Backend b) {
#if LONGISEG_HAVE_AVX2_TU
    if (b == Backend::avx2) return &avx2_table;
#endif
    (void)b;
    return &scalar_table;
}

Backend g_backend = pick_initial();
const Table* g_table = table_for(g_backend);

}  // namespace

bool available(Backend b) {
    if (b == Backend::scalar) return true;
    return cpu_has_avx2();
}

Backend active() { return g_backend; }

void set_active(Backend b) {
    if (!available(b))
        throw UnsupportedError(std::string("kernel backend not available on this CPU: ") + name(b));
    g_backend = b;
    g_table = table_for(b);
}

const char* name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

std::vector<Backend> all_available() {
    std::vector<Backend> out{Backend::scalar};
    if (available(Backend::avx2)) out.push_back(Backend::avx2);
    return out;
}

void axpy(float* dst, const float* src, float a, std::size_t n) { g_table->axpy_f32(dst, src, a, n); }
void axpy(double* dst, const double* src, double a, std::size_t n) { g_table->axpy_f64(dst, src, a, n); }
float dot(const float* a, const float* b, std::size_t n) { return g_table->dot_f32(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return g_table->dot_f64(a, b, n); }
double sum(const float* x, std::size_t n) { return g_table->sum_f32(x, n); }
double sum(const double* x, std::size_t n) { return g_table->sum_f64(x, n); }
double sumsq_diff(const float* x, double mean, std::size_t n) { return g_table->sumsq_diff_f32(x, mean, n); }
double sumsq_diff(const double* x, double mean, std::size_t n) { return g_table->sumsq_diff_f64(x, mean, n); }
void add(float* dst, const float* a, const float* b, std::size_t n) { g_table->add_f32(dst, a, b, n); }
void add(double* dst, const double* a, const double* b, std::size_t n) { g_table->add_f64(dst, a, b, n); }
void mul(float* dst, const float* a, const float* b, std::size_t n) { g_table->mul_f32(dst, a, b, n); }
void mul(double* dst, const double* a, const double* b, std::size_t n) { g_table->mul_f64(dst, a, b, n); }
void madd(float* dst, const float* a, const float* b, std::size_t n) { g_table->madd_f32(dst, a, b, n); }
void madd(double* dst, const double* a, const double* b, std::size_t n) { g_table->madd_f64(dst, a, b, n); }
void scale(float* x, float a, std::size_t n) { g_table->scale_f32(x, a, n); }
void scale(double* x, double a, std::size_t n) { g_table->scale_f64(x, a, n); }
void relu(float* dst, const float* x, std::size_t n) { g_table->relu_f32(dst, x, n); }
void relu(double* dst, const double* x, std::size_t n) { g_table->relu_f64(dst, x, n); }
void relu_backward(float* dx, const float* x, const float* dy, std::size_t n) { g_table->relu_backward_f32(dx, x, dy, n); }
void relu_backward(double* dx, const double* x, const double* dy, std::size_t n) { g_table->relu_backward_f64(dx, x, dy, n); }

}  // namespace longiseg::kernels
