#include "longiseg/threading.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace longiseg {

namespace {

int initial_thread_count() {
    if (const char* env = std::getenv("LONGISEG_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
        if (n == 0) return std::max(1u, std::thread::hardware_concurrency());
    }
    return 1;
}

int g_threads = initial_thread_count();

}  // namespace

int thread_count() { return g_threads; }

void set_thread_count(int n) {
    if (n <= 0)
        g_threads = std::max(1u, std::thread::hardware_concurrency());
    else
        g_threads = n;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    const int workers = static_cast<int>(std::min<std::int64_t>(g_threads, n));
    if (workers <= 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::int64_t begin = w * chunk;
        const std::int64_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace longiseg
