#include "voxrep/common.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>

namespace voxrep {

namespace {

int g_max_jobs = 1;
thread_local bool t_in_pool_worker = false;

// Minimal fork-join helper: spawns up to (jobs - 1) transient workers and
// shares a single atomic index with the calling thread. Indices are only a
// scheduling detail; every fn(i) owns its writes, so execution order never
// changes results.
void run_parallel(int64_t n, const std::function<void(int64_t)>& fn, int jobs) {
    std::atomic<int64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;

    auto worker = [&] {
        t_in_pool_worker = true;
        for (;;) {
            int64_t i = next.fetch_add(1);
            if (i >= n) break;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
            }
        }
        t_in_pool_worker = false;
    };

    std::vector<std::thread> threads;
    int helpers = static_cast<int>(std::min<int64_t>(jobs, n)) - 1;
    threads.reserve(helpers > 0 ? helpers : 0);
    for (int t = 0; t < helpers; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

int max_jobs() { return g_max_jobs; }

void set_max_jobs(int jobs) { g_max_jobs = jobs < 1 ? 1 : jobs; }

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    // Nested parallel sections run inline on the calling worker.
    if (g_max_jobs <= 1 || n == 1 || t_in_pool_worker) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    run_parallel(n, fn, g_max_jobs);
}

}  // namespace voxrep
