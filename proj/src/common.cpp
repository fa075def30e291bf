#include "convirt/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace convirt {

TensorMap zeros_like(const TensorMap& m) {
    TensorMap out;
    for (const auto& [name, t] : m) out.emplace(name, Tensor(t.shape));
    return out;
}

void add_into(TensorMap& dst, const TensorMap& src) {
    for (const auto& [name, t] : src) {
        auto it = dst.find(name);
        require(it != dst.end() && it->second.size() == t.size(), "add_into: mismatched tensor " + name);
        auto& d = it->second.data;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += t.data[i];
    }
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

double dot(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < std::min(workers, n); ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(error_mutex);
                        if (!error) error = std::current_exception();
                    }
                }
            });
    }
    if (error) std::rethrow_exception(error);
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace convirt
