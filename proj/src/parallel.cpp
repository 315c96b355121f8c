#include "micro/parallel.hpp"

#include <cstdlib>
#include <string>

namespace micro {

std::size_t thread_count() {
    if (const char* env = std::getenv("MICRO_PREF_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

} // namespace micro
