#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace genrec {

// Deterministic, platform-independent RNG. std::normal_distribution is not
// bit-stable across standard libraries, so all randomness in the project
// (init, shuffles, synthetic data, dropout masks) goes through this one.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed == 0 ? 0x9e3779b97f4a7c15ULL : seed) {}

    // splitmix64
    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) {
        return n == 0 ? 0 : next_u64() % n;
    }

    // standard normal via Box-Muller (no cached spare, keeps state trivial)
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Fisher-Yates, deterministic given seed/state
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // derive an independent stream (e.g., per epoch) without disturbing this one
    Rng fork(uint64_t salt) const {
        return Rng(state_ ^ (salt * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
    }

private:
    uint64_t state_;
};

} // namespace genrec
