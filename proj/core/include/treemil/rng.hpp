#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace treemil {

// Deterministic random source. All randomness in the project flows through
// this class so that a (seed, config, dataset) triple fully determines every
// output byte. Gaussian draws use Box-Muller without a cached spare, so the
// number of engine draws per call is fixed and the state round-trips through
// save/restore exactly.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Standard normal.
    double gauss() {
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Uniform integer in [0, n), n >= 1. Rejection sampling keeps the
    // distribution exact and the draw sequence reproducible.
    std::size_t index(std::size_t n);

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

    std::string state() const;
    void set_state(const std::string& s);

private:
    std::mt19937_64 engine_;
};

} // namespace treemil
