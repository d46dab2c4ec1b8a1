#include "treemil/rng.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "treemil/errors.hpp"

namespace treemil {

std::size_t Rng::index(std::size_t n) {
    if (n == 0) {
        throw ShapeError("Rng::index: n must be positive");
    }
    const std::uint64_t range = static_cast<std::uint64_t>(n);
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % range;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % range);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) {
        throw DataError("Rng::set_state: malformed engine state");
    }
}

} // namespace treemil
