#include "wgqa/rng.hpp"

#include <cmath>

#include "wgqa/errors.hpp"

namespace wgqa {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;
constexpr double kPi = 3.14159265358979323846;

// splitmix64 finalizer
std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t SeededRng::next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * kGolden);
}

double SeededRng::uniform() {
    // 53 uniform bits mapped to (0, 1].
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double SeededRng::gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

std::uint64_t SeededRng::below(std::uint64_t bound) {
    if (bound == 0) throw ConfigError("SeededRng::below requires a positive bound");
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
}

Tensor SeededRng::gaussian_tensor(std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (double& x : t.data()) x = gaussian();
    return t;
}

}  // namespace wgqa
