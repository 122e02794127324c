#pragma once

#include <cstdint>
#include <vector>

#include "wgqa/tensor.hpp"

namespace wgqa {

/// Counter-based pseudo-random stream. Draw i is a fixed integer mix of
/// (seed, i), so the stream replays bit-identically from the same seed,
/// independent of platform and of how many values were batched per call.
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64();

    // Uniform in (0, 1]; never returns 0, so log(uniform()) is safe.
    double uniform();

    // Standard normal via Box-Muller; consumes exactly two counter values.
    double gaussian();

    // Uniform integer in [0, bound); bound must be positive.
    std::uint64_t below(std::uint64_t bound);

    Tensor gaussian_tensor(std::vector<std::size_t> shape);

    std::uint64_t seed() const { return seed_; }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace wgqa
