// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

#include "ccm/tensor.hpp"

namespace ccm {

// Counter-based deterministic generator. Each draw mixes (key, counter)
// through a 64-bit finalizer, so the stream depends only on the seed and
// the draw index. Sub-streams for (sample-id, purpose) pairs come from
// stream(), which derives an independent key without consuming draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    // Independent sub-stream labelled by a string, an integer, or both.
    Rng stream(std::string_view label) const;
    Rng stream(std::uint64_t a, std::uint64_t b = 0) const;
    Rng stream(std::string_view label, std::uint64_t a) const;

    std::uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    int uniform_int(int n);                 // [0, n)
    bool bernoulli(double p);
    double gaussian();                      // N(0, 1), Box-Muller

    Tensor gaussian_tensor(std::vector<int> shape);
    Tensor uniform_tensor(std::vector<int> shape, double lo, double hi);

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace ccm
