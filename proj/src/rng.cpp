// SPDX-License-Identifier: Apache-2.0
#include "ccm/rng.hpp"

#include <cmath>

#include "ccm/error.hpp"

namespace ccm {

namespace {

// SplitMix64 finalizer; bijective on u64.
std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

Rng::Rng(std::uint64_t seed) : key_(mix64(seed ^ 0x5851f42d4c957f2dULL)) {}

Rng Rng::stream(std::string_view label) const {
    Rng r(0);
    r.key_ = mix64(key_ ^ mix64(fnv1a(label)));
    r.counter_ = 0;
    return r;
}

Rng Rng::stream(std::uint64_t a, std::uint64_t b) const {
    Rng r(0);
    r.key_ = mix64(key_ ^ mix64(a) ^ mix64(mix64(b)));
    r.counter_ = 0;
    return r;
}

Rng Rng::stream(std::string_view label, std::uint64_t a) const {
    return stream(label).stream(a);
}

std::uint64_t Rng::next_u64() {
    return mix64(key_ ^ mix64(++counter_));
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

int Rng::uniform_int(int n) {
    if (n <= 0)
        throw ConfigError("uniform_int needs n > 0");
    // Rejection-free modulo is fine here: n is tiny relative to 2^64.
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

bool Rng::bernoulli(double p) {
    return uniform() < p;
}

double Rng::gaussian() {
    // u1 in (0, 1] so log stays finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Tensor Rng::gaussian_tensor(std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = gaussian();
    return t;
}

Tensor Rng::uniform_tensor(std::vector<int> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = uniform(lo, hi);
    return t;
}

} // namespace ccm
