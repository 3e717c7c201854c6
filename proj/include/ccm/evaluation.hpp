// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ccm/encoders.hpp"
#include "ccm/geometry.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

// Standard SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03,
// L=1) averaged over channels; inputs in [0,1].
double ssim(const Tensor& a, const Tensor& b);

// Blacks out the box interior of both images, then SSIM. Inputs [0,1].
double masked_background_ssim(const Tensor& background, const Tensor& composite, const BoundingBox& box);

// Crops the box from the composite, resizes it to the foreground frame,
// zeroes non-object pixels on both crops, and returns the cosine
// similarity of the encoder's global embeddings. Inputs [0,1]; the
// encoder consumes [-1,1] internally.
double masked_fg_similarity(const Tensor& composite, const Tensor& input_fg, const BoundingBox& box,
                            const Tensor& object_mask, const ForegroundEncoder& encoder);

struct PairwiseTable {
    std::vector<std::string> methods;
    std::vector<std::vector<double>> wins; // wins[i][j] = count i beat j

    int size() const { return static_cast<int>(methods.size()); }
    double comparisons(int i, int j) const { return wins[static_cast<size_t>(i)][static_cast<size_t>(j)] +
                                                    wins[static_cast<size_t>(j)][static_cast<size_t>(i)]; }
    void validate() const;
    // CSV rows: method_a,method_b,wins_a,wins_b (header required).
    static PairwiseTable from_csv(const std::string& path);
};

struct BTScores {
    std::vector<std::string> methods;
    std::vector<double> scores; // ln-strengths, centered to mean zero
    int iterations = 0;
    bool converged = false;
    std::vector<bool> clamped; // true where a zero-win score hit the floor
};

// Bradley-Terry MLE via minorization-maximization:
//   p_i <- W_i / sum_{j != i} n_ij / (p_i + p_j)
// normalized each sweep; scores are centered ln-strengths. Requires a
// connected comparison graph. Methods with zero wins and nonzero losses
// clamp at ln(1e-8) and are flagged.
BTScores bt_fit(const PairwiseTable& table, double tol = 1e-10, int max_iter = 10000);

// Mean rank per method; every rating must be a permutation of 1..m.
std::vector<double> average_rank(const std::vector<std::vector<int>>& rankings);

} // namespace ccm
