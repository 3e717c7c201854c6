// SPDX-License-Identifier: Apache-2.0
#include "ccm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "ccm/error.hpp"
#include "ccm/image.hpp"

namespace ccm {

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01;
constexpr double kK2 = 0.03;
constexpr double kL = 1.0;

std::vector<double> gaussian_window() {
    std::vector<double> w(kWin);
    double z = 0.0;
    int r = kWin / 2;
    for (int i = -r; i <= r; ++i) {
        w[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (kSigma * kSigma));
        z += w[static_cast<size_t>(i + r)];
    }
    for (auto& v : w)
        v /= z;
    return w;
}

// Separable valid-mode Gaussian filtering of one plane.
Tensor filter_valid(const Tensor& plane, const std::vector<double>& k) {
    int H = plane.dim(0), W = plane.dim(1);
    int r = kWin / 2;
    int OH = H - 2 * r, OW = W - 2 * r;
    if (OH < 1 || OW < 1)
        throw ShapeError("ssim: image smaller than the filter window");
    Tensor tmp({H, OW});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < OW; ++x) {
            double acc = 0.0;
            for (int i = 0; i < kWin; ++i)
                acc += k[static_cast<size_t>(i)] * plane.at(y, x + i);
            tmp.at(y, x) = acc;
        }
    Tensor out({OH, OW});
    for (int y = 0; y < OH; ++y)
        for (int x = 0; x < OW; ++x) {
            double acc = 0.0;
            for (int i = 0; i < kWin; ++i)
                acc += k[static_cast<size_t>(i)] * tmp.at(y + i, x);
            out.at(y, x) = acc;
        }
    return out;
}

} // namespace

double ssim(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("ssim: extent mismatch");
    if (a.rank() != 3)
        throw ShapeError("ssim expects [C,H,W]");
    const double c1 = (kK1 * kL) * (kK1 * kL);
    const double c2 = (kK2 * kL) * (kK2 * kL);
    std::vector<double> k = gaussian_window();
    int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    double total = 0.0;
    for (int c = 0; c < C; ++c) {
        Tensor pa({H, W}), pb({H, W}), paa({H, W}), pbb({H, W}), pab({H, W});
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double va = a.at(c, y, x), vb = b.at(c, y, x);
                pa.at(y, x) = va;
                pb.at(y, x) = vb;
                paa.at(y, x) = va * va;
                pbb.at(y, x) = vb * vb;
                pab.at(y, x) = va * vb;
            }
        Tensor mu_a = filter_valid(pa, k);
        Tensor mu_b = filter_valid(pb, k);
        Tensor s_aa = filter_valid(paa, k);
        Tensor s_bb = filter_valid(pbb, k);
        Tensor s_ab = filter_valid(pab, k);
        double acc = 0.0;
        for (std::int64_t i = 0; i < mu_a.numel(); ++i) {
            double ma = mu_a[i], mb = mu_b[i];
            double va = s_aa[i] - ma * ma;
            double vb = s_bb[i] - mb * mb;
            double cov = s_ab[i] - ma * mb;
            acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / static_cast<double>(mu_a.numel());
    }
    return total / C;
}

double masked_background_ssim(const Tensor& background, const Tensor& composite, const BoundingBox& box) {
    if (!background.same_shape(composite))
        throw ShapeError("masked_background_ssim: extent mismatch");
    box.validate();
    int H = background.dim(1), W = background.dim(2);
    Tensor mask = rasterize_box_mask(H, W, box);
    Tensor a = background, b = composite;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask.at(0, y, x) > 0.5)
                for (int c = 0; c < a.dim(0); ++c) {
                    a.at(c, y, x) = 0.0;
                    b.at(c, y, x) = 0.0;
                }
    return ssim(a, b);
}

double masked_fg_similarity(const Tensor& composite, const Tensor& input_fg, const BoundingBox& box,
                            const Tensor& object_mask, const ForegroundEncoder& encoder) {
    box.validate();
    int F = encoder.config().fg_size;
    if (input_fg.rank() != 3 || input_fg.dim(1) != F || input_fg.dim(2) != F)
        throw ShapeError("masked_fg_similarity: foreground must match the encoder frame");
    if (object_mask.rank() != 3 || object_mask.dim(0) != 1 || object_mask.dim(1) != F || object_mask.dim(2) != F)
        throw ShapeError("masked_fg_similarity: mask must be [1,F,F]");
    if (object_mask.abs_max() <= 0.0)
        throw GeometryError("masked_fg_similarity: empty object mask");
    int H = composite.dim(1), W = composite.dim(2);
    Tensor crop = crop_resize(composite, box.x0 * W, box.y0 * H, box.x1 * W, box.y1 * H, F, F);
    Tensor fg = input_fg;
    for (int y = 0; y < F; ++y)
        for (int x = 0; x < F; ++x)
            if (object_mask.at(0, y, x) <= 0.5)
                for (int c = 0; c < 3; ++c) {
                    crop.at(c, y, x) = 0.0;
                    fg.at(c, y, x) = 0.0;
                }
    ForegroundEmbeddings ea = encoder.encode(to_model_range(crop));
    ForegroundEmbeddings eb = encoder.encode(to_model_range(fg));
    return cosine_similarity(ea.global, eb.global);
}

void PairwiseTable::validate() const {
    size_t n = methods.size();
    if (wins.size() != n)
        throw ValidationError("pairwise table is not square");
    for (size_t i = 0; i < n; ++i) {
        if (wins[i].size() != n)
            throw ValidationError("pairwise table is not square");
        if (wins[i][i] != 0.0)
            throw ValidationError("pairwise table diagonal must be zero");
        for (double v : wins[i])
            if (v < 0.0 || !std::isfinite(v))
                throw ValidationError("win counts must be finite and non-negative");
    }
}

PairwiseTable PairwiseTable::from_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw IoError("cannot open CSV: " + path);
    std::string line;
    if (!std::getline(is, line))
        throw ValidationError("empty CSV: " + path);
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            size_t b = item.find_first_not_of(" \t\r");
            size_t e = item.find_last_not_of(" \t\r");
            out.push_back(b == std::string::npos ? "" : item.substr(b, e - b + 1));
        }
        return out;
    };
    std::vector<std::string> header = split(line);
    if (header.size() != 4 || header[0] != "method_a" || header[1] != "method_b" || header[2] != "wins_a" ||
        header[3] != "wins_b")
        throw ValidationError("CSV header must be: method_a,method_b,wins_a,wins_b");

    std::map<std::string, int> index;
    std::vector<std::pair<int, int>> pairs;
    std::vector<std::pair<double, double>> winv;
    std::vector<std::string> names;
    auto idx_of = [&](const std::string& name) {
        auto it = index.find(name);
        if (it != index.end())
            return it->second;
        int id = static_cast<int>(names.size());
        index.emplace(name, id);
        names.push_back(name);
        return id;
    };
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        std::vector<std::string> f = split(line);
        if (f.size() != 4)
            throw ValidationError("CSV line " + std::to_string(lineno) + ": expected 4 fields");
        try {
            int ia = idx_of(f[0]);
            int ib = idx_of(f[1]);
            if (ia == ib)
                throw ValidationError("CSV line " + std::to_string(lineno) + ": self-comparison");
            pairs.emplace_back(ia, ib);
            winv.emplace_back(std::stod(f[2]), std::stod(f[3]));
        } catch (const std::invalid_argument&) {
            throw ValidationError("CSV line " + std::to_string(lineno) + ": bad number");
        }
    }
    PairwiseTable t;
    t.methods = names;
    t.wins.assign(names.size(), std::vector<double>(names.size(), 0.0));
    for (size_t i = 0; i < pairs.size(); ++i) {
        t.wins[static_cast<size_t>(pairs[i].first)][static_cast<size_t>(pairs[i].second)] += winv[i].first;
        t.wins[static_cast<size_t>(pairs[i].second)][static_cast<size_t>(pairs[i].first)] += winv[i].second;
    }
    t.validate();
    return t;
}

BTScores bt_fit(const PairwiseTable& table, double tol, int max_iter) {
    table.validate();
    int n = table.size();
    if (n < 2)
        throw ValidationError("need at least two methods");

    // Connectivity of the comparison graph.
    std::vector<int> parent(static_cast<size_t>(n));
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int a) { return parent[static_cast<size_t>(a)] == a ? a : parent[static_cast<size_t>(a)] = find(parent[static_cast<size_t>(a)]); };
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (table.comparisons(i, j) > 0)
                parent[static_cast<size_t>(find(i))] = find(j);
    for (int i = 1; i < n; ++i)
        if (find(i) != find(0))
            throw RankDeficientError("comparison graph is disconnected");

    constexpr double kFloor = 1e-8;
    std::vector<double> wins_total(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            wins_total[static_cast<size_t>(i)] += table.wins[static_cast<size_t>(i)][static_cast<size_t>(j)];

    std::vector<double> p(static_cast<size_t>(n), 1.0);
    std::vector<double> prev_scores(static_cast<size_t>(n), 0.0);
    BTScores out;
    out.methods = table.methods;
    out.scores.assign(static_cast<size_t>(n), 0.0);
    out.clamped.assign(static_cast<size_t>(n), false);

    auto compute_scores = [&](const std::vector<double>& pv) {
        std::vector<double> s(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            double v = std::log(std::max(pv[static_cast<size_t>(i)], 0.0));
            if (!(v >= std::log(kFloor))) {
                v = std::log(kFloor);
                out.clamped[static_cast<size_t>(i)] = true;
            }
            s[static_cast<size_t>(i)] = v;
        }
        double mean = std::accumulate(s.begin(), s.end(), 0.0) / n;
        for (double& v : s)
            v -= mean;
        return s;
    };

    for (int it = 0; it < max_iter; ++it) {
        std::vector<double> np(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            double denom = 0.0;
            for (int j = 0; j < n; ++j) {
                if (j == i)
                    continue;
                double nij = table.comparisons(i, j);
                if (nij > 0.0)
                    denom += nij / (p[static_cast<size_t>(i)] + p[static_cast<size_t>(j)]);
            }
            np[static_cast<size_t>(i)] = denom > 0.0 ? wins_total[static_cast<size_t>(i)] / denom : p[static_cast<size_t>(i)];
        }
        // Normalize by the geometric mean of the non-collapsed strengths.
        double lg = 0.0;
        int cnt = 0;
        for (double v : np)
            if (v > 0.0) {
                lg += std::log(v);
                ++cnt;
            }
        double scale = cnt > 0 ? std::exp(-lg / cnt) : 1.0;
        for (double& v : np)
            v *= scale;
        p = np;
        std::fill(out.clamped.begin(), out.clamped.end(), false);
        std::vector<double> scores = compute_scores(p);
        double delta = 0.0;
        for (int i = 0; i < n; ++i)
            delta = std::max(delta, std::fabs(scores[static_cast<size_t>(i)] - prev_scores[static_cast<size_t>(i)]));
        prev_scores = scores;
        out.scores = scores;
        out.iterations = it + 1;
        if (it > 0 && delta < tol) {
            out.converged = true;
            break;
        }
    }
    return out;
}

std::vector<double> average_rank(const std::vector<std::vector<int>>& rankings) {
    if (rankings.empty())
        throw ValidationError("no rankings given");
    size_t m = rankings.front().size();
    if (m == 0)
        throw ValidationError("empty ranking vector");
    std::vector<double> mean(m, 0.0);
    for (const auto& r : rankings) {
        if (r.size() != m)
            throw ValidationError("ranking length mismatch");
        std::vector<bool> seen(m + 1, false);
        for (int v : r) {
            if (v < 1 || v > static_cast<int>(m) || seen[static_cast<size_t>(v)])
                throw ValidationError("ranking is not a permutation of 1..m");
            seen[static_cast<size_t>(v)] = true;
        }
        for (size_t i = 0; i < m; ++i)
            mean[i] += r[i];
    }
    for (auto& v : mean)
        v /= static_cast<double>(rankings.size());
    return mean;
}

} // namespace ccm
