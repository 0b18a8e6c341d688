#pragma once

#include "longgee/panel.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace longgee {

struct BinnedCorrelation {
    struct Bin {
        double median_gap = 0.0;
        double mean_product = 0.0;
        int n_pairs = 0;
    };
    std::vector<Bin> bins;
};

// Figure-style serial-correlation summary: products of standardized residuals
// for consecutive trips, sorted by gap time and grouped into equal-count bins.
inline BinnedCorrelation serial_diagnostic(const Panel& panel,
                                           const std::vector<Eigen::VectorXd>& fitted,
                                           const std::vector<Eigen::VectorXd>& variances,
                                           int n_bins) {
    struct Pair {
        double gap, product;
    };
    std::vector<Pair> pairs;
    for (int i = 0; i < panel.n_subjects(); ++i) {
        const auto& s = panel.subjects[i];
        const auto& mu = fitted[i];
        const auto& v = variances[i];
        if (mu.size() != s.n_trips() || v.size() != s.n_trips()) continue;
        for (int j = 0; j + 1 < s.n_trips(); ++j) {
            const double r0 = (static_cast<double>(s.count[j]) - mu[j]) / std::sqrt(v[j]);
            const double r1 =
                (static_cast<double>(s.count[j + 1]) - mu[j + 1]) / std::sqrt(v[j + 1]);
            pairs.push_back({std::abs(s.time[j + 1] - s.time[j]), r0 * r1});
        }
    }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.gap < b.gap; });

    BinnedCorrelation out;
    if (pairs.empty()) return out;
    const int bins = std::max(1, std::min<int>(n_bins, static_cast<int>(pairs.size())));
    const std::size_t total = pairs.size();
    for (int b = 0; b < bins; ++b) {
        const std::size_t lo = total * b / bins;
        const std::size_t hi = total * (b + 1) / bins;
        if (hi <= lo) continue;
        BinnedCorrelation::Bin bin;
        bin.n_pairs = static_cast<int>(hi - lo);
        for (std::size_t j = lo; j < hi; ++j) bin.mean_product += pairs[j].product;
        bin.mean_product /= bin.n_pairs;
        const std::size_t mid = lo + (hi - lo) / 2;
        bin.median_gap = (hi - lo) % 2 == 1 ? pairs[mid].gap
                                            : 0.5 * (pairs[mid - 1].gap + pairs[mid].gap);
        out.bins.push_back(bin);
    }
    return out;
}

} // namespace longgee
