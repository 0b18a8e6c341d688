#pragma once

#include "longgee/gee.hpp"
#include "longgee/panel.hpp"
#include "longgee/rng.hpp"

#include <random>
#include <stdexcept>
#include <vector>

namespace longgee {

struct SamplingScheme {
    enum class Kind { SingleTrip, Srs, SystematicSeparated, SeparatedBlocks };
    Kind kind = Kind::SingleTrip;
    int trips_per_subject = 1; // R, for Srs
    int separation = 0;        // S
    int block_size = 2;        // B, for SeparatedBlocks

    static SamplingScheme single_trip() { return {Kind::SingleTrip, 1, 0, 2}; }
    static SamplingScheme srs(int r) { return {Kind::Srs, r, 0, 2}; }
    static SamplingScheme systematic(int s) { return {Kind::SystematicSeparated, 1, s, 2}; }
    static SamplingScheme separated_blocks(int b, int s) {
        return {Kind::SeparatedBlocks, 1, s, b};
    }
};

struct Subsample {
    Panel panel;
    ClusterLabels blocks; // per subject, per kept trip; empty unless SeparatedBlocks
    bool has_blocks = false;
};

namespace detail {

inline Subject take_rows(const Subject& s, const std::vector<int>& rows) {
    Subject out;
    out.subject_id = s.subject_id;
    out.z = s.z;
    const int k = static_cast<int>(rows.size());
    out.trip_index.resize(k);
    out.time.resize(k);
    out.offset.resize(k);
    out.x.resize(k, s.x.cols());
    out.count.resize(k);
    for (int j = 0; j < k; ++j) {
        out.trip_index[j] = s.trip_index[rows[j]];
        out.time[j] = s.time[rows[j]];
        out.offset[j] = s.offset[rows[j]];
        out.x.row(j) = s.x.row(rows[j]);
        out.count[j] = s.count[rows[j]];
    }
    return out;
}

} // namespace detail

inline Subsample draw_subsample(const Panel& panel, const SamplingScheme& scheme,
                                std::mt19937_64& rng) {
    int min_k = std::numeric_limits<int>::max();
    for (const auto& s : panel.subjects) min_k = std::min(min_k, s.n_trips());

    switch (scheme.kind) {
        case SamplingScheme::Kind::SingleTrip:
            if (min_k < 1) throw std::invalid_argument("draw_subsample: empty subject");
            break;
        case SamplingScheme::Kind::Srs:
            if (scheme.trips_per_subject < 1 || scheme.trips_per_subject > min_k)
                throw std::invalid_argument("draw_subsample: R must be in [1, min k_i]");
            break;
        case SamplingScheme::Kind::SystematicSeparated:
            if (scheme.separation < 0 || scheme.separation + 1 > min_k)
                throw std::invalid_argument("draw_subsample: S+1 exceeds shortest subject");
            break;
        case SamplingScheme::Kind::SeparatedBlocks:
            if (scheme.block_size < 2 || scheme.separation < 0 ||
                scheme.block_size + scheme.separation > min_k)
                throw std::invalid_argument("draw_subsample: B+S exceeds shortest subject");
            break;
    }

    Subsample out;
    out.panel.p_z = panel.p_z;
    out.panel.p_x = panel.p_x;
    out.panel.z_names = panel.z_names;
    out.panel.x_names = panel.x_names;
    out.has_blocks = scheme.kind == SamplingScheme::Kind::SeparatedBlocks;

    int next_block_id = 0;
    for (const auto& s : panel.subjects) {
        const int k = s.n_trips();
        std::vector<int> rows;
        std::vector<int> labels;
        switch (scheme.kind) {
            case SamplingScheme::Kind::SingleTrip: {
                std::uniform_int_distribution<int> pick(0, k - 1);
                rows.push_back(pick(rng));
                break;
            }
            case SamplingScheme::Kind::Srs: {
                // partial Fisher-Yates, then restore time order
                std::vector<int> idx(k);
                std::iota(idx.begin(), idx.end(), 0);
                for (int r = 0; r < scheme.trips_per_subject; ++r) {
                    std::uniform_int_distribution<int> pick(r, k - 1);
                    std::swap(idx[r], idx[pick(rng)]);
                }
                rows.assign(idx.begin(), idx.begin() + scheme.trips_per_subject);
                std::sort(rows.begin(), rows.end());
                break;
            }
            case SamplingScheme::Kind::SystematicSeparated: {
                std::uniform_int_distribution<int> pick(0, scheme.separation);
                for (int j = pick(rng); j < k; j += scheme.separation + 1) rows.push_back(j);
                break;
            }
            case SamplingScheme::Kind::SeparatedBlocks: {
                std::uniform_int_distribution<int> pick(0, scheme.block_size + scheme.separation - 1);
                int pos = pick(rng);
                while (pos < k) {
                    const int len = std::min(scheme.block_size, k - pos);
                    if (len >= 2) { // singleton trailing blocks carry no contrast
                        const int id = next_block_id++;
                        for (int j = 0; j < len; ++j) {
                            rows.push_back(pos + j);
                            labels.push_back(id);
                        }
                    }
                    pos += scheme.block_size + scheme.separation;
                }
                break;
            }
        }
        out.panel.subjects.push_back(detail::take_rows(s, rows));
        out.blocks.push_back(std::move(labels));
    }
    return out;
}

struct WcrResult {
    Eigen::VectorXd theta_wcr;
    Eigen::MatrixXd cov_wcr;
    int L_requested = 0;
    int L_used = 0;
    struct PerSubsample {
        Eigen::VectorXd theta;
        Eigen::MatrixXd cov;
        bool na = false;
    };
    std::vector<PerSubsample> per_subsample;
    bool diag_negative = false;
    bool na_flag = false;
};

namespace detail {

// Parameter vector whose sampling distribution WCR combines: beta under FSE,
// (nu, alpha, beta) otherwise, with the matching covariance block.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> reported_theta(const GeeFit& fit,
                                                                  VarianceKind kind) {
    const Eigen::MatrixXd& cov =
        kind == VarianceKind::ModelBased ? fit.cov_model : fit.cov_robust;
    if (fit.use_fse) return {fit.beta_hat, cov};
    Eigen::VectorXd theta(1 + fit.alpha_hat.size() + fit.beta_hat.size());
    theta[0] = fit.nu_hat_global;
    theta.segment(1, fit.alpha_hat.size()) = fit.alpha_hat;
    theta.tail(fit.beta_hat.size()) = fit.beta_hat;
    return {theta, cov};
}

} // namespace detail

inline WcrResult run_wcr(const Panel& panel, const SamplingScheme& scheme, int L,
                         const FitConfig& fit_config, std::uint64_t seed) {
    if (L < 1) throw std::invalid_argument("run_wcr: L must be >= 1");
    if (fit_config.use_fse && scheme.kind == SamplingScheme::Kind::SingleTrip)
        throw std::invalid_argument("run_wcr: FSE needs >= 2 trips per subject");

    const VarianceKind kind = fit_config.variance == VarianceKind::ModelBased
                                  ? VarianceKind::ModelBased
                                  : VarianceKind::Robust;
    WcrResult out;
    out.L_requested = L;
    out.per_subsample.resize(L);

    int dim = -1;
    for (int l = 0; l < L; ++l) {
        auto rng = make_engine(seed, static_cast<std::uint64_t>(l));
        const Subsample sub = draw_subsample(panel, scheme, rng);
        const GeeFit fit = fit_gee(sub.panel, fit_config, sub.has_blocks ? &sub.blocks : nullptr);
        auto& slot = out.per_subsample[l];
        if (fit.na_flag || !fit.converged) {
            slot.na = true;
            continue;
        }
        std::tie(slot.theta, slot.cov) = detail::reported_theta(fit, kind);
        if (dim < 0) dim = static_cast<int>(slot.theta.size());
        ++out.L_used;
    }
    if (out.L_used == 0) {
        out.na_flag = true;
        return out;
    }

    Eigen::VectorXd mean_theta = Eigen::VectorXd::Zero(dim);
    Eigen::MatrixXd mean_cov = Eigen::MatrixXd::Zero(dim, dim);
    for (const auto& slot : out.per_subsample) {
        if (slot.na) continue;
        mean_theta += slot.theta;
        mean_cov += slot.cov;
    }
    mean_theta /= out.L_used;
    mean_cov /= out.L_used;

    Eigen::MatrixXd between = Eigen::MatrixXd::Zero(dim, dim);
    if (out.L_used > 1) {
        for (const auto& slot : out.per_subsample) {
            if (slot.na) continue;
            const Eigen::VectorXd d = slot.theta - mean_theta;
            between += d * d.transpose();
        }
        between /= (out.L_used - 1);
    }
    out.theta_wcr = mean_theta;
    out.cov_wcr = mean_cov - between;
    out.diag_negative = out.cov_wcr.diagonal().minCoeff() < 0.0;
    return out;
}

} // namespace longgee
