#pragma once

#include "longgee/cov_params.hpp"
#include "longgee/gee.hpp"
#include "longgee/subject_level.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace longgee {

struct ResidualPair {
    enum class Kind { Consecutive, Symmetric };
    double gap = 0.0;     // |t_j - t_j'|
    double product = 0.0; // (Y - mu)(Y' - mu') / (mu mu')
    Kind kind = Kind::Consecutive;
};

// Consecutive pairs (j, j+1) and symmetric pairs (j, k+1-j) with j < k+1-j.
// Subjects without fitted means (dropped from an FSE fit) contribute nothing.
inline std::vector<ResidualPair> build_pairs(const Panel& panel,
                                             const std::vector<Eigen::VectorXd>& fitted) {
    std::vector<ResidualPair> pairs;
    for (int i = 0; i < panel.n_subjects(); ++i) {
        const auto& s = panel.subjects[i];
        const auto& mu = fitted[i];
        if (mu.size() != s.n_trips()) continue;
        const int k = s.n_trips();
        auto std_resid = [&](int j) { return (static_cast<double>(s.count[j]) - mu[j]) / mu[j]; };
        for (int j = 0; j + 1 < k; ++j)
            pairs.push_back({std::abs(s.time[j + 1] - s.time[j]), std_resid(j) * std_resid(j + 1),
                             ResidualPair::Kind::Consecutive});
        for (int j = 0; j < k - 1 - j; ++j)
            pairs.push_back({std::abs(s.time[k - 1 - j] - s.time[j]),
                             std_resid(j) * std_resid(k - 1 - j), ResidualPair::Kind::Symmetric});
    }
    return pairs;
}

// Moment estimate of the summed variance components on the log scale:
// log[1 + avg{(Y-mu)^2/mu^2 - 1/mu}], clamped at 0. The Poisson term is
// subtracted so that pure Poisson data gives 0 in expectation.
inline double moment_total_variance(const Panel& panel,
                                    const std::vector<Eigen::VectorXd>& fitted) {
    double acc = 0.0;
    long long n = 0;
    for (int i = 0; i < panel.n_subjects(); ++i) {
        const auto& s = panel.subjects[i];
        const auto& mu = fitted[i];
        if (mu.size() != s.n_trips()) continue;
        for (int j = 0; j < s.n_trips(); ++j) {
            const double r = static_cast<double>(s.count[j]) - mu[j];
            acc += r * r / (mu[j] * mu[j]) - 1.0 / mu[j];
            ++n;
        }
    }
    if (n == 0) return 0.0;
    const double inside = 1.0 + acc / static_cast<double>(n);
    return inside > 1.0 ? std::log(inside) : 0.0;
}

constexpr double kGammaMin = 1e-2;
constexpr double kGammaMax = 1e5;

struct InitialValues {
    double sigma2_c = 0.0;
    double gamma = 0.0;
    bool ok = false;
};

// Binned log-log regression of pair products on gap time: intercept gives
// log sigma2_c and the negated slope gives gamma.
inline InitialValues initial_values(std::vector<ResidualPair> pairs, int n_bins) {
    InitialValues out;
    if (pairs.size() < 2 || n_bins < 2) return out;
    std::sort(pairs.begin(), pairs.end(),
              [](const ResidualPair& a, const ResidualPair& b) { return a.gap < b.gap; });
    n_bins = std::min<int>(n_bins, static_cast<int>(pairs.size()));

    std::vector<double> xs, ys;
    const std::size_t total = pairs.size();
    for (int b = 0; b < n_bins; ++b) {
        const std::size_t lo = total * b / n_bins;
        const std::size_t hi = total * (b + 1) / n_bins;
        if (hi <= lo) continue;
        double mean_prod = 0.0;
        for (std::size_t j = lo; j < hi; ++j) mean_prod += pairs[j].product;
        mean_prod /= static_cast<double>(hi - lo);
        if (mean_prod + 1.0 <= 1.0 + 1e-6) continue; // log log undefined
        const std::size_t mid = lo + (hi - lo) / 2;
        const double median_gap = (hi - lo) % 2 == 1
                                      ? pairs[mid].gap
                                      : 0.5 * (pairs[mid - 1].gap + pairs[mid].gap);
        xs.push_back(median_gap);
        ys.push_back(std::log(std::log1p(mean_prod)));
    }
    if (xs.size() < 2) return out;

    const double n = static_cast<double>(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t j = 0; j < xs.size(); ++j) {
        sx += xs[j];
        sy += ys[j];
        sxx += xs[j] * xs[j];
        sxy += xs[j] * ys[j];
    }
    const double denom = n * sxx - sx * sx;
    if (denom <= 0.0) return out;
    const double slope = (n * sxy - sx * sy) / denom;
    const double intercept = (sy - slope * sx) / n;
    out.sigma2_c = std::exp(intercept);
    out.gamma = std::clamp(-slope, kGammaMin, kGammaMax);
    out.ok = true;
    return out;
}

namespace detail {

// Damped Gauss-Newton on log-scale parameters for the pair-product mean
// function exp{s2b + s2c exp(-gamma d)} - 1 (s2b fixed at 0 in the FSE case).
struct NlsResult {
    double sigma2_b = 0.0;
    double sigma2_c = 0.0;
    double gamma = 0.0;
    bool converged = false;
};

inline NlsResult fit_pair_nls(const std::vector<ResidualPair>& pairs, bool with_sigma2_b,
                              double s2b_init, double s2c_init, double gamma_init,
                              int max_iter = 100, double rel_tol = 1e-10) {
    NlsResult out;
    const int np = with_sigma2_b ? 3 : 2;
    Eigen::VectorXd theta(np); // log-scale
    int idx = 0;
    if (with_sigma2_b) theta[idx++] = std::log(std::max(s2b_init, 1e-8));
    theta[idx++] = std::log(std::max(s2c_init, 1e-8));
    theta[idx] = std::log(std::clamp(gamma_init, kGammaMin, kGammaMax));

    auto objective = [&](const Eigen::VectorXd& th, Eigen::MatrixXd* jac,
                         Eigen::VectorXd* resid) {
        int c = 0;
        const double s2b = with_sigma2_b ? std::exp(th[c++]) : 0.0;
        const double s2c = std::exp(th[c++]);
        const double g = std::exp(th[c]);
        double obj = 0.0;
        for (std::size_t j = 0; j < pairs.size(); ++j) {
            const double decay = std::exp(-g * pairs[j].gap);
            const double inner = s2b + s2c * decay;
            const double ef = std::exp(inner);
            const double f = ef - 1.0;
            const double r = pairs[j].product - f;
            obj += r * r;
            if (jac != nullptr) {
                (*resid)[j] = r;
                int cc = 0;
                if (with_sigma2_b) (*jac)(j, cc++) = ef * s2b;
                (*jac)(j, cc++) = ef * s2c * decay;
                (*jac)(j, cc) = ef * s2c * decay * (-g * pairs[j].gap);
            }
        }
        return obj;
    };

    const std::size_t npairs = pairs.size();
    if (npairs < static_cast<std::size_t>(np)) return out;
    Eigen::MatrixXd jac(npairs, np);
    Eigen::VectorXd resid(npairs);
    double obj = objective(theta, &jac, &resid);
    double lambda = 1e-3;
    bool converged = false;
    for (int iter = 0; iter < max_iter; ++iter) {
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd jtr = jac.transpose() * resid;
        bool accepted = false;
        for (int tries = 0; tries < 20; ++tries) {
            Eigen::MatrixXd damped = jtj;
            damped.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
            Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
            if (ldlt.info() != Eigen::Success) {
                lambda *= 10.0;
                continue;
            }
            const Eigen::VectorXd step = ldlt.solve(jtr);
            const Eigen::VectorXd theta_try = theta + step;
            if (!theta_try.allFinite() || theta_try.cwiseAbs().maxCoeff() > 50.0) {
                lambda *= 10.0;
                continue;
            }
            const double obj_try = objective(theta_try, nullptr, nullptr);
            if (std::isfinite(obj_try) && obj_try <= obj) {
                const double rel = (obj - obj_try) / std::max(obj, 1e-300);
                theta = theta_try;
                obj = objective(theta, &jac, &resid);
                lambda = std::max(lambda * 0.1, 1e-12);
                accepted = true;
                if (rel < rel_tol) converged = true;
                break;
            }
            lambda *= 10.0;
        }
        if (!accepted || converged) break;
    }
    out.converged = converged;
    int c = 0;
    if (with_sigma2_b) out.sigma2_b = std::exp(theta[c++]);
    out.sigma2_c = std::exp(theta[c++]);
    out.gamma = std::clamp(std::exp(theta[c]), kGammaMin, kGammaMax);
    return out;
}

} // namespace detail

// Full estimation pipeline: preliminary working-independence GEE, moment
// estimate of the variance-component sum, binned initial values, then damped
// Gauss-Newton on the pair products. Nonconvergence keeps the initial values.
inline CovParamEstimate fit_covariance(const Panel& panel, CovMethod method, int n_bins = 20) {
    CovParamEstimate out;
    out.method = method;

    FitConfig cfg;
    cfg.use_fse = method != CovMethod::NoFse;
    const GeeFit fit = fit_gee(panel, cfg);
    if (fit.na_flag) {
        out.na_flag = true;
        return out;
    }

    const double total = moment_total_variance(panel, fit.mu);
    auto pairs = build_pairs(panel, fit.mu);

    if (method == CovMethod::NoFse) {
        // Initial values come from an FSE-LS analysis; the log-log trick does
        // not separate sigma2_b from sigma2_c here.
        const CovParamEstimate fse = fit_covariance(panel, CovMethod::FseLs, n_bins);
        if (fse.na_flag) {
            out.na_flag = true;
            return out;
        }
        const double s2b_init = std::max(fse.sigma2_b.value_or(0.1), 1e-4);
        const auto nls = detail::fit_pair_nls(pairs, true, s2b_init,
                                              std::max(fse.sigma2_c, 1e-4), fse.gamma);
        if (nls.converged) {
            out.sigma2_b = nls.sigma2_b;
            out.sigma2_c = nls.sigma2_c;
            out.gamma = nls.gamma;
            out.converged = true;
        } else {
            out.sigma2_b = s2b_init;
            out.sigma2_c = fse.sigma2_c;
            out.gamma = fse.gamma;
            out.converged = false;
        }
        out.sigma2_e = std::max(0.0, total - *out.sigma2_b - out.sigma2_c);
        return out;
    }

    // FSE methods: total = sigma2_c + sigma2_e
    InitialValues init = initial_values(pairs, n_bins);
    if (!init.ok) {
        // fall back to uninformative defaults; the fit is flagged nonconverged
        init.sigma2_c = std::max(total * 0.5, 1e-4);
        init.gamma = 100.0;
    }
    const auto nls = detail::fit_pair_nls(pairs, false, 0.0, init.sigma2_c, init.gamma);
    if (nls.converged) {
        out.sigma2_c = nls.sigma2_c;
        out.gamma = nls.gamma;
        out.converged = true;
    } else {
        out.sigma2_c = init.sigma2_c;
        out.gamma = std::clamp(init.gamma, kGammaMin, kGammaMax);
        out.converged = false;
    }
    out.sigma2_e = std::max(0.0, total - out.sigma2_c);

    // sigma2_b from the second-stage regression of nu_hat on Z
    const int m = static_cast<int>(fit.fse_subjects.size());
    Eigen::MatrixXd z(m, panel.p_z);
    for (int ii = 0; ii < m; ++ii) z.row(ii) = panel.subjects[fit.fse_subjects[ii]].z.transpose();
    if (panel.p_z == 0) {
        if (m > 1) {
            const double mean = fit.nu_hat.mean();
            double s2 = (fit.nu_hat.array() - mean).square().sum() / (m - 1);
            if (method == CovMethod::FseIrls)
                s2 = std::max(0.0, (fit.nu_hat.array() - mean).square().sum() / (m - 1) -
                                       fit.cov_nu_given_nu.diagonal().mean());
            out.sigma2_b = s2;
        }
    } else if (m > panel.p_z + 1) {
        if (method == CovMethod::FseLs) {
            const AlphaFit af = alpha_ls(fit.nu_hat, z);
            if (!af.na_flag) out.sigma2_b = af.sigma2_b_hat;
        } else {
            const AlphaFit af = alpha_irls(fit.nu_hat, z, fit.cov_nu_given_nu);
            if (!af.na_flag) out.sigma2_b = af.sigma2_b_hat;
        }
    }
    return out;
}

} // namespace longgee
