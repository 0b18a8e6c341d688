#pragma once

#include "longgee/cov_params.hpp"
#include "longgee/panel.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace longgee {

enum class WorkingCov { Independence, Supplied };
enum class VarianceKind { Robust, ModelBased, Both };

struct FitConfig {
    bool use_fse = false;
    WorkingCov working_cov = WorkingCov::Independence;
    CovParamEstimate cov_params; // used when working_cov == Supplied
    VarianceKind variance = VarianceKind::Both;
    int max_iter = 50;
    double tol = 1e-8;
    bool one_step = false; // valid only with Supplied
};

struct GeeFit {
    // no-FSE parametrization: (nu, alpha, beta)
    double nu_hat_global = 0.0;
    Eigen::VectorXd alpha_hat;
    // shared
    Eigen::VectorXd beta_hat;
    // FSE parametrization: one intercept per kept subject
    Eigen::VectorXd nu_hat;
    std::vector<int> fse_subjects;    // panel indices of kept subjects
    std::vector<int> dropped_subjects; // all-zero-count subjects dropped under FSE

    // Covariances over the reported parameters: (nu, alpha, beta) without FSE,
    // beta alone with FSE. The FSE intercept block is kept separately.
    Eigen::MatrixXd cov_robust;
    Eigen::MatrixXd cov_model;
    Eigen::MatrixXd cov_nu_given_nu; // model-based FSE block, per-subject conditional variance

    bool use_fse = false;
    bool converged = false;
    bool na_flag = false;
    std::string na_reason;
    int iterations = 0;

    // Fitted means, aligned with the panel (dropped subjects keep their slot,
    // filled with working-independence means from their own data when possible).
    std::vector<Eigen::VectorXd> mu;

    int n_reported() const { return static_cast<int>(cov_model.rows()); }
};

// Working covariance for one subject at fitted means mu: marginal form
// (sigma2_b included) without FSE, conditional form with FSE.
inline Eigen::MatrixXd assemble_working_covariance(const Eigen::VectorXd& times,
                                                   const Eigen::VectorXd& mu,
                                                   const CovParamEstimate& cov,
                                                   bool use_fse) {
    const int k = static_cast<int>(mu.size());
    const double s2b = use_fse ? 0.0 : cov.sigma2_b.value_or(0.0);
    const double diag_fac = std::exp(s2b + cov.sigma2_c + cov.sigma2_e) - 1.0;
    Eigen::MatrixXd v(k, k);
    for (int j = 0; j < k; ++j) {
        v(j, j) = mu[j] + mu[j] * mu[j] * diag_fac;
        for (int l = j + 1; l < k; ++l) {
            const double d = std::abs(times[l] - times[j]);
            const double cc = std::exp(s2b + cov.sigma2_c * std::exp(-cov.gamma * d)) - 1.0;
            v(j, l) = v(l, j) = mu[j] * mu[l] * cc;
        }
    }
    return v;
}

namespace detail {

// Per-cluster score and information pieces for one subject under a given
// working covariance. With independence everything is diagonal.
struct SubjectWork {
    double a = 0.0;            // d_nu' W d_nu (FSE)
    Eigen::VectorXd u;         // cross term with beta block (FSE)
    Eigen::MatrixXd bmat;      // beta-block information
    double g_nu = 0.0;         // score for nu_i
    Eigen::VectorXd g_beta;
    bool ok = true;
};

inline Eigen::VectorXd fitted_mu(const Subject& s, double nu, const Eigen::VectorXd& alpha,
                                 const Eigen::VectorXd& beta) {
    const int k = s.n_trips();
    Eigen::VectorXd eta = Eigen::VectorXd::Constant(k, nu);
    if (alpha.size() > 0) eta.array() += alpha.dot(s.z);
    if (beta.size() > 0) eta += s.x * beta;
    return (eta.array() + s.offset.array().log()).exp();
}

} // namespace detail

// Per-subject trip->cluster labels for block-clustered robust variance
// (WCR separated blocks). Empty means one cluster per subject.
using ClusterLabels = std::vector<std::vector<int>>;

inline GeeFit fit_gee(const Panel& panel, const FitConfig& config,
                      const ClusterLabels* clusters = nullptr) {
    GeeFit fit;
    fit.use_fse = config.use_fse;
    const int n = panel.n_subjects();
    const int p_x = panel.p_x;
    const int p_z = panel.p_z;

    if (config.one_step && config.working_cov != WorkingCov::Supplied)
        throw std::invalid_argument("fit_gee: one_step requires a supplied covariance");
    if (clusters != nullptr && config.working_cov != WorkingCov::Independence)
        throw std::invalid_argument("fit_gee: block clusters require working independence");

    auto fail = [&](const std::string& why) {
        fit.na_flag = true;
        fit.na_reason = why;
        return fit;
    };

    if (config.use_fse) {
        // ----- FSE path: parameters (nu_1..nu_m, beta), Schur solve on beta -----
        for (int i = 0; i < n; ++i) {
            const auto& s = panel.subjects[i];
            if (s.n_trips() < 2) return fail("FSE fit needs >= 2 trips per subject");
            if (s.count.sum() == 0)
                fit.dropped_subjects.push_back(i);
            else
                fit.fse_subjects.push_back(i);
        }
        const int m = static_cast<int>(fit.fse_subjects.size());
        if (m == 0) return fail("all subjects have zero counts");

        Eigen::VectorXd nu(m);
        Eigen::VectorXd beta = Eigen::VectorXd::Zero(p_x);
        for (int ii = 0; ii < m; ++ii) {
            const auto& s = panel.subjects[fit.fse_subjects[ii]];
            nu[ii] = std::log(static_cast<double>(s.count.sum()) / s.offset.sum());
        }

        // Stage 1: working independence, iterated to convergence.
        const auto indep_pass = [&](Eigen::VectorXd& nu_io, Eigen::VectorXd& beta_io,
                                    bool& converged, int max_iter) -> bool {
            auto quasi_ll = [&](const Eigen::VectorXd& nu_v, const Eigen::VectorXd& beta_v) {
                double ll = 0.0;
                for (int ii = 0; ii < m; ++ii) {
                    const auto& s = panel.subjects[fit.fse_subjects[ii]];
                    const Eigen::VectorXd mu =
                        detail::fitted_mu(s, nu_v[ii], Eigen::VectorXd(), beta_v);
                    ll += (s.count.cast<double>().array() * mu.array().log() - mu.array()).sum();
                }
                return ll;
            };
            double ll = quasi_ll(nu_io, beta_io);
            converged = false;
            for (int iter = 0; iter < max_iter; ++iter) {
                Eigen::MatrixXd schur = Eigen::MatrixXd::Zero(p_x, p_x);
                Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p_x);
                std::vector<double> a(m);
                std::vector<Eigen::VectorXd> u(m);
                std::vector<double> g_nu(m);
                for (int ii = 0; ii < m; ++ii) {
                    const auto& s = panel.subjects[fit.fse_subjects[ii]];
                    const Eigen::VectorXd mu =
                        detail::fitted_mu(s, nu_io[ii], Eigen::VectorXd(), beta_io);
                    if (!mu.allFinite()) return false;
                    const Eigen::VectorXd r = s.count.cast<double>() - mu;
                    a[ii] = mu.sum();
                    g_nu[ii] = r.sum();
                    if (p_x > 0) {
                        u[ii] = s.x.transpose() * mu;
                        schur.noalias() += s.x.transpose() * mu.asDiagonal() * s.x -
                                           u[ii] * u[ii].transpose() / a[ii];
                        rhs.noalias() += s.x.transpose() * r - u[ii] * (g_nu[ii] / a[ii]);
                    }
                }
                Eigen::VectorXd dbeta = Eigen::VectorXd::Zero(p_x);
                if (p_x > 0) {
                    Eigen::LDLT<Eigen::MatrixXd> ldlt(schur);
                    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return false;
                    dbeta = ldlt.solve(rhs);
                }
                Eigen::VectorXd dnu(m);
                for (int ii = 0; ii < m; ++ii)
                    dnu[ii] = (g_nu[ii] - (p_x > 0 ? u[ii].dot(dbeta) : 0.0)) / a[ii];

                // step halving on quasi-likelihood decrease or non-finite update
                double step = 1.0;
                bool accepted = false;
                for (int h = 0; h <= 5; ++h, step *= 0.5) {
                    const Eigen::VectorXd nu_try = nu_io + step * dnu;
                    const Eigen::VectorXd beta_try = beta_io + step * dbeta;
                    if (!nu_try.allFinite() || !beta_try.allFinite()) continue;
                    const double ll_try = quasi_ll(nu_try, beta_try);
                    if (std::isfinite(ll_try) && ll_try >= ll - 1e-12 * std::abs(ll)) {
                        nu_io = nu_try;
                        beta_io = beta_try;
                        ll = ll_try;
                        accepted = true;
                        break;
                    }
                }
                if (!accepted) return false;
                ++fit.iterations;
                double delta = dnu.cwiseAbs().maxCoeff();
                if (p_x > 0) delta = std::max(delta, dbeta.cwiseAbs().maxCoeff());
                if (delta < config.tol) {
                    converged = true;
                    break;
                }
            }
            return true;
        };

        bool indep_converged = false;
        if (!indep_pass(nu, beta, indep_converged, config.max_iter))
            return fail("singular or divergent working-independence fit");
        if (!indep_converged) return fail("working-independence fit did not converge");

        const bool supplied = config.working_cov == WorkingCov::Supplied;
        std::vector<Eigen::LLT<Eigen::MatrixXd>> vfac; // factors of supplied V, fixed once
        if (supplied) {
            // Assemble V at the independence fit, then update coefficients: one
            // scoring step when one_step, otherwise iterate (reassembling V).
            const int passes = config.one_step ? 1 : config.max_iter;
            bool cov_converged = config.one_step;
            for (int pass = 0; pass < passes; ++pass) {
                vfac.clear();
                vfac.reserve(m);
                Eigen::MatrixXd schur = Eigen::MatrixXd::Zero(p_x, p_x);
                Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p_x);
                std::vector<double> a(m);
                std::vector<Eigen::VectorXd> u(m);
                std::vector<double> g_nu(m);
                for (int ii = 0; ii < m; ++ii) {
                    const auto& s = panel.subjects[fit.fse_subjects[ii]];
                    const Eigen::VectorXd mu =
                        detail::fitted_mu(s, nu[ii], Eigen::VectorXd(), beta);
                    const Eigen::MatrixXd v =
                        assemble_working_covariance(s.time, mu, config.cov_params, true);
                    vfac.emplace_back(v);
                    if (vfac.back().info() != Eigen::Success)
                        return fail("working covariance not positive definite");
                    const Eigen::VectorXd r = s.count.cast<double>() - mu;
                    const Eigen::VectorXd wmu = vfac.back().solve(mu);
                    a[ii] = mu.dot(wmu);
                    g_nu[ii] = r.dot(wmu);
                    if (p_x > 0) {
                        const Eigen::MatrixXd g = mu.asDiagonal() * s.x; // k x p
                        const Eigen::MatrixXd wg = vfac.back().solve(g);
                        u[ii] = wg.transpose() * mu;
                        schur.noalias() += g.transpose() * wg - u[ii] * u[ii].transpose() / a[ii];
                        rhs.noalias() += wg.transpose() * r - u[ii] * (g_nu[ii] / a[ii]);
                    }
                }
                Eigen::VectorXd dbeta = Eigen::VectorXd::Zero(p_x);
                if (p_x > 0) {
                    Eigen::LDLT<Eigen::MatrixXd> ldlt(schur);
                    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
                        return fail("singular normal equations under supplied covariance");
                    dbeta = ldlt.solve(rhs);
                }
                Eigen::VectorXd dnu(m);
                for (int ii = 0; ii < m; ++ii)
                    dnu[ii] = (g_nu[ii] - (p_x > 0 ? u[ii].dot(dbeta) : 0.0)) / a[ii];
                nu += dnu;
                beta += dbeta;
                if (!nu.allFinite() || !beta.allFinite())
                    return fail("divergent update under supplied covariance");
                ++fit.iterations;
                double delta = dnu.cwiseAbs().maxCoeff();
                if (p_x > 0) delta = std::max(delta, dbeta.cwiseAbs().maxCoeff());
                if (!config.one_step && delta < config.tol) {
                    cov_converged = true;
                    break;
                }
            }
            if (!cov_converged) return fail("supplied-covariance fit did not converge");
        }

        fit.nu_hat = nu;
        fit.beta_hat = beta;
        fit.converged = true;

        // ----- variance: bread A from blocks, meat B per cluster -----
        const int q = m + p_x;
        Eigen::MatrixXd a_full = Eigen::MatrixXd::Zero(q, q);
        Eigen::MatrixXd b_full = Eigen::MatrixXd::Zero(q, q);
        fit.mu.assign(n, Eigen::VectorXd());
        for (int ii = 0; ii < m; ++ii) {
            const int i = fit.fse_subjects[ii];
            const auto& s = panel.subjects[i];
            const Eigen::VectorXd mu = detail::fitted_mu(s, nu[ii], Eigen::VectorXd(), beta);
            fit.mu[i] = mu;
            const Eigen::VectorXd r = s.count.cast<double>() - mu;
            const int k = s.n_trips();

            // W-weighted columns: W mu and W G
            Eigen::VectorXd wmu;
            Eigen::MatrixXd wg;
            const Eigen::MatrixXd g =
                p_x > 0 ? Eigen::MatrixXd(mu.asDiagonal() * s.x) : Eigen::MatrixXd(k, 0);
            if (supplied) {
                wmu = vfac[ii].solve(mu);
                if (p_x > 0) wg = vfac[ii].solve(g);
            } else {
                wmu = Eigen::VectorXd::Ones(k); // V = diag(mu): W mu = 1
                if (p_x > 0) wg = s.x;          // W G = X
            }
            a_full(ii, ii) = mu.dot(wmu);
            if (p_x > 0) {
                const Eigen::VectorXd u = wg.transpose() * mu;
                a_full.block(ii, m, 1, p_x) = u.transpose();
                a_full.block(m, ii, p_x, 1) = u;
                a_full.block(m, m, p_x, p_x).noalias() += g.transpose() * wg;
            }

            // cluster scores: default one cluster per subject
            if (clusters == nullptr || (*clusters)[i].empty()) {
                Eigen::VectorXd s_vec = Eigen::VectorXd::Zero(q);
                s_vec[ii] = r.dot(wmu);
                if (p_x > 0) s_vec.tail(p_x) = wg.transpose() * r;
                b_full.noalias() += s_vec * s_vec.transpose();
            } else {
                const auto& labels = (*clusters)[i];
                std::map<int, Eigen::VectorXd> by_cluster;
                for (int j = 0; j < k; ++j) {
                    auto [it, fresh] = by_cluster.try_emplace(labels[j], Eigen::VectorXd::Zero(q));
                    it->second[ii] += r[j] * wmu[j];
                    if (p_x > 0) it->second.tail(p_x) += wg.row(j).transpose() * r[j];
                }
                for (const auto& [id, s_vec] : by_cluster)
                    b_full.noalias() += s_vec * s_vec.transpose();
            }
        }
        // Fitted means for dropped subjects: all-zero counts give mu = 0 limit;
        // leave the slot empty (size 0) and let callers skip it.

        Eigen::LDLT<Eigen::MatrixXd> a_ldlt(a_full);
        if (a_ldlt.info() != Eigen::Success) return fail("singular information matrix");
        const Eigen::MatrixXd a_inv = a_ldlt.solve(Eigen::MatrixXd::Identity(q, q));
        const Eigen::MatrixXd robust = a_inv * b_full * a_inv;
        fit.cov_model = a_inv.block(m, m, p_x, p_x);
        fit.cov_robust = robust.block(m, m, p_x, p_x);
        fit.cov_nu_given_nu = a_inv.topLeftCorner(m, m);
        if (!fit.cov_model.allFinite() || !fit.cov_robust.allFinite())
            return fail("non-finite variance estimate");
        return fit;
    }

    // ----- no-FSE path: parameters (nu, alpha, beta) -----
    const int q = 1 + p_z + p_x;
    auto design_row = [&](const Subject& s, int j) {
        Eigen::VectorXd row(q);
        row[0] = 1.0;
        if (p_z > 0) row.segment(1, p_z) = s.z;
        if (p_x > 0) row.tail(p_x) = s.x.row(j).transpose();
        return row;
    };
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(q);
    {
        double tot_y = 0.0, tot_m = 0.0;
        for (const auto& s : panel.subjects) {
            tot_y += static_cast<double>(s.count.sum());
            tot_m += s.offset.sum();
        }
        if (tot_y <= 0.0) return fail("all counts are zero");
        theta[0] = std::log(tot_y / tot_m);
    }
    auto mu_of = [&](const Subject& s, const Eigen::VectorXd& th) {
        const int k = s.n_trips();
        Eigen::VectorXd eta = Eigen::VectorXd::Constant(k, th[0]);
        if (p_z > 0) eta.array() += th.segment(1, p_z).dot(s.z);
        if (p_x > 0) eta += s.x * th.tail(p_x);
        return Eigen::VectorXd((eta.array() + s.offset.array().log()).exp());
    };
    auto quasi_ll = [&](const Eigen::VectorXd& th) {
        double ll = 0.0;
        for (const auto& s : panel.subjects) {
            const Eigen::VectorXd mu = mu_of(s, th);
            ll += (s.count.cast<double>().array() * mu.array().log() - mu.array()).sum();
        }
        return ll;
    };

    const bool supplied = config.working_cov == WorkingCov::Supplied;

    // independence stage
    double ll = quasi_ll(theta);
    bool indep_converged = false;
    for (int iter = 0; iter < config.max_iter; ++iter) {
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(q, q);
        Eigen::VectorXd g = Eigen::VectorXd::Zero(q);
        for (const auto& s : panel.subjects) {
            const Eigen::VectorXd mu = mu_of(s, theta);
            if (!mu.allFinite()) return fail("divergent working-independence fit");
            for (int j = 0; j < s.n_trips(); ++j) {
                const Eigen::VectorXd row = design_row(s, j);
                a.noalias() += mu[j] * row * row.transpose();
                g.noalias() += (static_cast<double>(s.count[j]) - mu[j]) * row;
            }
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            return fail("singular normal equations");
        const Eigen::VectorXd dtheta = ldlt.solve(g);
        double step = 1.0;
        bool accepted = false;
        for (int h = 0; h <= 5; ++h, step *= 0.5) {
            const Eigen::VectorXd theta_try = theta + step * dtheta;
            if (!theta_try.allFinite()) continue;
            const double ll_try = quasi_ll(theta_try);
            if (std::isfinite(ll_try) && ll_try >= ll - 1e-12 * std::abs(ll)) {
                theta = theta_try;
                ll = ll_try;
                accepted = true;
                break;
            }
        }
        if (!accepted) return fail("step halving exhausted");
        ++fit.iterations;
        if (dtheta.cwiseAbs().maxCoeff() < config.tol) {
            indep_converged = true;
            break;
        }
    }
    if (!indep_converged) return fail("working-independence fit did not converge");

    std::vector<Eigen::LLT<Eigen::MatrixXd>> vfac;
    if (supplied) {
        const int passes = config.one_step ? 1 : config.max_iter;
        bool cov_converged = config.one_step;
        for (int pass = 0; pass < passes; ++pass) {
            vfac.clear();
            Eigen::MatrixXd a = Eigen::MatrixXd::Zero(q, q);
            Eigen::VectorXd g = Eigen::VectorXd::Zero(q);
            for (const auto& s : panel.subjects) {
                const Eigen::VectorXd mu = mu_of(s, theta);
                const Eigen::MatrixXd v =
                    assemble_working_covariance(s.time, mu, config.cov_params, false);
                vfac.emplace_back(v);
                if (vfac.back().info() != Eigen::Success)
                    return fail("working covariance not positive definite");
                const int k = s.n_trips();
                Eigen::MatrixXd d(k, q);
                for (int j = 0; j < k; ++j) d.row(j) = mu[j] * design_row(s, j).transpose();
                const Eigen::MatrixXd wd = vfac.back().solve(d);
                const Eigen::VectorXd r = s.count.cast<double>() - mu;
                a.noalias() += d.transpose() * wd;
                g.noalias() += wd.transpose() * r;
            }
            Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
            if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
                return fail("singular normal equations under supplied covariance");
            const Eigen::VectorXd dtheta = ldlt.solve(g);
            theta += dtheta;
            if (!theta.allFinite()) return fail("divergent update under supplied covariance");
            ++fit.iterations;
            if (!config.one_step && dtheta.cwiseAbs().maxCoeff() < config.tol) {
                cov_converged = true;
                break;
            }
        }
        if (!cov_converged) return fail("supplied-covariance fit did not converge");
    }

    fit.nu_hat_global = theta[0];
    fit.alpha_hat = theta.segment(1, p_z);
    fit.beta_hat = theta.tail(p_x);
    fit.converged = true;

    Eigen::MatrixXd a_full = Eigen::MatrixXd::Zero(q, q);
    Eigen::MatrixXd b_full = Eigen::MatrixXd::Zero(q, q);
    fit.mu.assign(n, Eigen::VectorXd());
    for (int i = 0; i < n; ++i) {
        const auto& s = panel.subjects[i];
        const Eigen::VectorXd mu = mu_of(s, theta);
        fit.mu[i] = mu;
        const Eigen::VectorXd r = s.count.cast<double>() - mu;
        const int k = s.n_trips();
        Eigen::MatrixXd d(k, q);
        for (int j = 0; j < k; ++j) d.row(j) = mu[j] * design_row(s, j).transpose();
        Eigen::MatrixXd wd;
        if (supplied)
            wd = vfac[i].solve(d);
        else {
            wd.resize(k, q);
            for (int j = 0; j < k; ++j) wd.row(j) = d.row(j) / mu[j];
        }
        a_full.noalias() += d.transpose() * wd;
        if (clusters == nullptr || (*clusters)[i].empty()) {
            const Eigen::VectorXd s_vec = wd.transpose() * r;
            b_full.noalias() += s_vec * s_vec.transpose();
        } else {
            const auto& labels = (*clusters)[i];
            std::map<int, Eigen::VectorXd> by_cluster;
            for (int j = 0; j < k; ++j) {
                auto [it, fresh] = by_cluster.try_emplace(labels[j], Eigen::VectorXd::Zero(q));
                it->second += wd.row(j).transpose() * r[j];
            }
            for (const auto& [id, s_vec] : by_cluster)
                b_full.noalias() += s_vec * s_vec.transpose();
        }
    }
    Eigen::LDLT<Eigen::MatrixXd> a_ldlt(a_full);
    if (a_ldlt.info() != Eigen::Success) return fail("singular information matrix");
    const Eigen::MatrixXd a_inv = a_ldlt.solve(Eigen::MatrixXd::Identity(q, q));
    fit.cov_model = a_inv;
    fit.cov_robust = a_inv * b_full * a_inv;
    if (!fit.cov_model.allFinite() || !fit.cov_robust.allFinite())
        return fail("non-finite variance estimate");
    return fit;
}

} // namespace longgee
