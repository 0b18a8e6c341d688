#pragma once

#include "longgee/cov_estimation.hpp"
#include "longgee/gee.hpp"
#include "longgee/simulate.hpp"
#include "longgee/subject_level.hpp"
#include "longgee/wcr.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <string>
#include <thread>
#include <vector>

namespace longgee {

// One table row: which estimator to run on each simulated replicate.
struct EstimatorConfig {
    enum class Family {
        GeeAlpha,  // subject-level effect, direct or via second-stage regression
        GeeBeta,   // trip-level effect from a GEE fit
        CovParams, // covariance-parameter estimation
        WcrBeta,   // within-cluster resampling for beta
        OracleStub, // returns the truth with SE 1 (harness self-test)
        NormalToy   // theta_hat ~ N(truth, toy_sd^2), SE = toy_sd (self-test)
    };
    std::string name;
    Family family = Family::GeeBeta;

    bool use_fse = false;
    VarianceKind variance = VarianceKind::Robust;
    AlphaMethod alpha_method = AlphaMethod::Ls;

    bool estimated_cov = false;          // one-step GEE on an FSE-LS covariance
    CovMethod cov_method = CovMethod::FseLs;

    SamplingScheme scheme;
    int wcr_reps = 1;
    bool wcr_estimated_cov = false; // covariance estimated once from the full sample

    double toy_sd = 1.0;
};

struct Scenario {
    DesignSpec design;
    GoupParams params; // nu_star is recalibrated from design.target_mean_count
    std::vector<EstimatorConfig> estimators;
    int replicates = 200;
    std::uint64_t seed = 1;
    int threads = 0; // 0 = hardware concurrency
};

struct ScenarioSummary {
    struct Row {
        std::string estimator;
        std::string param;
        double truth = 0.0;
        double bias = 0.0;
        double sd = 0.0;
        double median_se = 0.0;
        double cp = 0.0; // NaN when no interval is defined for the row
        double pct_na = 0.0;
        int n_used = 0;
    };
    std::vector<Row> rows;

    const Row* find(const std::string& estimator, const std::string& param) const {
        for (const auto& r : rows)
            if (r.estimator == estimator && r.param == param) return &r;
        return nullptr;
    }
};

namespace detail {

struct ParamResult {
    std::string param;
    double est = 0.0;
    double se = std::numeric_limits<double>::quiet_NaN();
    bool na = false;
};

inline std::vector<ParamResult> na_results(std::initializer_list<const char*> params) {
    std::vector<ParamResult> out;
    for (const char* p : params) out.push_back({p, 0.0, 0.0, true});
    return out;
}

inline std::vector<ParamResult> run_estimator(const EstimatorConfig& e, const Panel& panel,
                                              const GoupParams& truth_params,
                                              std::uint64_t replicate_seed) {
    switch (e.family) {
        case EstimatorConfig::Family::OracleStub:
            return {{"alpha", truth_params.alpha.size() ? truth_params.alpha[0] : 0.0, 1.0, false},
                    {"beta", truth_params.beta.size() ? truth_params.beta[0] : 0.0, 1.0, false}};
        case EstimatorConfig::Family::NormalToy: {
            auto rng = make_engine(replicate_seed, 977);
            std::normal_distribution<double> nd(0.0, e.toy_sd);
            const double t = truth_params.beta.size() ? truth_params.beta[0] : 0.0;
            return {{"beta", t + nd(rng), e.toy_sd, false}};
        }
        case EstimatorConfig::Family::GeeAlpha: {
            if (!e.use_fse) {
                FitConfig cfg;
                const GeeFit fit = fit_gee(panel, cfg);
                if (fit.na_flag || panel.p_z < 1) return na_results({"alpha"});
                const int j = 1; // (nu, alpha, beta) layout
                const Eigen::MatrixXd& cov = e.variance == VarianceKind::ModelBased
                                                 ? fit.cov_model
                                                 : fit.cov_robust;
                return {{"alpha", fit.alpha_hat[0], std::sqrt(cov(j, j)), false}};
            }
            FitConfig cfg;
            cfg.use_fse = true;
            const GeeFit fit = fit_gee(panel, cfg);
            if (fit.na_flag || panel.p_z < 1) return na_results({"alpha"});
            const int m = static_cast<int>(fit.fse_subjects.size());
            Eigen::MatrixXd z(m, panel.p_z);
            for (int ii = 0; ii < m; ++ii)
                z.row(ii) = panel.subjects[fit.fse_subjects[ii]].z.transpose();
            const AlphaFit af = e.alpha_method == AlphaMethod::Ls
                                    ? alpha_ls(fit.nu_hat, z)
                                    : alpha_irls(fit.nu_hat, z, fit.cov_nu_given_nu);
            if (af.na_flag) return na_results({"alpha"});
            return {{"alpha", af.alpha_hat[0], std::sqrt(af.cov_alpha(0, 0)), false}};
        }
        case EstimatorConfig::Family::GeeBeta: {
            FitConfig cfg;
            cfg.use_fse = e.use_fse;
            if (e.estimated_cov) {
                const CovParamEstimate cov = fit_covariance(panel, e.cov_method);
                if (cov.na_flag) return na_results({"beta"});
                cfg.working_cov = WorkingCov::Supplied;
                cfg.cov_params = cov;
                cfg.one_step = true;
            }
            const GeeFit fit = fit_gee(panel, cfg);
            if (fit.na_flag || panel.p_x < 1) return na_results({"beta"});
            double var;
            if (fit.use_fse) {
                const Eigen::MatrixXd& cov = e.variance == VarianceKind::ModelBased
                                                 ? fit.cov_model
                                                 : fit.cov_robust;
                var = cov(0, 0);
            } else {
                const int j = 1 + panel.p_z;
                const Eigen::MatrixXd& cov = e.variance == VarianceKind::ModelBased
                                                 ? fit.cov_model
                                                 : fit.cov_robust;
                var = cov(j, j);
            }
            if (!(var >= 0.0) || !std::isfinite(var)) return na_results({"beta"});
            return {{"beta", fit.beta_hat[0], std::sqrt(var), false}};
        }
        case EstimatorConfig::Family::CovParams: {
            const CovParamEstimate cov = fit_covariance(panel, e.cov_method);
            const bool na = cov.na_flag || !cov.converged;
            std::vector<ParamResult> out;
            out.push_back({"sigma2_b", cov.sigma2_b.value_or(0.0),
                           std::numeric_limits<double>::quiet_NaN(),
                           na || !cov.sigma2_b.has_value()});
            out.push_back({"sigma2_c", cov.sigma2_c, std::numeric_limits<double>::quiet_NaN(), na});
            out.push_back({"sigma2_e", cov.sigma2_e, std::numeric_limits<double>::quiet_NaN(), na});
            out.push_back({"gamma", cov.gamma, std::numeric_limits<double>::quiet_NaN(), na});
            return out;
        }
        case EstimatorConfig::Family::WcrBeta: {
            FitConfig cfg;
            cfg.use_fse = e.use_fse;
            cfg.variance = e.variance;
            if (e.wcr_estimated_cov) {
                const CovParamEstimate cov = fit_covariance(panel, e.cov_method);
                if (cov.na_flag) return na_results({"beta"});
                cfg.working_cov = WorkingCov::Supplied;
                cfg.cov_params = cov;
                cfg.one_step = true;
            }
            const WcrResult w =
                run_wcr(panel, e.scheme, e.wcr_reps, cfg, mix_seed(replicate_seed, 4242));
            if (w.na_flag || panel.p_x < 1) return na_results({"beta"});
            const int j = e.use_fse ? 0 : 1 + panel.p_z;
            // A negative combined variance is truncated to SE 0: the replicate
            // stays in and its zero-width interval never covers, so the summary
            // exhibits the variance underestimation instead of masking it.
            const double var = std::max(w.cov_wcr(j, j), 0.0);
            return {{"beta", w.theta_wcr[j], std::sqrt(var), false}};
        }
    }
    return na_results({"beta"});
}

} // namespace detail

inline std::map<std::string, double> true_values(const GoupParams& params) {
    std::map<std::string, double> t;
    if (params.alpha.size() > 0) t["alpha"] = params.alpha[0];
    if (params.beta.size() > 0) t["beta"] = params.beta[0];
    t["sigma2_b"] = params.sigma2_b;
    t["sigma2_c"] = params.sigma2_c;
    t["sigma2_e"] = params.sigma2_e;
    if (params.gamma.kind == GammaSpec::Kind::Constant) t["gamma"] = params.gamma.gamma0;
    return t;
}

inline ScenarioSummary run_scenario(const Scenario& scenario) {
    if (scenario.replicates < 1) throw std::invalid_argument("run_scenario: replicates >= 1");
    GoupParams params = scenario.params;
    params.nu_star = calibrate_nu_star(scenario.design, params);

    const int nrep = scenario.replicates;
    const int nest = static_cast<int>(scenario.estimators.size());
    std::vector<std::vector<std::vector<detail::ParamResult>>> results(
        nrep, std::vector<std::vector<detail::ParamResult>>(nest));

    auto run_replicate = [&](int r) {
        const std::uint64_t rep_seed = mix_seed(scenario.seed, static_cast<std::uint64_t>(r));
        auto rng = make_engine(rep_seed, 0);
        const Panel panel = simulate_panel(params, scenario.design, rng);
        for (int e = 0; e < nest; ++e) {
            try {
                results[r][e] =
                    detail::run_estimator(scenario.estimators[e], panel, params, rep_seed);
            } catch (const std::exception&) {
                results[r][e] = detail::na_results({"alpha", "beta"});
            }
        }
    };

    int threads = scenario.threads > 0 ? scenario.threads
                                       : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min(threads, nrep));
    if (threads == 1) {
        for (int r = 0; r < nrep; ++r) run_replicate(r);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (int r = next.fetch_add(1); r < nrep; r = next.fetch_add(1)) run_replicate(r);
            });
        for (auto& t : pool) t.join();
    }

    const auto truth = true_values(params);
    ScenarioSummary summary;
    for (int e = 0; e < nest; ++e) {
        // collect the union of parameter names this estimator reported
        std::vector<std::string> names;
        for (int r = 0; r < nrep; ++r)
            for (const auto& pr : results[r][e])
                if (std::find(names.begin(), names.end(), pr.param) == names.end())
                    names.push_back(pr.param);
        for (const auto& pname : names) {
            std::vector<double> ests, ses;
            int n_na = 0, n_total = 0;
            for (int r = 0; r < nrep; ++r) {
                for (const auto& pr : results[r][e]) {
                    if (pr.param != pname) continue;
                    ++n_total;
                    if (pr.na) {
                        ++n_na;
                    } else {
                        ests.push_back(pr.est);
                        ses.push_back(pr.se);
                    }
                }
            }
            ScenarioSummary::Row row;
            row.estimator = scenario.estimators[e].name;
            row.param = pname;
            row.pct_na = n_total > 0 ? static_cast<double>(n_na) / n_total : 1.0;
            row.n_used = static_cast<int>(ests.size());
            const auto it = truth.find(pname);
            row.truth = it != truth.end() ? it->second : std::numeric_limits<double>::quiet_NaN();
            if (!ests.empty()) {
                double mean = 0.0;
                for (double v : ests) mean += v;
                mean /= ests.size();
                row.bias = mean - row.truth;
                double ss = 0.0;
                for (double v : ests) ss += (v - mean) * (v - mean);
                row.sd = ests.size() > 1 ? std::sqrt(ss / (ests.size() - 1)) : 0.0;
                std::vector<double> finite_ses;
                for (double s : ses)
                    if (std::isfinite(s)) finite_ses.push_back(s);
                if (!finite_ses.empty()) {
                    std::sort(finite_ses.begin(), finite_ses.end());
                    const std::size_t h = finite_ses.size() / 2;
                    row.median_se = finite_ses.size() % 2 == 1
                                        ? finite_ses[h]
                                        : 0.5 * (finite_ses[h - 1] + finite_ses[h]);
                } else {
                    row.median_se = std::numeric_limits<double>::quiet_NaN();
                }
                if (std::isfinite(row.truth) && !finite_ses.empty()) {
                    int cover = 0, with_se = 0;
                    for (std::size_t j = 0; j < ests.size(); ++j) {
                        if (!std::isfinite(ses[j])) continue;
                        ++with_se;
                        if (std::abs(ests[j] - row.truth) <= 1.96 * ses[j]) ++cover;
                    }
                    row.cp = with_se > 0 ? static_cast<double>(cover) / with_se
                                         : std::numeric_limits<double>::quiet_NaN();
                } else {
                    row.cp = std::numeric_limits<double>::quiet_NaN();
                }
            } else {
                row.bias = row.sd = std::numeric_limits<double>::quiet_NaN();
                row.median_se = row.cp = std::numeric_limits<double>::quiet_NaN();
            }
            summary.rows.push_back(std::move(row));
        }
    }
    return summary;
}

// ---- named presets mirroring the simulation studies ----

namespace detail {

inline EstimatorConfig gee_alpha(const std::string& name, bool fse, VarianceKind v,
                                 AlphaMethod am) {
    EstimatorConfig e;
    e.name = name;
    e.family = EstimatorConfig::Family::GeeAlpha;
    e.use_fse = fse;
    e.variance = v;
    e.alpha_method = am;
    return e;
}

inline EstimatorConfig gee_beta(const std::string& name, bool fse, VarianceKind v,
                                bool estimated_cov = false) {
    EstimatorConfig e;
    e.name = name;
    e.family = EstimatorConfig::Family::GeeBeta;
    e.use_fse = fse;
    e.variance = v;
    e.estimated_cov = estimated_cov;
    return e;
}

inline EstimatorConfig cov_params(const std::string& name, CovMethod m) {
    EstimatorConfig e;
    e.name = name;
    e.family = EstimatorConfig::Family::CovParams;
    e.cov_method = m;
    return e;
}

inline EstimatorConfig wcr_beta(const std::string& name, const SamplingScheme& scheme, int L,
                                bool fse, VarianceKind v) {
    EstimatorConfig e;
    e.name = name;
    e.family = EstimatorConfig::Family::WcrBeta;
    e.scheme = scheme;
    e.wcr_reps = L;
    e.use_fse = fse;
    e.variance = v;
    return e;
}

} // namespace detail

// Presets named table1..table5 with suffixes: -long (gamma=50 instead of 300),
// -varying (linear gamma 300->50), -m01/-m1/-m10 (mean count). scale shrinks
// trips per subject, replicates, and table4's L proportionally; n stays fixed.
inline Scenario make_preset(const std::string& name, double scale = 1.0,
                            std::uint64_t seed = 1) {
    Scenario sc;
    sc.seed = seed;
    sc.design.n_subjects = 40;
    sc.design.trips_per_subject = std::max(2, static_cast<int>(std::lround(1500 * scale)));
    sc.replicates = std::max(1, static_cast<int>(std::lround(1000 * scale)));
    sc.params.alpha = Eigen::VectorXd::Zero(1);
    sc.params.beta = Eigen::VectorXd::Zero(1);
    sc.params.sigma2_b = sc.params.sigma2_c = sc.params.sigma2_e = 1.0;
    sc.params.gamma = GammaSpec::constant(300.0);

    auto has = [&](const std::string& tag) { return name.find(tag) != std::string::npos; };
    if (has("-long")) sc.params.gamma = GammaSpec::constant(50.0);
    if (has("-varying")) sc.params.gamma = GammaSpec::linear(300.0, 50.0);

    std::string base = name.substr(0, name.find('-'));
    if (base == "table1" || base == "table2" || base == "table4" || base == "table5")
        sc.design.target_mean_count = 1.0;
    if (base == "table3") sc.design.target_mean_count = 10.0;
    if (base == "table4" || base == "table5") sc.design.target_mean_count = 0.1;
    if (has("-m01")) sc.design.target_mean_count = 0.1;
    if (has("-m1")) sc.design.target_mean_count = 1.0;
    if (has("-m10")) sc.design.target_mean_count = 10.0;

    using detail::cov_params;
    using detail::gee_alpha;
    using detail::gee_beta;
    using detail::wcr_beta;

    if (base == "table1") {
        sc.estimators = {
            gee_alpha("nofse-robust", false, VarianceKind::Robust, AlphaMethod::Ls),
            gee_alpha("nofse-model", false, VarianceKind::ModelBased, AlphaMethod::Ls),
            gee_alpha("fse-ls", true, VarianceKind::Robust, AlphaMethod::Ls),
            gee_alpha("fse-irls", true, VarianceKind::Robust, AlphaMethod::Irls)};
    } else if (base == "table2") {
        if (has("ecm") || has("mcm")) {
            sc.estimators = {gee_beta("ecm-robust", true, VarianceKind::Robust, true),
                             gee_beta("ecm-model", true, VarianceKind::ModelBased, true),
                             gee_beta("wi-fse-robust", true, VarianceKind::Robust),
                             gee_beta("wi-fse-model", true, VarianceKind::ModelBased)};
        } else {
            sc.estimators = {gee_beta("wi-nofse-robust", false, VarianceKind::Robust),
                             gee_beta("wi-nofse-model", false, VarianceKind::ModelBased),
                             gee_beta("wi-fse-robust", true, VarianceKind::Robust),
                             gee_beta("wi-fse-model", true, VarianceKind::ModelBased)};
        }
        if (has("mcm")) sc.params.gamma = GammaSpec::linear(300.0, 50.0);
    } else if (base == "table3") {
        sc.estimators = {cov_params("fse-ls", CovMethod::FseLs),
                         cov_params("fse-irls", CovMethod::FseIrls),
                         cov_params("no-fse", CovMethod::NoFse)};
    } else if (base == "table4") {
        // R is a trip count like B and S, so it shrinks with k to keep the
        // R/k sampling fraction that drives the failure mode.
        const int L = std::max(1, static_cast<int>(std::lround(500 * scale)));
        const int R = std::max(2, static_cast<int>(std::lround(100 * scale)));
        sc.estimators = {
            wcr_beta("srs-nofse-robust", SamplingScheme::srs(R), L, false,
                     VarianceKind::Robust),
            wcr_beta("srs-fse-robust", SamplingScheme::srs(R), L, true, VarianceKind::Robust)};
    } else if (base == "table5") {
        // B and S are trip counts, so they shrink with k to preserve the
        // blocks-per-subject regime (10 blocks of 100 at full scale).
        const int b = std::max(2, static_cast<int>(std::lround(100 * scale)));
        const int s = std::max(0, static_cast<int>(std::lround(50 * scale)));
        sc.estimators = {
            wcr_beta("sb-L1", SamplingScheme::separated_blocks(b, s), 1, true,
                     VarianceKind::Robust),
            wcr_beta("sb-L50", SamplingScheme::separated_blocks(b, s), 50, true,
                     VarianceKind::Robust),
            gee_beta("wi-fse-robust", true, VarianceKind::Robust)};
    } else {
        throw std::invalid_argument("unknown preset '" + name + "'");
    }
    return sc;
}

inline std::vector<std::string> preset_names() {
    return {"table1",      "table1-long",      "table1-m01",     "table1-m01-long",
            "table2",      "table2-long",      "table2-m01",     "table2-m01-long",
            "table2-ecm",  "table2-ecm-long",  "table2-ecm-m01", "table2-ecm-m01-long",
            "table2-mcm",  "table2-mcm-m01",   "table3",         "table3-long",
            "table3-m1",   "table3-m1-long",   "table3-m01",     "table3-m01-long",
            "table4",      "table4-long",      "table5",         "table5-long",
            "table5-varying"};
}

inline std::vector<Scenario> preset_scenarios(double scale = 1.0, std::uint64_t seed = 1) {
    std::vector<Scenario> out;
    for (const auto& n : preset_names()) out.push_back(make_preset(n, scale, seed));
    return out;
}

} // namespace longgee
