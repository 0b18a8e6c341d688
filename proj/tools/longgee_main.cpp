// Command-line front end: simulate GOUP panels, fit marginal GEE models,
// estimate covariance parameters, run WCR analyses, serial diagnostics, and
// Monte Carlo scenario studies.

#include "longgee/cov_estimation.hpp"
#include "longgee/diagnostics.hpp"
#include "longgee/gee.hpp"
#include "longgee/panel.hpp"
#include "longgee/scenario.hpp"
#include "longgee/simulate.hpp"
#include "longgee/subject_level.hpp"
#include "longgee/wcr.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using json = nlohmann::json;

constexpr const char* kVersion = "0.1.0";

void emit(const std::string& out_path, const std::string& text) {
    if (out_path.empty() || out_path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(out_path);
    if (!out) throw longgee::IoError("cannot open '" + out_path + "' for writing");
    out << text;
    if (!out) throw longgee::IoError("write failure on '" + out_path + "'");
}

json matrix_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

json vector_json(const Eigen::VectorXd& v) {
    json out = json::array();
    for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

json cov_params_json(const longgee::CovParamEstimate& c) {
    json j;
    if (c.sigma2_b) j["sigma2_b"] = *c.sigma2_b;
    j["sigma2_c"] = c.sigma2_c;
    j["sigma2_e"] = c.sigma2_e;
    j["gamma"] = c.gamma;
    j["method"] = c.method == longgee::CovMethod::FseLs
                      ? "fse-ls"
                      : (c.method == longgee::CovMethod::FseIrls ? "fse-irls" : "no-fse");
    j["converged"] = c.converged;
    j["na"] = c.na_flag;
    return j;
}

longgee::CovParamEstimate cov_params_from_json(const json& j) {
    longgee::CovParamEstimate c;
    if (j.contains("sigma2_b")) c.sigma2_b = j["sigma2_b"].get<double>();
    c.sigma2_c = j.at("sigma2_c").get<double>();
    c.sigma2_e = j.at("sigma2_e").get<double>();
    c.gamma = j.at("gamma").get<double>();
    c.converged = j.value("converged", true);
    return c;
}

longgee::CsvSchema make_schema(const std::vector<std::string>& z_cols,
                               const std::vector<std::string>& x_cols) {
    longgee::CsvSchema s;
    s.z_cols = z_cols;
    s.x_cols = x_cols;
    return s;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"Marginal GEE analysis of longitudinal count data in long sequences"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    // ---- simulate ----
    auto* sim = app.add_subcommand("simulate", "Generate a synthetic GOUP panel as CSV");
    int sim_n = 40, sim_k = 1500;
    double sim_sb = 1.0, sim_sc = 1.0, sim_se = 1.0, sim_gamma = 300.0;
    std::string sim_gamma_linear;
    double sim_target = 1.0, sim_alpha = 0.0, sim_beta = 0.0;
    double sim_logm_mean = 1.0, sim_logm_var = 1.0, sim_zp = 0.5;
    std::uint64_t sim_seed = 1;
    std::string sim_out = "-";
    sim->add_option("--n", sim_n, "subjects");
    sim->add_option("--k", sim_k, "trips per subject");
    sim->add_option("--sigma-b", sim_sb, "sigma^2_b");
    sim->add_option("--sigma-c", sim_sc, "sigma^2_c");
    sim->add_option("--sigma-e", sim_se, "sigma^2_e");
    sim->add_option("--gamma", sim_gamma, "constant serial decay rate");
    sim->add_option("--gamma-linear", sim_gamma_linear, "linear decay rate, e.g. 300,50");
    sim->add_option("--target-mean", sim_target, "marginal mean count; calibrates nu*");
    sim->add_option("--alpha", sim_alpha, "subject-level effect");
    sim->add_option("--beta", sim_beta, "trip-level (time) effect");
    sim->add_option("--offset-log-mean", sim_logm_mean, "mean of log mileage");
    sim->add_option("--offset-log-var", sim_logm_var, "variance of log mileage");
    sim->add_option("--z-prob", sim_zp, "Bernoulli success probability for Z");
    sim->add_option("--seed", sim_seed, "RNG seed");
    sim->add_option("--out", sim_out, "output CSV path, - for stdout");

    // ---- fit ----
    auto* fitc = app.add_subcommand("fit", "Fit the marginal model by GEE");
    std::string fit_panel, fit_working = "independence", fit_variance = "both";
    std::string fit_cov_params = "auto", fit_alpha_method, fit_out = "-";
    std::vector<std::string> fit_z, fit_x;
    bool fit_fse = false, fit_one_step = false;
    fitc->add_option("--panel", fit_panel, "input CSV")->required();
    fitc->add_option("--z-cols", fit_z, "subject-level covariate columns");
    fitc->add_option("--x-cols", fit_x, "trip-level covariate columns");
    fitc->add_flag("--fse", fit_fse, "include fixed subject effects");
    fitc->add_option("--working", fit_working, "independence | goup");
    fitc->add_option("--cov-params", fit_cov_params, "JSON file with covariance parameters, or 'auto'");
    fitc->add_option("--variance", fit_variance, "robust | model | both");
    fitc->add_flag("--one-step", fit_one_step, "single scoring step from the independence fit");
    fitc->add_option("--alpha", fit_alpha_method, "second-stage regression: ls | irls");
    fitc->add_option("--out", fit_out, "output JSON path, - for stdout");

    // ---- estimate-cov ----
    auto* ecov = app.add_subcommand("estimate-cov", "Estimate covariance parameters from residuals");
    std::string ec_panel, ec_method = "fse-ls", ec_out = "-";
    std::vector<std::string> ec_z, ec_x;
    int ec_bins = 20;
    ecov->add_option("--panel", ec_panel, "input CSV")->required();
    ecov->add_option("--z-cols", ec_z, "subject-level covariate columns");
    ecov->add_option("--x-cols", ec_x, "trip-level covariate columns");
    ecov->add_option("--method", ec_method, "fse-ls | fse-irls | no-fse");
    ecov->add_option("--bins", ec_bins, "bins for initial values");
    ecov->add_option("--out", ec_out, "output JSON path, - for stdout");

    // ---- wcr ----
    auto* wcrc = app.add_subcommand("wcr", "Within-cluster resampling analysis");
    std::string w_panel, w_scheme = "sb", w_variance = "robust", w_out = "-";
    std::vector<std::string> w_z, w_x;
    int w_block = 100, w_sep = 50, w_reps = 50, w_R = 100;
    bool w_fse = false;
    std::uint64_t w_seed = 1;
    wcrc->add_option("--panel", w_panel, "input CSV")->required();
    wcrc->add_option("--z-cols", w_z, "subject-level covariate columns");
    wcrc->add_option("--x-cols", w_x, "trip-level covariate columns");
    wcrc->add_option("--scheme", w_scheme, "single | srs | sys | sb");
    wcrc->add_option("--block", w_block, "block size B (sb)");
    wcrc->add_option("--sep", w_sep, "separation S (sys, sb)");
    wcrc->add_option("--R", w_R, "trips per subject (srs)");
    wcrc->add_option("--reps", w_reps, "number of subsamples L");
    wcrc->add_flag("--fse", w_fse, "fixed subject effects in each subsample fit");
    wcrc->add_option("--variance", w_variance, "robust | model");
    wcrc->add_option("--seed", w_seed, "RNG seed");
    wcrc->add_option("--out", w_out, "output JSON path, - for stdout");

    // ---- diagnose ----
    auto* diag = app.add_subcommand("diagnose", "Binned serial-correlation diagnostic");
    std::string d_panel, d_out = "-";
    std::vector<std::string> d_z, d_x;
    int d_bins = 100;
    bool d_fse = true;
    diag->add_option("--panel", d_panel, "input CSV")->required();
    diag->add_option("--z-cols", d_z, "subject-level covariate columns");
    diag->add_option("--x-cols", d_x, "trip-level covariate columns");
    diag->add_option("--bins", d_bins, "number of equal-count bins");
    diag->add_flag("--fse,!--no-fse", d_fse, "residuals from an FSE fit (default on)");
    diag->add_option("--out", d_out, "output CSV path, - for stdout");

    // ---- scenario ----
    auto* scen = app.add_subcommand("scenario", "Monte Carlo scenario study");
    std::string s_preset, s_out = "-";
    double s_scale = 0.2;
    std::uint64_t s_seed = 1;
    int s_threads = 0, s_reps = 0;
    bool s_list = false;
    scen->add_option("--preset", s_preset, "preset name, e.g. table1, table5-long");
    scen->add_flag("--list", s_list, "list preset names and exit");
    scen->add_option("--scale", s_scale, "shrink factor for trips and replicates");
    scen->add_option("--replicates", s_reps, "override replicate count");
    scen->add_option("--seed", s_seed, "RNG seed");
    scen->add_option("--threads", s_threads, "worker threads, 0 = all cores");
    scen->add_option("--out", s_out, "output CSV path, - for stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (sim->parsed()) {
        longgee::DesignSpec design;
        design.n_subjects = sim_n;
        design.trips_per_subject = sim_k;
        design.offset_log_mean = sim_logm_mean;
        design.offset_log_var = sim_logm_var;
        design.z_bernoulli_p = sim_zp;
        design.target_mean_count = sim_target;
        longgee::GoupParams params;
        params.alpha = Eigen::VectorXd::Constant(1, sim_alpha);
        params.beta = Eigen::VectorXd::Constant(1, sim_beta);
        params.sigma2_b = sim_sb;
        params.sigma2_c = sim_sc;
        params.sigma2_e = sim_se;
        params.gamma = longgee::GammaSpec::constant(sim_gamma);
        if (!sim_gamma_linear.empty()) {
            double g0, g1;
            char comma;
            std::istringstream ss(sim_gamma_linear);
            if (!(ss >> g0 >> comma >> g1) || comma != ',')
                throw CLI::ValidationError("--gamma-linear expects 'g0,g1'");
            params.gamma = longgee::GammaSpec::linear(g0, g1);
        }
        params.nu_star = longgee::calibrate_nu_star(design, params);
        auto rng = longgee::make_engine(sim_seed);
        const longgee::Panel panel = longgee::simulate_panel(params, design, rng);
        std::ostringstream buf;
        longgee::write_panel(panel, buf);
        emit(sim_out, buf.str());
        return 0;
    }

    if (fitc->parsed()) {
        const longgee::Panel panel = longgee::load_panel(fit_panel, make_schema(fit_z, fit_x));
        longgee::FitConfig cfg;
        cfg.use_fse = fit_fse;
        cfg.one_step = fit_one_step;
        if (fit_variance == "robust")
            cfg.variance = longgee::VarianceKind::Robust;
        else if (fit_variance == "model")
            cfg.variance = longgee::VarianceKind::ModelBased;
        else if (fit_variance == "both")
            cfg.variance = longgee::VarianceKind::Both;
        else
            throw CLI::ValidationError("--variance must be robust|model|both");
        if (fit_working == "goup") {
            cfg.working_cov = longgee::WorkingCov::Supplied;
            if (fit_cov_params == "auto") {
                cfg.cov_params = longgee::fit_covariance(panel, longgee::CovMethod::FseLs);
                if (cfg.cov_params.na_flag)
                    throw longgee::DataError("automatic covariance estimation failed");
            } else {
                std::ifstream in(fit_cov_params);
                if (!in) throw longgee::IoError("cannot open '" + fit_cov_params + "'");
                json j;
                in >> j;
                cfg.cov_params = cov_params_from_json(j);
            }
        } else if (fit_working != "independence") {
            throw CLI::ValidationError("--working must be independence|goup");
        }

        const longgee::GeeFit fit = longgee::fit_gee(panel, cfg);
        json out;
        out["converged"] = fit.converged;
        out["na"] = fit.na_flag;
        if (fit.na_flag) out["na_reason"] = fit.na_reason;
        out["iterations"] = fit.iterations;
        out["use_fse"] = fit.use_fse;
        if (!fit.na_flag) {
            out["beta"] = vector_json(fit.beta_hat);
            if (fit.use_fse) {
                out["nu"] = vector_json(fit.nu_hat);
                json kept = json::array();
                for (int i : fit.fse_subjects) kept.push_back(panel.subjects[i].subject_id);
                out["fse_subjects"] = kept;
                if (!fit.dropped_subjects.empty()) {
                    json dropped = json::array();
                    for (int i : fit.dropped_subjects) dropped.push_back(panel.subjects[i].subject_id);
                    out["dropped_subjects"] = dropped;
                    std::cerr << "warning: dropped " << fit.dropped_subjects.size()
                              << " all-zero-count subject(s) from the FSE fit\n";
                }
            } else {
                out["nu"] = fit.nu_hat_global;
                out["alpha"] = vector_json(fit.alpha_hat);
            }
            if (cfg.variance != longgee::VarianceKind::ModelBased)
                out["cov_robust"] = matrix_json(fit.cov_robust);
            if (cfg.variance != longgee::VarianceKind::Robust)
                out["cov_model"] = matrix_json(fit.cov_model);
            if (cfg.working_cov == longgee::WorkingCov::Supplied)
                out["cov_params"] = cov_params_json(cfg.cov_params);

            if (fit.use_fse && !fit_alpha_method.empty() && panel.p_z > 0) {
                const int m = static_cast<int>(fit.fse_subjects.size());
                Eigen::MatrixXd z(m, panel.p_z);
                for (int ii = 0; ii < m; ++ii)
                    z.row(ii) = panel.subjects[fit.fse_subjects[ii]].z.transpose();
                longgee::AlphaFit af;
                if (fit_alpha_method == "ls")
                    af = longgee::alpha_ls(fit.nu_hat, z);
                else if (fit_alpha_method == "irls")
                    af = longgee::alpha_irls(fit.nu_hat, z, fit.cov_nu_given_nu);
                else
                    throw CLI::ValidationError("--alpha must be ls|irls");
                json aj;
                aj["na"] = af.na_flag;
                if (!af.na_flag) {
                    aj["alpha"] = vector_json(af.alpha_hat);
                    aj["intercept"] = af.intercept;
                    aj["cov_alpha"] = matrix_json(af.cov_alpha);
                    aj["sigma2_b"] = af.sigma2_b_hat;
                    aj["iterations"] = af.iterations;
                }
                out["alpha_fit"] = aj;
            }
        }
        emit(fit_out, out.dump(2) + "\n");
        return fit.na_flag ? 2 : 0;
    }

    if (ecov->parsed()) {
        const longgee::Panel panel = longgee::load_panel(ec_panel, make_schema(ec_z, ec_x));
        longgee::CovMethod method;
        if (ec_method == "fse-ls")
            method = longgee::CovMethod::FseLs;
        else if (ec_method == "fse-irls")
            method = longgee::CovMethod::FseIrls;
        else if (ec_method == "no-fse")
            method = longgee::CovMethod::NoFse;
        else
            throw CLI::ValidationError("--method must be fse-ls|fse-irls|no-fse");
        const longgee::CovParamEstimate est = longgee::fit_covariance(panel, method, ec_bins);
        emit(ec_out, cov_params_json(est).dump(2) + "\n");
        return est.na_flag ? 2 : 0;
    }

    if (wcrc->parsed()) {
        const longgee::Panel panel = longgee::load_panel(w_panel, make_schema(w_z, w_x));
        longgee::SamplingScheme scheme;
        if (w_scheme == "single")
            scheme = longgee::SamplingScheme::single_trip();
        else if (w_scheme == "srs")
            scheme = longgee::SamplingScheme::srs(w_R);
        else if (w_scheme == "sys")
            scheme = longgee::SamplingScheme::systematic(w_sep);
        else if (w_scheme == "sb")
            scheme = longgee::SamplingScheme::separated_blocks(w_block, w_sep);
        else
            throw CLI::ValidationError("--scheme must be single|srs|sys|sb");
        longgee::FitConfig cfg;
        cfg.use_fse = w_fse;
        cfg.variance = w_variance == "model" ? longgee::VarianceKind::ModelBased
                                             : longgee::VarianceKind::Robust;
        const longgee::WcrResult res = longgee::run_wcr(panel, scheme, w_reps, cfg, w_seed);
        json out;
        out["na"] = res.na_flag;
        out["L_requested"] = res.L_requested;
        out["L_used"] = res.L_used;
        out["diag_negative"] = res.diag_negative;
        if (!res.na_flag) {
            out["theta"] = vector_json(res.theta_wcr);
            out["cov"] = matrix_json(res.cov_wcr);
        }
        emit(w_out, out.dump(2) + "\n");
        return res.na_flag ? 2 : 0;
    }

    if (diag->parsed()) {
        const longgee::Panel panel = longgee::load_panel(d_panel, make_schema(d_z, d_x));
        longgee::FitConfig cfg;
        cfg.use_fse = d_fse;
        const longgee::GeeFit fit = longgee::fit_gee(panel, cfg);
        if (fit.na_flag) throw longgee::DataError("GEE fit failed: " + fit.na_reason);
        std::vector<Eigen::VectorXd> variances(fit.mu.size());
        for (std::size_t i = 0; i < fit.mu.size(); ++i) variances[i] = fit.mu[i];
        const longgee::BinnedCorrelation bins =
            longgee::serial_diagnostic(panel, fit.mu, variances, d_bins);
        std::ostringstream buf;
        buf << "median_gap,mean_product,n_pairs\n";
        for (const auto& b : bins.bins)
            buf << longgee::detail::format_double(b.median_gap) << ','
                << longgee::detail::format_double(b.mean_product) << ',' << b.n_pairs << '\n';
        emit(d_out, buf.str());
        return 0;
    }

    if (scen->parsed()) {
        if (s_list) {
            std::ostringstream buf;
            for (const auto& n : longgee::preset_names()) buf << n << '\n';
            emit(s_out, buf.str());
            return 0;
        }
        if (s_preset.empty()) throw CLI::ValidationError("--preset is required");
        longgee::Scenario sc = longgee::make_preset(s_preset, s_scale, s_seed);
        if (s_reps > 0) sc.replicates = s_reps;
        sc.threads = s_threads;
        const longgee::ScenarioSummary summary = longgee::run_scenario(sc);
        std::ostringstream buf;
        buf << "estimator,param,bias,sd,median_se,cp,pct_na\n";
        for (const auto& r : summary.rows)
            buf << r.estimator << ',' << r.param << ','
                << longgee::detail::format_double(r.bias) << ','
                << longgee::detail::format_double(r.sd) << ','
                << longgee::detail::format_double(r.median_se) << ','
                << longgee::detail::format_double(r.cp) << ','
                << longgee::detail::format_double(r.pct_na) << '\n';
        emit(s_out, buf.str());
        return 0;
    }
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1; // post-parse validation failures are usage errors too
    } catch (const longgee::IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const longgee::DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
