// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Desk-scale analogues of the full simulation studies plus exact
// property checks; tolerances are pinned in-line.

#include "longgee/cov_estimation.hpp"
#include "longgee/diagnostics.hpp"
#include "longgee/gee.hpp"
#include "longgee/panel.hpp"
#include "longgee/rng.hpp"
#include "longgee/scenario.hpp"
#include "longgee/simulate.hpp"
#include "longgee/wcr.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace longgee;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what, const std::string& detail) {
    std::printf("criterion %d: %s — %s (%s)\n", criterion, pass ? "PASS" : "FAIL", what.c_str(),
                detail.c_str());
    if (!pass) ++g_failures;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// ---- criterion 1: dense Newton oracle vs the production solvers ----

Eigen::VectorXd dense_newton(const Panel& panel, bool fse) {
    const int m = panel.n_subjects();
    const int q = fse ? m + panel.p_x : 1 + panel.p_z + panel.p_x;
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(q);
    if (fse) {
        for (int i = 0; i < m; ++i)
            theta[i] = std::log(static_cast<double>(panel.subjects[i].count.sum()) /
                                panel.subjects[i].offset.sum());
    } else {
        double ty = 0, tm = 0;
        for (const auto& s : panel.subjects) {
            ty += static_cast<double>(s.count.sum());
            tm += s.offset.sum();
        }
        theta[0] = std::log(ty / tm);
    }
    for (int iter = 0; iter < 300; ++iter) {
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(q, q);
        Eigen::VectorXd g = Eigen::VectorXd::Zero(q);
        for (int i = 0; i < m; ++i) {
            const auto& s = panel.subjects[i];
            for (int j = 0; j < s.n_trips(); ++j) {
                Eigen::VectorXd d = Eigen::VectorXd::Zero(q);
                if (fse) {
                    d[i] = 1.0;
                    for (int c = 0; c < panel.p_x; ++c) d[m + c] = s.x(j, c);
                } else {
                    d[0] = 1.0;
                    for (int c = 0; c < panel.p_z; ++c) d[1 + c] = s.z[c];
                    for (int c = 0; c < panel.p_x; ++c) d[1 + panel.p_z + c] = s.x(j, c);
                }
                const double mu = s.offset[j] * std::exp(theta.dot(d));
                h.noalias() += mu * d * d.transpose();
                g.noalias() += (static_cast<double>(s.count[j]) - mu) * d;
            }
        }
        const Eigen::VectorXd step = h.ldlt().solve(g);
        theta += step;
        if (step.cwiseAbs().maxCoeff() < 1e-13) break;
    }
    return theta;
}

void criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    int done = 0;
    std::uint64_t seed = 1000;
    while (done < 20) {
        ++seed;
        auto rng = make_engine(seed);
        std::uniform_int_distribution<int> nd(2, 5), kd(5, 20);
        DesignSpec d;
        d.n_subjects = nd(rng);
        d.trips_per_subject = kd(rng);
        d.target_mean_count = 2.0;
        GoupParams p;
        p.alpha = Eigen::VectorXd::Constant(1, 0.3);
        p.beta = Eigen::VectorXd::Constant(1, -0.4);
        p.nu_star = calibrate_nu_star(d, p);
        const Panel panel = simulate_panel(p, d, rng);
        bool any_zero = false;
        for (const auto& s : panel.subjects) any_zero |= s.count.sum() == 0;
        if (any_zero) continue; // keep the oracle parametrization aligned

        FitConfig cfg;
        const GeeFit nofse = fit_gee(panel, cfg);
        cfg.use_fse = true;
        const GeeFit fse = fit_gee(panel, cfg);
        if (nofse.na_flag || fse.na_flag) continue;

        const Eigen::VectorXd o1 = dense_newton(panel, false);
        worst = std::max(worst, std::abs(nofse.nu_hat_global - o1[0]));
        worst = std::max(worst, std::abs(nofse.alpha_hat[0] - o1[1]));
        worst = std::max(worst, std::abs(nofse.beta_hat[0] - o1[2]));

        const Eigen::VectorXd o2 = dense_newton(panel, true);
        const int m = panel.n_subjects();
        for (int i = 0; i < m; ++i) worst = std::max(worst, std::abs(fse.nu_hat[i] - o2[i]));
        worst = std::max(worst, std::abs(fse.beta_hat[0] - o2[m]));
        ++done;
    }
    const double t = elapsed_s(t0);
    report(1, worst < 1e-8 && t < 10.0, "oracle equivalence on 20 random small panels",
           "max |diff| " + fmt(worst) + ", " + fmt(t) + " s");
}

// ---- criterion 2: OU covariance vs the integrated-gamma target ----

bool ou_check(const GammaSpec& gamma, std::string& detail) {
    const double s2c = 1.0;
    const double t0 = 0.1;
    const std::vector<double> gaps = {0.002, 0.005, 0.01, 0.02, 0.05};
    Eigen::VectorXd times(1 + static_cast<int>(gaps.size()));
    times[0] = t0;
    for (std::size_t j = 0; j < gaps.size(); ++j) times[1 + j] = t0 + gaps[j];

    const int npaths = 100000;
    auto rng = make_engine(20000 + static_cast<std::uint64_t>(gamma.gamma0));
    Eigen::MatrixXd prods(npaths, gaps.size());
    for (int r = 0; r < npaths; ++r) {
        const Eigen::VectorXd c = sample_ou_path(times, s2c, gamma, rng);
        for (std::size_t j = 0; j < gaps.size(); ++j) prods(r, j) = c[0] * c[1 + j];
    }
    bool ok = true;
    double worst_z = 0.0;
    for (std::size_t j = 0; j < gaps.size(); ++j) {
        const double mean = prods.col(j).mean();
        const double sd = std::sqrt((prods.col(j).array() - mean).square().sum() / (npaths - 1));
        const double se = sd / std::sqrt(static_cast<double>(npaths));
        const double target = s2c * std::exp(-gamma.integral(t0, t0 + gaps[j]));
        const double z = std::abs(mean - target) / se;
        worst_z = std::max(worst_z, z);
        ok = ok && z < 3.0;
    }
    detail += " max|z| " + fmt(worst_z) + ";";
    return ok;
}

void criterion2() {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = ou_check(GammaSpec::constant(50.0), detail);
    ok = ou_check(GammaSpec::constant(300.0), detail) && ok;
    ok = ou_check(GammaSpec::linear(300.0, 50.0), detail) && ok;
    const double t = elapsed_s(t0);
    report(2, ok && t < 60.0, "OU path covariance at 5 gaps, 100k paths, 3 decay specs",
           detail + " " + fmt(t) + " s");
}

// ---- criterion 3: moment formulas (60)/(70) and (80)/(90) ----

struct MomentCheck {
    double var_rel = 0.0;
    double cov_rel = 0.0;
};

// Simulate pairs (Y1, Y2) at a fixed gap with unit offsets directly from the
// data-generating mechanism and compare against the matching covariance
// formula. conditional = true freezes b at 0 and checks Eqs. (80)/(90).
MomentCheck moment_check(bool conditional, int nrep, std::uint64_t seed) {
    const double s2b = conditional ? 0.0 : 0.1;
    const double s2c = 0.1, s2e = 0.1;
    const GammaSpec gamma = GammaSpec::constant(50.0);
    const double gap = 0.01;
    const double mu_target = 10.0;
    const double nu = std::log(mu_target) - 0.5 * (s2b + s2c + s2e);
    Eigen::VectorXd times(2);
    times << 0.4, 0.4 + gap;

    auto rng = make_engine(seed);
    std::normal_distribution<double> stdnorm(0.0, 1.0);
    double s1 = 0, s2 = 0, s11 = 0, s22 = 0, s12 = 0;
    for (int r = 0; r < nrep; ++r) {
        const double b = s2b > 0 ? std::sqrt(s2b) * stdnorm(rng) : 0.0;
        const Eigen::VectorXd c = sample_ou_path(times, s2c, gamma, rng);
        double y[2];
        for (int j = 0; j < 2; ++j) {
            const double e = std::sqrt(s2e) * stdnorm(rng);
            const double lambda = std::exp(nu + b + c[j] + e);
            std::poisson_distribution<long> pois(lambda);
            y[j] = static_cast<double>(pois(rng));
        }
        s1 += y[0];
        s2 += y[1];
        s11 += y[0] * y[0];
        s22 += y[1] * y[1];
        s12 += y[0] * y[1];
    }
    const double m1 = s1 / nrep, m2 = s2 / nrep;
    const double var1 = s11 / nrep - m1 * m1;
    const double cov12 = s12 / nrep - m1 * m2;

    // diagonal: mu + mu^2 (e^{sum} - 1); off-diagonal per the serial kernel
    const double var_t = mu_target + mu_target * mu_target * (std::exp(s2b + s2c + s2e) - 1.0);
    const double kern = s2b + s2c * std::exp(-gamma.integral(times[0], times[1]));
    const double cov_t = mu_target * mu_target * (std::exp(kern) - 1.0);
    MomentCheck out;
    out.var_rel = std::abs(var1 - var_t) / var_t;
    out.cov_rel = std::abs(cov12 - cov_t) / cov_t;
    return out;
}

void criterion3() {
    const auto t0 = std::chrono::steady_clock::now();
    const int nrep = 250000; // x2 experiments x2 trips = 1e6 simulated trips
    const MomentCheck marg = moment_check(false, nrep, 333);
    const MomentCheck cond = moment_check(true, nrep, 334);
    const bool ok = marg.var_rel < 0.05 && marg.cov_rel < 0.05 && cond.var_rel < 0.05 &&
                    cond.cov_rel < 0.05;
    report(3, ok, "moment formulas at mean count 10, 1e6 trips",
           "marginal var/cov rel err " + fmt(marg.var_rel) + "/" + fmt(marg.cov_rel) +
               ", conditional " + fmt(cond.var_rel) + "/" + fmt(cond.cov_rel) + ", " +
               fmt(elapsed_s(t0)) + " s");
}

// ---- criteria 4-8: desk-scale table analogues ----

void criterion4() {
    const auto t0 = std::chrono::steady_clock::now();
    Scenario sc = make_preset("table1", 0.2, 41);
    sc.threads = 0;
    const ScenarioSummary s = run_scenario(sc);
    const auto* ls = s.find("fse-ls", "alpha");
    const auto* nofse_m = s.find("nofse-model", "alpha");
    const auto* nofse_r = s.find("nofse-robust", "alpha");
    bool ok = ls && nofse_m && nofse_r;
    std::string detail = "missing rows";
    if (ok) {
        ok = std::abs(ls->bias) < 0.06 && ls->cp >= 0.90 && ls->cp <= 0.98 &&
             nofse_m->cp < 0.40 && ls->sd <= nofse_r->sd;
        detail = "FSE-LS bias " + fmt(ls->bias) + " CP " + fmt(ls->cp) + ", no-FSE model CP " +
                 fmt(nofse_m->cp) + ", SD " + fmt(ls->sd) + " vs " + fmt(nofse_r->sd);
    }
    const double t = elapsed_s(t0);
    report(4, ok && t < 900.0, "desk-scale subject-level inference (mean 1, fast decay)",
           detail + ", " + fmt(t) + " s");
}

void criterion5() {
    const auto t0 = std::chrono::steady_clock::now();
    Scenario sc = make_preset("table2-ecm", 0.2, 52);
    sc.estimators = {detail::gee_beta("ecm-robust", true, VarianceKind::Robust, true),
                     detail::gee_beta("wi-fse-robust", true, VarianceKind::Robust),
                     detail::gee_beta("wi-fse-model", true, VarianceKind::ModelBased)};
    sc.threads = 0;
    const ScenarioSummary s = run_scenario(sc);
    const auto* ecm = s.find("ecm-robust", "beta");
    const auto* wi_r = s.find("wi-fse-robust", "beta");
    const auto* wi_m = s.find("wi-fse-model", "beta");
    bool ok = ecm && wi_r && wi_m;
    std::string detail = "missing rows";
    if (ok) {
        ok = ecm->sd <= 0.8 * wi_r->sd && ecm->cp >= 0.91 && ecm->cp <= 0.98 && wi_m->cp < 0.7;
        detail = "one-step SD " + fmt(ecm->sd) + " vs WI " + fmt(wi_r->sd) + ", one-step CP " +
                 fmt(ecm->cp) + ", WI model CP " + fmt(wi_m->cp) + ", %NA " +
                 fmt(100.0 * ecm->pct_na);
    }
    report(5, ok, "desk-scale trip-level inference with estimated covariance (mean 1)",
           detail + ", " + fmt(elapsed_s(t0)) + " s");
}

void criterion6() {
    const auto t0 = std::chrono::steady_clock::now();
    Scenario sc = make_preset("table3", 0.2, 63);
    sc.threads = 0;
    const ScenarioSummary s = run_scenario(sc);
    const auto* b_ls = s.find("fse-ls", "sigma2_b");
    const auto* c_ls = s.find("fse-ls", "sigma2_c");
    const auto* e_ls = s.find("fse-ls", "sigma2_e");
    const auto* b_no = s.find("no-fse", "sigma2_b");
    bool ok = b_ls && c_ls && e_ls && b_no;
    std::string detail = "missing rows";
    if (ok) {
        ok = std::abs(b_ls->bias) < 0.10 && std::abs(c_ls->bias) < 0.10 &&
             std::abs(e_ls->bias) < 0.10 && b_no->bias < -0.15;
        detail = "FSE-LS biases " + fmt(b_ls->bias) + "/" + fmt(c_ls->bias) + "/" +
                 fmt(e_ls->bias) + ", no-FSE sigma2_b bias " + fmt(b_no->bias) + ", %NA " +
                 fmt(100.0 * b_ls->pct_na);
    }
    report(6, ok, "desk-scale covariance-parameter estimation (mean 10)",
           detail + ", " + fmt(elapsed_s(t0)) + " s");
}

void criterion7() {
    const auto t0 = std::chrono::steady_clock::now();
    Scenario sc = make_preset("table5-long", 0.2, 110);
    sc.threads = 0;
    const ScenarioSummary s = run_scenario(sc);
    const auto* sb = s.find("sb-L50", "beta");
    const auto* wi = s.find("wi-fse-robust", "beta");
    bool ok = sb && wi;
    std::string detail = "missing rows";
    if (ok) {
        ok = sb->cp >= 0.87 && sb->cp <= 0.97 && sb->cp >= wi->cp - 0.02;
        detail = "WCR-SB CP " + fmt(sb->cp) + " vs WI robust CP " + fmt(wi->cp) + ", %NA " +
                 fmt(100.0 * sb->pct_na);
    }
    report(7, ok, "desk-scale separated-blocks resampling (mean 0.1, slow decay)",
           detail + ", " + fmt(elapsed_s(t0)) + " s");
}

void criterion8() {
    const auto t0 = std::chrono::steady_clock::now();
    Scenario sc = make_preset("table4", 0.2, 85);
    sc.estimators = {sc.estimators[0]}; // working-independence no-FSE row only
    sc.threads = 0;
    const ScenarioSummary s = run_scenario(sc);
    const auto* row = s.find("srs-nofse-robust", "beta");
    bool ok = row != nullptr;
    std::string detail = "missing row";
    if (ok) {
        ok = row->cp < 0.6;
        detail = "WCR-SRS CP " + fmt(row->cp) + " (must stay low), %NA " +
                 fmt(100.0 * row->pct_na);
    }
    report(8, ok, "variance-underestimation failure mode under SRS resampling",
           detail + ", " + fmt(elapsed_s(t0)) + " s");
}

// ---- criterion 9: exact property suite ----

bool prop_identity_fit() {
    Panel panel;
    panel.p_z = panel.p_x = 0;
    for (int i = 0; i < 4; ++i) {
        Subject s;
        s.subject_id = "s" + std::to_string(i + 1);
        s.z.resize(0);
        const int k = 6;
        s.trip_index.resize(k);
        s.time = Eigen::VectorXd::Constant(k, 0.5);
        s.offset = Eigen::VectorXd::Constant(k, 1.0);
        s.x.resize(k, 0);
        s.count = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>::Constant(k, i + 2);
        for (int j = 0; j < k; ++j) s.trip_index[j] = j + 1;
        panel.subjects.push_back(std::move(s));
    }
    FitConfig cfg;
    const WcrResult w = run_wcr(panel, SamplingScheme::single_trip(), 25, cfg, 9);
    if (w.na_flag || w.L_used != 25) return false;
    return (w.cov_wcr - w.per_subsample[0].cov).cwiseAbs().maxCoeff() < 1e-14;
}

bool prop_offset_rescaling() {
    DesignSpec d;
    d.n_subjects = 5;
    d.trips_per_subject = 40;
    d.target_mean_count = 2.0;
    GoupParams p;
    p.alpha = Eigen::VectorXd::Zero(1);
    p.beta = Eigen::VectorXd::Constant(1, 0.2);
    p.nu_star = calibrate_nu_star(d, p);
    auto rng = make_engine(91);
    const Panel panel = simulate_panel(p, d, rng);
    Panel scaled = panel;
    for (auto& s : scaled.subjects) s.offset *= 3.0;
    FitConfig cfg;
    cfg.use_fse = true;
    const GeeFit f1 = fit_gee(panel, cfg);
    const GeeFit f2 = fit_gee(scaled, cfg);
    if (f1.na_flag || f2.na_flag) return false;
    return std::abs(f1.beta_hat[0] - f2.beta_hat[0]) < 1e-7;
}

bool prop_score_identity() {
    DesignSpec d;
    d.n_subjects = 6;
    d.trips_per_subject = 50;
    d.target_mean_count = 2.0;
    GoupParams p;
    p.alpha = Eigen::VectorXd::Zero(1);
    p.beta = Eigen::VectorXd::Zero(1);
    p.sigma2_b = 0.5;
    p.nu_star = calibrate_nu_star(d, p);
    auto rng = make_engine(92);
    const Panel panel = simulate_panel(p, d, rng);
    FitConfig cfg;
    cfg.use_fse = true;
    const GeeFit fit = fit_gee(panel, cfg);
    if (fit.na_flag) return false;
    for (int i : fit.fse_subjects) {
        const double diff =
            std::abs(fit.mu[i].sum() - static_cast<double>(panel.subjects[i].count.sum()));
        if (diff > 1e-6) return false;
    }
    return true;
}

bool prop_round_trip() {
    DesignSpec d;
    d.n_subjects = 5;
    d.trips_per_subject = 30;
    GoupParams p;
    p.alpha = Eigen::VectorXd::Zero(1);
    p.beta = Eigen::VectorXd::Zero(1);
    p.sigma2_b = p.sigma2_c = p.sigma2_e = 1.0;
    p.gamma = GammaSpec::constant(50.0);
    p.nu_star = calibrate_nu_star(d, p);
    auto rng = make_engine(93);
    const Panel panel = simulate_panel(p, d, rng);
    std::ostringstream buf;
    write_panel(panel, buf);
    std::istringstream in(buf.str());
    const Panel back = load_panel(in, default_schema(panel));
    return panels_equal(panel, back);
}

bool prop_thread_determinism() {
    Scenario sc;
    sc.design.n_subjects = 4;
    sc.design.trips_per_subject = 20;
    sc.design.target_mean_count = 2.0;
    sc.params.alpha = Eigen::VectorXd::Zero(1);
    sc.params.beta = Eigen::VectorXd::Zero(1);
    sc.replicates = 30;
    sc.seed = 94;
    EstimatorConfig e;
    e.name = "wi";
    e.family = EstimatorConfig::Family::GeeBeta;
    sc.estimators = {e};
    sc.threads = 1;
    const ScenarioSummary a = run_scenario(sc);
    sc.threads = 4;
    const ScenarioSummary b = run_scenario(sc);
    if (a.rows.size() != b.rows.size()) return false;
    for (std::size_t j = 0; j < a.rows.size(); ++j) {
        if (a.rows[j].bias != b.rows[j].bias || a.rows[j].sd != b.rows[j].sd ||
            a.rows[j].median_se != b.rows[j].median_se || a.rows[j].cp != b.rows[j].cp)
            return false;
    }
    return true;
}

bool prop_noiseless_inversion() {
    std::vector<ResidualPair> pairs;
    const double s2c = 1.0, gamma = 50.0;
    for (int b = 0; b < 30; ++b) {
        const double gap = 0.001 * (b + 1);
        pairs.push_back({gap, std::exp(s2c * std::exp(-gamma * gap)) - 1.0,
                         ResidualPair::Kind::Consecutive});
    }
    const InitialValues init = initial_values(pairs, 30);
    return init.ok && std::abs(init.sigma2_c - s2c) < 1e-6 && std::abs(init.gamma - gamma) < 1e-4;
}

void criterion9() {
    const auto t0 = std::chrono::steady_clock::now();
    struct Named {
        const char* name;
        bool ok;
    };
    const std::vector<Named> checks = {
        {"identity-fit exactness", prop_identity_fit()},
        {"offset rescaling", prop_offset_rescaling()},
        {"FSE score identity", prop_score_identity()},
        {"load/write round trip", prop_round_trip()},
        {"thread determinism", prop_thread_determinism()},
        {"noiseless inversion", prop_noiseless_inversion()},
    };
    bool ok = true;
    std::string detail;
    for (const auto& c : checks) {
        ok = ok && c.ok;
        if (!c.ok) detail += std::string(" FAILED:") + c.name;
    }
    if (ok) detail = "all 6 properties hold";
    report(9, ok, "property suite", detail + ", " + fmt(elapsed_s(t0)) + " s");
}

} // namespace

int main() {
    const auto t0 = std::chrono::steady_clock::now();
    criterion1();
    criterion2();
    criterion3();
    criterion9(); // cheap exact checks before the long Monte Carlo blocks
    criterion4();
    criterion5();
    criterion6();
    criterion7();
    criterion8();
    std::printf("%s (%d failure%s, %.1f s total)\n", g_failures == 0 ? "ALL PASS" : "FAILURES",
                g_failures, g_failures == 1 ? "" : "s", elapsed_s(t0));
    return g_failures == 0 ? 0 : 1;
}
