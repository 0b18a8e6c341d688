#include "longgee/rng.hpp"
#include "longgee/simulate.hpp"

#include <doctest.h>

#include <cmath>

using namespace longgee;

TEST_CASE("gamma integral: constant and linear closed forms") {
    const GammaSpec c = GammaSpec::constant(300.0);
    CHECK(c.integral(0.2, 0.5) == doctest::Approx(90.0));

    const GammaSpec lin = GammaSpec::linear(300.0, 50.0);
    // full interval: average rate (300+50)/2
    CHECK(lin.integral(0.0, 1.0) == doctest::Approx(175.0));
    // midpoint rule is exact for a linear rate; spot-check against quadrature
    const double t1 = 0.3, t2 = 0.7;
    double quad = 0.0;
    const int nq = 200000;
    for (int j = 0; j < nq; ++j) {
        const double t = t1 + (t2 - t1) * (j + 0.5) / nq;
        quad += (300.0 + (50.0 - 300.0) * t) * (t2 - t1) / nq;
    }
    CHECK(lin.integral(t1, t2) == doctest::Approx(quad).epsilon(1e-8));
}

TEST_CASE("sample_ou_path: zero variance gives the zero path") {
    auto rng = make_engine(1);
    Eigen::VectorXd times(4);
    times << 0.1, 0.2, 0.5, 0.9;
    const Eigen::VectorXd c = sample_ou_path(times, 0.0, GammaSpec::constant(300.0), rng);
    CHECK(c.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sample_ou_path rejects unsorted times") {
    auto rng = make_engine(1);
    Eigen::VectorXd times(3);
    times << 0.5, 0.2, 0.9;
    CHECK_THROWS_AS(sample_ou_path(times, 1.0, GammaSpec::constant(300.0), rng),
                    std::invalid_argument);
}

TEST_CASE("ou path covariance matches exp(-gamma dt) at a fixed gap") {
    const double sigma2_c = 1.0, gap = 0.02;
    const GammaSpec gamma = GammaSpec::constant(50.0);
    Eigen::VectorXd times(2);
    times << 0.3, 0.3 + gap;
    auto rng = make_engine(99);
    const int npaths = 50000;
    double s0 = 0, s1 = 0, s01 = 0, s00 = 0, s11 = 0;
    std::vector<double> prods(npaths);
    for (int r = 0; r < npaths; ++r) {
        const Eigen::VectorXd c = sample_ou_path(times, sigma2_c, gamma, rng);
        s0 += c[0];
        s1 += c[1];
        s00 += c[0] * c[0];
        s11 += c[1] * c[1];
        s01 += c[0] * c[1];
        prods[r] = c[0] * c[1];
    }
    const double m0 = s0 / npaths, m1 = s1 / npaths;
    const double cov = s01 / npaths - m0 * m1;
    const double target = sigma2_c * std::exp(-gamma.gamma0 * gap);
    double var_prod = 0.0;
    for (double p : prods) var_prod += (p - s01 / npaths) * (p - s01 / npaths);
    const double mc_se = std::sqrt(var_prod / npaths / npaths);
    CHECK(std::abs(cov - target) < 3.0 * mc_se);
    CHECK(std::abs(s00 / npaths - sigma2_c) < 0.05);
    CHECK(std::abs(s11 / npaths - sigma2_c) < 0.05);
}

TEST_CASE("linear gamma lag-1 correlation over the full interval") {
    // endpoints 0 and 1: integral = 175, so corr = exp(-175) ~ 0; use a shorter
    // interval for a measurable target instead
    const GammaSpec gamma = GammaSpec::linear(300.0, 50.0);
    Eigen::VectorXd times(2);
    times << 0.0, 0.01;
    const double target = std::exp(-gamma.integral(0.0, 0.01));
    auto rng = make_engine(7);
    const int npaths = 50000;
    double s01 = 0.0;
    for (int r = 0; r < npaths; ++r) {
        const Eigen::VectorXd c = sample_ou_path(times, 1.0, gamma, rng);
        s01 += c[0] * c[1];
    }
    CHECK(s01 / npaths == doctest::Approx(target).epsilon(0.1));
}

TEST_CASE("calibrate_nu_star closed forms") {
    DesignSpec d;
    d.offset_log_mean = 1.0;
    d.offset_log_var = 1.0;
    d.target_mean_count = 1.0;
    GoupParams p;
    p.beta = Eigen::VectorXd::Zero(1);
    SUBCASE("all variances zero, alpha = beta = 0") {
        CHECK(calibrate_nu_star(d, p) == doctest::Approx(-1.5));
    }
    SUBCASE("sigma2 sum 3, target 0.1") {
        p.sigma2_b = p.sigma2_c = p.sigma2_e = 1.0;
        d.target_mean_count = 0.1;
        p.alpha = Eigen::VectorXd::Zero(1);
        CHECK(calibrate_nu_star(d, p) == doctest::Approx(std::log(0.1) - 1.5 - 1.5));
    }
    SUBCASE("doubling the target adds exactly log 2") {
        const double v1 = calibrate_nu_star(d, p);
        d.target_mean_count = 2.0;
        CHECK(calibrate_nu_star(d, p) - v1 == doctest::Approx(std::log(2.0)));
    }
    SUBCASE("target <= 0 rejected") {
        d.target_mean_count = 0.0;
        CHECK_THROWS_AS(calibrate_nu_star(d, p), std::invalid_argument);
    }
}

TEST_CASE("pure Poisson case: sample mean of Y/m near 1") {
    DesignSpec d;
    d.n_subjects = 20;
    d.trips_per_subject = 300;
    d.target_mean_count = 1.0;
    GoupParams p;
    p.beta = Eigen::VectorXd::Zero(1);
    p.nu_star = calibrate_nu_star(d, p); // -1.5, all variances zero
    auto rng = make_engine(11);
    const Panel panel = simulate_panel(p, d, rng);
    double sum_y = 0.0, sumsq_y = 0.0, sum_r = 0.0, sumsq_r = 0.0;
    long long nobs = 0;
    for (const auto& s : panel.subjects)
        for (int j = 0; j < s.n_trips(); ++j) {
            const double y = static_cast<double>(s.count[j]);
            const double r = y / s.offset[j];
            sum_y += y;
            sumsq_y += y * y;
            sum_r += r;
            sumsq_r += r * r;
            ++nobs;
        }
    // marginal mean count hits the calibration target
    const double mean_y = sum_y / nobs;
    const double se_y = std::sqrt((sumsq_y / nobs - mean_y * mean_y) / nobs);
    CHECK(std::abs(mean_y - 1.0) < 3.0 * se_y);
    // per-trip rate Y/m is unbiased for exp(nu*)
    const double mean_r = sum_r / nobs;
    const double se_r = std::sqrt((sumsq_r / nobs - mean_r * mean_r) / nobs);
    CHECK(std::abs(mean_r - std::exp(p.nu_star)) < 3.0 * se_r);
}

TEST_CASE("same seed gives a bit-identical panel") {
    DesignSpec d;
    d.n_subjects = 4;
    d.trips_per_subject = 50;
    GoupParams p;
    p.alpha = Eigen::VectorXd::Constant(1, 0.5);
    p.beta = Eigen::VectorXd::Zero(1);
    p.sigma2_b = p.sigma2_c = p.sigma2_e = 1.0;
    p.gamma = GammaSpec::constant(300.0);
    p.nu_star = calibrate_nu_star(d, p);
    auto r1 = make_engine(123);
    auto r2 = make_engine(123);
    const Panel a = simulate_panel(p, d, r1);
    const Panel b = simulate_panel(p, d, r2);
    CHECK(panels_equal(a, b));
}

TEST_CASE("per-subject mean rate dispersion reflects sigma2_b") {
    DesignSpec d;
    d.n_subjects = 150;
    d.trips_per_subject = 400;
    d.target_mean_count = 5.0;
    GoupParams p;
    p.beta = Eigen::VectorXd::Zero(1);
    p.sigma2_b = 0.5;
    p.nu_star = calibrate_nu_star(d, p);
    auto rng = make_engine(5);
    const Panel panel = simulate_panel(p, d, rng);
    std::vector<double> lograte;
    for (const auto& s : panel.subjects)
        lograte.push_back(std::log(static_cast<double>(s.count.sum()) / s.offset.sum()));
    double mean = 0.0;
    for (double v : lograte) mean += v;
    mean /= lograte.size();
    double var = 0.0;
    for (double v : lograte) var += (v - mean) * (v - mean);
    var /= (lograte.size() - 1);
    CHECK(var == doctest::Approx(0.5).epsilon(0.35));
}
