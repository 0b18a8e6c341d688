#pragma once

#include "longgee/panel.hpp"
#include "longgee/rng.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace longgee {

// Decay rate of the latent serial process, either constant over the study or
// linear in rescaled time.
struct GammaSpec {
    enum class Kind { Constant, Linear };
    Kind kind = Kind::Constant;
    double gamma0 = 300.0;
    double gamma1 = 300.0; // value at t=1 in the linear case

    static GammaSpec constant(double g) { return {Kind::Constant, g, g}; }
    static GammaSpec linear(double g0, double g1) { return {Kind::Linear, g0, g1}; }

    bool valid() const { return gamma0 > 0.0 && (kind == Kind::Constant || gamma1 > 0.0); }

    // integral of gamma(t) over [t1, t2], t1 <= t2; closed form for both kinds
    double integral(double t1, double t2) const {
        if (kind == Kind::Constant) return gamma0 * (t2 - t1);
        const double slope = gamma1 - gamma0;
        return gamma0 * (t2 - t1) + 0.5 * slope * (t2 * t2 - t1 * t1);
    }
};

struct GoupParams {
    double nu_star = 0.0;
    Eigen::VectorXd alpha; // subject-level effects
    Eigen::VectorXd beta;  // trip-level effects
    double sigma2_b = 0.0;
    double sigma2_c = 0.0;
    double sigma2_e = 0.0;
    GammaSpec gamma;

    double sigma2_sum() const { return sigma2_b + sigma2_c + sigma2_e; }
};

struct DesignSpec {
    enum class XKind { TripTime, None };

    int n_subjects = 40;
    int trips_per_subject = 1500;
    double offset_log_mean = 1.0;
    double offset_log_var = 1.0;
    double z_bernoulli_p = 0.5;
    XKind x_kind = XKind::TripTime;
    double target_mean_count = 1.0;

    int p_x() const { return x_kind == XKind::TripTime ? 1 : 0; }
};

// Stationary Gaussian path with Cov{c(t1),c(t2)} = sigma2_c * exp(-int gamma),
// realized by the exact Markov recursion on the sorted grid.
inline Eigen::VectorXd sample_ou_path(const Eigen::VectorXd& times, double sigma2_c,
                                      const GammaSpec& gamma, std::mt19937_64& rng) {
    const int k = static_cast<int>(times.size());
    for (int j = 1; j < k; ++j)
        if (times[j] < times[j - 1]) throw std::invalid_argument("sample_ou_path: times not sorted");
    Eigen::VectorXd c(k);
    if (k == 0) return c;
    if (sigma2_c == 0.0) {
        c.setZero();
        return c;
    }
    std::normal_distribution<double> stdnorm(0.0, 1.0);
    const double sd = std::sqrt(sigma2_c);
    c[0] = sd * stdnorm(rng);
    for (int j = 1; j < k; ++j) {
        const double rho = std::exp(-gamma.integral(times[j - 1], times[j]));
        c[j] = rho * c[j - 1] + std::sqrt(sigma2_c * (1.0 - rho * rho)) * stdnorm(rng);
    }
    return c;
}

// nu* such that the marginal mean of Y equals design.target_mean_count, from the
// log-normal moment identity; covers scalar Bernoulli Z and X = trip time.
inline double calibrate_nu_star(const DesignSpec& design, const GoupParams& params) {
    if (!(design.target_mean_count > 0.0))
        throw std::invalid_argument("calibrate_nu_star: target mean must be > 0");
    const double log_em = design.offset_log_mean + 0.5 * design.offset_log_var;
    double log_ez = 0.0;
    if (params.alpha.size() > 1)
        throw std::invalid_argument("calibrate_nu_star: only scalar Z supported");
    if (params.alpha.size() == 1) {
        const double p = design.z_bernoulli_p;
        log_ez = std::log((1.0 - p) + p * std::exp(params.alpha[0]));
    }
    double log_ex = 0.0;
    if (design.x_kind == DesignSpec::XKind::TripTime) {
        if (params.beta.size() != 1)
            throw std::invalid_argument("calibrate_nu_star: trip-time X needs scalar beta");
        const double b = params.beta[0];
        log_ex = std::abs(b) < 1e-12 ? 0.0 : std::log((std::exp(b) - 1.0) / b);
    } else if (params.beta.size() != 0) {
        throw std::invalid_argument("calibrate_nu_star: beta without X columns");
    }
    return std::log(design.target_mean_count) - log_em - log_ez - log_ex -
           0.5 * params.sigma2_sum();
}

inline Panel simulate_panel(const GoupParams& params, const DesignSpec& design,
                            std::mt19937_64& rng) {
    if (params.sigma2_b < 0 || params.sigma2_c < 0 || params.sigma2_e < 0)
        throw std::invalid_argument("simulate_panel: negative variance component");
    if (!params.gamma.valid()) throw std::invalid_argument("simulate_panel: gamma must be > 0");
    if (design.n_subjects < 1 || design.trips_per_subject < 1)
        throw std::invalid_argument("simulate_panel: empty design");

    const int p_z = static_cast<int>(params.alpha.size());
    const int p_x = design.p_x();
    if (p_x != static_cast<int>(params.beta.size()))
        throw std::invalid_argument("simulate_panel: beta dimension mismatch");

    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> stdnorm(0.0, 1.0);

    Panel panel;
    panel.p_z = p_z;
    panel.p_x = p_x;
    for (int j = 0; j < p_z; ++j) panel.z_names.push_back("z" + std::to_string(j + 1));
    for (int j = 0; j < p_x; ++j) panel.x_names.push_back("x" + std::to_string(j + 1));

    for (int i = 0; i < design.n_subjects; ++i) {
        const int k = design.trips_per_subject;
        Subject s;
        s.subject_id = "s" + std::to_string(i + 1);
        s.z.resize(p_z);
        for (int j = 0; j < p_z; ++j)
            s.z[j] = unif(rng) < design.z_bernoulli_p ? 1.0 : 0.0;

        s.time.resize(k);
        for (int j = 0; j < k; ++j) s.time[j] = unif(rng);
        std::sort(s.time.data(), s.time.data() + k);

        s.offset.resize(k);
        const double sd_logm = std::sqrt(design.offset_log_var);
        for (int j = 0; j < k; ++j)
            s.offset[j] = std::exp(design.offset_log_mean + sd_logm * stdnorm(rng));

        s.x.resize(k, p_x);
        if (p_x == 1) s.x.col(0) = s.time;

        const double b = params.sigma2_b > 0 ? std::sqrt(params.sigma2_b) * stdnorm(rng) : 0.0;
        const Eigen::VectorXd c = sample_ou_path(s.time, params.sigma2_c, params.gamma, rng);
        const double sd_e = std::sqrt(params.sigma2_e);

        s.trip_index.resize(k);
        s.count.resize(k);
        for (int j = 0; j < k; ++j) {
            s.trip_index[j] = j + 1;
            const double e = params.sigma2_e > 0 ? sd_e * stdnorm(rng) : 0.0;
            double eta = params.nu_star + b + c[j] + e;
            if (p_z > 0) eta += params.alpha.dot(s.z);
            if (p_x > 0) eta += params.beta.dot(s.x.row(j));
            const double lambda = s.offset[j] * std::exp(eta);
            std::poisson_distribution<std::int64_t> pois(lambda);
            s.count[j] = pois(rng);
        }
        panel.subjects.push_back(std::move(s));
    }
    return panel;
}

} // namespace longgee
