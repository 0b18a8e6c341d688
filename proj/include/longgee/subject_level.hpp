#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace longgee {

enum class AlphaMethod { Ls, Irls };

struct AlphaFit {
    Eigen::VectorXd alpha_hat;
    double intercept = 0.0;
    Eigen::MatrixXd cov_alpha;   // alpha block only
    double sigma2_b_hat = 0.0;   // residual variance (LS) or moment estimate (IRLS)
    AlphaMethod method = AlphaMethod::Ls;
    int iterations = 0;
    bool na_flag = false;
};

// OLS of nu_hat on (1, Z). Residual variance doubles as the FSE-LS estimate of
// sigma2_b, ignoring the estimation error in nu_hat.
inline AlphaFit alpha_ls(const Eigen::VectorXd& nu_hat, const Eigen::MatrixXd& z) {
    const int n = static_cast<int>(nu_hat.size());
    const int p = static_cast<int>(z.cols());
    if (z.rows() != n) throw std::invalid_argument("alpha_ls: dimension mismatch");
    if (n < p + 1) throw std::invalid_argument("alpha_ls: need n >= p + 1 subjects");

    Eigen::MatrixXd x(n, p + 1);
    x.col(0).setOnes();
    x.rightCols(p) = z;
    const Eigen::MatrixXd xtx = x.transpose() * x;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
    AlphaFit out;
    out.method = AlphaMethod::Ls;
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() < 1e-12 * ldlt.vectorD().maxCoeff()) {
        out.na_flag = true;
        return out;
    }
    const Eigen::VectorXd coef = ldlt.solve(x.transpose() * nu_hat);
    const Eigen::VectorXd resid = nu_hat - x * coef;
    const double s2 = resid.squaredNorm() / std::max(n - p - 1, 1);
    const Eigen::MatrixXd cov = s2 * ldlt.solve(Eigen::MatrixXd::Identity(p + 1, p + 1));
    out.intercept = coef[0];
    out.alpha_hat = coef.tail(p);
    out.cov_alpha = cov.bottomRightCorner(p, p);
    out.sigma2_b_hat = s2;
    out.iterations = 1;
    return out;
}

// Weighted LS with weight matrix (sigma2_b I + cov_nu)^{-1}, alternating with
// the moment update sigma2_b = mean squared residual - mean diag(cov_nu).
inline AlphaFit alpha_irls(const Eigen::VectorXd& nu_hat, const Eigen::MatrixXd& z,
                           const Eigen::MatrixXd& cov_nu, int max_iter = 10,
                           double tol = 1e-8) {
    const int n = static_cast<int>(nu_hat.size());
    const int p = static_cast<int>(z.cols());
    if (cov_nu.rows() != n || cov_nu.cols() != n)
        throw std::invalid_argument("alpha_irls: cov_nu must be n x n");

    AlphaFit out = alpha_ls(nu_hat, z);
    out.method = AlphaMethod::Irls;
    if (out.na_flag) return out;

    Eigen::MatrixXd x(n, p + 1);
    x.col(0).setOnes();
    x.rightCols(p) = z;
    Eigen::VectorXd coef(p + 1);
    coef[0] = out.intercept;
    coef.tail(p) = out.alpha_hat;

    const double mean_diag = cov_nu.diagonal().mean();
    // residual-variance denominator matches LS so that cov_nu = 0 reduces
    // exactly to the LS estimate of sigma2_b
    const double denom = std::max(n - p - 1, 1);
    double sigma2_b = out.sigma2_b_hat;
    for (int iter = 0; iter < max_iter; ++iter) {
        const Eigen::VectorXd resid = nu_hat - x * coef;
        sigma2_b = std::max(0.0, resid.squaredNorm() / denom - mean_diag);

        Eigen::MatrixXd sigma = cov_nu;
        sigma.diagonal().array() += sigma2_b;
        Eigen::LLT<Eigen::MatrixXd> llt(sigma);
        if (llt.info() != Eigen::Success) {
            out.na_flag = true;
            return out;
        }
        const Eigen::MatrixXd wx = llt.solve(x);
        const Eigen::MatrixXd xtwx = x.transpose() * wx;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(xtwx);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
            out.na_flag = true;
            return out;
        }
        const Eigen::VectorXd coef_new = ldlt.solve(wx.transpose() * nu_hat);
        const double delta = (coef_new - coef).cwiseAbs().maxCoeff();
        coef = coef_new;
        out.iterations = iter + 1;
        out.cov_alpha =
            ldlt.solve(Eigen::MatrixXd::Identity(p + 1, p + 1)).bottomRightCorner(p, p);
        if (delta < tol) break;
    }
    out.intercept = coef[0];
    out.alpha_hat = coef.tail(p);
    out.sigma2_b_hat = sigma2_b;
    return out;
}

} // namespace longgee
