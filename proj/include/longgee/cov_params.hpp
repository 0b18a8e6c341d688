#pragma once

#include <optional>

namespace longgee {

enum class CovMethod { FseLs, FseIrls, NoFse };

// Estimated parameters of the latent covariance structure. sigma2_b is absent
// for the FSE methods unless filled in from the second-stage regression.
struct CovParamEstimate {
    std::optional<double> sigma2_b;
    double sigma2_c = 0.0;
    double sigma2_e = 0.0;
    double gamma = 1.0;
    CovMethod method = CovMethod::FseLs;
    bool converged = false; // false => values are the data-driven initial values
    bool na_flag = false;
};

} // namespace longgee
