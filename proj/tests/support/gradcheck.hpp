#pragma once

// Central finite differences against analytic gradients. The loss callback
// must rebuild its graph from the current tensor contents on every call.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "prm/params.hpp"
#include "prm/tensor.hpp"

namespace prm::testing {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    int worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;

    std::string describe() const {
        return "max rel err " + std::to_string(max_rel_err) + " at " + worst_tensor + "[" +
               std::to_string(worst_index) + "] analytic=" + std::to_string(worst_analytic) +
               " numeric=" + std::to_string(worst_numeric);
    }
};

/// rel err = |a - f| / max(|a|, |f|, floor). The floor turns the comparison
/// absolute for near-zero gradients, where central differences bottom out
/// at roundoff noise.
inline double relative_error(double analytic, double numeric, double floor) {
    return std::fabs(analytic - numeric) /
           std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

/// `analytic` must be ordered like `refs` and hold d(loss)/d(tensor).
inline GradCheckReport check_gradients(const std::vector<ParamRef>& refs,
                                       const std::vector<Tensor2>& analytic,
                                       const std::function<double()>& loss,
                                       double eps = 1e-6, double floor = 1e-4) {
    GradCheckReport report;
    for (std::size_t t = 0; t < refs.size(); ++t) {
        Tensor2& tensor = *refs[t].tensor;
        for (int i = 0; i < tensor.size(); ++i) {
            const double saved = tensor.data[i];
            tensor.data[i] = saved + eps;
            const double up = loss();
            tensor.data[i] = saved - eps;
            const double down = loss();
            tensor.data[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double rel = relative_error(analytic[t].data[i], numeric, floor);
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_tensor = refs[t].name;
                report.worst_index = i;
                report.worst_analytic = analytic[t].data[i];
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace prm::testing
