#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmcl/errors.hpp"

namespace gmcl {

/// Confusion counts are rows = true class, cols = predicted class.
using Confusion = std::vector<std::vector<int64_t>>;

struct MetricsReport {
    double accuracy = 0, auc = 0, sensitivity = 0, specificity = 0;
    Confusion confusion;
};

Confusion confusion_matrix(const std::vector<int>& pred, const std::vector<int>& truth, int k);

double accuracy(const Confusion& confusion);

/// One-vs-rest AUC per class via the rank statistic (ties count 1/2),
/// macro-averaged over classes that have at least one positive and one
/// negative. `scores` is row-major [n, k].
double macro_auc_ovr(const std::vector<double>& scores, int64_t n, int k,
                     const std::vector<int>& labels);

/// Macro-averaged one-vs-rest sensitivity and specificity.
std::pair<double, double> sensitivity_specificity(const Confusion& confusion);

}  // namespace gmcl
