#include "gmcl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gmcl {

Confusion confusion_matrix(const std::vector<int>& pred, const std::vector<int>& truth, int k) {
    if (pred.size() != truth.size())
        throw ValueError("confusion_matrix: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(truth.size()) + " labels");
    if (k < 1) throw ValueError("confusion_matrix: class count must be positive");
    Confusion c(size_t(k), std::vector<int64_t>(size_t(k), 0));
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || pred[i] >= k || truth[i] < 0 || truth[i] >= k)
            throw ValueError("confusion_matrix: label out of range at sample " +
                             std::to_string(i));
        ++c[size_t(truth[i])][size_t(pred[i])];
    }
    return c;
}

namespace {
int64_t total_count(const Confusion& c) {
    int64_t n = 0;
    for (const auto& row : c) n = std::accumulate(row.begin(), row.end(), n);
    return n;
}
}  // namespace

double accuracy(const Confusion& confusion) {
    const int64_t n = total_count(confusion);
    if (n == 0) throw ValueError("accuracy: empty confusion matrix");
    int64_t correct = 0;
    for (size_t i = 0; i < confusion.size(); ++i) correct += confusion[i][i];
    return double(correct) / double(n);
}

double macro_auc_ovr(const std::vector<double>& scores, int64_t n, int k,
                     const std::vector<int>& labels) {
    if (int64_t(labels.size()) != n || int64_t(scores.size()) != n * int64_t(k))
        throw ValueError("macro_auc_ovr: scores/labels sizes do not match n=" +
                         std::to_string(n) + ", k=" + std::to_string(k));
    for (double s : scores)
        if (!std::isfinite(s)) throw ValueError("macro_auc_ovr: non-finite score");

    double sum = 0;
    int evaluated = 0;
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int c = 0; c < k; ++c) {
        int64_t pos = 0;
        for (int lab : labels) pos += (lab == c);
        const int64_t neg = n - pos;
        if (pos == 0 || neg == 0) continue;  // degenerate class: skipped from the macro average

        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return scores[size_t(a * k + c)] < scores[size_t(b * k + c)];
        });
        // average ranks within tie groups, accumulate positive ranks
        double pos_rank_sum = 0;
        int64_t i = 0;
        while (i < n) {
            int64_t j = i;
            while (j + 1 < n && scores[size_t(order[j + 1] * k + c)] ==
                                    scores[size_t(order[i] * k + c)])
                ++j;
            const double avg_rank = 0.5 * double(i + j) + 1.0;  // ranks are 1-based
            for (int64_t t = i; t <= j; ++t)
                if (labels[size_t(order[t])] == c) pos_rank_sum += avg_rank;
            i = j + 1;
        }
        sum += (pos_rank_sum - 0.5 * double(pos) * double(pos + 1)) / (double(pos) * double(neg));
        ++evaluated;
    }
    if (evaluated == 0)
        throw MetricError("macro_auc_ovr: every class lacks positives or negatives");
    return sum / double(evaluated);
}

std::pair<double, double> sensitivity_specificity(const Confusion& confusion) {
    const int64_t n = total_count(confusion);
    if (n == 0) throw ValueError("sensitivity_specificity: empty confusion matrix");
    const size_t k = confusion.size();
    double sens_sum = 0, spec_sum = 0;
    int sens_n = 0, spec_n = 0;
    for (size_t c = 0; c < k; ++c) {
        const int64_t tp = confusion[c][c];
        int64_t fn = 0, fp = 0;
        for (size_t j = 0; j < k; ++j) {
            if (j != c) {
                fn += confusion[c][j];
                fp += confusion[j][c];
            }
        }
        const int64_t tn = n - tp - fn - fp;
        if (tp + fn > 0) {
            sens_sum += double(tp) / double(tp + fn);
            ++sens_n;
        }
        if (tn + fp > 0) {
            spec_sum += double(tn) / double(tn + fp);
            ++spec_n;
        }
    }
    if (sens_n == 0 || spec_n == 0)
        throw MetricError("sensitivity_specificity: all denominators are zero");
    return {sens_sum / double(sens_n), spec_sum / double(spec_n)};
}

}  // namespace gmcl
