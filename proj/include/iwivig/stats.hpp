#pragma once

#include <vector>

namespace iwivig::stats {

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);
// Unweighted mean of per-class F1 over classes that occur in either vector.
double macro_f1(const std::vector<int>& predicted, const std::vector<int>& truth, int num_classes);
// 1 - SS_res / SS_tot. Constant truth gives 1 for an exact fit, else 0.
double r_squared(const std::vector<double>& predicted, const std::vector<double>& truth);
// Kendall tau-b, O(n log n).
double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y);

double mean(const std::vector<double>& v);
// Population standard deviation.
double stddev(const std::vector<double>& v);
// Trapezoid rule over (x, y) samples.
double trapezoid(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace iwivig::stats
