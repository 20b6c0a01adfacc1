#include "iwivig/stats.hpp"

#include "iwivig/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace iwivig::stats {

namespace {

void check_sizes(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DataError(std::string(what) + ": length mismatch");
  if (a == 0) throw DataError(std::string(what) + ": empty input");
}

// Number of inversions in v, sorting it in place (merge sort).
long long count_inversions(std::vector<double>& v, std::vector<double>& tmp, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  long long inv = count_inversions(v, tmp, lo, mid) + count_inversions(v, tmp, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      inv += static_cast<long long>(mid - i);
      tmp[k++] = v[j++];
    } else {
      tmp[k++] = v[i++];
    }
  }
  while (i < mid) tmp[k++] = v[i++];
  while (j < hi) tmp[k++] = v[j++];
  std::copy(tmp.begin() + static_cast<long>(lo), tmp.begin() + static_cast<long>(hi), v.begin() + static_cast<long>(lo));
  return inv;
}

// Sum over runs of equal values of t(t-1)/2; `v` must be sorted.
long long tied_pairs(const std::vector<double>& v) {
  long long total = 0, run = 1;
  for (std::size_t i = 1; i <= v.size(); ++i) {
    if (i < v.size() && v[i] == v[i - 1]) {
      ++run;
    } else {
      total += run * (run - 1) / 2;
      run = 1;
    }
  }
  return total;
}

}  // namespace

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  check_sizes(predicted.size(), truth.size(), "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double macro_f1(const std::vector<int>& predicted, const std::vector<int>& truth, int num_classes) {
  check_sizes(predicted.size(), truth.size(), "macro_f1");
  std::vector<long long> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] == truth[i]) {
      ++tp[truth[i]];
    } else {
      ++fp[predicted[i]];
      ++fn[truth[i]];
    }
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    const long long denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
    ++present;
  }
  return present ? sum / present : 0.0;
}

double r_squared(const std::vector<double>& predicted, const std::vector<double>& truth) {
  check_sizes(predicted.size(), truth.size(), "r_squared");
  const double m = mean(truth);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
    ss_tot += (truth[i] - m) * (truth[i] - m);
  }
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  check_sizes(x.size(), y.size(), "kendall_tau_b");
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[a] != x[b] ? x[a] < x[b] : y[a] < y[b];
  });
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = x[order[i]];
    ys[i] = y[order[i]];
  }
  const long long n0 = static_cast<long long>(n) * static_cast<long long>(n - 1) / 2;
  const long long n1 = tied_pairs(xs);
  // Pairs tied in both x and y.
  long long n3 = 0, run = 1;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && xs[i] == xs[i - 1] && ys[i] == ys[i - 1]) {
      ++run;
    } else {
      n3 += run * (run - 1) / 2;
      run = 1;
    }
  }
  std::vector<double> tmp(n);
  const long long swaps = count_inversions(ys, tmp, 0, n);
  const long long n2 = tied_pairs(ys);
  const long long concordant_minus_discordant = n0 - n1 - n2 + n3 - 2 * swaps;
  const double denom = std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
  if (denom == 0.0) return 0.0;
  return static_cast<double>(concordant_minus_discordant) / denom;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) throw DataError("mean: empty input");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  check_sizes(x.size(), y.size(), "trapezoid");
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return area;
}

}  // namespace iwivig::stats
