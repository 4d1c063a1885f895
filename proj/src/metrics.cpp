#include "cvl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cvl/errors.hpp"

namespace cvl::metrics {
namespace {

void check_inputs(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw DataError("metrics: " + std::to_string(scores.size()) + " scores vs " +
                    std::to_string(labels.size()) + " labels");
  if (scores.empty()) throw DataError("metrics: empty input");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i]))
      throw DataError("metrics: non-finite score at index " + std::to_string(i));
    if (labels[i] != 0 && labels[i] != 1)
      throw DataError("metrics: label " + std::to_string(labels[i]) + " at index " +
                      std::to_string(i) + " is not 0/1");
  }
}

int count_positives(const std::vector<int>& labels) {
  return static_cast<int>(std::count(labels.begin(), labels.end(), 1));
}

}  // namespace

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_inputs(scores, labels);
  const int n = static_cast<int>(scores.size());
  const int n_pos = count_positives(labels);
  const int n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw DataError("auc: needs both classes, got " + std::to_string(n_pos) + " positives of " +
                    std::to_string(n) + " samples");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scores[a] < scores[b]; });

  // Average ranks over tie groups, then AUC via the rank-sum statistic.
  std::vector<double> rank(n);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = 0.5 * ((i + 1) + j);  // mean of 1-based ranks i+1..j
    for (int k = i; k < j; ++k) rank[order[k]] = avg;
    i = j;
  }
  double rank_sum_pos = 0.0;
  for (int k = 0; k < n; ++k)
    if (labels[k] == 1) rank_sum_pos += rank[k];
  const double u_pos = rank_sum_pos - 0.5 * n_pos * (n_pos + 1.0);
  return u_pos / (static_cast<double>(n_pos) * n_neg);
}

double f1(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  check_inputs(scores, labels);
  int tp = 0, fp = 0, fn = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const bool pred = scores[k] >= threshold;
    if (pred && labels[k] == 1) ++tp;
    else if (pred && labels[k] == 0) ++fp;
    else if (!pred && labels[k] == 1) ++fn;
  }
  const double denom = 2.0 * tp + fp + fn;
  if (denom == 0.0) return 0.0;
  return 2.0 * tp / denom;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw DataError("percentile: empty input");
  if (p < 0.0 || p > 100.0)
    throw DataError("percentile: p=" + std::to_string(p) + " outside [0, 100]");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n == 1) return values[0];
  const double pos = p / 100.0 * (n - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= n) return values[n - 1];
  const double frac = pos - lo;
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

namespace {

bool single_class(const std::vector<int>& labels) {
  const int pos = count_positives(labels);
  return pos == 0 || pos == static_cast<int>(labels.size());
}

// One resample of size n with replacement; redraws until both classes appear.
// Returns the number of redraws spent.
int draw_indices(Rng& rng, const std::vector<int>& labels, int max_redraws,
                 std::vector<int>& out) {
  const int n = static_cast<int>(labels.size());
  std::vector<int> resampled(n);
  for (int attempt = 0; attempt <= max_redraws; ++attempt) {
    out.resize(n);
    for (int k = 0; k < n; ++k) out[k] = rng.uniform_int(n);
    for (int k = 0; k < n; ++k) resampled[k] = labels[out[k]];
    if (!single_class(resampled)) return attempt;
  }
  throw DataError("bootstrap: exceeded " + std::to_string(max_redraws) +
                  " redraws for a two-class resample (n=" + std::to_string(n) + ", " +
                  std::to_string(count_positives(labels)) + " positives)");
}

}  // namespace

MetricReport bootstrap_ci(const MetricFn& metric, const std::string& name,
                          const std::vector<double>& scores, const std::vector<int>& labels,
                          int n, double alpha, std::uint64_t seed, int max_redraws) {
  check_inputs(scores, labels);
  if (n < 1) throw DataError("bootstrap: n_resamples=" + std::to_string(n));
  if (alpha <= 0.0 || alpha >= 1.0)
    throw DataError("bootstrap: alpha=" + std::to_string(alpha) + " outside (0, 1)");
  if (max_redraws < 0) throw DataError("bootstrap: negative redraw cap");
  if (single_class(labels)) throw DataError("bootstrap: input has a single class");

  MetricReport report;
  report.name = name;
  report.n_resamples = n;
  report.alpha = alpha;
  report.estimate = metric(scores, labels);

  const int size = static_cast<int>(scores.size());
  std::vector<int> idx;
  std::vector<double> s(size);
  std::vector<int> l(size);
  report.resample_values.reserve(n);
  for (int r = 0; r < n; ++r) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(r)));
    report.redraws += draw_indices(rng, labels, max_redraws, idx);
    for (int k = 0; k < size; ++k) {
      s[k] = scores[idx[k]];
      l[k] = labels[idx[k]];
    }
    report.resample_values.push_back(metric(s, l));
  }
  std::sort(report.resample_values.begin(), report.resample_values.end());
  report.lower = percentile(report.resample_values, 100.0 * (alpha / 2.0));
  report.upper = percentile(report.resample_values, 100.0 * (1.0 - alpha / 2.0));
  report.estimate_outside_ci = report.estimate < report.lower || report.estimate > report.upper;
  return report;
}

PairedSignificance paired_significance(const MetricFn& metric, const std::vector<double>& scores_a,
                                       const std::vector<double>& scores_b,
                                       const std::vector<int>& labels, int n, double alpha,
                                       std::uint64_t seed, int max_redraws) {
  if (scores_a.size() != scores_b.size())
    throw DataError("paired_significance: " + std::to_string(scores_a.size()) + " vs " +
                    std::to_string(scores_b.size()) + " scores cover different samples");
  check_inputs(scores_a, labels);
  check_inputs(scores_b, labels);
  if (n < 1) throw DataError("paired_significance: n_resamples=" + std::to_string(n));
  if (alpha <= 0.0 || alpha >= 1.0)
    throw DataError("paired_significance: alpha=" + std::to_string(alpha) + " outside (0, 1)");
  if (single_class(labels)) throw DataError("paired_significance: input has a single class");

  PairedSignificance out;
  out.diff_estimate = metric(scores_a, labels) - metric(scores_b, labels);

  const int size = static_cast<int>(labels.size());
  std::vector<int> idx;
  std::vector<double> sa(size), sb(size);
  std::vector<int> l(size);
  std::vector<double> diffs;
  diffs.reserve(n);
  for (int r = 0; r < n; ++r) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(r)));
    draw_indices(rng, labels, max_redraws, idx);
    for (int k = 0; k < size; ++k) {
      sa[k] = scores_a[idx[k]];
      sb[k] = scores_b[idx[k]];
      l[k] = labels[idx[k]];
    }
    diffs.push_back(metric(sa, l) - metric(sb, l));
  }
  out.lower = percentile(diffs, 100.0 * (alpha / 2.0));
  out.upper = percentile(diffs, 100.0 * (1.0 - alpha / 2.0));
  out.significant = out.lower > 0.0 || out.upper < 0.0;
  return out;
}

}  // namespace cvl::metrics
