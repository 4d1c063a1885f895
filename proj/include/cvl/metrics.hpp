#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cvl/rng.hpp"

namespace cvl::metrics {

// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
// ties counting one half. Labels are 0/1 and both classes must appear.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Harmonic mean of precision and recall with "positive" = score >= threshold.
// 0 when nothing is predicted positive (or nothing is positive at all).
double f1(const std::vector<double>& scores, const std::vector<int>& labels, double threshold);

// Linearly interpolated percentile, p in [0, 100]; values need not be sorted.
double percentile(std::vector<double> values, double p);

using MetricFn = std::function<double(const std::vector<double>&, const std::vector<int>&)>;

struct MetricReport {
  std::string name;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  int n_resamples = 0;
  double alpha = 0.0;
  int redraws = 0;                    // single-class resamples thrown back
  bool estimate_outside_ci = false;   // pathological percentile case, flagged
  std::vector<double> resample_values;  // sorted ascending
};

// Percentile bootstrap: n resamples with replacement, CI between the
// 100*(alpha/2) and 100*(1-alpha/2) percentiles. Each resample draws its
// index stream from mix_seed(seed, resample), so results are independent of
// evaluation order. A resample containing a single class is redrawn, up to
// max_redraws attempts; exceeding the cap is an error.
MetricReport bootstrap_ci(const MetricFn& metric, const std::string& name,
                          const std::vector<double>& scores, const std::vector<int>& labels,
                          int n = 1000, double alpha = 0.05, std::uint64_t seed = 0,
                          int max_redraws = 1000);

struct PairedSignificance {
  double diff_estimate = 0.0;  // metric(a) - metric(b) on the full data
  double lower = 0.0;
  double upper = 0.0;
  bool significant = false;  // CI of the paired difference excludes 0
};

// Shared resample indices across both score lists, which must be aligned
// study-for-study with the labels.
PairedSignificance paired_significance(const MetricFn& metric, const std::vector<double>& scores_a,
                                       const std::vector<double>& scores_b,
                                       const std::vector<int>& labels, int n = 1000,
                                       double alpha = 0.05, std::uint64_t seed = 0,
                                       int max_redraws = 1000);

}  // namespace cvl::metrics
