#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvl/rng.hpp"
#include "cvl/synthdata.hpp"

namespace cvl::errorsim {

enum class ErrorType : int {
  none = 0,
  mismatch,        // wrong study's report pasted in
  location,        // one location word flipped to its antonym
  extent,          // one extent word flipped to its antonym
  false_negative,  // abnormal study given a no-finding report
  false_positive,  // no-finding study given an abnormal report
};
inline constexpr int kNumErrorTypes = 5;  // excludes none

const std::string& error_type_name(ErrorType t);
std::optional<ErrorType> error_type_from_name(const std::string& name);

struct ErrorRecord {
  ErrorType type = ErrorType::none;
  std::vector<std::string> original;
  std::vector<std::string> corrupted;
  // Whitespace-token indices over the joined report, for the word-level types.
  std::vector<int> edited_positions;
  std::string source_study_id;  // donor study for the whole-report types
  bool inapplicable = false;    // corrupt() found no applicable type
  bool operator==(const ErrorRecord&) const = default;
};

// Antonym tables. Both are involutions over their listed pairs; any token
// outside the table maps to nothing.
std::optional<std::string> location_antonym(const std::string& token);
std::optional<std::string> extent_antonym(const std::string& token);

struct TextSwap {
  std::vector<std::string> report;
  std::vector<int> positions;  // joined-report token indices, here exactly one
};
struct ReportSwap {
  std::vector<std::string> report;
  std::string source_study_id;
};

// Each injector returns nothing when its precondition fails (the
// "inapplicable" signal); corrupt() folds that into type selection.
std::optional<TextSwap> inject_location_error(const std::vector<std::string>& report, Rng& rng);
std::optional<TextSwap> inject_extent_error(const std::vector<std::string>& report, Rng& rng);
std::optional<ReportSwap> inject_mismatch(const synthdata::Study& study,
                                          const std::vector<synthdata::Study>& corpus, Rng& rng);
std::optional<ReportSwap> inject_false_positive(const synthdata::Study& study,
                                                const std::vector<synthdata::Study>& corpus,
                                                Rng& rng);
std::optional<ReportSwap> inject_false_negative(const synthdata::Study& study,
                                                const std::vector<synthdata::Study>& corpus,
                                                Rng& rng);

// With probability p, injects one uniformly chosen applicable error type.
// Abnormal studies admit {mismatch, location, extent, false_negative};
// no-finding studies admit {mismatch, false_positive}.
ErrorRecord corrupt(const synthdata::Study& study, const std::vector<synthdata::Study>& corpus,
                    double p, Rng& rng);

struct CorruptedStudy {
  synthdata::Study study;  // report carries the corrupted text; image and id untouched
  ErrorRecord record;
};

// Per-study child rng streams, so the result is independent of iteration
// order and stable across runs.
std::vector<CorruptedStudy> corrupt_corpus(const std::vector<synthdata::Study>& corpus, double p,
                                           std::uint64_t seed);

// Corpus line format with an extra "error" field per record; the files stay
// loadable as plain corpora.
void save_corrupted(const std::string& path, const std::vector<CorruptedStudy>& set);
std::vector<CorruptedStudy> load_corrupted(const std::string& path);

}  // namespace cvl::errorsim
