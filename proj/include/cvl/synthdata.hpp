#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cvl::synthdata {

// Class 0 is the healthy background class; the five positives are synthetic
// tokens rendered as distinct marker shapes.
enum class ClassId : int {
  no_finding = 0,
  alphora = 1,
  betuna = 2,
  gamron = 3,
  deltex = 4,
  epsidia = 5,
};
inline constexpr int kNumClasses = 6;

enum class Extent : int { small = 0, large = 1 };
enum class Horiz : int { left = 0, right = 1 };
enum class Vert : int { upper = 0, lower = 1 };

struct Zone {
  Horiz horiz = Horiz::left;
  Vert vert = Vert::upper;
  bool operator==(const Zone&) const = default;
};

// 0 = upper left, 1 = upper right, 2 = lower left, 3 = lower right.
int quadrant_index(const Zone& z);
int quadrant_of_pixel(Eigen::Index i, Eigen::Index j, Eigen::Index rows, Eigen::Index cols);

struct FindingSpec {
  ClassId cls = ClassId::no_finding;
  bool present = false;
  // Meaningful only when present.
  Extent extent = Extent::small;
  Zone zone;
  bool operator==(const FindingSpec&) const = default;
};

struct Study {
  std::string study_id;
  Eigen::MatrixXd image;  // values in [0,1]
  std::vector<std::string> report;
  std::vector<FindingSpec> findings;  // empty means "no finding"
};

struct RenderConfig {
  int height = 32;
  int width = 32;
};

// Intensities: background noise stays below, markers above, so a single
// threshold separates them for every study.
inline constexpr double kNoiseCeiling = 0.2;
inline constexpr double kMarkerFloor = 0.7;
inline constexpr double kMarkerThreshold = 0.45;

const std::string& class_name(ClassId c);
const std::string& extent_name(Extent e);
const std::string& horiz_name(Horiz h);
const std::string& vert_name(Vert v);
std::optional<ClassId> class_from_name(const std::string& name);

// One grammar sentence per present finding; a lone negation sentence otherwise.
std::string finding_sentence(const FindingSpec& f);
const std::string& negation_sentence();
std::vector<std::string> make_report(const std::vector<FindingSpec>& findings);

// Inverse of make_report over the closed grammar. Empty optional when any
// sentence falls outside the grammar. Case-insensitive.
std::optional<std::vector<FindingSpec>> parse_report(const std::vector<std::string>& report);

Eigen::MatrixXd render_image(const std::vector<FindingSpec>& findings, uint64_t rng_seed,
                             const RenderConfig& cfg = {});

Study generate_study(uint64_t rng_seed, const std::vector<FindingSpec>& findings,
                     const RenderConfig& cfg = {}, std::string study_id = {});

std::vector<Study> generate_corpus(int n, const std::map<ClassId, double>& class_mix,
                                   uint64_t rng_seed, const RenderConfig& cfg = {});

// Uniform over all six classes.
std::map<ClassId, double> uniform_class_mix();

// The set of abnormality classes a study's image actually carries.
std::set<ClassId> label_set(const Study& s);

void save_corpus(const std::string& path, const std::vector<Study>& studies);
std::vector<Study> load_corpus(const std::string& path);

// One corpus line (a single JSON object, no trailing newline). Parsing
// ignores unknown fields, so augmented records stay readable as studies.
std::string study_to_json_line(const Study& s);
Study study_from_json_line(const std::string& line);

inline constexpr const char* kCorpusSchema = "cvl-corpus-v1";

}  // namespace cvl::synthdata
