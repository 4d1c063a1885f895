#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "cvl/model.hpp"
#include "cvl/textpipe.hpp"

namespace cvl::zeroshot {

using ad::Mat;

// Prompt text for one pathology class: the bare class name, its negation, and
// grammar paraphrases used for detailed scoring.
struct ClassPrompts {
  std::string simple_pos;
  std::string simple_neg;
  std::vector<std::string> detailed;
  bool operator==(const ClassPrompts&) const = default;
};

struct PromptSet {
  std::map<std::string, ClassPrompts> classes;

  const ClassPrompts& for_class(const std::string& cls) const;  // missing -> DataError

  // One block per class: "class: <name>" header, the two simple prompts, then
  // the detailed descriptions, blocks separated by blank lines.
  void save(const std::string& path) const;
  static PromptSet load(const std::string& path);

  // Prompts for the five marker classes of the synthetic corpus, five zone and
  // extent paraphrases each.
  static PromptSet synthetic_default();

  bool operator==(const PromptSet&) const = default;
};

// One scored (study, class) pair; mode is "simple", "detailed", or "error".
struct DetectionScore {
  std::string study_id;
  std::string cls;
  std::string mode;
  double score = 0.0;
  bool operator==(const DetectionScore&) const = default;
};

std::string score_to_json_line(const DetectionScore& s);
DetectionScore score_from_json_line(const std::string& line);

struct Substitution {
  int position = 0;  // index into the tokenized sequence (CLS at 0)
  std::string before;
  std::string after;
  double confidence = 0.0;
};

struct CorrectionResult {
  std::string report;  // single line, sentences joined by spaces
  std::vector<Substitution> substitutions;
};

struct WordHeatmap {
  std::string token;
  int position = 0;       // query index in the token sequence
  Mat patch_grid;         // rectified relevance per patch
  Mat upsampled;          // bilinear resize to image dims
  std::array<double, 4> quadrant_mass{};  // fractions of total upsampled mass
};

struct ScorerConfig {
  enum class ScoreKind { itm, cosine };
  ScoreKind kind = ScoreKind::itm;
  int gradcam_layer = -1;    // -1 selects the last fusion layer
  double theta_corr = 0.5;   // confidence floor for a substitution
};

// Evaluation-time interface over frozen parameters. Every operation binds the
// store as constants, so parameters are left bit-unchanged.
class Scorer {
 public:
  Scorer(const model::ModelConfig& cfg, model::ParamStore& params,
         const textpipe::Vocabulary& vocab, ScorerConfig sc = {});

  // Pairwise logit: ITM kind gives z_match - z_unmatch, cosine kind gives
  // cos(image, text) / tau. One image encode feeds all texts.
  std::vector<double> match_logits(const Mat& image, const std::vector<std::string>& texts) const;
  double match_logit(const Mat& image, const std::string& text) const;

  // Sigmoid of the match logit, in (0, 1).
  double match_score(const Mat& image, const std::string& text) const;

  // Two-way softmax of (positive, negative) prompt logits.
  double classify_simple(const Mat& image, const std::string& cls, const PromptSet& prompts) const;
  // Positive logit is the mean over the class's detailed descriptions.
  double classify_detailed(const Mat& image, const std::string& cls,
                           const PromptSet& prompts) const;

  // 1 - match_score, exactly.
  double detect_error(const Mat& image, const std::string& report) const;

  // Masks each non-special position of the original report in turn and
  // substitutes the MLM argmax when it differs with probability >= theta_corr.
  // Predictions are independent per position; one left-to-right pass.
  CorrectionResult correct_report(const Mat& image, const std::string& report) const;

  // Per-word relevance over image patches at the configured fusion layer,
  // driven by the gradient of the match logit.
  std::vector<WordHeatmap> attention_gradcam(const Mat& image, const std::string& text) const;

  const ScorerConfig& scorer_config() const { return sc_; }
  const model::ModelConfig& model_config() const { return net_.config(); }

 private:
  model::Network net_;
  model::ParamStore& params_;
  const textpipe::Vocabulary& vocab_;
  ScorerConfig sc_;
};

// Nearest-patch bilinear resize with corner alignment.
Mat bilinear_upsample(const Mat& grid, Eigen::Index out_rows, Eigen::Index out_cols);

// Builds per-word maps from recorded cross-attention probabilities after
// backward() has populated their gradients. attn is FusePass.t2i.attn; ids is
// the real token prefix aligned with the query rows.
std::vector<WordHeatmap> heatmaps_from_attention(const std::vector<std::vector<ad::Var>>& attn,
                                                 int layer, const std::vector<int>& ids,
                                                 const textpipe::Vocabulary& vocab,
                                                 const model::ModelConfig& cfg);

// Portable grayscale (P2 PGM), values clipped to [lo, hi] then scaled to 0-255.
void write_pgm(const std::string& path, const Mat& img, double lo = 0.0, double hi = 1.0);

}  // namespace cvl::zeroshot
