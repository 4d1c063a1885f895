#pragma once

#include <iosfwd>
#include <vector>

#include "cvl/autodiff.hpp"
#include "cvl/rng.hpp"

namespace cvl::objectives {

using ad::Mat;
using ad::Tape;
using ad::Var;

// FIFO store of recent momentum features, consumed as extra contrastive
// candidates. Contents are plain values; gradients never reach them.
class FeatureQueue {
 public:
  FeatureQueue(int capacity, int dim);
  // Appends each row; oldest entries fall out once capacity is reached.
  // Rows must be unit-norm within 1e-5.
  void enqueue(const Mat& rows);
  Mat snapshot() const;  // size() x dim, oldest first
  int size() const { return size_; }
  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  void serialize(std::ostream& os) const;
  static FeatureQueue deserialize(std::istream& is);
  bool operator==(const FeatureQueue& other) const;

 private:
  int capacity_;
  int dim_;
  int size_ = 0;
  int cursor_ = 0;  // next write slot
  Mat data_;        // capacity x dim
};

// Plain-value helpers shared by the losses and the teacher-target path.
double similarity(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b, bool checked = true);
Eigen::RowVectorXd normalized_similarities(const Eigen::RowVectorXd& anchor,
                                           const Mat& candidates, double tau);
Mat softmax_rows_value(const Mat& logits);
Mat log_softmax_rows_value(const Mat& logits);

// Mean over rows of -log softmax(anchors * candidates^T / tau) at the
// positive column, with optional per-row weights replacing the 1/R mean.
Var infonce(Tape& t, Var anchors, const Mat& candidates, const std::vector<int>& positive_cols,
            Var tau);
Var infonce_weighted(Tape& t, Var anchors, const Mat& candidates,
                     const std::vector<int>& positive_cols, const std::vector<double>& row_weights,
                     Var tau);

struct ContrastiveResult {
  Var cmc;          // cross-modal term
  Var imc;          // intra-modal term
  Var contrastive;  // their sum
};

// Candidates are [teacher batch rows; queue snapshot] per modality; the
// positive for anchor i is its own teacher feature at column i.
ContrastiveResult contrastive_loss(Tape& t, const std::vector<Var>& img_feats,
                                   const std::vector<Var>& txt_feats, const Mat& teacher_img,
                                   const Mat& teacher_txt, const FeatureQueue& img_queue,
                                   const FeatureQueue& txt_queue, Var tau);

// Mean over samples of the per-sentence cross-modal loss; the sentence stands
// in for its report on both sides of the pair.
Var sentence_contrastive_loss(Tape& t, const std::vector<Var>& img_feats,
                              const std::vector<std::vector<Var>>& sent_feats,
                              const Mat& teacher_img, const Mat& teacher_txt,
                              const std::vector<Mat>& teacher_sent, const FeatureQueue& img_queue,
                              const FeatureQueue& txt_queue, Var tau);

struct MlmTerm {
  Var ce_sum;  // summed cross entropy over target positions (1x1)
  int count = 0;
};

MlmTerm mlm_term(Tape& t, Var vocab_logits, const std::vector<int>& targets, int ignore_id);
// Mean cross entropy over target positions; 0 with warned=true when none.
Var mlm_loss(Tape& t, Var vocab_logits, const std::vector<int>& targets, int ignore_id,
             bool* warned = nullptr);

// Mean binary cross entropy over 2-logit rows; labels are column indices.
Var itm_loss(Tape& t, const std::vector<Var>& logit_rows, const std::vector<int>& labels);

struct HardNegatives {
  std::vector<int> text_for_image;  // negative text index per image anchor
  std::vector<int> image_for_text;  // negative image index per text anchor
  int fallback_count = 0;           // anchors where no candidate passed theta_sim
};

// Weighted in-batch mining. s_i2t / s_t2i are the in-batch similarity rows
// (diagonal = the positives, excluded from sampling). A candidate j is
// eligible for anchor i only when cos(text_j, text_i) < theta_sim; when no
// candidate is eligible the minimum-similarity one is taken and flagged.
HardNegatives sample_hard_negatives(const Mat& s_i2t, const Mat& s_t2i, const Mat& text_feats,
                                    double theta_sim, Rng& rng);

// Mean over rows of KL(student softmax || exp(teacher_log_probs)).
Var kl_rows(Tape& t, Var student_logits, const Mat& teacher_log_probs);

struct DistillationConfig {
  double lambda = 0.4;    // weight of the distilled loss in the total
  double momentum = 0.995;
  double theta_sim = 0.9;
  void validate() const;
};

// (1 - lambda) * base + lambda * distilled
Var total_loss(Tape& t, Var base, Var distilled, double lambda);

}  // namespace cvl::objectives
