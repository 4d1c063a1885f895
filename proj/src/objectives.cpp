#include "cvl/objectives.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include "cvl/errors.hpp"

namespace cvl::objectives {

namespace {

constexpr double kUnitNormTol = 1e-5;

void check_unit_rows(const Mat& rows, const char* who) {
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const double n = rows.row(r).norm();
    if (std::abs(n - 1.0) > kUnitNormTol) {
      throw DataError(std::string(who) + ": row " + std::to_string(r) +
                      " has norm " + std::to_string(n) + ", expected unit");
    }
  }
}

void write_raw(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_raw(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw DataError("feature queue: truncated stream");
}

}  // namespace

FeatureQueue::FeatureQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
  if (capacity <= 0 || dim <= 0) {
    throw DataError("feature queue: capacity and dim must be positive");
  }
  data_ = Mat::Zero(capacity, dim);
}

void FeatureQueue::enqueue(const Mat& rows) {
  if (rows.cols() != dim_) {
    throw DataError("feature queue: expected " + std::to_string(dim_) + " columns, got " +
                    std::to_string(rows.cols()));
  }
  check_unit_rows(rows, "feature queue");
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    data_.row(cursor_) = rows.row(r);
    cursor_ = (cursor_ + 1) % capacity_;
    if (size_ < capacity_) ++size_;
  }
}

Mat FeatureQueue::snapshot() const {
  Mat out(size_, dim_);
  // When full, the oldest row sits at the write cursor; otherwise at 0.
  const int start = (size_ == capacity_) ? cursor_ : 0;
  for (int r = 0; r < size_; ++r) {
    out.row(r) = data_.row((start + r) % capacity_);
  }
  return out;
}

void FeatureQueue::serialize(std::ostream& os) const {
  const std::int64_t header[4] = {capacity_, dim_, size_, cursor_};
  write_raw(os, header, sizeof(header));
  write_raw(os, data_.data(), sizeof(double) * static_cast<std::size_t>(capacity_) *
                                  static_cast<std::size_t>(dim_));
}

FeatureQueue FeatureQueue::deserialize(std::istream& is) {
  std::int64_t header[4];
  read_raw(is, header, sizeof(header));
  if (header[0] <= 0 || header[1] <= 0 || header[2] < 0 || header[2] > header[0] ||
      header[3] < 0 || header[3] >= header[0]) {
    throw DataError("feature queue: corrupt header");
  }
  FeatureQueue q(static_cast<int>(header[0]), static_cast<int>(header[1]));
  q.size_ = static_cast<int>(header[2]);
  q.cursor_ = static_cast<int>(header[3]);
  read_raw(is, q.data_.data(), sizeof(double) * static_cast<std::size_t>(q.capacity_) *
                                   static_cast<std::size_t>(q.dim_));
  return q;
}

bool FeatureQueue::operator==(const FeatureQueue& other) const {
  return capacity_ == other.capacity_ && dim_ == other.dim_ && size_ == other.size_ &&
         cursor_ == other.cursor_ && data_ == other.data_;
}

double similarity(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b, bool checked) {
  if (a.size() != b.size()) throw DataError("similarity: dimension mismatch");
  if (checked) {
    if (std::abs(a.norm() - 1.0) > kUnitNormTol || std::abs(b.norm() - 1.0) > kUnitNormTol) {
      throw DataError("similarity: inputs must be unit-norm");
    }
  }
  return a.dot(b);
}

Eigen::RowVectorXd normalized_similarities(const Eigen::RowVectorXd& anchor,
                                           const Mat& candidates, double tau) {
  if (candidates.rows() == 0) throw DataError("normalized_similarities: no candidates");
  if (candidates.cols() != anchor.size()) {
    throw DataError("normalized_similarities: dimension mismatch");
  }
  if (tau <= 0.0) throw DataError("normalized_similarities: tau must be positive");
  Eigen::RowVectorXd logits = (anchor * candidates.transpose()) / tau;
  const double mx = logits.maxCoeff();
  Eigen::RowVectorXd e = (logits.array() - mx).exp();
  return e / e.sum();
}

Mat softmax_rows_value(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

Mat log_softmax_rows_value(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

Var infonce(Tape& t, Var anchors, const Mat& candidates, const std::vector<int>& positive_cols,
            Var tau) {
  const auto rows = static_cast<std::size_t>(anchors.rows());
  std::vector<double> w(rows, 1.0 / static_cast<double>(rows));
  return infonce_weighted(t, anchors, candidates, positive_cols, w, tau);
}

Var infonce_weighted(Tape& t, Var anchors, const Mat& candidates,
                     const std::vector<int>& positive_cols, const std::vector<double>& row_weights,
                     Var tau) {
  const auto rows = anchors.rows();
  if (candidates.rows() == 0) throw DataError("infonce: no candidates");
  if (candidates.cols() != anchors.cols()) throw DataError("infonce: dimension mismatch");
  if (positive_cols.size() != static_cast<std::size_t>(rows) ||
      row_weights.size() != static_cast<std::size_t>(rows)) {
    throw DataError("infonce: one positive column and weight per anchor row");
  }
  Var logits = t.div_scalar(t.matmul_nt(anchors, t.constant(candidates)), tau);
  Var lp = t.log_softmax_rows(logits);
  Mat pick = Mat::Zero(rows, candidates.rows());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int c = positive_cols[static_cast<std::size_t>(r)];
    if (c < 0 || c >= candidates.rows()) throw DataError("infonce: positive column out of range");
    pick(r, c) = -row_weights[static_cast<std::size_t>(r)];
  }
  return t.weighted_sum(lp, pick);
}

namespace {

Mat stack_candidates(const Mat& teacher_rows, const FeatureQueue& queue, const char* who) {
  check_unit_rows(teacher_rows, who);
  const Mat snap = queue.snapshot();
  Mat cand(teacher_rows.rows() + snap.rows(), teacher_rows.cols());
  cand.topRows(teacher_rows.rows()) = teacher_rows;
  if (snap.rows() > 0) {
    if (snap.cols() != teacher_rows.cols()) {
      throw DataError(std::string(who) + ": queue dimension mismatch");
    }
    cand.bottomRows(snap.rows()) = snap;
  }
  return cand;
}

Var stack_rows(Tape& t, const std::vector<Var>& feats) {
  std::vector<Var> rows(feats.begin(), feats.end());
  return t.concat_rows(rows);
}

}  // namespace

ContrastiveResult contrastive_loss(Tape& t, const std::vector<Var>& img_feats,
                                   const std::vector<Var>& txt_feats, const Mat& teacher_img,
                                   const Mat& teacher_txt, const FeatureQueue& img_queue,
                                   const FeatureQueue& txt_queue, Var tau) {
  const auto b = static_cast<Eigen::Index>(img_feats.size());
  if (b == 0 || txt_feats.size() != static_cast<std::size_t>(b)) {
    throw DataError("contrastive_loss: need matching nonempty image and text batches");
  }
  if (teacher_img.rows() != b || teacher_txt.rows() != b) {
    throw DataError("contrastive_loss: teacher batch size mismatch");
  }
  const Mat cand_img = stack_candidates(teacher_img, img_queue, "contrastive_loss image");
  const Mat cand_txt = stack_candidates(teacher_txt, txt_queue, "contrastive_loss text");
  if (cand_img.rows() < 2 || cand_txt.rows() < 2) {
    throw DataError("contrastive_loss: no negatives (batch of 1 with empty queue)");
  }

  Var f_img = stack_rows(t, img_feats);
  Var f_txt = stack_rows(t, txt_feats);
  std::vector<int> pos(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) pos[static_cast<std::size_t>(i)] = static_cast<int>(i);

  Var h_i2t = infonce(t, f_img, cand_txt, pos, tau);
  Var h_t2i = infonce(t, f_txt, cand_img, pos, tau);
  Var h_i2i = infonce(t, f_img, cand_img, pos, tau);
  Var h_t2t = infonce(t, f_txt, cand_txt, pos, tau);

  ContrastiveResult out;
  out.cmc = t.scale(t.add(h_i2t, h_t2i), 0.5);
  out.imc = t.scale(t.add(h_i2i, h_t2t), 0.5);
  out.contrastive = t.add(out.cmc, out.imc);
  return out;
}

Var sentence_contrastive_loss(Tape& t, const std::vector<Var>& img_feats,
                              const std::vector<std::vector<Var>>& sent_feats,
                              const Mat& teacher_img, const Mat& teacher_txt,
                              const std::vector<Mat>& teacher_sent, const FeatureQueue& img_queue,
                              const FeatureQueue& txt_queue, Var tau) {
  const auto b = static_cast<Eigen::Index>(img_feats.size());
  if (b == 0 || sent_feats.size() != static_cast<std::size_t>(b) ||
      teacher_sent.size() != static_cast<std::size_t>(b)) {
    throw DataError("sentence_contrastive_loss: batch size mismatch");
  }
  if (teacher_img.rows() != b || teacher_txt.rows() != b) {
    throw DataError("sentence_contrastive_loss: teacher batch size mismatch");
  }
  const Mat cand_img = stack_candidates(teacher_img, img_queue, "sentence_contrastive_loss image");
  check_unit_rows(teacher_txt, "sentence_contrastive_loss text");
  const Mat txt_snap = txt_queue.snapshot();
  if (cand_img.rows() < 2 || teacher_txt.rows() + txt_snap.rows() < 2) {
    throw DataError("sentence_contrastive_loss: no negatives");
  }

  // Sentence-to-image: every sentence is an anchor against the shared image
  // candidates; its positive is its own study's image at column k.
  std::vector<Var> anchors;
  std::vector<int> pos_cols;
  std::vector<double> weights;
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto& sents = sent_feats[static_cast<std::size_t>(k)];
    if (sents.empty()) throw DataError("sentence_contrastive_loss: sample with no sentences");
    if (teacher_sent[static_cast<std::size_t>(k)].rows() !=
        static_cast<Eigen::Index>(sents.size())) {
      throw DataError("sentence_contrastive_loss: teacher sentence count mismatch");
    }
    const double w = 0.5 / (static_cast<double>(b) * static_cast<double>(sents.size()));
    for (const Var& s : sents) {
      anchors.push_back(s);
      pos_cols.push_back(static_cast<int>(k));
      weights.push_back(w);
    }
  }
  Var total = infonce_weighted(t, t.concat_rows(anchors), cand_img, pos_cols, weights, tau);

  // Image-to-sentence: the image of study k scores against the batch text
  // candidates with slot k holding the sentence instead of the full report.
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto& sents = sent_feats[static_cast<std::size_t>(k)];
    const Mat& tsent = teacher_sent[static_cast<std::size_t>(k)];
    check_unit_rows(tsent, "sentence_contrastive_loss sentence");
    const double w = 0.5 / (static_cast<double>(b) * static_cast<double>(sents.size()));
    for (std::size_t j = 0; j < sents.size(); ++j) {
      Mat cand(teacher_txt.rows() + txt_snap.rows(), teacher_txt.cols());
      cand.topRows(teacher_txt.rows()) = teacher_txt;
      cand.row(k) = tsent.row(static_cast<Eigen::Index>(j));
      if (txt_snap.rows() > 0) cand.bottomRows(txt_snap.rows()) = txt_snap;
      Var term = infonce_weighted(t, img_feats[static_cast<std::size_t>(k)], cand,
                                  {static_cast<int>(k)}, {w}, tau);
      total = t.add(total, term);
    }
  }
  return total;
}

MlmTerm mlm_term(Tape& t, Var vocab_logits, const std::vector<int>& targets, int ignore_id) {
  if (targets.size() != static_cast<std::size_t>(vocab_logits.rows())) {
    throw DataError("mlm: one target per logit row");
  }
  MlmTerm out;
  Mat pick = Mat::Zero(vocab_logits.rows(), vocab_logits.cols());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const int id = targets[r];
    if (id == ignore_id) continue;
    if (id < 0 || id >= vocab_logits.cols()) {
      throw DataError("mlm: target id " + std::to_string(id) + " out of vocabulary");
    }
    pick(static_cast<Eigen::Index>(r), id) = -1.0;
    ++out.count;
  }
  if (out.count == 0) {
    out.ce_sum = t.constant(Mat::Zero(1, 1));
  } else {
    out.ce_sum = t.weighted_sum(t.log_softmax_rows(vocab_logits), pick);
  }
  return out;
}

Var mlm_loss(Tape& t, Var vocab_logits, const std::vector<int>& targets, int ignore_id,
             bool* warned) {
  MlmTerm term = mlm_term(t, vocab_logits, targets, ignore_id);
  if (warned != nullptr) *warned = (term.count == 0);
  if (term.count == 0) return term.ce_sum;
  return t.scale(term.ce_sum, 1.0 / term.count);
}

Var itm_loss(Tape& t, const std::vector<Var>& logit_rows, const std::vector<int>& labels) {
  if (logit_rows.empty() || labels.size() != logit_rows.size()) {
    throw DataError("itm_loss: need one label per logit row");
  }
  std::vector<Var> rows(logit_rows.begin(), logit_rows.end());
  Var stacked = t.concat_rows(rows);
  if (stacked.cols() != 2) throw DataError("itm_loss: expected 2-way logits");
  Mat pick = Mat::Zero(stacked.rows(), 2);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] != 0 && labels[r] != 1) throw DataError("itm_loss: labels are 0 or 1");
    pick(static_cast<Eigen::Index>(r), labels[r]) = -1.0 / static_cast<double>(labels.size());
  }
  return t.weighted_sum(t.log_softmax_rows(stacked), pick);
}

namespace {

int sample_negative(const Eigen::RowVectorXd& weights, const Eigen::RowVectorXd& anchor_text_sims,
                    int self, double theta_sim, Rng& rng, int* fallback_count) {
  const auto n = weights.size();
  std::vector<int> eligible;
  double total = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == self) continue;
    if (anchor_text_sims(j) < theta_sim) {
      eligible.push_back(static_cast<int>(j));
      total += weights(j);
    }
  }
  if (eligible.empty()) {
    // Every candidate's text is near-identical to the positive; take the
    // least similar one rather than training on a de-facto duplicate.
    ++*fallback_count;
    int best = -1;
    double best_sim = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == self) continue;
      if (anchor_text_sims(j) < best_sim) {
        best_sim = anchor_text_sims(j);
        best = static_cast<int>(j);
      }
    }
    return best;
  }
  if (total <= 0.0) {
    return eligible[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(eligible.size())))];
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (int j : eligible) {
    acc += weights(j);
    if (u < acc) return j;
  }
  return eligible.back();
}

}  // namespace

HardNegatives sample_hard_negatives(const Mat& s_i2t, const Mat& s_t2i, const Mat& text_feats,
                                    double theta_sim, Rng& rng) {
  const auto b = s_i2t.rows();
  if (b < 2) throw DataError("sample_hard_negatives: need a batch of at least 2");
  if (s_i2t.cols() != b || s_t2i.rows() != b || s_t2i.cols() != b || text_feats.rows() != b) {
    throw DataError("sample_hard_negatives: square in-batch weights expected");
  }
  check_unit_rows(text_feats, "sample_hard_negatives");
  const Mat text_sims = text_feats * text_feats.transpose();

  HardNegatives out;
  out.text_for_image.resize(static_cast<std::size_t>(b));
  out.image_for_text.resize(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) {
    out.text_for_image[static_cast<std::size_t>(i)] = sample_negative(
        s_i2t.row(i), text_sims.row(i), static_cast<int>(i), theta_sim, rng, &out.fallback_count);
  }
  for (Eigen::Index i = 0; i < b; ++i) {
    // The candidate image j comes paired with text j; the eligibility test
    // still compares texts, anchored at this sample's own text.
    out.image_for_text[static_cast<std::size_t>(i)] = sample_negative(
        s_t2i.row(i), text_sims.row(i), static_cast<int>(i), theta_sim, rng, &out.fallback_count);
  }
  return out;
}

Var kl_rows(Tape& t, Var student_logits, const Mat& teacher_log_probs) {
  if (teacher_log_probs.rows() != student_logits.rows() ||
      teacher_log_probs.cols() != student_logits.cols()) {
    throw DataError("kl_rows: teacher shape mismatch");
  }
  if (student_logits.rows() == 0) throw DataError("kl_rows: empty input");
  Var lp = t.log_softmax_rows(student_logits);
  Var p = t.exp(lp);
  Var diff = t.sub(lp, t.constant(teacher_log_probs));
  return t.scale(t.sum(t.cmul(p, diff)), 1.0 / static_cast<double>(student_logits.rows()));
}

void DistillationConfig::validate() const {
  if (lambda < 0.0 || lambda > 1.0) throw DataError("distillation: lambda must lie in [0, 1]");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw DataError("distillation: momentum must lie in [0, 1)");
  }
  if (theta_sim <= -1.0 || theta_sim > 1.0) {
    throw DataError("distillation: theta_sim must lie in (-1, 1]");
  }
}

Var total_loss(Tape& t, Var base, Var distilled, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw DataError("total_loss: lambda must lie in [0, 1]");
  return t.add(t.scale(base, 1.0 - lambda), t.scale(distilled, lambda));
}

}  // namespace cvl::objectives
