#include "cvl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cvl/errors.hpp"
#include "json.hpp"

namespace cvl::trainer {

using ad::Tape;
using ad::Var;

void TrainConfig::validate() const {
  if (epochs < 0) throw DataError("train config: epochs must be >= 0");
  if (warmup_epochs < 0 || warmup_epochs > epochs) {
    throw DataError("train config: warmup epochs must lie in [0, epochs]");
  }
  if (batch_size < 1) throw DataError("train config: batch size must be >= 1");
  if (lr_init <= 0.0 || lr_peak <= 0.0 || lr_init > lr_peak) {
    throw DataError("train config: need 0 < lr_init <= lr_peak");
  }
  if (weight_decay < 0.0) throw DataError("train config: weight decay must be >= 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw DataError("train config: betas must lie in [0, 1)");
  }
  if (adam_eps <= 0.0) throw DataError("train config: adam eps must be positive");
  if (clip_norm <= 0.0) throw DataError("train config: clip norm must be positive");
  if (lambda < 0.0 || lambda > 1.0) throw DataError("train config: lambda must lie in [0, 1]");
  if (ema_momentum <= 0.0 || ema_momentum >= 1.0) {
    throw DataError("train config: ema momentum must lie in (0, 1)");
  }
  if (theta_sim <= -1.0 || theta_sim > 1.0) {
    throw DataError("train config: theta_sim must lie in (-1, 1]");
  }
  if (queue_capacity < 1) throw DataError("train config: queue capacity must be >= 1");
  if (mask_rate < 0.0 || mask_rate > 1.0) {
    throw DataError("train config: mask rate must lie in [0, 1]");
  }
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                   double lr_init, double lr_peak) {
  if (total_steps <= 0) throw DataError("lr_schedule: empty schedule");
  if (step < 0 || step >= total_steps) throw DataError("lr_schedule: step outside schedule");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw DataError("lr_schedule: warmup outside schedule");
  }
  if (step < warmup_steps) {
    if (warmup_steps == 1) return lr_peak;
    return lr_init + (lr_peak - lr_init) * static_cast<double>(step) /
                         static_cast<double>(warmup_steps - 1);
  }
  // Cosine is anchored at the last warmup step (value lr_peak) and reaches 0
  // at the final step.
  const std::int64_t anchor = warmup_steps > 0 ? warmup_steps - 1 : 0;
  if (total_steps - 1 == anchor) return lr_peak;
  const double t = static_cast<double>(step - anchor) / static_cast<double>(total_steps - 1 - anchor);
  return lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || eps <= 0.0 ||
      weight_decay < 0.0) {
    throw DataError("adamw: invalid hyperparameters");
  }
}

void AdamW::step(model::ParamStore& params, const std::map<std::string, Mat>& grads, double lr) {
  for (const auto& [name, g] : grads) {
    if (!params.has(name)) throw DataError("adamw: gradient for unknown parameter " + name);
    (void)g;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params.all_mutable()) {
    Mat g;
    auto it = grads.find(name);
    if (it != grads.end() && it->second.size() > 0) {
      if (it->second.rows() != p.rows() || it->second.cols() != p.cols()) {
        throw DataError("adamw: gradient shape mismatch for " + name);
      }
      g = it->second;
    } else {
      g = Mat::Zero(p.rows(), p.cols());
    }
    Mat& m = m_[name];
    Mat& v = v_[name];
    if (m.size() == 0) {
      m = Mat::Zero(p.rows(), p.cols());
      v = Mat::Zero(p.rows(), p.cols());
    } else if (m.rows() != p.rows() || m.cols() != p.cols()) {
      throw DataError("adamw: stale moment shape for " + name);
    }
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    const Mat update =
        lr * ((m / bc1).array() / ((v / bc2).array().sqrt() + eps_)).matrix() +
        (lr * weight_decay_) * p;
    p -= update;
  }
}

namespace {

void write_raw(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_raw(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw DataError("checkpoint: truncated stream");
}

void write_i64(std::ostream& os, std::int64_t v) { write_raw(os, &v, sizeof(v)); }

std::int64_t read_i64(std::istream& is) {
  std::int64_t v = 0;
  read_raw(is, &v, sizeof(v));
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_i64(os, static_cast<std::int64_t>(s.size()));
  write_raw(os, s.data(), s.size());
}

std::string read_string(std::istream& is) {
  const std::int64_t n = read_i64(is);
  if (n < 0 || n > (1ll << 30)) throw DataError("checkpoint: corrupt string length");
  std::string s(static_cast<std::size_t>(n), '\0');
  if (n > 0) read_raw(is, s.data(), s.size());
  return s;
}

void write_store(std::ostream& os, const std::map<std::string, Mat>& store) {
  write_i64(os, static_cast<std::int64_t>(store.size()));
  for (const auto& [name, mat] : store) {
    write_string(os, name);
    write_i64(os, mat.rows());
    write_i64(os, mat.cols());
    write_raw(os, mat.data(), sizeof(double) * static_cast<std::size_t>(mat.size()));
  }
}

std::map<std::string, Mat> read_store(std::istream& is) {
  const std::int64_t count = read_i64(is);
  if (count < 0 || count > (1 << 20)) throw DataError("checkpoint: corrupt store size");
  std::map<std::string, Mat> store;
  for (std::int64_t k = 0; k < count; ++k) {
    const std::string name = read_string(is);
    const std::int64_t rows = read_i64(is);
    const std::int64_t cols = read_i64(is);
    if (rows < 0 || cols < 0 || rows * cols > (1ll << 28)) {
      throw DataError("checkpoint: corrupt matrix shape for " + name);
    }
    Mat mat(rows, cols);
    read_raw(is, mat.data(), sizeof(double) * static_cast<std::size_t>(mat.size()));
    store[name] = std::move(mat);
  }
  return store;
}

constexpr char kCheckpointMagic[8] = {'C', 'V', 'L', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void AdamW::serialize(std::ostream& os) const {
  write_i64(os, t_);
  write_store(os, m_);
  write_store(os, v_);
}

void AdamW::load_state(std::istream& is) {
  t_ = read_i64(is);
  if (t_ < 0) throw DataError("checkpoint: negative optimizer step count");
  m_ = read_store(is);
  v_ = read_store(is);
}

bool AdamW::state_equals(const AdamW& other) const {
  return t_ == other.t_ && m_ == other.m_ && v_ == other.v_;
}

double global_grad_norm(const std::map<std::string, Mat>& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    (void)name;
    sq += g.squaredNorm();
  }
  return std::sqrt(sq);
}

double clip_gradients(std::map<std::string, Mat>& grads, double max_norm) {
  if (max_norm <= 0.0) throw DataError("clip_gradients: max norm must be positive");
  const double norm = global_grad_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) {
      (void)name;
      g *= s;
    }
  }
  return norm;
}

void ema_update(model::ParamStore& teacher, const model::ParamStore& student, double m) {
  if (m <= 0.0 || m >= 1.0) throw DataError("ema_update: momentum must lie in (0, 1)");
  if (!teacher.same_shapes(student)) throw DataError("ema_update: parameter shape mismatch");
  auto& tm = teacher.all_mutable();
  const auto& sm = student.all();
  for (auto& [name, tv] : tm) {
    tv = m * tv + (1.0 - m) * sm.at(name);
  }
}

std::string StepLog::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["cmc"] = cmc;
  j["imc"] = imc;
  j["sent"] = sent;
  j["mlm"] = mlm;
  j["itm"] = itm;
  j["dist"] = dist;
  j["total"] = total;
  j["tau"] = tau;
  j["lr"] = lr;
  j["grad_norm"] = grad_norm;
  j["mlm_masked"] = mlm_masked;
  j["fallbacks"] = fallback_count;
  return j.dump();
}

void save_checkpoint(const RunState& state, const std::string& path) {
  std::ostringstream buf(std::ios::binary);
  write_raw(buf, kCheckpointMagic, sizeof(kCheckpointMagic));
  write_i64(buf, state.step);
  write_string(buf, state.rng.serialize());
  write_store(buf, state.student.all());
  write_store(buf, state.teacher.all());
  state.optimizer.serialize(buf);
  state.img_queue.serialize(buf);
  state.txt_queue.serialize(buf);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
  const std::string bytes = buf.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

RunState load_checkpoint(const std::string& path, const TrainConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  read_raw(in, magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw DataError("checkpoint: bad magic in " + path + " (wrong file or version)");
  }
  const std::int64_t step = read_i64(in);
  if (step < 0) throw DataError("checkpoint: negative step counter");
  Rng rng = Rng::deserialize(read_string(in));
  auto student = read_store(in);
  auto teacher = read_store(in);
  AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  opt.load_state(in);
  objectives::FeatureQueue img_q = objectives::FeatureQueue::deserialize(in);
  objectives::FeatureQueue txt_q = objectives::FeatureQueue::deserialize(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("checkpoint: trailing bytes in " + path);
  }

  RunState state(std::move(opt), std::move(img_q), std::move(txt_q));
  state.student.all_mutable() = std::move(student);
  state.teacher.all_mutable() = std::move(teacher);
  if (!state.student.same_shapes(state.teacher)) {
    throw DataError("checkpoint: student and teacher shapes disagree");
  }
  state.rng = rng;
  state.step = step;
  return state;
}

Trainer::Trainer(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                 const textpipe::Vocabulary* vocab)
    : mcfg_(mcfg), tcfg_(tcfg), vocab_(vocab), net_(mcfg) {
  mcfg_.validate();
  tcfg_.validate();
  if (vocab_ == nullptr) throw DataError("trainer: vocabulary required");
  if (mcfg_.vocab_size != vocab_->size()) {
    throw DataError("trainer: model vocab_size does not match the vocabulary");
  }
}

RunState Trainer::make_state() const {
  AdamW opt(tcfg_.beta1, tcfg_.beta2, tcfg_.adam_eps, tcfg_.weight_decay);
  objectives::FeatureQueue img_q(tcfg_.queue_capacity, mcfg_.proj_dim);
  objectives::FeatureQueue txt_q(tcfg_.queue_capacity, mcfg_.proj_dim);
  RunState state(std::move(opt), std::move(img_q), std::move(txt_q));
  Rng init_rng(mix_seed(tcfg_.seed, 1));
  model::init_params(state.student, mcfg_, init_rng);
  state.teacher = state.student;  // teacher starts as an exact copy
  state.rng = Rng(mix_seed(tcfg_.seed, 2));
  return state;
}

std::int64_t Trainer::steps_per_epoch(std::size_t corpus_size) const {
  return static_cast<std::int64_t>(corpus_size) / tcfg_.batch_size;
}

namespace {

struct SampleText {
  textpipe::TokenizedText tokens;
  textpipe::MaskedBatch masked;
  std::vector<textpipe::TokenizedText> sentences;
  bool reuse_report_for_sentence = false;  // single sentence identical to report
};

}  // namespace

StepLog Trainer::train_step(RunState& state, const std::vector<const synthdata::Study*>& batch,
                            std::int64_t total_steps) {
  const int b = static_cast<int>(batch.size());
  if (b < 1) throw DataError("train_step: empty batch");
  if (state.step >= total_steps) throw DataError("train_step: schedule exhausted");
  const std::int64_t warmup_steps = total_steps * tcfg_.warmup_epochs / tcfg_.epochs;
  const double lr = lr_schedule(state.step, total_steps, warmup_steps, tcfg_.lr_init,
                                tcfg_.lr_peak);
  const double tau_val = state.student.at("tau")(0, 0);
  const int proj = mcfg_.proj_dim;

  // Tokenize and draw the masking for every sample, in batch order, before
  // any other randomness so the draw sequence is stable.
  std::vector<SampleText> texts(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    SampleText& st = texts[static_cast<std::size_t>(i)];
    st.tokens = textpipe::tokenize(*vocab_, batch[static_cast<std::size_t>(i)]->report,
                                   mcfg_.max_len);
    st.masked = textpipe::mask_tokens(*vocab_, st.tokens, tcfg_.mask_rate, state.rng);
    const std::vector<std::string> sents =
        textpipe::split_sentences(batch[static_cast<std::size_t>(i)]->report);
    for (const std::string& s : sents) {
      st.sentences.push_back(textpipe::tokenize(*vocab_, s, mcfg_.max_len));
    }
    if (st.sentences.empty()) {
      st.sentences.push_back(st.tokens);
    }
    st.reuse_report_for_sentence =
        st.sentences.size() == 1 && st.sentences[0].ids == st.tokens.ids;
  }

  // Momentum teacher forward. Bound as constants: nothing here can receive
  // gradient, which is asserted below.
  Tape teacher_tape;
  model::Binder tb(teacher_tape, state.teacher, /*trainable=*/false);
  Mat t_img(b, proj), t_txt(b, proj);
  std::vector<Mat> t_sent(static_cast<std::size_t>(b));
  std::vector<Mat> teacher_mlm_logq(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const synthdata::Study& study = *batch[ui];
    Var img_seq = net_.encode_image(tb, study.image);
    Var txt_seq = net_.encode_text(tb, texts[ui].tokens);
    t_img.row(i) = net_.project(tb, teacher_tape.slice_rows(img_seq, 0, 1),
                                model::Modality::image).val();
    t_txt.row(i) = net_.project(tb, teacher_tape.slice_rows(txt_seq, 0, 1),
                                model::Modality::text).val();
    if (texts[ui].reuse_report_for_sentence) {
      t_sent[ui] = t_txt.row(i);
    } else {
      Mat rows(static_cast<Eigen::Index>(texts[ui].sentences.size()), proj);
      for (std::size_t s = 0; s < texts[ui].sentences.size(); ++s) {
        Var seq = net_.encode_text(tb, texts[ui].sentences[s]);
        rows.row(static_cast<Eigen::Index>(s)) =
            net_.project(tb, teacher_tape.slice_rows(seq, 0, 1), model::Modality::text).val();
      }
      t_sent[ui] = std::move(rows);
    }
    if (!texts[ui].masked.positions.empty()) {
      textpipe::TokenizedText masked_tokens{texts[ui].masked.ids, texts[ui].tokens.attention_mask,
                                            texts[ui].tokens.length};
      Var masked_seq = net_.encode_text(tb, masked_tokens);
      model::PathPass fused =
          net_.fuse_path(tb, model::FusionPath::t2i, masked_seq, img_seq);
      Var logits = net_.mlm_logits(tb, fused.seq);
      Var rows = teacher_tape.gather_rows(logits, texts[ui].masked.positions);
      teacher_mlm_logq[ui] = objectives::log_softmax_rows_value(rows.val());
    }
  }
  for (const auto& [name, var] : tb.bound()) {
    if (var.requires_grad()) {
      throw std::logic_error("teacher parameter " + name + " became gradient-tracked");
    }
  }

  // Candidate sets for this step: the fresh teacher batch plus the queues as
  // they stood before the step.
  const Mat img_snap = state.img_queue.snapshot();
  const Mat txt_snap = state.txt_queue.snapshot();
  Mat cand_img(b + img_snap.rows(), proj), cand_txt(b + txt_snap.rows(), proj);
  cand_img.topRows(b) = t_img;
  if (img_snap.rows() > 0) cand_img.bottomRows(img_snap.rows()) = img_snap;
  cand_txt.topRows(b) = t_txt;
  if (txt_snap.rows() > 0) cand_txt.bottomRows(txt_snap.rows()) = txt_snap;
  const Mat teacher_logq_i2t =
      objectives::log_softmax_rows_value(t_img * cand_txt.transpose() / tau_val);
  const Mat teacher_logq_t2i =
      objectives::log_softmax_rows_value(t_txt * cand_img.transpose() / tau_val);

  // Student forward.
  Tape tape;
  model::Binder sb(tape, state.student, /*trainable=*/true);
  Var tau = net_.tau(sb);
  std::vector<Var> img_seqs(static_cast<std::size_t>(b)), txt_seqs(static_cast<std::size_t>(b));
  std::vector<Var> s_img(static_cast<std::size_t>(b)), s_txt(static_cast<std::size_t>(b));
  std::vector<std::vector<Var>> s_sent(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const synthdata::Study& study = *batch[ui];
    img_seqs[ui] = net_.encode_image(sb, study.image);
    txt_seqs[ui] = net_.encode_text(sb, texts[ui].tokens);
    s_img[ui] = net_.project(sb, tape.slice_rows(img_seqs[ui], 0, 1), model::Modality::image);
    s_txt[ui] = net_.project(sb, tape.slice_rows(txt_seqs[ui], 0, 1), model::Modality::text);
    if (texts[ui].reuse_report_for_sentence) {
      s_sent[ui] = {s_txt[ui]};
    } else {
      for (const auto& sent : texts[ui].sentences) {
        Var seq = net_.encode_text(sb, sent);
        s_sent[ui].push_back(
            net_.project(sb, tape.slice_rows(seq, 0, 1), model::Modality::text));
      }
    }
  }

  objectives::ContrastiveResult con = objectives::contrastive_loss(
      tape, s_img, s_txt, t_img, t_txt, state.img_queue, state.txt_queue, tau);
  Var sent_loss = objectives::sentence_contrastive_loss(
      tape, s_img, s_sent, t_img, t_txt, t_sent, state.img_queue, state.txt_queue, tau);

  // MLM over the fused masked text; one mean across all masked positions in
  // the batch. The same gathered rows feed the distillation term.
  std::vector<Var> mlm_sums;
  std::vector<Var> mlm_rows_all;
  std::vector<Mat> mlm_teacher_all;
  int mlm_count = 0;
  for (int i = 0; i < b; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    if (texts[ui].masked.positions.empty()) continue;
    textpipe::TokenizedText masked_tokens{texts[ui].masked.ids, texts[ui].tokens.attention_mask,
                                          texts[ui].tokens.length};
    Var masked_seq = net_.encode_text(sb, masked_tokens);
    model::PathPass fused = net_.fuse_path(sb, model::FusionPath::t2i, masked_seq, img_seqs[ui]);
    Var logits = net_.mlm_logits(sb, fused.seq);
    Var rows = tape.gather_rows(logits, texts[ui].masked.positions);
    std::vector<int> targets;
    for (int pos : texts[ui].masked.positions) {
      targets.push_back(texts[ui].masked.targets[static_cast<std::size_t>(pos)]);
    }
    objectives::MlmTerm term = objectives::mlm_term(tape, rows, targets, vocab_->ignore_id());
    mlm_sums.push_back(term.ce_sum);
    mlm_count += term.count;
    mlm_rows_all.push_back(rows);
    mlm_teacher_all.push_back(teacher_mlm_logq[ui]);
  }
  StepLog log;
  Var mlm;
  if (mlm_count == 0) {
    mlm = tape.constant(Mat::Zero(1, 1));
    log.mlm_warned = true;
  } else {
    Var total_ce = mlm_sums[0];
    for (std::size_t k = 1; k < mlm_sums.size(); ++k) total_ce = tape.add(total_ce, mlm_sums[k]);
    mlm = tape.scale(total_ce, 1.0 / mlm_count);
  }

  // ITM with mined in-batch negatives. Sampling weights are the normalized
  // student-vs-teacher similarity rows restricted to the batch.
  const Mat s_img_vals = [&] {
    Mat m(b, proj);
    for (int i = 0; i < b; ++i) m.row(i) = s_img[static_cast<std::size_t>(i)].val();
    return m;
  }();
  const Mat s_txt_vals = [&] {
    Mat m(b, proj);
    for (int i = 0; i < b; ++i) m.row(i) = s_txt[static_cast<std::size_t>(i)].val();
    return m;
  }();
  std::vector<Var> itm_rows;
  std::vector<int> itm_labels;
  objectives::HardNegatives hn;
  if (b >= 2) {
    const Mat w_i2t = objectives::softmax_rows_value(s_img_vals * t_txt.transpose() / tau_val);
    const Mat w_t2i = objectives::softmax_rows_value(s_txt_vals * t_img.transpose() / tau_val);
    hn = objectives::sample_hard_negatives(w_i2t, w_t2i, t_txt, tcfg_.theta_sim, state.rng);
  }
  auto itm_pair = [&](int img_idx, int txt_idx) {
    const auto uimg = static_cast<std::size_t>(img_idx);
    const auto utxt = static_cast<std::size_t>(txt_idx);
    model::FusePass fp = net_.fuse(sb, img_seqs[uimg], txt_seqs[utxt]);
    return net_.itm_logits(sb, tape.slice_rows(fp.t2i.seq, 0, 1),
                           tape.slice_rows(fp.i2t.seq, 0, 1));
  };
  for (int i = 0; i < b; ++i) {
    itm_rows.push_back(itm_pair(i, i));
    itm_labels.push_back(1);
    if (b >= 2) {
      itm_rows.push_back(itm_pair(i, hn.text_for_image[static_cast<std::size_t>(i)]));
      itm_labels.push_back(0);
      itm_rows.push_back(itm_pair(hn.image_for_text[static_cast<std::size_t>(i)], i));
      itm_labels.push_back(0);
    }
  }
  Var itm = objectives::itm_loss(tape, itm_rows, itm_labels);

  // Distillation: KL against the teacher's soft rows for both contrastive
  // directions, plus the masked-position rows of the MLM head.
  Var student_logits_i2t =
      tape.div_scalar(tape.matmul_nt(tape.concat_rows(s_img), tape.constant(cand_txt)), tau);
  Var student_logits_t2i =
      tape.div_scalar(tape.matmul_nt(tape.concat_rows(s_txt), tape.constant(cand_img)), tau);
  Var dist = tape.scale(tape.add(objectives::kl_rows(tape, student_logits_i2t, teacher_logq_i2t),
                                 objectives::kl_rows(tape, student_logits_t2i, teacher_logq_t2i)),
                        0.5);
  if (!mlm_rows_all.empty()) {
    Var stacked = tape.concat_rows(mlm_rows_all);
    Mat teacher_stacked(stacked.rows(), stacked.cols());
    Eigen::Index at = 0;
    for (const Mat& m : mlm_teacher_all) {
      teacher_stacked.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
    dist = tape.add(dist, objectives::kl_rows(tape, stacked, teacher_stacked));
  }

  Var base = tape.add(tape.add(tape.add(tape.add(con.cmc, con.imc), sent_loss), mlm), itm);
  Var total = objectives::total_loss(tape, base, dist, tcfg_.lambda);

  if (!std::isfinite(total.val()(0, 0))) {
    throw NumericError("train_step " + std::to_string(state.step) + ": non-finite loss (cmc=" +
                       std::to_string(con.cmc.val()(0, 0)) + " imc=" +
                       std::to_string(con.imc.val()(0, 0)) + " sent=" +
                       std::to_string(sent_loss.val()(0, 0)) + " mlm=" +
                       std::to_string(mlm.val()(0, 0)) + " itm=" +
                       std::to_string(itm.val()(0, 0)) + " dist=" +
                       std::to_string(dist.val()(0, 0)) + " tau=" + std::to_string(tau_val) + ")");
  }
  tape.backward(total);

  std::map<std::string, Mat> grads;
  for (const auto& [name, mat] : state.student.all()) {
    const auto& bound = sb.bound();
    auto it = bound.find(name);
    if (it != bound.end()) {
      grads[name] = it->second.grad();
    } else {
      grads[name] = Mat::Zero(mat.rows(), mat.cols());
    }
  }
  const double grad_norm = clip_gradients(grads, tcfg_.clip_norm);
  if (!std::isfinite(grad_norm)) {
    throw NumericError("train_step " + std::to_string(state.step) +
                       ": non-finite gradient norm");
  }

  state.optimizer.step(state.student, grads, lr);
  double& tau_param = state.student.at("tau")(0, 0);
  tau_param = std::clamp(tau_param, mcfg_.tau_min, mcfg_.tau_max);
  ema_update(state.teacher, state.student, tcfg_.ema_momentum);
  state.img_queue.enqueue(t_img);
  state.txt_queue.enqueue(t_txt);
  state.step += 1;

  log.step = state.step;
  log.cmc = con.cmc.val()(0, 0);
  log.imc = con.imc.val()(0, 0);
  log.sent = sent_loss.val()(0, 0);
  log.mlm = mlm.val()(0, 0);
  log.itm = itm.val()(0, 0);
  log.dist = dist.val()(0, 0);
  log.total = total.val()(0, 0);
  log.tau = tau_param;
  log.lr = lr;
  log.grad_norm = grad_norm;
  log.mlm_masked = mlm_count;
  log.fallback_count = hn.fallback_count;
  return log;
}

std::vector<StepLog> Trainer::train(RunState& state, const std::vector<synthdata::Study>& corpus,
                                    std::ostream* step_log, const EpochHook& on_epoch) {
  if (corpus.empty()) throw DataError("train: empty corpus");
  const std::int64_t spe = steps_per_epoch(corpus.size());
  if (spe < 1) throw DataError("train: corpus smaller than one batch");
  const std::int64_t total = spe * tcfg_.epochs;
  std::vector<StepLog> logs;
  if (state.step >= total) return logs;  // schedule already finished

  const std::int64_t start_epoch = state.step / spe;
  const std::int64_t start_batch = state.step % spe;
  for (std::int64_t epoch = start_epoch; epoch < tcfg_.epochs; ++epoch) {
    // The epoch order is derived statelessly from the seed, so a resumed run
    // regenerates exactly the order the uninterrupted run used.
    std::vector<int> order(corpus.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
    Rng shuffle_rng(mix_seed(tcfg_.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    for (std::size_t k = order.size() - 1; k > 0; --k) {
      const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(static_cast<int>(k + 1)));
      std::swap(order[k], order[j]);
    }
    const std::int64_t first = (epoch == start_epoch) ? start_batch : 0;
    double epoch_total = 0.0;
    for (std::int64_t bi = first; bi < spe; ++bi) {
      std::vector<const synthdata::Study*> batch;
      for (int k = 0; k < tcfg_.batch_size; ++k) {
        batch.push_back(&corpus[static_cast<std::size_t>(
            order[static_cast<std::size_t>(bi * tcfg_.batch_size + k)])]);
      }
      StepLog lg = train_step(state, batch, total);
      if (step_log != nullptr) {
        (*step_log) << lg.to_json() << '\n';
      }
      epoch_total += lg.total;
      logs.push_back(lg);
    }
    if (on_epoch) {
      on_epoch(static_cast<int>(epoch), epoch_total / static_cast<double>(spe - first), state);
    }
  }
  return logs;
}

}  // namespace cvl::trainer
