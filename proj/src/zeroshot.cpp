#include "cvl/zeroshot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cvl/errors.hpp"
#include "cvl/synthdata.hpp"
#include "json.hpp"

namespace cvl::zeroshot {

namespace sd = cvl::synthdata;
namespace tp = cvl::textpipe;
using ad::Tape;
using ad::Var;

const ClassPrompts& PromptSet::for_class(const std::string& cls) const {
  auto it = classes.find(cls);
  if (it == classes.end()) throw DataError("prompts: no entry for class '" + cls + "'");
  if (it->second.simple_pos.empty() || it->second.simple_neg.empty())
    throw DataError("prompts: class '" + cls + "' is missing a simple prompt");
  return it->second;
}

void PromptSet::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("prompts: cannot write " + path);
  bool first = true;
  for (const auto& [name, p] : classes) {
    if (!first) out << "\n";
    first = false;
    out << "class: " << name << "\n" << p.simple_pos << "\n" << p.simple_neg << "\n";
    for (const auto& d : p.detailed) out << d << "\n";
  }
}

PromptSet PromptSet::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("prompts: cannot read " + path);
  PromptSet ps;
  std::string line;
  std::string cls;
  std::vector<std::string> block;
  auto flush = [&]() {
    if (cls.empty() && block.empty()) return;
    if (cls.empty()) throw DataError("prompts: lines before any 'class:' header in " + path);
    if (block.size() < 2)
      throw DataError("prompts: class '" + cls + "' needs both simple prompts in " + path);
    ClassPrompts p;
    p.simple_pos = block[0];
    p.simple_neg = block[1];
    p.detailed.assign(block.begin() + 2, block.end());
    if (!ps.classes.emplace(cls, std::move(p)).second)
      throw DataError("prompts: duplicate class '" + cls + "' in " + path);
    cls.clear();
    block.clear();
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
    } else if (line.rfind("class: ", 0) == 0) {
      flush();
      cls = line.substr(7);
      if (cls.empty()) throw DataError("prompts: empty class name in " + path);
    } else {
      if (cls.empty()) throw DataError("prompts: lines before any 'class:' header in " + path);
      block.push_back(line);
    }
  }
  flush();
  if (ps.classes.empty()) throw DataError("prompts: no classes in " + path);
  return ps;
}

PromptSet PromptSet::synthetic_default() {
  using sd::Extent;
  using sd::Horiz;
  using sd::Vert;
  // Five paraphrases per class, covering every zone and both extents.
  static constexpr struct {
    Extent e;
    Horiz h;
    Vert v;
  } kVariants[] = {
      {Extent::small, Horiz::left, Vert::upper},  {Extent::large, Horiz::right, Vert::lower},
      {Extent::small, Horiz::right, Vert::upper}, {Extent::large, Horiz::left, Vert::lower},
      {Extent::large, Horiz::left, Vert::upper},
  };
  PromptSet ps;
  for (int c = 1; c < sd::kNumClasses; ++c) {
    const auto cls = static_cast<sd::ClassId>(c);
    ClassPrompts p;
    p.simple_pos = sd::class_name(cls);
    p.simple_neg = "no " + sd::class_name(cls);
    for (const auto& v : kVariants) {
      sd::FindingSpec f;
      f.cls = cls;
      f.present = true;
      f.extent = v.e;
      f.zone = {v.h, v.v};
      p.detailed.push_back(sd::finding_sentence(f));
    }
    ps.classes.emplace(sd::class_name(cls), std::move(p));
  }
  return ps;
}

std::string score_to_json_line(const DetectionScore& s) {
  nlohmann::json j;
  j["study_id"] = s.study_id;
  j["class"] = s.cls;
  j["mode"] = s.mode;
  j["score"] = s.score;
  return j.dump();
}

DetectionScore score_from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("score line: ") + e.what());
  }
  if (!j.contains("study_id") || !j.contains("class") || !j.contains("mode") ||
      !j.contains("score"))
    throw DataError("score line: missing field in " + line);
  DetectionScore s;
  s.study_id = j.at("study_id").get<std::string>();
  s.cls = j.at("class").get<std::string>();
  s.mode = j.at("mode").get<std::string>();
  s.score = j.at("score").get<double>();
  if (s.mode != "simple" && s.mode != "detailed" && s.mode != "error")
    throw DataError("score line: unknown mode '" + s.mode + "'");
  if (!std::isfinite(s.score) || s.score < 0.0 || s.score > 1.0)
    throw DataError("score line: score outside [0, 1] for " + s.study_id);
  return s;
}

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

int resolve_layer(int requested, int fusion_layers) {
  const int layer = requested < 0 ? fusion_layers - 1 : requested;
  if (requested < -1 || layer >= fusion_layers)
    throw DataError("gradcam: layer " + std::to_string(requested) + " outside 0.." +
                    std::to_string(fusion_layers - 1));
  return layer;
}

}  // namespace

Scorer::Scorer(const model::ModelConfig& cfg, model::ParamStore& params,
               const textpipe::Vocabulary& vocab, ScorerConfig sc)
    : net_(cfg), params_(params), vocab_(vocab), sc_(sc) {
  if (cfg.vocab_size != vocab.size())
    throw DataError("scorer: config vocab_size " + std::to_string(cfg.vocab_size) +
                    " vs vocabulary of " + std::to_string(vocab.size()));
  resolve_layer(sc_.gradcam_layer, cfg.fusion_layers);  // fail early on bad config
  if (!(sc_.theta_corr >= 0.0)) throw DataError("scorer: negative correction threshold");
}

std::vector<double> Scorer::match_logits(const Mat& image,
                                         const std::vector<std::string>& texts) const {
  Tape tape;
  model::Binder b(tape, params_, /*trainable=*/false);
  const Var img_seq = net_.encode_image(b, image);
  std::vector<double> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    const auto tokens = tp::tokenize(vocab_, text, net_.config().max_len);
    const Var txt_seq = net_.encode_text(b, tokens);
    if (sc_.kind == ScorerConfig::ScoreKind::itm) {
      const model::FusePass fp = net_.fuse(b, img_seq, txt_seq);
      const Var logits = net_.itm_logits(b, tape.slice_rows(fp.t2i.seq, 0, 1),
                                         tape.slice_rows(fp.i2t.seq, 0, 1));
      out.push_back(logits.val()(0, 1) - logits.val()(0, 0));
    } else {
      const Var vi = net_.project(b, tape.slice_rows(img_seq, 0, 1), model::Modality::image);
      const Var vt = net_.project(b, tape.slice_rows(txt_seq, 0, 1), model::Modality::text);
      const double tau = net_.tau(b).val()(0, 0);
      out.push_back(vi.val().row(0).dot(vt.val().row(0)) / tau);
    }
  }
  return out;
}

double Scorer::match_logit(const Mat& image, const std::string& text) const {
  return match_logits(image, {text})[0];
}

double Scorer::match_score(const Mat& image, const std::string& text) const {
  return sigmoid(match_logit(image, text));
}

double Scorer::classify_simple(const Mat& image, const std::string& cls,
                               const PromptSet& prompts) const {
  const auto& p = prompts.for_class(cls);
  const auto logits = match_logits(image, {p.simple_pos, p.simple_neg});
  return sigmoid(logits[0] - logits[1]);
}

double Scorer::classify_detailed(const Mat& image, const std::string& cls,
                                 const PromptSet& prompts) const {
  const auto& p = prompts.for_class(cls);
  if (p.detailed.empty())
    throw DataError("prompts: class '" + cls + "' has no detailed descriptions");
  std::vector<std::string> texts = p.detailed;
  texts.push_back(p.simple_neg);
  const auto logits = match_logits(image, texts);
  double pos = 0.0;
  for (std::size_t i = 0; i + 1 < logits.size(); ++i) pos += logits[i];
  pos /= static_cast<double>(logits.size() - 1);
  return sigmoid(pos - logits.back());
}

double Scorer::detect_error(const Mat& image, const std::string& report) const {
  return 1.0 - match_score(image, report);
}

CorrectionResult Scorer::correct_report(const Mat& image, const std::string& report) const {
  const auto tokens = tp::tokenize(vocab_, report, net_.config().max_len);
  std::vector<int> ids(tokens.ids.begin(), tokens.ids.begin() + tokens.length);

  Tape tape;
  model::Binder b(tape, params_, /*trainable=*/false);
  const Var img_seq = net_.encode_image(b, image);

  CorrectionResult result;
  std::vector<int> corrected = ids;
  for (int pos = 0; pos < static_cast<int>(ids.size()); ++pos) {
    if (vocab_.is_special(ids[pos])) continue;
    std::vector<int> masked = ids;  // every prediction sees the original context
    masked[pos] = tp::Vocabulary::kMask;
    const Var txt_seq = net_.encode_text(b, masked);
    const model::PathPass fused = net_.fuse_path(b, model::FusionPath::t2i, txt_seq, img_seq);
    const Var logits = net_.mlm_logits(b, tape.slice_rows(fused.seq, pos, 1));
    const Eigen::RowVectorXd row = logits.val().row(0);
    const double max_logit = row.maxCoeff();
    const double denom = (row.array() - max_logit).exp().sum();

    // Candidates are report words; special tokens never land in a report.
    int best = -1;
    for (int id = tp::Vocabulary::kNumSpecials; id < vocab_.size(); ++id)
      if (best < 0 || row(id) > row(best)) best = id;
    const double prob = std::exp(row(best) - max_logit) / denom;
    if (best != ids[pos] && prob >= sc_.theta_corr) {
      corrected[pos] = best;
      result.substitutions.push_back({pos, vocab_.token(ids[pos]), vocab_.token(best), prob});
    }
  }
  result.report = tp::detokenize(vocab_, corrected);
  return result;
}

Mat bilinear_upsample(const Mat& grid, Eigen::Index out_rows, Eigen::Index out_cols) {
  if (grid.size() == 0 || out_rows < 1 || out_cols < 1)
    throw DataError("upsample: empty input or output");
  Mat out(out_rows, out_cols);
  const auto sample_axis = [](Eigen::Index out_i, Eigen::Index out_n, Eigen::Index in_n) {
    if (out_n == 1 || in_n == 1) return std::pair<Eigen::Index, double>{0, 0.0};
    const double pos = static_cast<double>(out_i) * (in_n - 1) / static_cast<double>(out_n - 1);
    Eigen::Index lo = static_cast<Eigen::Index>(pos);
    if (lo >= in_n - 1) lo = in_n - 2;
    return std::pair<Eigen::Index, double>{lo, pos - static_cast<double>(lo)};
  };
  for (Eigen::Index r = 0; r < out_rows; ++r) {
    const auto [r0, fr] = sample_axis(r, out_rows, grid.rows());
    const Eigen::Index r1 = std::min(r0 + 1, grid.rows() - 1);
    for (Eigen::Index c = 0; c < out_cols; ++c) {
      const auto [c0, fc] = sample_axis(c, out_cols, grid.cols());
      const Eigen::Index c1 = std::min(c0 + 1, grid.cols() - 1);
      const double top = grid(r0, c0) + fc * (grid(r0, c1) - grid(r0, c0));
      const double bot = grid(r1, c0) + fc * (grid(r1, c1) - grid(r1, c0));
      out(r, c) = top + fr * (bot - top);
    }
  }
  return out;
}

std::vector<WordHeatmap> heatmaps_from_attention(const std::vector<std::vector<Var>>& attn,
                                                 int layer, const std::vector<int>& ids,
                                                 const textpipe::Vocabulary& vocab,
                                                 const model::ModelConfig& cfg) {
  const int use = resolve_layer(layer, static_cast<int>(attn.size()));
  const auto& heads = attn[use];
  if (heads.empty()) throw DataError("gradcam: no attention heads recorded");

  const int side = cfg.patches_per_side();
  Mat relevance = Mat::Zero(heads[0].val().rows(), heads[0].val().cols());
  for (const auto& h : heads) {
    // Grad-CAM on the attention map itself: weight each probability by how
    // much the target wants it, then rectify.
    relevance += (h.val().array() * h.grad().array()).cwiseMax(0.0).matrix();
  }
  relevance /= static_cast<double>(heads.size());

  if (relevance.cols() != cfg.num_patches() + 1)
    throw DataError("gradcam: key axis is not CLS + patches");
  std::vector<WordHeatmap> out;
  for (int q = 0; q < static_cast<int>(ids.size()); ++q) {
    if (vocab.is_special(ids[q])) continue;
    WordHeatmap hm;
    hm.token = vocab.token(ids[q]);
    hm.position = q;
    hm.patch_grid = Mat(side, side);
    for (int p = 0; p < cfg.num_patches(); ++p)
      hm.patch_grid(p / side, p % side) = relevance(q, p + 1);  // col 0 is the image CLS
    hm.upsampled = bilinear_upsample(hm.patch_grid, cfg.image_size, cfg.image_size);
    double total = 0.0;
    std::array<double, 4> mass{};
    for (Eigen::Index i = 0; i < hm.upsampled.rows(); ++i)
      for (Eigen::Index j = 0; j < hm.upsampled.cols(); ++j) {
        const int quad =
            sd::quadrant_of_pixel(i, j, hm.upsampled.rows(), hm.upsampled.cols());
        mass[static_cast<std::size_t>(quad)] += hm.upsampled(i, j);
        total += hm.upsampled(i, j);
      }
    if (total > 0.0)
      for (auto& m : mass) m /= total;
    hm.quadrant_mass = mass;
    out.push_back(std::move(hm));
  }
  return out;
}

std::vector<WordHeatmap> Scorer::attention_gradcam(const Mat& image,
                                                   const std::string& text) const {
  const int fusion_layers = net_.config().fusion_layers;
  resolve_layer(sc_.gradcam_layer, fusion_layers);

  Tape tape;
  model::Binder b(tape, params_, /*trainable=*/false);
  const Var img_seq = net_.encode_image(b, image);
  const auto tokens = tp::tokenize(vocab_, text, net_.config().max_len);
  const Var txt_seq = net_.encode_text(b, tokens);

  model::PathHooks hooks;
  hooks.attn_grad_roots = true;
  const model::FusePass fp = net_.fuse(b, img_seq, txt_seq, &hooks, nullptr);
  const Var logits = net_.itm_logits(b, tape.slice_rows(fp.t2i.seq, 0, 1),
                                     tape.slice_rows(fp.i2t.seq, 0, 1));
  const Var target =
      tape.sub(tape.slice_cols(logits, 1, 1), tape.slice_cols(logits, 0, 1));
  tape.backward(target);

  const std::vector<int> ids(tokens.ids.begin(), tokens.ids.begin() + tokens.length);
  return heatmaps_from_attention(fp.t2i.attn, sc_.gradcam_layer, ids, vocab_, net_.config());
}

void write_pgm(const std::string& path, const Mat& img, double lo, double hi) {
  if (img.size() == 0) throw DataError("pgm: empty image");
  if (!(hi > lo)) throw DataError("pgm: empty intensity range");
  std::ofstream out(path);
  if (!out) throw DataError("pgm: cannot write " + path);
  out << "P2\n" << img.cols() << " " << img.rows() << "\n255\n";
  for (Eigen::Index i = 0; i < img.rows(); ++i) {
    for (Eigen::Index j = 0; j < img.cols(); ++j) {
      const double t = std::clamp((img(i, j) - lo) / (hi - lo), 0.0, 1.0);
      out << static_cast<int>(std::lround(t * 255.0)) << (j + 1 == img.cols() ? "" : " ");
    }
    out << "\n";
  }
}

}  // namespace cvl::zeroshot
