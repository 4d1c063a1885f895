#include "cvl/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cvl/errors.hpp"
#include "cvl/errorsim.hpp"
#include "cvl/metrics.hpp"
#include "cvl/model.hpp"
#include "cvl/rng.hpp"
#include "cvl/synthdata.hpp"
#include "cvl/textpipe.hpp"
#include "cvl/trainer.hpp"
#include "cvl/version.hpp"
#include "cvl/zeroshot.hpp"
#include "json.hpp"

namespace cvl::cli {
namespace {

namespace es = cvl::errorsim;
namespace fs = std::filesystem;
namespace md = cvl::model;
namespace mx = cvl::metrics;
namespace sd = cvl::synthdata;
namespace tp = cvl::textpipe;
namespace tr = cvl::trainer;
namespace zs = cvl::zeroshot;
using nlohmann::json;

std::string iso_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json model_to_json(const md::ModelConfig& m) {
  json j;
  j["d_model"] = m.d_model;
  j["heads"] = m.heads;
  j["vision_layers"] = m.vision_layers;
  j["text_layers"] = m.text_layers;
  j["fusion_layers"] = m.fusion_layers;
  j["image_size"] = m.image_size;
  j["patch_size"] = m.patch_size;
  j["proj_dim"] = m.proj_dim;
  j["mlp_ratio"] = m.mlp_ratio;
  j["vocab_size"] = m.vocab_size;
  j["max_len"] = m.max_len;
  j["ln_eps"] = m.ln_eps;
  j["tau_init"] = m.tau_init;
  j["tau_min"] = m.tau_min;
  j["tau_max"] = m.tau_max;
  return j;
}

md::ModelConfig model_from_json(const json& j) {
  md::ModelConfig m;
  m.d_model = j.value("d_model", m.d_model);
  m.heads = j.value("heads", m.heads);
  m.vision_layers = j.value("vision_layers", m.vision_layers);
  m.text_layers = j.value("text_layers", m.text_layers);
  m.fusion_layers = j.value("fusion_layers", m.fusion_layers);
  m.image_size = j.value("image_size", m.image_size);
  m.patch_size = j.value("patch_size", m.patch_size);
  m.proj_dim = j.value("proj_dim", m.proj_dim);
  m.mlp_ratio = j.value("mlp_ratio", m.mlp_ratio);
  m.vocab_size = j.value("vocab_size", m.vocab_size);
  m.max_len = j.value("max_len", m.max_len);
  m.ln_eps = j.value("ln_eps", m.ln_eps);
  m.tau_init = j.value("tau_init", m.tau_init);
  m.tau_min = j.value("tau_min", m.tau_min);
  m.tau_max = j.value("tau_max", m.tau_max);
  return m;
}

json train_to_json(const tr::TrainConfig& t) {
  json j;
  j["epochs"] = t.epochs;
  j["warmup_epochs"] = t.warmup_epochs;
  j["batch_size"] = t.batch_size;
  j["lr_init"] = t.lr_init;
  j["lr_peak"] = t.lr_peak;
  j["weight_decay"] = t.weight_decay;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  j["clip_norm"] = t.clip_norm;
  j["lambda"] = t.lambda;
  j["ema_momentum"] = t.ema_momentum;
  j["theta_sim"] = t.theta_sim;
  j["queue_capacity"] = t.queue_capacity;
  j["mask_rate"] = t.mask_rate;
  j["seed"] = t.seed;
  return j;
}

tr::TrainConfig train_from_json(const json& j) {
  tr::TrainConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.warmup_epochs = j.value("warmup_epochs", t.warmup_epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr_init = j.value("lr_init", t.lr_init);
  t.lr_peak = j.value("lr_peak", t.lr_peak);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.clip_norm = j.value("clip_norm", t.clip_norm);
  t.lambda = j.value("lambda", t.lambda);
  t.ema_momentum = j.value("ema_momentum", t.ema_momentum);
  t.theta_sim = j.value("theta_sim", t.theta_sim);
  t.queue_capacity = j.value("queue_capacity", t.queue_capacity);
  t.mask_rate = j.value("mask_rate", t.mask_rate);
  t.seed = j.value("seed", t.seed);
  return t;
}

// allow_existing lets a resumed run write into its own directory.
void ensure_outdir(const std::string& dir, bool force, bool allow_existing = false) {
  if (dir.empty()) throw DataError("output directory not given");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw DataError(dir + " exists and is not a directory");
    if (!allow_existing && !force && !fs::is_empty(dir))
      throw DataError(dir + " is not empty (pass --force to write anyway)");
  } else {
    fs::create_directories(dir);
  }
}

void write_manifest(const std::string& dir, const std::string& command, const json& config,
                    std::uint64_t seed, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, json extra = json::object()) {
  json j;
  j["command"] = command;
  j["version"] = {{"tool", kVersion}, {"git", kGitDescribe}};
  j["timestamp"] = iso_timestamp();
  j["seed"] = seed;
  j["config"] = config;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  for (auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw DataError("cannot write " + dir + "/manifest.json");
  out << j.dump(2) << "\n";
}

json read_manifest(const std::string& run_dir) {
  std::ifstream in(run_dir + "/manifest.json");
  if (!in) throw DataError("no manifest.json in " + run_dir);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest.json: ") + e.what());
  }
}

std::string join_report(const std::vector<std::string>& report) {
  std::string out;
  for (const auto& s : report) {
    if (!out.empty()) out.push_back(' ');
    out += s;
  }
  return out;
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string out;
  int n = 2000;
  std::uint64_t seed = 0;
  int classes = sd::kNumClasses;
  int image_size = 32;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.n < 10) throw DataError("gen-data: need at least 10 studies for 80/10/10 splits");
  if (a.classes < 1 || a.classes > sd::kNumClasses)
    throw DataError("gen-data: classes must be 1.." + std::to_string(sd::kNumClasses));
  ensure_outdir(a.out, a.force);

  std::map<sd::ClassId, double> mix;
  for (int c = 0; c < a.classes; ++c)
    mix[static_cast<sd::ClassId>(c)] = 1.0 / static_cast<double>(a.classes);

  json cfg;
  cfg["n"] = a.n;
  cfg["classes"] = a.classes;
  cfg["image_size"] = a.image_size;
  write_manifest(a.out, "gen-data", cfg, a.seed, {},
                 {a.out + "/train.jsonl", a.out + "/val.jsonl", a.out + "/test.jsonl",
                  a.out + "/prompts.txt"});

  const auto corpus =
      sd::generate_corpus(a.n, mix, a.seed, sd::RenderConfig{a.image_size, a.image_size});
  const int n_val = a.n / 10;
  const int n_test = a.n / 10;
  const int n_train = a.n - n_val - n_test;
  const auto first = corpus.begin();
  sd::save_corpus(a.out + "/train.jsonl", {first, first + n_train});
  sd::save_corpus(a.out + "/val.jsonl", {first + n_train, first + n_train + n_val});
  sd::save_corpus(a.out + "/test.jsonl", {first + n_train + n_val, corpus.end()});
  zs::PromptSet::synthetic_default().save(a.out + "/prompts.txt");

  std::cout << "wrote " << n_train << "/" << n_val << "/" << n_test
            << " studies (train/val/test) to " << a.out << "\n";
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string resume;
  bool force = false;
  md::ModelConfig m;
  tr::TrainConfig t;
};

std::string corpus_file(const std::string& data, const std::string& split) {
  if (fs::is_directory(data)) return data + "/" + split + ".jsonl";
  return data;
}

int cmd_train(TrainArgs& a) {
  const std::string train_file = corpus_file(a.data, "train");
  const auto corpus = sd::load_corpus(train_file);

  const bool resuming = !a.resume.empty();
  ensure_outdir(a.out, a.force, resuming);

  tp::Vocabulary vocab = [&] {
    if (resuming) return tp::Vocabulary::load(a.out + "/vocab.txt");
    auto v = tp::Vocabulary::build(corpus);
    v.save(a.out + "/vocab.txt");
    return v;
  }();
  a.m.vocab_size = vocab.size();
  a.m.validate();
  a.t.validate();

  json cfg;
  cfg["model"] = model_to_json(a.m);
  cfg["train"] = train_to_json(a.t);
  json extra = json::object();
  if (resuming) extra["resume_from"] = a.resume;
  write_manifest(a.out, "train", cfg, a.t.seed, {train_file},
                 {a.out + "/checkpoint_final.ckpt", a.out + "/checkpoint_best.ckpt",
                  a.out + "/steps.jsonl", a.out + "/vocab.txt"},
                 extra);

  tr::Trainer trainer(a.m, a.t, &vocab);
  tr::RunState state = resuming ? tr::load_checkpoint(a.resume, a.t) : trainer.make_state();

  std::ofstream steps(a.out + "/steps.jsonl",
                      resuming ? std::ios::app : std::ios::trunc);
  if (!steps) throw DataError("cannot write " + a.out + "/steps.jsonl");

  const std::string best_path = a.out + "/checkpoint_best.ckpt";
  double best = std::numeric_limits<double>::infinity();
  const auto on_epoch = [&](int epoch, double mean_total, const tr::RunState& s) {
    std::cout << "epoch " << epoch << " mean total " << std::setprecision(6) << mean_total
              << "\n";
    if (mean_total < best) {
      best = mean_total;
      tr::save_checkpoint(s, best_path);
    }
  };
  const auto logs = trainer.train(state, corpus, &steps, on_epoch);
  steps.flush();

  tr::save_checkpoint(state, a.out + "/checkpoint_final.ckpt");
  if (!fs::exists(best_path)) tr::save_checkpoint(state, best_path);

  if (logs.empty()) {
    std::cout << "no steps scheduled; wrote the initial checkpoint to " << a.out << "\n";
  } else {
    std::cout << "finished at step " << state.step << ", last total "
              << logs.back().total << "; checkpoints in " << a.out << "\n";
  }
  return 0;
}

// ------------------------------------------------------- shared eval setup

struct RunContext {
  md::ModelConfig m;
  tr::TrainConfig t;
  tp::Vocabulary vocab;
  tr::RunState state;
};

RunContext load_run(const std::string& run_dir, const std::string& checkpoint) {
  const json manifest = read_manifest(run_dir);
  if (!manifest.contains("config") || !manifest["config"].contains("model"))
    throw DataError(run_dir + "/manifest.json has no model config (not a train run?)");
  md::ModelConfig m = model_from_json(manifest["config"]["model"]);
  tr::TrainConfig t = train_from_json(manifest["config"]["train"]);
  tp::Vocabulary vocab = tp::Vocabulary::load(run_dir + "/vocab.txt");
  if (m.vocab_size != vocab.size())
    throw DataError("run manifest vocab_size disagrees with vocab.txt");
  std::string path = checkpoint;
  if (checkpoint == "final") path = run_dir + "/checkpoint_final.ckpt";
  else if (checkpoint == "best") path = run_dir + "/checkpoint_best.ckpt";
  return RunContext{m, t, std::move(vocab), tr::load_checkpoint(path, t)};
}

std::string report_line(const std::string& cls, const std::string& mode,
                        const mx::MetricReport& r) {
  json j;
  j["name"] = r.name;
  j["class"] = cls;
  j["mode"] = mode;
  j["estimate"] = r.estimate;
  j["lower"] = r.lower;
  j["upper"] = r.upper;
  j["n_resamples"] = r.n_resamples;
  j["alpha"] = r.alpha;
  j["redraws"] = r.redraws;
  j["estimate_outside_ci"] = r.estimate_outside_ci;
  return j.dump();
}

void print_report_row(std::ostream& os, const std::string& cls, const std::string& mode,
                      const mx::MetricReport& r) {
  os << "  " << std::left << std::setw(12) << cls << std::setw(9) << mode << std::setw(5)
     << r.name << std::right << std::fixed << std::setprecision(3) << std::setw(7) << r.estimate
     << "  [" << std::setw(5) << r.lower << ", " << std::setw(5) << r.upper << "]\n";
}

// --------------------------------------------------------- eval-classify

struct EvalClassifyArgs {
  std::string run;
  std::string checkpoint = "final";
  std::string data;
  std::string prompts;
  std::string out;
  std::string mode = "both";
  std::string score_kind = "itm";
  int n_resamples = 1000;
  double alpha = 0.05;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  int limit = 0;
  bool force = false;
};

int cmd_eval_classify(const EvalClassifyArgs& a) {
  RunContext rc = load_run(a.run, a.checkpoint);
  const std::string prompt_file =
      a.prompts.empty() ? fs::path(a.data).parent_path().string() + "/prompts.txt" : a.prompts;
  const zs::PromptSet prompts = zs::PromptSet::load(prompt_file);
  auto corpus = sd::load_corpus(a.data);
  if (a.limit > 0 && static_cast<int>(corpus.size()) > a.limit) corpus.resize(a.limit);
  if (corpus.empty()) throw DataError("eval-classify: empty corpus");
  ensure_outdir(a.out, a.force);

  std::vector<std::string> modes;
  if (a.mode == "both") modes = {"simple", "detailed"};
  else if (a.mode == "simple" || a.mode == "detailed") modes = {a.mode};
  else throw DataError("eval-classify: mode must be simple, detailed, or both");

  json cfg;
  cfg["checkpoint"] = a.checkpoint;
  cfg["mode"] = a.mode;
  cfg["score_kind"] = a.score_kind;
  cfg["n_resamples"] = a.n_resamples;
  cfg["alpha"] = a.alpha;
  cfg["threshold"] = a.threshold;
  cfg["limit"] = a.limit;
  write_manifest(a.out, "eval-classify", cfg, a.seed, {a.run, a.data, prompt_file},
                 {a.out + "/scores.jsonl", a.out + "/reports.jsonl"});

  zs::ScorerConfig sc;
  sc.kind = a.score_kind == "cosine" ? zs::ScorerConfig::ScoreKind::cosine
                                     : zs::ScorerConfig::ScoreKind::itm;
  const zs::Scorer scorer(rc.m, rc.state.student, rc.vocab, sc);

  std::ofstream scores_out(a.out + "/scores.jsonl");
  std::ofstream reports_out(a.out + "/reports.jsonl");
  if (!scores_out || !reports_out) throw DataError("cannot write outputs in " + a.out);

  // scores[mode][class] aligned with corpus order.
  std::map<std::string, std::map<std::string, std::vector<double>>> scores;
  for (const auto& study : corpus) {
    for (const auto& [cls, p] : prompts.classes) {
      for (const auto& mode : modes) {
        const double s = mode == "simple" ? scorer.classify_simple(study.image, cls, prompts)
                                          : scorer.classify_detailed(study.image, cls, prompts);
        scores[mode][cls].push_back(s);
        scores_out << zs::score_to_json_line({study.study_id, cls, mode, s}) << "\n";
      }
    }
  }

  std::cout << "zero-shot classification over " << corpus.size() << " studies\n";
  std::uint64_t stream = 0;
  int evaluated = 0;
  for (const auto& mode : modes) {
    std::map<std::string, double> sum_by_metric, lo_by_metric, hi_by_metric;
    int classes_used = 0;
    for (const auto& [cls, p] : prompts.classes) {
      const auto maybe = sd::class_from_name(cls);
      if (!maybe) throw DataError("eval-classify: prompt class '" + cls + "' is not a corpus class");
      std::vector<int> labels;
      int n_pos = 0;
      for (const auto& study : corpus) {
        labels.push_back(sd::label_set(study).count(*maybe) ? 1 : 0);
        n_pos += labels.back();
      }
      if (n_pos == 0 || n_pos == static_cast<int>(labels.size())) {
        std::cerr << "note: class " << cls << " is single-class in this set; skipped\n";
        continue;
      }
      ++classes_used;
      ++evaluated;
      const auto& s = scores[mode][cls];
      for (const auto& metric : {std::string("auc"), std::string("f1")}) {
        const mx::MetricFn fn =
            metric == "auc" ? mx::MetricFn(mx::auc)
                            : mx::MetricFn([&a](const std::vector<double>& sc_,
                                                const std::vector<int>& lb) {
                                return mx::f1(sc_, lb, a.threshold);
                              });
        const auto rep = mx::bootstrap_ci(fn, metric, s, labels, a.n_resamples, a.alpha,
                                          mix_seed(a.seed, stream++));
        reports_out << report_line(cls, mode, rep) << "\n";
        print_report_row(std::cout, cls, mode, rep);
        sum_by_metric[metric] += rep.estimate;
        lo_by_metric[metric] += rep.lower;
        hi_by_metric[metric] += rep.upper;
      }
    }
    if (classes_used == 0) continue;
    const auto k = static_cast<double>(classes_used);
    for (const auto& metric : {std::string("auc"), std::string("f1")}) {
      mx::MetricReport mean;
      mean.name = metric;
      mean.estimate = sum_by_metric[metric] / k;
      mean.lower = lo_by_metric[metric] / k;
      mean.upper = hi_by_metric[metric] / k;
      mean.n_resamples = a.n_resamples;
      mean.alpha = a.alpha;
      reports_out << report_line("mean", mode, mean) << "\n";
      print_report_row(std::cout, "mean", mode, mean);
    }
  }
  if (evaluated == 0)
    throw DataError("eval-classify: every class was single-class in this set");
  return 0;
}

// ----------------------------------------------------------- eval-errors

struct EvalErrorsArgs {
  std::string run;
  std::string checkpoint = "final";
  std::string data;
  std::string corrupted;
  std::string out;
  double p = 0.05;
  int n_resamples = 1000;
  double alpha = 0.05;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  int limit = 0;
  bool force = false;
};

int cmd_eval_errors(const EvalErrorsArgs& a) {
  RunContext rc = load_run(a.run, a.checkpoint);
  std::vector<es::CorruptedStudy> set;
  std::vector<std::string> inputs{a.run};
  bool corrupted_here = false;
  if (!a.corrupted.empty()) {
    set = es::load_corrupted(a.corrupted);
    inputs.push_back(a.corrupted);
  } else {
    if (a.data.empty()) throw DataError("eval-errors: pass --data or --corrupted");
    auto corpus = sd::load_corpus(a.data);
    if (a.limit > 0 && static_cast<int>(corpus.size()) > a.limit) corpus.resize(a.limit);
    set = es::corrupt_corpus(corpus, a.p, a.seed);
    corrupted_here = true;
    inputs.push_back(a.data);
  }
  if (a.limit > 0 && static_cast<int>(set.size()) > a.limit) set.resize(a.limit);
  if (set.empty()) throw DataError("eval-errors: empty evaluation set");
  ensure_outdir(a.out, a.force);

  json cfg;
  cfg["checkpoint"] = a.checkpoint;
  cfg["p"] = a.p;
  cfg["n_resamples"] = a.n_resamples;
  cfg["alpha"] = a.alpha;
  cfg["threshold"] = a.threshold;
  cfg["limit"] = a.limit;
  std::vector<std::string> outputs{a.out + "/scores.jsonl", a.out + "/reports.jsonl",
                                   a.out + "/counts.json"};
  if (corrupted_here) outputs.push_back(a.out + "/corrupted.jsonl");
  write_manifest(a.out, "eval-errors", cfg, a.seed, inputs, outputs);
  // Keep the generated set so correction runs can consume the same studies.
  if (corrupted_here) es::save_corrupted(a.out + "/corrupted.jsonl", set);

  const zs::Scorer scorer(rc.m, rc.state.student, rc.vocab, {});
  std::ofstream scores_out(a.out + "/scores.jsonl");
  std::ofstream reports_out(a.out + "/reports.jsonl");
  if (!scores_out || !reports_out) throw DataError("cannot write outputs in " + a.out);

  // Clean readings of every study form the shared negative pool; each
  // corrupted reading scores against its own error type.
  std::vector<double> clean_scores;
  std::map<es::ErrorType, std::vector<double>> by_type;
  std::map<std::string, int> counts;
  int inapplicable = 0;
  for (const auto& cs : set) {
    const auto& record = cs.record;
    const std::string clean = join_report(record.type == es::ErrorType::none
                                              ? cs.study.report
                                              : record.original);
    const double s_clean = scorer.detect_error(cs.study.image, clean);
    clean_scores.push_back(s_clean);
    scores_out << zs::score_to_json_line({cs.study.study_id, "none", "error", s_clean}) << "\n";
    counts[es::error_type_name(record.type)]++;
    if (record.inapplicable) ++inapplicable;
    if (record.type == es::ErrorType::none) continue;
    const double s_bad = scorer.detect_error(cs.study.image, join_report(cs.study.report));
    by_type[record.type].push_back(s_bad);
    scores_out << zs::score_to_json_line(
                      {cs.study.study_id, es::error_type_name(record.type), "error", s_bad})
               << "\n";
  }

  int n_corrupted = 0;
  for (const auto& [t, v] : by_type) n_corrupted += static_cast<int>(v.size());
  if (n_corrupted == 0)
    throw DataError("eval-errors: no corrupted studies (p too low?), AUC undefined");

  json counts_json;
  counts_json["total"] = set.size();
  counts_json["inapplicable"] = inapplicable;
  for (int t = 0; t <= es::kNumErrorTypes; ++t)
    counts_json[es::error_type_name(static_cast<es::ErrorType>(t))] =
        counts.count(es::error_type_name(static_cast<es::ErrorType>(t)))
            ? counts[es::error_type_name(static_cast<es::ErrorType>(t))]
            : 0;
  {
    std::ofstream counts_out(a.out + "/counts.json");
    counts_out << counts_json.dump(2) << "\n";
  }

  std::cout << "error detection over " << set.size() << " studies (" << n_corrupted
            << " corrupted)\n";
  std::uint64_t stream = 0;
  std::map<std::string, double> mean_sum;
  int mean_n = 0;
  for (int t = 1; t <= es::kNumErrorTypes; ++t) {
    const auto type = static_cast<es::ErrorType>(t);
    const auto it = by_type.find(type);
    if (it == by_type.end()) {
      std::cerr << "note: no " << es::error_type_name(type) << " studies in this set; skipped\n";
      continue;
    }
    std::vector<double> s = clean_scores;
    std::vector<int> labels(clean_scores.size(), 0);
    s.insert(s.end(), it->second.begin(), it->second.end());
    labels.insert(labels.end(), it->second.size(), 1);
    for (const auto& metric : {std::string("auc"), std::string("f1")}) {
      const mx::MetricFn fn =
          metric == "auc" ? mx::MetricFn(mx::auc)
                          : mx::MetricFn([&a](const std::vector<double>& sc_,
                                              const std::vector<int>& lb) {
                              return mx::f1(sc_, lb, a.threshold);
                            });
      const auto rep = mx::bootstrap_ci(fn, metric, s, labels, a.n_resamples, a.alpha,
                                        mix_seed(a.seed, stream++));
      reports_out << report_line(es::error_type_name(type), "error", rep) << "\n";
      print_report_row(std::cout, es::error_type_name(type), "error", rep);
      mean_sum[metric] += rep.estimate;
      mean_sum[metric + "_lo"] += rep.lower;
      mean_sum[metric + "_hi"] += rep.upper;
      if (metric == "auc") ++mean_n;
    }
  }
  if (mean_n > 0) {
    for (const auto& metric : {std::string("auc"), std::string("f1")}) {
      mx::MetricReport mean;
      mean.name = metric;
      mean.estimate = mean_sum[metric] / static_cast<double>(mean_n);
      mean.lower = mean_sum[metric + "_lo"] / static_cast<double>(mean_n);
      mean.upper = mean_sum[metric + "_hi"] / static_cast<double>(mean_n);
      mean.n_resamples = a.n_resamples;
      mean.alpha = a.alpha;
      reports_out << report_line("mean", "error", mean) << "\n";
      print_report_row(std::cout, "mean", "error", mean);
    }
  }
  return 0;
}

// --------------------------------------------------------------- correct

struct CorrectArgs {
  std::string run;
  std::string checkpoint = "final";
  std::string data;
  std::string out;
  double theta = 0.5;
  bool plain = false;
  int limit = 0;
  bool force = false;
};

int cmd_correct(const CorrectArgs& a) {
  RunContext rc = load_run(a.run, a.checkpoint);
  std::vector<es::CorruptedStudy> set;
  if (a.plain) {
    for (auto& study : sd::load_corpus(a.data)) set.push_back({std::move(study), {}});
  } else {
    set = es::load_corrupted(a.data);
  }
  if (a.limit > 0 && static_cast<int>(set.size()) > a.limit) set.resize(a.limit);
  if (set.empty()) throw DataError("correct: empty input set");
  ensure_outdir(a.out, a.force);

  json cfg;
  cfg["checkpoint"] = a.checkpoint;
  cfg["theta"] = a.theta;
  cfg["plain"] = a.plain;
  cfg["limit"] = a.limit;
  write_manifest(a.out, "correct", cfg, 0, {a.run, a.data},
                 {a.out + "/corrections.jsonl", a.out + "/summary.json"});

  zs::ScorerConfig sc;
  sc.theta_corr = a.theta;
  const zs::Scorer scorer(rc.m, rc.state.student, rc.vocab, sc);

  std::ofstream out(a.out + "/corrections.jsonl");
  if (!out) throw DataError("cannot write outputs in " + a.out);

  std::map<std::string, int> n_by_type, recovered_by_type;
  int total_subs = 0;
  for (const auto& cs : set) {
    const std::string input = join_report(cs.study.report);
    const auto result = scorer.correct_report(cs.study.image, input);
    total_subs += static_cast<int>(result.substitutions.size());

    json j;
    j["study_id"] = cs.study.study_id;
    j["input"] = input;
    j["corrected"] = result.report;
    json subs = json::array();
    for (const auto& s : result.substitutions)
      subs.push_back({{"position", s.position},
                      {"before", s.before},
                      {"after", s.after},
                      {"confidence", s.confidence}});
    j["substitutions"] = subs;
    if (!a.plain) {
      const std::string type = es::error_type_name(cs.record.type);
      j["error_type"] = type;
      if (cs.record.type != es::ErrorType::none) {
        const std::string original = join_report(cs.record.original);
        // Compare token streams so case normalization cannot mask a miss.
        const bool recovered =
            tp::tokenize(rc.vocab, result.report, rc.m.max_len).ids ==
            tp::tokenize(rc.vocab, original, rc.m.max_len).ids;
        j["original"] = original;
        j["recovered"] = recovered;
        n_by_type[type]++;
        if (recovered) recovered_by_type[type]++;
      }
    }
    out << j.dump() << "\n";
  }

  json summary;
  summary["n"] = set.size();
  summary["substitutions"] = total_subs;
  json per_type = json::object();
  std::cout << "corrected " << set.size() << " reports, " << total_subs << " substitutions\n";
  for (const auto& [type, n] : n_by_type) {
    const int rec = recovered_by_type.count(type) ? recovered_by_type[type] : 0;
    per_type[type] = {{"n", n},
                      {"recovered", rec},
                      {"rate", n > 0 ? static_cast<double>(rec) / n : 0.0}};
    std::cout << "  " << std::left << std::setw(16) << type << rec << "/" << n << " recovered\n";
  }
  summary["by_type"] = per_type;
  std::ofstream sum_out(a.out + "/summary.json");
  sum_out << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- attend

struct AttendArgs {
  std::string run;
  std::string checkpoint = "final";
  std::string data;
  std::string out;
  std::string study;
  std::string text;
  int layer = -1;
  int limit = 8;
  bool force = false;
};

std::string safe_token(const std::string& token) {
  std::string out;
  for (const char c : token)
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') out.push_back(c);
  return out.empty() ? "tok" : out;
}

int cmd_attend(const AttendArgs& a) {
  RunContext rc = load_run(a.run, a.checkpoint);
  auto corpus = sd::load_corpus(a.data);
  if (!a.study.empty()) {
    std::vector<sd::Study> picked;
    for (auto& s : corpus)
      if (s.study_id == a.study) picked.push_back(std::move(s));
    if (picked.empty()) throw DataError("attend: study '" + a.study + "' not in " + a.data);
    corpus = std::move(picked);
  }
  if (a.limit > 0 && static_cast<int>(corpus.size()) > a.limit) corpus.resize(a.limit);
  if (corpus.empty()) throw DataError("attend: empty corpus");
  ensure_outdir(a.out, a.force);

  json cfg;
  cfg["checkpoint"] = a.checkpoint;
  cfg["layer"] = a.layer;
  cfg["limit"] = a.limit;
  if (!a.study.empty()) cfg["study"] = a.study;
  if (!a.text.empty()) cfg["text"] = a.text;
  write_manifest(a.out, "attend", cfg, 0, {a.run, a.data}, {a.out + "/quadrants.jsonl"});

  zs::ScorerConfig sc;
  sc.gradcam_layer = a.layer;
  const zs::Scorer scorer(rc.m, rc.state.student, rc.vocab, sc);

  std::ofstream side(a.out + "/quadrants.jsonl");
  if (!side) throw DataError("cannot write outputs in " + a.out);
  int files = 0;
  for (const auto& study : corpus) {
    const std::string text = a.text.empty() ? join_report(study.report) : a.text;
    const auto maps = scorer.attention_gradcam(study.image, text);
    for (const auto& m : maps) {
      const double hi = m.upsampled.maxCoeff();
      const std::string name = study.study_id + "_p" + std::to_string(m.position) + "_" +
                               safe_token(m.token) + ".pgm";
      zs::write_pgm(a.out + "/" + name, m.upsampled, 0.0, hi > 0.0 ? hi : 1.0);
      ++files;
      json j;
      j["study_id"] = study.study_id;
      j["token"] = m.token;
      j["position"] = m.position;
      j["quadrant_mass"] = m.quadrant_mass;
      j["file"] = name;
      side << j.dump() << "\n";
    }
  }
  std::cout << "wrote " << files << " heatmaps for " << corpus.size() << " studies to " << a.out
            << "\n";
  return 0;
}

// Reads a flat key=value file and appends "--key=value" for every key not
// already present on the command line, giving CLI > config > defaults.
std::vector<std::string> layer_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq <= start)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw DataError(path + ":" + std::to_string(lineno) + ": empty key");
    const std::string flag = "--" + key;
    bool given = false;
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) given = true;
    if (!given) args.push_back(flag + "=" + value);
  }
  return args;
}

void add_model_flags(CLI::App* cmd, md::ModelConfig& m) {
  cmd->add_option("--d_model", m.d_model, "Embedding width")->capture_default_str();
  cmd->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  cmd->add_option("--vision_layers", m.vision_layers, "Vision encoder depth")
      ->capture_default_str();
  cmd->add_option("--text_layers", m.text_layers, "Text encoder depth")->capture_default_str();
  cmd->add_option("--fusion_layers", m.fusion_layers, "Fusion encoder depth")
      ->capture_default_str();
  cmd->add_option("--image_size", m.image_size, "Square image side")->capture_default_str();
  cmd->add_option("--patch_size", m.patch_size, "Square patch side")->capture_default_str();
  cmd->add_option("--proj_dim", m.proj_dim, "Contrastive projection width")
      ->capture_default_str();
  cmd->add_option("--mlp_ratio", m.mlp_ratio, "MLP hidden width multiplier")
      ->capture_default_str();
  cmd->add_option("--max_len", m.max_len, "Token budget incl. [CLS]/[SEP]")
      ->capture_default_str();
  cmd->add_option("--tau_init", m.tau_init, "Initial contrastive temperature")
      ->capture_default_str();
}

void add_train_flags(CLI::App* cmd, tr::TrainConfig& t) {
  cmd->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--warmup_epochs", t.warmup_epochs, "Linear warmup epochs")
      ->capture_default_str();
  cmd->add_option("--batch_size", t.batch_size, "Studies per step")->capture_default_str();
  cmd->add_option("--lr_init", t.lr_init, "Warmup start learning rate")->capture_default_str();
  cmd->add_option("--lr_peak", t.lr_peak, "Peak learning rate")->capture_default_str();
  cmd->add_option("--weight_decay", t.weight_decay, "Decoupled weight decay")
      ->capture_default_str();
  cmd->add_option("--clip_norm", t.clip_norm, "Global gradient norm ceiling")
      ->capture_default_str();
  cmd->add_option("--lambda", t.lambda, "Distillation mixing weight")->capture_default_str();
  cmd->add_option("--ema_momentum", t.ema_momentum, "Teacher EMA momentum")
      ->capture_default_str();
  cmd->add_option("--theta_sim", t.theta_sim, "Hard-negative similarity ceiling")
      ->capture_default_str();
  cmd->add_option("--queue_capacity", t.queue_capacity, "Feature queue capacity")
      ->capture_default_str();
  cmd->add_option("--mask_rate", t.mask_rate, "MLM masking rate")->capture_default_str();
  cmd->add_option("--seed", t.seed, "Training seed")->capture_default_str();
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Train and evaluate a cross-attention vision-language model on a synthetic "
               "image-report corpus"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion) + " (" + kGitDescribe + ")");

  // layer_config() reads the file before parsing; the option exists so the
  // flag is accepted and documented.
  std::string config_file;
  const char* config_help = "Flat key=value file; explicit flags win";

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate corpus splits and prompt files");
  gen_cmd->add_option("--config", config_file, config_help);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Total studies")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes, "Classes drawn uniformly (incl. no_finding)")
      ->capture_default_str();
  gen_cmd->add_option("--image_size", gen.image_size, "Square image side")
      ->capture_default_str();
  gen_cmd->add_flag("--force", gen.force, "Write into a non-empty directory");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train from a generated corpus");
  train_cmd->add_option("--config", config_file, config_help);
  train_cmd->add_option("--data", train.data, "Corpus directory or train.jsonl")->required();
  train_cmd->add_option("--out", train.out, "Run directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");
  train_cmd->add_flag("--force", train.force, "Write into a non-empty directory");
  add_model_flags(train_cmd, train.m);
  add_train_flags(train_cmd, train.t);

  EvalClassifyArgs ec;
  auto* ec_cmd = app.add_subcommand("eval-classify", "Zero-shot abnormality classification");
  ec_cmd->add_option("--config", config_file, config_help);
  ec_cmd->add_option("--run", ec.run, "Training run directory")->required();
  ec_cmd->add_option("--checkpoint", ec.checkpoint, "final, best, or a path")
      ->capture_default_str();
  ec_cmd->add_option("--data", ec.data, "Evaluation corpus file")->required();
  ec_cmd->add_option("--prompts", ec.prompts, "Prompt file (default: prompts.txt beside data)");
  ec_cmd->add_option("--out", ec.out, "Output directory")->required();
  ec_cmd->add_option("--mode", ec.mode, "simple, detailed, or both")->capture_default_str();
  ec_cmd->add_option("--score_kind", ec.score_kind, "itm or cosine")->capture_default_str();
  ec_cmd->add_option("--n_resamples", ec.n_resamples, "Bootstrap resamples")
      ->capture_default_str();
  ec_cmd->add_option("--alpha", ec.alpha, "CI significance level")->capture_default_str();
  ec_cmd->add_option("--threshold", ec.threshold, "F1 decision threshold")
      ->capture_default_str();
  ec_cmd->add_option("--seed", ec.seed, "Bootstrap seed")->capture_default_str();
  ec_cmd->add_option("--limit", ec.limit, "Evaluate at most this many studies (0 = all)")
      ->capture_default_str();
  ec_cmd->add_flag("--force", ec.force, "Write into a non-empty directory");

  EvalErrorsArgs ee;
  auto* ee_cmd = app.add_subcommand("eval-errors", "Zero-shot report-error detection");
  ee_cmd->add_option("--config", config_file, config_help);
  ee_cmd->add_option("--run", ee.run, "Training run directory")->required();
  ee_cmd->add_option("--checkpoint", ee.checkpoint, "final, best, or a path")
      ->capture_default_str();
  ee_cmd->add_option("--data", ee.data, "Clean corpus to corrupt on the fly");
  ee_cmd->add_option("--corrupted", ee.corrupted, "Pre-corrupted corpus file");
  ee_cmd->add_option("--out", ee.out, "Output directory")->required();
  ee_cmd->add_option("--p", ee.p, "Corruption probability")->capture_default_str();
  ee_cmd->add_option("--n_resamples", ee.n_resamples, "Bootstrap resamples")
      ->capture_default_str();
  ee_cmd->add_option("--alpha", ee.alpha, "CI significance level")->capture_default_str();
  ee_cmd->add_option("--threshold", ee.threshold, "F1 decision threshold")
      ->capture_default_str();
  ee_cmd->add_option("--seed", ee.seed, "Corruption and bootstrap seed")->capture_default_str();
  ee_cmd->add_option("--limit", ee.limit, "Evaluate at most this many studies (0 = all)")
      ->capture_default_str();
  ee_cmd->add_flag("--force", ee.force, "Write into a non-empty directory");

  CorrectArgs co;
  auto* co_cmd = app.add_subcommand("correct", "Zero-shot single-word report correction");
  co_cmd->add_option("--config", config_file, config_help);
  co_cmd->add_option("--run", co.run, "Training run directory")->required();
  co_cmd->add_option("--checkpoint", co.checkpoint, "final, best, or a path")
      ->capture_default_str();
  co_cmd->add_option("--data", co.data, "Corrupted corpus (or plain with --plain)")->required();
  co_cmd->add_option("--out", co.out, "Output directory")->required();
  co_cmd->add_option("--theta", co.theta, "Substitution confidence floor")
      ->capture_default_str();
  co_cmd->add_flag("--plain", co.plain, "Input has no error records");
  co_cmd->add_option("--limit", co.limit, "Correct at most this many studies (0 = all)")
      ->capture_default_str();
  co_cmd->add_flag("--force", co.force, "Write into a non-empty directory");

  AttendArgs at;
  auto* at_cmd = app.add_subcommand("attend", "Word-level cross-attention heatmaps");
  at_cmd->add_option("--config", config_file, config_help);
  at_cmd->add_option("--run", at.run, "Training run directory")->required();
  at_cmd->add_option("--checkpoint", at.checkpoint, "final, best, or a path")
      ->capture_default_str();
  at_cmd->add_option("--data", at.data, "Corpus file")->required();
  at_cmd->add_option("--out", at.out, "Output directory")->required();
  at_cmd->add_option("--study", at.study, "Only this study id");
  at_cmd->add_option("--text", at.text, "Query text override (default: study report)");
  at_cmd->add_option("--layer", at.layer, "Fusion layer (-1 = last)")->capture_default_str();
  at_cmd->add_option("--limit", at.limit, "At most this many studies (0 = all)")
      ->capture_default_str();
  at_cmd->add_flag("--force", at.force, "Write into a non-empty directory");

  gen_cmd->callback([&] { cmd_gen_data(gen); });
  train_cmd->callback([&] { cmd_train(train); });
  ec_cmd->callback([&] { cmd_eval_classify(ec); });
  ee_cmd->callback([&] { cmd_eval_errors(ee); });
  co_cmd->callback([&] { cmd_correct(co); });
  at_cmd->callback([&] { cmd_attend(at); });

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = layer_config(std::move(args));
    std::reverse(args.begin(), args.end());  // CLI::App::parse consumes back to front
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}

}  // namespace cvl::cli
