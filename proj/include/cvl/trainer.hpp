#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cvl/model.hpp"
#include "cvl/objectives.hpp"
#include "cvl/rng.hpp"
#include "cvl/synthdata.hpp"
#include "cvl/textpipe.hpp"

namespace cvl::trainer {

using ad::Mat;

struct TrainConfig {
  int epochs = 5;
  int warmup_epochs = 2;
  int batch_size = 10;
  double lr_init = 1e-5;
  double lr_peak = 1e-4;
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  double lambda = 0.4;
  double ema_momentum = 0.995;
  double theta_sim = 0.9;
  int queue_capacity = 4096;
  double mask_rate = 0.15;
  std::uint64_t seed = 0;
  void validate() const;
};

// Linear ramp lr_init -> lr_peak across the warmup steps, then cosine decay
// from lr_peak to 0 at the final step.
double lr_schedule(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                   double lr_init, double lr_peak);

// Adaptive moments with decoupled weight decay:
//   theta -= lr * (mhat / (sqrt(vhat) + eps) + wd * theta)
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay);
  // One update over every parameter in the store. A missing gradient entry
  // counts as zero but still advances that parameter's moments and decay.
  void step(model::ParamStore& params, const std::map<std::string, Mat>& grads, double lr);
  std::int64_t steps_taken() const { return t_; }
  void serialize(std::ostream& os) const;
  void load_state(std::istream& is);
  bool state_equals(const AdamW& other) const;

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::map<std::string, Mat> m_, v_;
};

double global_grad_norm(const std::map<std::string, Mat>& grads);
// Scales every gradient by max_norm / norm when the global norm exceeds
// max_norm. Returns the pre-clip norm.
double clip_gradients(std::map<std::string, Mat>& grads, double max_norm);

// teacher' = m * teacher + (1 - m) * student, elementwise over all entries.
void ema_update(model::ParamStore& teacher, const model::ParamStore& student, double m);

struct StepLog {
  std::int64_t step = 0;  // 1-based, the step just completed
  double cmc = 0.0;
  double imc = 0.0;
  double sent = 0.0;
  double mlm = 0.0;
  double itm = 0.0;
  double dist = 0.0;
  double total = 0.0;
  double tau = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // pre-clip
  int mlm_masked = 0;
  int fallback_count = 0;
  bool mlm_warned = false;
  std::string to_json() const;
};

struct RunState {
  model::ParamStore student;
  model::ParamStore teacher;
  AdamW optimizer;
  objectives::FeatureQueue img_queue;
  objectives::FeatureQueue txt_queue;
  Rng rng;  // masking and negative-mining draws
  std::int64_t step = 0;

  RunState(AdamW opt, objectives::FeatureQueue iq, objectives::FeatureQueue tq)
      : optimizer(std::move(opt)), img_queue(std::move(iq)), txt_queue(std::move(tq)) {}
};

void save_checkpoint(const RunState& state, const std::string& path);
RunState load_checkpoint(const std::string& path, const TrainConfig& cfg);

class Trainer {
 public:
  Trainer(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
          const textpipe::Vocabulary* vocab);

  // Fresh parameters (teacher = copy of student), empty queues, derived rng.
  RunState make_state() const;
  std::int64_t steps_per_epoch(std::size_t corpus_size) const;

  // One optimizer step on an explicit batch. total_steps fixes the schedule.
  StepLog train_step(RunState& state, const std::vector<const synthdata::Study*>& batch,
                     std::int64_t total_steps);

  // Called after each completed epoch with the mean step total of that epoch.
  using EpochHook = std::function<void(int epoch, double mean_total, const RunState& state)>;

  // Runs from state.step to the end of the schedule, shuffling study order
  // each epoch. Appends one JSON line per step to step_log when given.
  std::vector<StepLog> train(RunState& state, const std::vector<synthdata::Study>& corpus,
                             std::ostream* step_log = nullptr, const EpochHook& on_epoch = {});

  const model::Network& network() const { return net_; }
  const model::ModelConfig& model_config() const { return mcfg_; }
  const TrainConfig& config() const { return tcfg_; }

 private:
  model::ModelConfig mcfg_;
  TrainConfig tcfg_;
  const textpipe::Vocabulary* vocab_;
  model::Network net_;
};

}  // namespace cvl::trainer
