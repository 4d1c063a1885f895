#include "cvl/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "cvl/errors.hpp"
#include "doctest.h"

using cvl::Rng;
using cvl::ad::Mat;
using namespace cvl::trainer;

namespace {

cvl::model::ModelConfig tiny_model() {
  cvl::model::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.vision_layers = 1;
  cfg.text_layers = 1;
  cfg.fusion_layers = 1;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.proj_dim = 8;
  cfg.mlp_ratio = 2;
  cfg.max_len = 24;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 4;
  cfg.queue_capacity = 16;
  cfg.seed = 5;
  return cfg;
}

std::vector<cvl::synthdata::Study> tiny_corpus(int n, std::uint64_t seed) {
  std::map<cvl::synthdata::ClassId, double> mix;
  mix[cvl::synthdata::ClassId::no_finding] = 0.25;
  mix[cvl::synthdata::ClassId::alphora] = 0.25;
  mix[cvl::synthdata::ClassId::betuna] = 0.25;
  mix[cvl::synthdata::ClassId::gamron] = 0.25;
  cvl::synthdata::RenderConfig rc;
  rc.height = 8;
  rc.width = 8;
  return cvl::synthdata::generate_corpus(n, mix, seed, rc);
}

struct Fixture {
  std::vector<cvl::synthdata::Study> corpus;
  cvl::textpipe::Vocabulary vocab;
  cvl::model::ModelConfig mcfg;
  TrainConfig tcfg;

  explicit Fixture(int n = 12) : corpus(tiny_corpus(n, 99)), vocab(
      cvl::textpipe::Vocabulary::build(corpus)), mcfg(tiny_model()), tcfg(tiny_train()) {
    mcfg.vocab_size = vocab.size();
  }
};

bool stores_equal(const cvl::model::ParamStore& a, const cvl::model::ParamStore& b) {
  if (a.all().size() != b.all().size()) return false;
  for (const auto& [name, mat] : a.all()) {
    if (!b.has(name)) return false;
    if (b.at(name) != mat) return false;
  }
  return true;
}

std::string checkpoint_bytes(const RunState& state) {
  const std::string path = "trainer_test_tmp.ckpt";
  save_checkpoint(state, path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  std::remove(path.c_str());
  return ss.str();
}

}  // namespace

TEST_CASE("lr schedule hits the documented endpoints") {
  const double lo = 1e-5, hi = 1e-4;
  const std::int64_t total = 100, warmup = 40;
  CHECK(lr_schedule(0, total, warmup, lo, hi) == doctest::Approx(lo));
  CHECK(lr_schedule(warmup - 1, total, warmup, lo, hi) == doctest::Approx(hi));
  // Linear in between: the middle of warmup is the average of the endpoints.
  CHECK(lr_schedule((warmup - 1) / 2, total, warmup, lo, hi) ==
        doctest::Approx(lo + (hi - lo) * 19.0 / 39.0));
  CHECK(lr_schedule(total - 1, total, warmup, lo, hi) == doctest::Approx(0.0));
  // Halfway through the decay the cosine sits at half the peak.
  const std::int64_t mid = (warmup - 1) + (total - warmup) / 2;
  CHECK(lr_schedule(mid, total, warmup, lo, hi) == doctest::Approx(hi / 2.0));
  // Monotone non-increasing after warmup.
  double prev = lr_schedule(warmup - 1, total, warmup, lo, hi);
  for (std::int64_t s = warmup; s < total; ++s) {
    const double cur = lr_schedule(s, total, warmup, lo, hi);
    CHECK(cur <= prev + 1e-15);
    prev = cur;
  }
  CHECK_THROWS_AS(lr_schedule(-1, total, warmup, lo, hi), cvl::DataError);
  CHECK_THROWS_AS(lr_schedule(total, total, warmup, lo, hi), cvl::DataError);
  CHECK_THROWS_AS(lr_schedule(0, 0, 0, lo, hi), cvl::DataError);
  // No warmup: starts at the peak.
  CHECK(lr_schedule(0, 10, 0, lo, hi) == doctest::Approx(hi));
  // Warmup of one step jumps straight to the peak.
  CHECK(lr_schedule(0, 10, 1, lo, hi) == doctest::Approx(hi));
}

TEST_CASE("adamw follows the decoupled update rule") {
  // Scalar oracle computed by hand for two steps.
  const double lr = 0.1, wd = 0.02, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  cvl::model::ParamStore store;
  store.add("w", 1, 1)(0, 0) = 1.0;
  AdamW opt(b1, b2, eps, wd);

  double theta = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = (t == 1) ? 0.5 : -0.25;
    std::map<std::string, Mat> grads;
    grads["w"] = Mat::Constant(1, 1, g);
    opt.step(store, grads, lr);

    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    theta -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta);
    CHECK(store.at("w")(0, 0) == doctest::Approx(theta).epsilon(1e-12));
  }
  CHECK(opt.steps_taken() == 2);
}

TEST_CASE("adamw with zero gradient decays the weight geometrically") {
  const double lr = 0.1, wd = 0.02;
  cvl::model::ParamStore store;
  store.add("w", 1, 1)(0, 0) = 2.0;
  AdamW opt(0.9, 0.999, 1e-8, wd);
  std::map<std::string, Mat> grads;  // empty: counts as zero gradient
  for (int t = 0; t < 10; ++t) opt.step(store, grads, lr);
  CHECK(store.at("w")(0, 0) == doctest::Approx(2.0 * std::pow(1.0 - lr * wd, 10)).epsilon(1e-12));

  std::map<std::string, Mat> bad;
  bad["nope"] = Mat::Zero(1, 1);
  CHECK_THROWS_AS(opt.step(store, bad, lr), cvl::DataError);
}

TEST_CASE("gradient clipping rescales to the threshold") {
  std::map<std::string, Mat> grads;
  grads["a"] = Mat::Constant(2, 2, 3.0);  // squared norm 36
  grads["b"] = Mat::Constant(1, 2, 4.0);  // squared norm 32
  const double norm = std::sqrt(68.0);
  CHECK(global_grad_norm(grads) == doctest::Approx(norm));

  auto clipped = grads;
  CHECK(clip_gradients(clipped, 1.0) == doctest::Approx(norm));
  CHECK(global_grad_norm(clipped) == doctest::Approx(1.0));
  // Direction preserved.
  CHECK(clipped["a"](0, 0) / clipped["b"](0, 0) == doctest::Approx(3.0 / 4.0));

  auto untouched = grads;
  CHECK(clip_gradients(untouched, 100.0) == doctest::Approx(norm));
  CHECK(untouched["a"] == grads["a"]);
}

TEST_CASE("ema update formula, fixed point, and geometric convergence") {
  cvl::model::ParamStore teacher, student;
  teacher.add("w", 1, 1)(0, 0) = 0.0;
  student.add("w", 1, 1)(0, 0) = 1.0;
  ema_update(teacher, student, 0.99);
  CHECK(teacher.at("w")(0, 0) == doctest::Approx(0.01));

  teacher.at("w")(0, 0) = 0.7;
  student.at("w")(0, 0) = 0.7;
  ema_update(teacher, student, 0.9);
  CHECK(teacher.at("w")(0, 0) == doctest::Approx(0.7));  // fixed point

  // With a constant student, the gap shrinks by exactly m each step.
  const double m = 0.95;
  teacher.at("w")(0, 0) = 0.0;
  student.at("w")(0, 0) = 1.0;
  for (int k = 1; k <= 100; ++k) {
    ema_update(teacher, student, m);
    const double gap = std::abs(teacher.at("w")(0, 0) - 1.0);
    CHECK(gap == doctest::Approx(std::pow(m, k)).epsilon(1e-9));
  }

  cvl::model::ParamStore other;
  other.add("w", 2, 1);
  CHECK_THROWS_AS(ema_update(other, student, 0.9), cvl::DataError);
}

TEST_CASE("fresh run state round-trips through a checkpoint byte-identically") {
  Fixture f;
  Trainer tr(f.mcfg, f.tcfg, &f.vocab);
  RunState state = tr.make_state();
  CHECK(stores_equal(state.student, state.teacher));

  const std::string bytes1 = checkpoint_bytes(state);
  const std::string path = "trainer_test_rt.ckpt";
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes1;
  }
  RunState loaded = load_checkpoint(path, f.tcfg);
  CHECK(stores_equal(loaded.student, state.student));
  CHECK(stores_equal(loaded.teacher, state.teacher));
  CHECK(loaded.rng == state.rng);
  CHECK(loaded.step == state.step);
  CHECK(loaded.img_queue == state.img_queue);
  CHECK(loaded.optimizer.state_equals(state.optimizer));
  const std::string bytes2 = checkpoint_bytes(loaded);
  CHECK(bytes2 == bytes1);

  // Truncation and corruption are both rejected.
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes1.substr(0, bytes1.size() / 2);
  }
  CHECK_THROWS_AS(load_checkpoint(path, f.tcfg), cvl::DataError);
  {
    std::string corrupt = bytes1;
    corrupt[0] = 'X';
    std::ofstream out(path, std::ios::binary);
    out << corrupt;
  }
  CHECK_THROWS_AS(load_checkpoint(path, f.tcfg), cvl::DataError);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes1 << "extra";
  }
  CHECK_THROWS_AS(load_checkpoint(path, f.tcfg), cvl::DataError);
  std::remove(path.c_str());
}

TEST_CASE("zero epochs returns the initial state unchanged") {
  Fixture f;
  f.tcfg.epochs = 0;
  f.tcfg.warmup_epochs = 0;
  Trainer tr(f.mcfg, f.tcfg, &f.vocab);
  RunState state = tr.make_state();
  const std::string before = checkpoint_bytes(state);
  auto logs = tr.train(state, f.corpus);
  CHECK(logs.empty());
  CHECK(checkpoint_bytes(state) == before);
}

TEST_CASE("training is deterministic given the seed") {
  Fixture f;
  Trainer tr(f.mcfg, f.tcfg, &f.vocab);
  RunState a = tr.make_state();
  RunState b = tr.make_state();
  auto la = tr.train(a, f.corpus);
  auto lb = tr.train(b, f.corpus);
  REQUIRE(la.size() == lb.size());
  for (std::size_t k = 0; k < la.size(); ++k) {
    CHECK(la[k].to_json() == lb[k].to_json());
  }
  CHECK(checkpoint_bytes(a) == checkpoint_bytes(b));
}

TEST_CASE("one step updates the student, the teacher, the queues, and tau stays in range") {
  Fixture f;
  Trainer tr(f.mcfg, f.tcfg, &f.vocab);
  RunState state = tr.make_state();
  const Mat w_before = state.student.at("proj.img.w");
  auto logs = tr.train(state, f.corpus);
  const std::int64_t spe = tr.steps_per_epoch(f.corpus.size());
  REQUIRE(static_cast<std::int64_t>(logs.size()) == spe * f.tcfg.epochs);
  CHECK(state.student.at("proj.img.w") != w_before);
  // Teacher moved off the student copy but not onto it.
  CHECK_FALSE(stores_equal(state.teacher, state.student));
  CHECK(state.img_queue.size() ==
        std::min<int>(f.tcfg.queue_capacity,
                      static_cast<int>(logs.size()) * f.tcfg.batch_size));
  for (const auto& lg : logs) {
    CHECK(std::isfinite(lg.total));
    CHECK(lg.tau >= f.mcfg.tau_min);
    CHECK(lg.tau <= f.mcfg.tau_max);
    CHECK(lg.mlm_warned == (lg.mlm_masked == 0));
  }
  CHECK(state.student.all_finite());
  CHECK(state.teacher.all_finite());
}

TEST_CASE("logged terms recombine to the logged total") {
  Fixture f;
  f.tcfg.epochs = 1;
  f.tcfg.warmup_epochs = 1;
  Trainer tr(f.mcfg, f.tcfg, &f.vocab);
  RunState state = tr.make_state();
  auto logs = tr.train(state, f.corpus);
  REQUIRE(!logs.empty());
  for (const auto& lg : logs) {
    const double base = lg.cmc + lg.imc + lg.sent + lg.mlm + lg.itm;
    const double recombined = (1.0 - f.tcfg.lambda) * base + f.tcfg.lambda * lg.dist;
    CHECK(std::abs(recombined - lg.total) < 1e-6);
  }
}

TEST_CASE("resume from a checkpoint reproduces the uninterrupted run") {
  Fixture f;
  Trainer tr(f.mcfg, f.tcfg, &f.vocab);

  // Uninterrupted reference run.
  RunState full = tr.make_state();
  std::ostringstream full_log;
  tr.train(full, f.corpus, &full_log);

  // Interrupted: stop after epoch 1 (3 steps), checkpoint, reload, continue.
  RunState part = tr.make_state();
  const std::int64_t spe = tr.steps_per_epoch(f.corpus.size());
  TrainConfig first_leg = f.tcfg;
  first_leg.epochs = 1;
  first_leg.warmup_epochs = 1;
  Trainer tr_first(f.mcfg, first_leg, &f.vocab);
  std::ostringstream part_log;
  tr_first.train(part, f.corpus, &part_log);
  REQUIRE(part.step == spe);

  const std::string path = "trainer_test_resume.ckpt";
  save_checkpoint(part, path);
  RunState resumed = load_checkpoint(path, f.tcfg);
  std::remove(path.c_str());
  tr.train(resumed, f.corpus, &part_log);

  CHECK(part_log.str() == full_log.str());
  CHECK(checkpoint_bytes(resumed) == checkpoint_bytes(full));
}

TEST_CASE("train rejects corpora smaller than one batch") {
  Fixture f(3);  // 3 studies, batch size 4
  Trainer tr(f.mcfg, f.tcfg, &f.vocab);
  RunState state = tr.make_state();
  CHECK_THROWS_AS(tr.train(state, f.corpus), cvl::DataError);
  CHECK_THROWS_AS(tr.train(state, {}), cvl::DataError);
}

TEST_CASE("train config validation catches inconsistent settings") {
  TrainConfig cfg;
  cfg.validate();
  cfg.warmup_epochs = 7;
  CHECK_THROWS_AS(cfg.validate(), cvl::DataError);
  cfg = TrainConfig{};
  cfg.lr_init = 2e-4;  // above the peak
  CHECK_THROWS_AS(cfg.validate(), cvl::DataError);
  cfg = TrainConfig{};
  cfg.lambda = 1.5;
  CHECK_THROWS_AS(cfg.validate(), cvl::DataError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), cvl::DataError);
}
