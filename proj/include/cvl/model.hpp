#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cvl/autodiff.hpp"
#include "cvl/rng.hpp"
#include "cvl/textpipe.hpp"

namespace cvl::model {

using ad::Mat;
using ad::Tape;
using ad::Var;

struct ModelConfig {
  int d_model = 128;
  int heads = 4;
  int vision_layers = 2;
  int text_layers = 2;
  int fusion_layers = 2;
  int image_size = 32;
  int patch_size = 8;
  int proj_dim = 64;
  int mlp_ratio = 2;
  int vocab_size = 0;  // set once the vocabulary exists
  int max_len = 120;
  double ln_eps = 1e-5;
  double tau_init = 0.07;
  double tau_min = 0.01;
  double tau_max = 0.5;

  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch_size * patch_size; }
  void validate() const;  // throws DataError on inconsistent settings
};

// Named dense parameters with a stable iteration order.
class ParamStore {
 public:
  Mat& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  const std::map<std::string, Mat>& all() const { return params_; }
  std::map<std::string, Mat>& all_mutable() { return params_; }
  int64_t scalar_count() const;
  bool same_shapes(const ParamStore& other) const;
  bool all_finite() const;

 private:
  std::map<std::string, Mat> params_;
};

// Creates every parameter of the architecture and fills it with the standard
// init: N(0, 0.02) weights, zero biases, unit layer-norm gains, tau_init.
void init_params(ParamStore& store, const ModelConfig& cfg, Rng& rng);

// Binds store entries into one tape, once per name, so gradient contributions
// from every use accumulate on a single node. trainable=false binds constants
// (the momentum teacher path).
class Binder {
 public:
  Binder(Tape& tape, ParamStore& store, bool trainable)
      : tape_(tape), store_(store), trainable_(trainable) {}
  Var operator()(const std::string& name);
  const std::map<std::string, Var>& bound() const { return bound_; }
  Tape& tape() { return tape_; }
  bool trainable() const { return trainable_; }

 private:
  Tape& tape_;
  ParamStore& store_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

enum class Modality { image, text };
enum class FusionPath { t2i, i2t };  // t2i: text queries attend image keys

struct PathHooks {
  // Restrict cross-attention keys to these kv positions (test hook).
  const std::vector<int>* key_allow = nullptr;
  // Record attention probabilities through grad_root so d(target)/d(attention)
  // exists even on a constant-bound pass.
  bool attn_grad_roots = false;
};

struct PathPass {
  Var seq;                             // fused sequence, query side
  std::vector<std::vector<Var>> attn;  // cross-attention probs [layer][head]
};

struct FusePass {
  PathPass t2i;
  PathPass i2t;
};

class Network {
 public:
  explicit Network(ModelConfig cfg);
  const ModelConfig& config() const { return cfg_; }

  // Patch projection + [CLS] + positions, before any transformer layer.
  Var patch_embeddings(Binder& b, const Eigen::MatrixXd& image,
                       bool use_positional = true) const;
  Var encode_image(Binder& b, const Eigen::MatrixXd& image, bool use_positional = true) const;
  // ids must be the real token prefix ([CLS] ... [SEP]), no padding.
  Var encode_text(Binder& b, const std::vector<int>& ids) const;
  Var encode_text(Binder& b, const textpipe::TokenizedText& tokens) const;

  PathPass fuse_path(Binder& b, FusionPath which, Var queries, Var keys,
                     const PathHooks* hooks = nullptr) const;
  FusePass fuse(Binder& b, Var patches, Var words, const PathHooks* t2i_hooks = nullptr,
                const PathHooks* i2t_hooks = nullptr) const;

  Var project(Binder& b, Var cls_row, Modality which) const;
  // Logit column 0 = unmatched, column 1 = matched.
  Var itm_logits(Binder& b, Var cls_t2i, Var cls_i2t) const;
  Var mlm_logits(Binder& b, Var fused_words) const;
  Var tau(Binder& b) const { return b("tau"); }

 private:
  Var encoder_layer(Binder& b, const std::string& prefix, Var x) const;
  Var fusion_layer(Binder& b, const std::string& prefix, Var x, Var kv,
                   std::vector<Var>* attn_heads, const PathHooks* hooks) const;
  Var attention(Binder& b, const std::string& prefix, Var queries, Var keys_values,
                std::vector<Var>* attn_heads, const PathHooks* hooks) const;
  Var mlp(Binder& b, const std::string& prefix, Var x) const;
  Var layer_norm(Binder& b, const std::string& gamma, const std::string& beta, Var x) const;

  ModelConfig cfg_;
};

}  // namespace cvl::model
