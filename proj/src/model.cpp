#include "cvl/model.hpp"

#include <cmath>

#include "cvl/errors.hpp"

namespace cvl::model {

void ModelConfig::validate() const {
  if (d_model <= 0 || heads <= 0 || d_model % heads != 0)
    throw DataError("model: d_model must be a positive multiple of heads");
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw DataError("model: image_size must be a positive multiple of patch_size");
  if (vision_layers < 1 || text_layers < 1 || fusion_layers < 1)
    throw DataError("model: every encoder needs at least one layer");
  if (proj_dim <= 0 || mlp_ratio <= 0 || max_len < 2)
    throw DataError("model: bad projection or sequence settings");
  if (vocab_size <= 0) throw DataError("model: vocab_size must be set before use");
  if (!(tau_init > 0.0) || !(tau_min > 0.0) || tau_min > tau_max)
    throw DataError("model: temperature settings out of range");
}

Mat& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  auto [it, fresh] = params_.emplace(name, Mat::Zero(rows, cols));
  if (!fresh) throw DataError("model: duplicate parameter name " + name);
  return it->second;
}

Mat& ParamStore::at(const std::string& name) {
  const auto it = params_.find(name);
  if (it == params_.end()) throw DataError("model: unknown parameter " + name);
  return it->second;
}

const Mat& ParamStore::at(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw DataError("model: unknown parameter " + name);
  return it->second;
}

int64_t ParamStore::scalar_count() const {
  int64_t n = 0;
  for (const auto& [name, m] : params_) n += m.size();
  return n;
}

bool ParamStore::same_shapes(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.rows() != b->second.rows() ||
        a->second.cols() != b->second.cols())
      return false;
  }
  return true;
}

bool ParamStore::all_finite() const {
  for (const auto& [name, m] : params_)
    if (!m.allFinite()) return false;
  return true;
}

namespace {

void normal_fill(Mat& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal(0.0, stddev);
}

void add_attention_block(ParamStore& s, const std::string& p, int d, Rng& rng, double stddev) {
  for (const char* part : {"q", "k", "v", "o"}) {
    normal_fill(s.add(p + part + ".w", d, d), rng, stddev);
    s.add(p + part + ".b", 1, d);
  }
}

void add_layer_norm(ParamStore& s, const std::string& p, int d) {
  s.add(p + ".g", 1, d).setOnes();
  s.add(p + ".b", 1, d);
}

void add_mlp(ParamStore& s, const std::string& p, int d, int hidden, Rng& rng, double stddev) {
  normal_fill(s.add(p + "mlp.w1", d, hidden), rng, stddev);
  s.add(p + "mlp.b1", 1, hidden);
  normal_fill(s.add(p + "mlp.w2", hidden, d), rng, stddev);
  s.add(p + "mlp.b2", 1, d);
}

void add_encoder_layer(ParamStore& s, const std::string& p, int d, int hidden, Rng& rng,
                       double stddev) {
  add_layer_norm(s, p + "ln1", d);
  add_attention_block(s, p, d, rng, stddev);
  add_layer_norm(s, p + "ln2", d);
  add_mlp(s, p, d, hidden, rng, stddev);
}

void add_fusion_layer(ParamStore& s, const std::string& p, int d, int hidden, Rng& rng,
                      double stddev) {
  add_encoder_layer(s, p, d, hidden, rng, stddev);
  add_layer_norm(s, p + "lnx", d);
  for (const char* part : {"xq", "xk", "xv", "xo"}) {
    normal_fill(s.add(p + part + ".w", d, d), rng, stddev);
    s.add(p + part + ".b", 1, d);
  }
}

}  // namespace

void init_params(ParamStore& s, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const double stddev = 0.02;
  const int d = cfg.d_model;
  const int hidden = cfg.mlp_ratio * d;

  normal_fill(s.add("vis.patch.w", cfg.patch_dim(), d), rng, stddev);
  s.add("vis.patch.b", 1, d);
  normal_fill(s.add("vis.cls", 1, d), rng, stddev);
  normal_fill(s.add("vis.pos", cfg.num_patches() + 1, d), rng, stddev);
  for (int l = 0; l < cfg.vision_layers; ++l)
    add_encoder_layer(s, "vis.l" + std::to_string(l) + ".", d, hidden, rng, stddev);
  add_layer_norm(s, "vis.lnf", d);

  normal_fill(s.add("txt.emb", cfg.vocab_size, d), rng, stddev);
  normal_fill(s.add("txt.pos", cfg.max_len, d), rng, stddev);
  for (int l = 0; l < cfg.text_layers; ++l)
    add_encoder_layer(s, "txt.l" + std::to_string(l) + ".", d, hidden, rng, stddev);
  add_layer_norm(s, "txt.lnf", d);

  for (const char* path : {"fus_t2i", "fus_i2t"}) {
    for (int l = 0; l < cfg.fusion_layers; ++l)
      add_fusion_layer(s, std::string(path) + ".l" + std::to_string(l) + ".", d, hidden, rng,
                       stddev);
    add_layer_norm(s, std::string(path) + ".lnf", d);
  }

  normal_fill(s.add("proj.img.w", d, cfg.proj_dim), rng, stddev);
  s.add("proj.img.b", 1, cfg.proj_dim);
  normal_fill(s.add("proj.txt.w", d, cfg.proj_dim), rng, stddev);
  s.add("proj.txt.b", 1, cfg.proj_dim);

  normal_fill(s.add("itm.w", 2 * d, 2), rng, stddev);
  s.add("itm.b", 1, 2);
  normal_fill(s.add("mlm.w", d, cfg.vocab_size), rng, stddev);
  s.add("mlm.b", 1, cfg.vocab_size);

  s.add("tau", 1, 1)(0, 0) = cfg.tau_init;
}

Var Binder::operator()(const std::string& name) {
  const auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Mat& value = store_.at(name);
  const Var v = trainable_ ? tape_.param(value) : tape_.constant(value);
  bound_.emplace(name, v);
  return v;
}

Network::Network(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

Var Network::layer_norm(Binder& b, const std::string& gamma, const std::string& beta,
                        Var x) const {
  return b.tape().layer_norm_rows(x, b(gamma), b(beta), cfg_.ln_eps);
}

Var Network::attention(Binder& b, const std::string& prefix, Var queries, Var keys_values,
                       std::vector<Var>* attn_heads, const PathHooks* hooks) const {
  Tape& t = b.tape();
  Var kv = keys_values;
  if (hooks && hooks->key_allow) kv = t.gather_rows(kv, *hooks->key_allow);
  Var q = t.add_rowvec(t.matmul(queries, b(prefix + "q.w")), b(prefix + "q.b"));
  Var k = t.add_rowvec(t.matmul(kv, b(prefix + "k.w")), b(prefix + "k.b"));
  Var v = t.add_rowvec(t.matmul(kv, b(prefix + "v.w")), b(prefix + "v.b"));

  const int dh = cfg_.d_model / cfg_.heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> contexts;
  contexts.reserve(static_cast<size_t>(cfg_.heads));
  for (int h = 0; h < cfg_.heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, dh);
    Var kh = t.slice_cols(k, h * dh, dh);
    Var vh = t.slice_cols(v, h * dh, dh);
    Var probs = t.softmax_rows(t.scale(t.matmul_nt(qh, kh), inv_sqrt_dh));
    if (hooks && hooks->attn_grad_roots) probs = t.grad_root(probs);
    if (attn_heads) attn_heads->push_back(probs);
    contexts.push_back(t.matmul(probs, vh));
  }
  Var ctx = t.concat_cols(contexts);
  return t.add_rowvec(t.matmul(ctx, b(prefix + "o.w")), b(prefix + "o.b"));
}

Var Network::mlp(Binder& b, const std::string& prefix, Var x) const {
  Tape& t = b.tape();
  Var h = t.gelu(t.add_rowvec(t.matmul(x, b(prefix + "mlp.w1")), b(prefix + "mlp.b1")));
  return t.add_rowvec(t.matmul(h, b(prefix + "mlp.w2")), b(prefix + "mlp.b2"));
}

Var Network::encoder_layer(Binder& b, const std::string& p, Var x) const {
  Tape& t = b.tape();
  Var h = layer_norm(b, p + "ln1.g", p + "ln1.b", x);
  x = t.add(x, attention(b, p, h, h, nullptr, nullptr));
  Var h2 = layer_norm(b, p + "ln2.g", p + "ln2.b", x);
  return t.add(x, mlp(b, p, h2));
}

Var Network::fusion_layer(Binder& b, const std::string& p, Var x, Var kv,
                          std::vector<Var>* attn_heads, const PathHooks* hooks) const {
  Tape& t = b.tape();
  Var h = layer_norm(b, p + "ln1.g", p + "ln1.b", x);
  x = t.add(x, attention(b, p, h, h, nullptr, nullptr));
  Var hx = layer_norm(b, p + "lnx.g", p + "lnx.b", x);
  x = t.add(x, attention(b, p + "x", hx, kv, attn_heads, hooks));
  Var h2 = layer_norm(b, p + "ln2.g", p + "ln2.b", x);
  return t.add(x, mlp(b, p, h2));
}

Var Network::patch_embeddings(Binder& b, const Eigen::MatrixXd& image,
                              bool use_positional) const {
  if (image.rows() != cfg_.image_size || image.cols() != cfg_.image_size)
    throw DataError("model: image dims disagree with the configured size");
  Tape& t = b.tape();
  const int side = cfg_.patches_per_side();
  const int p = cfg_.patch_size;
  Mat patches(cfg_.num_patches(), cfg_.patch_dim());
  for (int gi = 0; gi < side; ++gi)
    for (int gj = 0; gj < side; ++gj)
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
          patches(gi * side + gj, i * p + j) = image(gi * p + i, gj * p + j);

  Var x = t.add_rowvec(t.matmul(t.constant(std::move(patches)), b("vis.patch.w")),
                       b("vis.patch.b"));
  x = t.concat_rows({b("vis.cls"), x});
  if (use_positional) x = t.add(x, b("vis.pos"));
  return x;
}

Var Network::encode_image(Binder& b, const Eigen::MatrixXd& image, bool use_positional) const {
  Var x = patch_embeddings(b, image, use_positional);
  for (int l = 0; l < cfg_.vision_layers; ++l)
    x = encoder_layer(b, "vis.l" + std::to_string(l) + ".", x);
  return layer_norm(b, "vis.lnf.g", "vis.lnf.b", x);
}

Var Network::encode_text(Binder& b, const std::vector<int>& ids) const {
  if (ids.empty() || static_cast<int>(ids.size()) > cfg_.max_len)
    throw DataError("model: token sequence empty or longer than max_len");
  for (int id : ids)
    if (id < 0 || id >= cfg_.vocab_size)
      throw DataError("model: token id outside the vocabulary");
  Tape& t = b.tape();
  Var x = t.gather_rows(b("txt.emb"), ids);
  x = t.add(x, t.slice_rows(b("txt.pos"), 0, static_cast<Eigen::Index>(ids.size())));
  for (int l = 0; l < cfg_.text_layers; ++l)
    x = encoder_layer(b, "txt.l" + std::to_string(l) + ".", x);
  return layer_norm(b, "txt.lnf.g", "txt.lnf.b", x);
}

Var Network::encode_text(Binder& b, const textpipe::TokenizedText& tokens) const {
  std::vector<int> ids(tokens.ids.begin(), tokens.ids.begin() + tokens.length);
  return encode_text(b, ids);
}

PathPass Network::fuse_path(Binder& b, FusionPath which, Var queries, Var keys,
                            const PathHooks* hooks) const {
  if (queries.cols() != cfg_.d_model || keys.cols() != cfg_.d_model)
    throw DataError("model: fusion inputs must have width d_model");
  const std::string base = which == FusionPath::t2i ? "fus_t2i" : "fus_i2t";
  PathPass out;
  Var x = queries;
  for (int l = 0; l < cfg_.fusion_layers; ++l) {
    out.attn.emplace_back();
    x = fusion_layer(b, base + ".l" + std::to_string(l) + ".", x, keys, &out.attn.back(), hooks);
  }
  out.seq = layer_norm(b, base + ".lnf.g", base + ".lnf.b", x);
  return out;
}

FusePass Network::fuse(Binder& b, Var patches, Var words, const PathHooks* t2i_hooks,
                       const PathHooks* i2t_hooks) const {
  FusePass out;
  out.t2i = fuse_path(b, FusionPath::t2i, words, patches, t2i_hooks);
  out.i2t = fuse_path(b, FusionPath::i2t, patches, words, i2t_hooks);
  return out;
}

Var Network::project(Binder& b, Var cls_row, Modality which) const {
  Tape& t = b.tape();
  const std::string p = which == Modality::image ? "proj.img." : "proj.txt.";
  Var z = t.add_rowvec(t.matmul(cls_row, b(p + "w")), b(p + "b"));
  return t.l2_normalize_rows(z);
}

Var Network::itm_logits(Binder& b, Var cls_t2i, Var cls_i2t) const {
  Tape& t = b.tape();
  Var joint = t.concat_cols({cls_t2i, cls_i2t});
  return t.add_rowvec(t.matmul(joint, b("itm.w")), b("itm.b"));
}

Var Network::mlm_logits(Binder& b, Var fused_words) const {
  Tape& t = b.tape();
  return t.add_rowvec(t.matmul(fused_words, b("mlm.w")), b("mlm.b"));
}

}  // namespace cvl::model
