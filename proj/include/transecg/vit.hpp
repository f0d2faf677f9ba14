#pragma once

// 1-D Vision Transformer over fixed-length ECG windows.
//
//   z_i  = x_i E                           patch i = samples [iP, (i+1)P)
//   Z_0  = [z_cls; z_1; ...; z_N] + E_pos
//   Z'_l = LN(Z_{l-1} + MHSA(Z_{l-1}))
//   Z_l  = LN(Z'_l + FFN(Z'_l))            FFN = GELU(. W1) W2
//   y    = softmax(Z_L[0] W_head + b_head)
//
// A strided 1-D convolution with kernel = stride = P is the same operator as
// the flatten-and-project patch embedding used here.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "transecg/param_io.hpp"
#include "transecg/signal.hpp"
#include "transecg/tensor.hpp"

namespace transecg {

struct VitConfig {
  std::size_t seq_len = 2000;
  std::size_t patch_size = 20;
  std::size_t hidden_dim = 256;
  std::size_t n_layers = 6;
  std::size_t n_heads = 6;
  std::size_t mlp_dim = 128;
  std::size_t n_classes = 2;
  double survival_prob = 0.8;
  double ln_eps = 1e-6;

  std::size_t n_patches() const { return seq_len / patch_size; }
  std::size_t tokens() const { return n_patches() + 1; }
  // floor(D / H); the concatenated heads span head_dim * n_heads <= D.
  std::size_t head_dim() const { return hidden_dim / n_heads; }
  std::size_t inner_dim() const { return head_dim() * n_heads; }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("config field '" + field + "' " + why);
    };
    if (patch_size == 0) fail("patch_size", "must be positive");
    if (seq_len == 0 || seq_len % patch_size != 0) fail("seq_len", "must be a positive multiple of patch_size");
    if (n_heads == 0) fail("n_heads", "must be >= 1");
    if (hidden_dim < 2) fail("hidden_dim", "must be >= 2");
    if (head_dim() == 0) fail("n_heads", "must not exceed hidden_dim");
    if (n_layers == 0) fail("n_layers", "must be >= 1");
    if (mlp_dim == 0) fail("mlp_dim", "must be positive");
    if (n_classes < 2) fail("n_classes", "must be >= 2");
    if (!(survival_prob > 0.0 && survival_prob <= 1.0)) fail("survival_prob", "must be in (0, 1]");
    if (!(ln_eps > 0.0)) fail("ln_eps", "must be positive");
  }
};

struct EncoderLayerParams {
  nn::Tensor w_q, w_k, w_v;  // [D, H*Dh]
  nn::Tensor w_o;            // [H*Dh, D]
  nn::Tensor ln1_gamma, ln1_beta;
  nn::Tensor ffn_w1;  // [D, mlp]
  nn::Tensor ffn_w2;  // [mlp, D]
  nn::Tensor ln2_gamma, ln2_beta;
};

struct VitParams {
  nn::Tensor patch_proj;   // E      [P, D]
  nn::Tensor pos_embed;    // E_pos  [N+1, D]
  nn::Tensor class_token;  // z_cls  [D]
  std::vector<EncoderLayerParams> layers;
  nn::Tensor head_w;  // [D, K]
  nn::Tensor head_b;  // [K]

  // Stable, serialization-order list of every parameter.
  std::vector<nn::NamedTensor> named() const {
    std::vector<nn::NamedTensor> out{{"patch_proj", patch_proj}, {"pos_embed", pos_embed}, {"class_token", class_token}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      out.push_back({p + "w_q", L.w_q});
      out.push_back({p + "w_k", L.w_k});
      out.push_back({p + "w_v", L.w_v});
      out.push_back({p + "w_o", L.w_o});
      out.push_back({p + "ln1_gamma", L.ln1_gamma});
      out.push_back({p + "ln1_beta", L.ln1_beta});
      out.push_back({p + "ffn_w1", L.ffn_w1});
      out.push_back({p + "ffn_w2", L.ffn_w2});
      out.push_back({p + "ln2_gamma", L.ln2_gamma});
      out.push_back({p + "ln2_beta", L.ln2_beta});
    }
    out.push_back({"head_w", head_w});
    out.push_back({"head_b", head_b});
    return out;
  }

  std::vector<nn::Tensor> tensors() const {
    std::vector<nn::Tensor> out;
    for (auto& nt : named()) out.push_back(nt.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += t.size();
    return n;
  }

  // Deep copy of values (no shared storage with *this).
  VitParams clone() const {
    VitParams c = *this;
    auto cp = [](nn::Tensor& t) { t = nn::Tensor(t.shape(), {t.data().begin(), t.data().end()}, t.requires_grad()); };
    cp(c.patch_proj);
    cp(c.pos_embed);
    cp(c.class_token);
    for (auto& L : c.layers)
      for (nn::Tensor* t : {&L.w_q, &L.w_k, &L.w_v, &L.w_o, &L.ln1_gamma, &L.ln1_beta, &L.ffn_w1, &L.ffn_w2,
                            &L.ln2_gamma, &L.ln2_beta})
        cp(*t);
    cp(c.head_w);
    cp(c.head_b);
    return c;
  }

  void set_requires_grad(bool on) const {
    for (auto t : tensors()) t.set_requires_grad(on);
  }
};

// Weights ~ N(0, 0.02) truncated at +-2 sigma (redrawn); LN gains 1; biases
// and class token 0.
inline VitParams init_params(const VitConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto trunc_normal = [&](nn::Shape shape) {
    std::vector<double> v(nn::numel(shape));
    for (auto& x : v) {
      do x = normal(rng);
      while (std::abs(x) > 0.04);
    }
    return nn::Tensor(std::move(shape), std::move(v), true);
  };
  const std::size_t D = cfg.hidden_dim, I = cfg.inner_dim();
  VitParams p;
  p.patch_proj = trunc_normal({cfg.patch_size, D});
  p.pos_embed = trunc_normal({cfg.tokens(), D});
  p.class_token = nn::Tensor::zeros({D}, true);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    EncoderLayerParams L;
    L.w_q = trunc_normal({D, I});
    L.w_k = trunc_normal({D, I});
    L.w_v = trunc_normal({D, I});
    L.w_o = trunc_normal({I, D});
    L.ln1_gamma = nn::Tensor::full({D}, 1.0, true);
    L.ln1_beta = nn::Tensor::zeros({D}, true);
    L.ffn_w1 = trunc_normal({D, cfg.mlp_dim});
    L.ffn_w2 = trunc_normal({cfg.mlp_dim, D});
    L.ln2_gamma = nn::Tensor::full({D}, 1.0, true);
    L.ln2_beta = nn::Tensor::zeros({D}, true);
    p.layers.push_back(std::move(L));
  }
  p.head_w = trunc_normal({D, cfg.n_classes});
  p.head_b = nn::Tensor::zeros({cfg.n_classes}, true);
  return p;
}

// Batch of windows -> tensor [B, seq_len].
inline nn::Tensor stack_windows(std::span<const EcgWindow* const> windows, std::size_t seq_len) {
  if (windows.empty()) throw std::invalid_argument("stack_windows: empty batch");
  std::vector<double> data;
  data.reserve(windows.size() * seq_len);
  for (const auto* w : windows) {
    if (w->samples.size() != seq_len)
      throw std::invalid_argument("window length " + std::to_string(w->samples.size()) +
                                  " does not match seq_len " + std::to_string(seq_len));
    data.insert(data.end(), w->samples.begin(), w->samples.end());
  }
  return nn::Tensor({windows.size(), seq_len}, std::move(data));
}

// [B, seq_len] -> [B, N+1, D]; row 0 is the class token.
inline nn::Tensor embed_patches(const nn::Tensor& batch, const VitParams& p, const VitConfig& cfg) {
  if (batch.rank() != 2 || batch.dim(1) != cfg.seq_len)
    throw std::invalid_argument("embed_patches: expected [B, " + std::to_string(cfg.seq_len) + "], got " +
                                nn::to_string(batch.shape()));
  const std::size_t B = batch.dim(0);
  const auto patches = nn::reshape(batch, {B, cfg.n_patches(), cfg.patch_size});
  const auto z = nn::matmul(patches, p.patch_proj);                        // [B, N, D]
  const auto cls = nn::reshape(nn::repeat_leading(p.class_token, B), {B, 1, cfg.hidden_dim});
  return nn::add(nn::concat({cls, z}, 1), p.pos_embed);
}

// Single window -> [N+1, D].
inline nn::Tensor embed_patches(const EcgWindow& w, const VitParams& p, const VitConfig& cfg) {
  if (w.samples.size() != cfg.seq_len)
    throw std::invalid_argument("embed_patches: window length " + std::to_string(w.samples.size()) +
                                " != seq_len " + std::to_string(cfg.seq_len));
  const nn::Tensor x({1, cfg.seq_len}, w.samples);
  return nn::reshape(embed_patches(x, p, cfg), {cfg.tokens(), cfg.hidden_dim});
}

struct MhsaResult {
  nn::Tensor out;                      // [B, T, D]
  std::optional<nn::Tensor> attention;  // [B, H, T, T], detached
};

// Per head: A_h = softmax(Q_h K_h^T / sqrt(Dh)); heads (A_h V_h) concatenated
// then projected by W_O. Accepts [T, D] or [B, T, D].
inline MhsaResult mhsa(const nn::Tensor& z_in, const EncoderLayerParams& L, const VitConfig& cfg,
                       bool capture) {
  const bool unbatched = z_in.rank() == 2;
  const nn::Tensor z = unbatched ? nn::reshape(z_in, {1, z_in.dim(0), z_in.dim(1)}) : z_in;
  const std::size_t B = z.dim(0), T = z.dim(1), H = cfg.n_heads, Dh = cfg.head_dim();
  auto heads = [&](const nn::Tensor& w) {
    return nn::permute(nn::reshape(nn::matmul(z, w), {B, T, H, Dh}), {0, 2, 1, 3});  // [B,H,T,Dh]
  };
  const auto q = heads(L.w_q);
  const auto k = heads(L.w_k);
  const auto v = heads(L.w_v);
  const auto scores = nn::scale(nn::matmul(q, nn::transpose(k)), 1.0 / std::sqrt(static_cast<double>(Dh)));
  const auto attn = nn::softmax(scores, -1);
  const auto ctx = nn::reshape(nn::permute(nn::matmul(attn, v), {0, 2, 1, 3}), {B, T, H * Dh});
  auto out = nn::matmul(ctx, L.w_o);
  if (unbatched) out = nn::reshape(out, {T, cfg.hidden_dim});
  MhsaResult r{out, std::nullopt};
  if (capture) r.attention = unbatched ? nn::reshape(attn.detach(), {H, T, T}) : attn.detach();
  return r;
}

inline nn::Tensor ffn(const nn::Tensor& z, const EncoderLayerParams& L) {
  return nn::matmul(nn::gelu(nn::matmul(z, L.ffn_w1)), L.ffn_w2);
}

// Stochastic depth on a residual branch [B, ...]: each sample's branch is
// kept with probability survival and rescaled by 1/survival.
inline nn::Tensor drop_path(const nn::Tensor& branch, double survival, std::mt19937_64& rng) {
  if (survival >= 1.0) return branch;
  std::bernoulli_distribution keep(survival);
  const std::size_t B = branch.dim(0);
  const std::size_t per = branch.size() / B;
  std::vector<double> mask(branch.size());
  for (std::size_t b = 0; b < B; ++b) {
    const double m = keep(rng) ? 1.0 / survival : 0.0;
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * per), per, m);
  }
  return nn::mul(branch, nn::Tensor(branch.shape(), std::move(mask)));
}

struct EncoderOutput {
  nn::Tensor z;
  std::optional<nn::Tensor> attention;
};

// Post-norm encoder block. rng is only used when training with
// survival_prob < 1.
inline EncoderOutput encoder_layer(const nn::Tensor& z, const EncoderLayerParams& L, const VitConfig& cfg,
                                   bool training, std::mt19937_64* rng, bool capture = false) {
  const bool stochastic = training && cfg.survival_prob < 1.0;
  if (stochastic && rng == nullptr) throw std::invalid_argument("encoder_layer: training needs an rng");
  auto branch = [&](nn::Tensor t) { return stochastic ? drop_path(t, cfg.survival_prob, *rng) : t; };
  auto att = mhsa(z, L, cfg, capture);
  const auto z1 = nn::layer_norm(nn::add(z, branch(att.out)), L.ln1_gamma, L.ln1_beta, cfg.ln_eps);
  const auto z2 = nn::layer_norm(nn::add(z1, branch(ffn(z1, L))), L.ln2_gamma, L.ln2_beta, cfg.ln_eps);
  return {z2, std::move(att.attention)};
}

struct ForwardArtifacts {
  nn::Tensor logits;                    // [B, K]
  nn::Tensor probs;                     // [B, K]
  std::vector<nn::Tensor> attention;    // per layer [B, H, T, T], empty unless captured
  nn::Tensor final_class_token;         // [B, D]
};

inline ForwardArtifacts forward(const nn::Tensor& batch, const VitParams& p, const VitConfig& cfg, bool training,
                                bool capture_attention, std::mt19937_64* rng = nullptr) {
  auto z = embed_patches(batch, p, cfg);
  ForwardArtifacts fa;
  for (const auto& L : p.layers) {
    auto enc = encoder_layer(z, L, cfg, training, rng, capture_attention);
    z = enc.z;
    if (enc.attention) fa.attention.push_back(std::move(*enc.attention));
  }
  const std::size_t B = batch.dim(0);
  fa.final_class_token = nn::reshape(nn::slice(z, 1, 0, 1), {B, cfg.hidden_dim});
  fa.logits = nn::linear(fa.final_class_token, p.head_w, p.head_b);
  fa.probs = nn::softmax(fa.logits, -1);
  return fa;
}

struct VitModel {
  VitConfig config;
  VitParams params;

  ForwardArtifacts infer(std::span<const EcgWindow* const> windows, bool capture_attention = false) const {
    nn::NoGradGuard guard;
    return forward(stack_windows(windows, config.seq_len), params, config, false, capture_attention);
  }
};

// ---------------------------------------------------------------------------
// Checkpoint = tensor container with the parameters, config scalars
// ("config.<field>"), the task name ("task/<name>") and the label vocabulary
// ("vocab/<index>/<label>", scalar = index).

struct Checkpoint {
  VitModel model;
  std::string task;
  std::vector<std::string> vocab;
};

inline std::vector<nn::NamedTensor> checkpoint_records(const Checkpoint& ck) {
  const auto& c = ck.model.config;
  std::vector<nn::NamedTensor> out;
  auto scalar = [&](const std::string& name, double v) { out.push_back({name, nn::Tensor::scalar(v)}); };
  scalar("config.seq_len", static_cast<double>(c.seq_len));
  scalar("config.patch_size", static_cast<double>(c.patch_size));
  scalar("config.n_patches", static_cast<double>(c.n_patches()));
  scalar("config.hidden_dim", static_cast<double>(c.hidden_dim));
  scalar("config.n_layers", static_cast<double>(c.n_layers));
  scalar("config.n_heads", static_cast<double>(c.n_heads));
  scalar("config.head_dim", static_cast<double>(c.head_dim()));
  scalar("config.mlp_dim", static_cast<double>(c.mlp_dim));
  scalar("config.n_classes", static_cast<double>(c.n_classes));
  scalar("config.survival_prob", c.survival_prob);
  scalar("config.ln_eps", c.ln_eps);
  scalar("task/" + ck.task, 0.0);
  for (std::size_t i = 0; i < ck.vocab.size(); ++i)
    scalar("vocab/" + std::to_string(i) + "/" + ck.vocab[i], static_cast<double>(i));
  for (auto& nt : ck.model.params.named()) out.push_back({"param." + nt.name, nt.tensor.detach()});
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nn::save_tensors(path, checkpoint_records(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto records = nn::load_tensors(path);
  std::map<std::string, double> cfg;
  std::map<std::string, nn::Tensor> params;
  Checkpoint ck;
  std::map<std::size_t, std::string> vocab;
  for (const auto& [name, t] : records) {
    if (name.rfind("config.", 0) == 0) {
      cfg[name.substr(7)] = t.item();
    } else if (name.rfind("task/", 0) == 0) {
      ck.task = name.substr(5);
    } else if (name.rfind("vocab/", 0) == 0) {
      const auto rest = name.substr(6);
      const auto slash = rest.find('/');
      if (slash == std::string::npos) throw std::runtime_error("checkpoint: malformed vocab record '" + name + "'");
      vocab[std::stoul(rest.substr(0, slash))] = rest.substr(slash + 1);
    } else if (name.rfind("param.", 0) == 0) {
      params[name.substr(6)] = t;
    } else {
      throw std::runtime_error("checkpoint: unknown record '" + name + "'");
    }
  }
  auto need = [&](const char* k) {
    auto it = cfg.find(k);
    if (it == cfg.end()) throw std::runtime_error(std::string("checkpoint: missing config.") + k);
    return it->second;
  };
  auto& c = ck.model.config;
  c.seq_len = static_cast<std::size_t>(need("seq_len"));
  c.patch_size = static_cast<std::size_t>(need("patch_size"));
  c.hidden_dim = static_cast<std::size_t>(need("hidden_dim"));
  c.n_layers = static_cast<std::size_t>(need("n_layers"));
  c.n_heads = static_cast<std::size_t>(need("n_heads"));
  c.mlp_dim = static_cast<std::size_t>(need("mlp_dim"));
  c.n_classes = static_cast<std::size_t>(need("n_classes"));
  c.survival_prob = need("survival_prob");
  c.ln_eps = need("ln_eps");
  c.validate();
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (!vocab.count(i)) throw std::runtime_error("checkpoint: vocabulary has a gap at index " + std::to_string(i));
    ck.vocab.push_back(vocab[i]);
  }

  // Shapes are checked against a freshly laid-out parameter set.
  auto layout = init_params(c, 0);
  auto assign = [&](const std::string& name, nn::Tensor& slot) {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
    if (it->second.shape() != slot.shape())
      throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " + nn::to_string(it->second.shape()) +
                               ", expected " + nn::to_string(slot.shape()));
    slot = nn::Tensor(it->second.shape(), {it->second.data().begin(), it->second.data().end()}, true);
  };
  auto& P = layout;
  assign("patch_proj", P.patch_proj);
  assign("pos_embed", P.pos_embed);
  assign("class_token", P.class_token);
  for (std::size_t l = 0; l < P.layers.size(); ++l) {
    auto& L = P.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    assign(p + "w_q", L.w_q);
    assign(p + "w_k", L.w_k);
    assign(p + "w_v", L.w_v);
    assign(p + "w_o", L.w_o);
    assign(p + "ln1_gamma", L.ln1_gamma);
    assign(p + "ln1_beta", L.ln1_beta);
    assign(p + "ffn_w1", L.ffn_w1);
    assign(p + "ffn_w2", L.ffn_w2);
    assign(p + "ln2_gamma", L.ln2_gamma);
    assign(p + "ln2_beta", L.ln2_beta);
  }
  assign("head_w", P.head_w);
  assign("head_b", P.head_b);
  ck.model.params = std::move(layout);
  return ck;
}

}  // namespace transecg
