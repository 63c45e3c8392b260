// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "graft/common.hpp"
#include "graft/tensor.hpp"

namespace graft {

// decoder-only transformer dimensions; pre-norm, rotary positions, gated ffn
struct model_config {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t d_ffn = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  double rotary_base = 10000.0;
  double norm_eps = 1e-5;

  void validate() const {
    if (n_layers == 0) throw config_error("model config: n_layers must be positive");
    if (d_model == 0) throw config_error("model config: d_model must be positive");
    if (n_heads == 0) throw config_error("model config: n_heads must be positive");
    if (d_ffn == 0) throw config_error("model config: d_ffn must be positive");
    if (vocab_size < 2) throw config_error("model config: vocab_size must be at least 2");
    if (max_seq_len == 0) throw config_error("model config: max_seq_len must be positive");
    if (d_model % n_heads != 0)
      throw config_error("model config: d_model " + std::to_string(d_model) +
                         " not divisible by n_heads " + std::to_string(n_heads));
    if ((d_model / n_heads) % 2 != 0)
      throw config_error("model config: head dimension " + std::to_string(d_model / n_heads) +
                         " must be even for rotary positions");
    if (rotary_base <= 1.0) throw config_error("model config: rotary_base must exceed 1");
    if (norm_eps <= 0.0) throw config_error("model config: norm_eps must be positive");
  }

  std::size_t head_dim() const { return d_model / n_heads; }

  nlohmann::json to_json() const {
    return nlohmann::json{{"n_layers", n_layers},     {"d_model", d_model},
                          {"n_heads", n_heads},       {"d_ffn", d_ffn},
                          {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
                          {"rotary_base", rotary_base}, {"norm_eps", norm_eps}};
  }

  static model_config from_json(const nlohmann::json& j) {
    model_config cfg;
    try {
      cfg.n_layers = j.at("n_layers").get<std::size_t>();
      cfg.d_model = j.at("d_model").get<std::size_t>();
      cfg.n_heads = j.at("n_heads").get<std::size_t>();
      cfg.d_ffn = j.at("d_ffn").get<std::size_t>();
      cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
      cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
      if (j.contains("rotary_base")) cfg.rotary_base = j.at("rotary_base").get<double>();
      if (j.contains("norm_eps")) cfg.norm_eps = j.at("norm_eps").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw config_error(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
  }

  bool operator==(const model_config& o) const {
    return n_layers == o.n_layers && d_model == o.d_model && n_heads == o.n_heads &&
           d_ffn == o.d_ffn && vocab_size == o.vocab_size && max_seq_len == o.max_seq_len &&
           rotary_base == o.rotary_base && norm_eps == o.norm_eps;
  }
};

enum class param_role { embedding, head, norm, attention, ffn, adapter };

inline const char* param_role_name(param_role r) {
  switch (r) {
    case param_role::embedding: return "embedding";
    case param_role::head: return "head";
    case param_role::norm: return "norm";
    case param_role::attention: return "attention";
    case param_role::ffn: return "ffn";
    case param_role::adapter: return "adapter";
  }
  return "unknown";
}

inline param_role parse_param_role(const std::string& s) {
  if (s == "embedding") return param_role::embedding;
  if (s == "head") return param_role::head;
  if (s == "norm") return param_role::norm;
  if (s == "attention") return param_role::attention;
  if (s == "ffn") return param_role::ffn;
  if (s == "adapter") return param_role::adapter;
  throw error("unknown parameter role: " + s);
}

// named tensors in a fixed canonical order; names unique, one role each
struct parameter_store {
  model_config config;

  void add(const std::string& name, tensor t, param_role role) {
    if (index_.count(name)) throw error("duplicate parameter name: " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
    roles_.push_back(role);
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw error("unknown parameter name: " + name);
    return tensors_[it->second];
  }

  const tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw error("unknown parameter name: " + name);
    return tensors_[it->second];
  }

  param_role role(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw error("unknown parameter name: " + name);
    return roles_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }

  std::uint64_t total_elements() const {
    std::uint64_t n = 0;
    for (const tensor& t : tensors_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<tensor> tensors_;
  std::vector<param_role> roles_;
};

inline std::string layer_param_name(std::size_t layer, const std::string& leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

// per-name seeding keeps initialization independent of build order
inline tensor gaussian_tensor(std::vector<std::size_t> shape, std::uint64_t master_seed,
                              const std::string& name, double sigma) {
  tensor t = tensor::zeros(std::move(shape));
  rng gen(derive_seed(master_seed, name));
  fill_gaussian(t, gen, sigma);
  return t;
}

inline parameter_store build_model(const model_config& cfg, std::uint64_t seed) {
  cfg.validate();
  const double sigma = 0.02;
  parameter_store store;
  store.config = cfg;
  store.add("token_embedding",
            gaussian_tensor({cfg.vocab_size, cfg.d_model}, seed, "token_embedding", sigma),
            param_role::embedding);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    auto name = [&](const char* leaf) { return layer_param_name(i, leaf); };
    tensor attn_norm = tensor::zeros({cfg.d_model});
    fill_constant(attn_norm, 1.0f);
    store.add(name("attn_norm"), std::move(attn_norm), param_role::norm);
    for (const char* leaf : {"wq", "wk", "wv", "wo"})
      store.add(name(leaf), gaussian_tensor({cfg.d_model, cfg.d_model}, seed, name(leaf), sigma),
                param_role::attention);
    tensor ffn_norm = tensor::zeros({cfg.d_model});
    fill_constant(ffn_norm, 1.0f);
    store.add(name("ffn_norm"), std::move(ffn_norm), param_role::norm);
    store.add(name("w_gate"), gaussian_tensor({cfg.d_ffn, cfg.d_model}, seed, name("w_gate"), sigma),
              param_role::ffn);
    store.add(name("w_up"), gaussian_tensor({cfg.d_ffn, cfg.d_model}, seed, name("w_up"), sigma),
              param_role::ffn);
    store.add(name("w_down"), gaussian_tensor({cfg.d_model, cfg.d_ffn}, seed, name("w_down"), sigma),
              param_role::ffn);
  }
  tensor final_norm = tensor::zeros({cfg.d_model});
  fill_constant(final_norm, 1.0f);
  store.add("final_norm", std::move(final_norm), param_role::norm);
  store.add("lm_head",
            gaussian_tensor({cfg.vocab_size, cfg.d_model}, seed, "lm_head", sigma),
            param_role::head);
  return store;
}

enum class expand_policy { zero_init, mean_gaussian };

inline expand_policy parse_expand_policy(const std::string& s) {
  if (s == "zero") return expand_policy::zero_init;
  if (s == "mean_gaussian") return expand_policy::mean_gaussian;
  throw config_error("unknown embedding init policy: " + s + " (expected zero or mean_gaussian)");
}

// grows token_embedding and lm_head; rows below old_v stay bit-identical
inline parameter_store expand_embeddings(const parameter_store& store, std::size_t old_v,
                                         std::size_t new_v, expand_policy policy,
                                         std::uint64_t seed) {
  if (store.config.vocab_size != old_v)
    throw error("expand_embeddings: store vocabulary size is " +
                std::to_string(store.config.vocab_size) + ", not " + std::to_string(old_v));
  if (new_v <= old_v)
    throw error("expand_embeddings: new vocabulary size " + std::to_string(new_v) +
                " must exceed old size " + std::to_string(old_v));
  const double sigma = 0.02;
  parameter_store out;
  out.config = store.config;
  out.config.vocab_size = new_v;
  for (const std::string& name : store.names()) {
    const tensor& src = store.at(name);
    if (name != "token_embedding" && name != "lm_head") {
      out.add(name, src, store.role(name));
      continue;
    }
    const std::size_t d = store.config.d_model;
    tensor grown = tensor::zeros({new_v, d});
    for (std::size_t r = 0; r < old_v; ++r)
      for (std::size_t c = 0; c < d; ++c) grown.at(r, c) = src.at(r, c);
    if (policy == expand_policy::mean_gaussian) {
      std::vector<double> mean(d, 0.0);
      for (std::size_t r = 0; r < old_v; ++r)
        for (std::size_t c = 0; c < d; ++c) mean[c] += src.at(r, c);
      for (std::size_t c = 0; c < d; ++c) mean[c] /= static_cast<double>(old_v);
      rng gen(derive_seed(seed, name + ".expand"));
      for (std::size_t r = old_v; r < new_v; ++r)
        for (std::size_t c = 0; c < d; ++c)
          grown.at(r, c) = static_cast<float>(mean[c] + gen.next_gaussian() * sigma);
    }
    out.add(name, std::move(grown), store.role(name));
  }
  return out;
}

// low-rank update on one projection: contributes (alpha / r) * b * a * x
struct lora_adapter {
  std::string target;
  std::size_t r = 0;
  double alpha = 0.0;
  tensor a;  // [r x d_in]
  tensor b;  // [d_out x r]

  double scale() const { return alpha / static_cast<double>(r); }
};

struct lora_set {
  std::vector<lora_adapter> adapters;
  std::size_t rank = 0;
  double alpha = 0.0;
  bool merged = false;

  const lora_adapter* find(const std::string& target) const {
    for (const lora_adapter& ad : adapters)
      if (ad.target == target) return &ad;
    return nullptr;
  }
};

inline std::vector<std::string> default_lora_target_kinds() {
  return {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};
}

inline std::vector<std::string> default_lora_targets(const model_config& cfg) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < cfg.n_layers; ++i)
    for (const std::string& kind : default_lora_target_kinds())
      out.push_back(layer_param_name(i, kind));
  return out;
}

struct lora_spec;
inline std::vector<std::string> expand_lora_targets(const model_config& cfg,
                                                    const lora_spec& spec);

// b starts at zero so the adapted forward equals the base forward exactly
inline lora_set attach_lora(const parameter_store& store, const std::vector<std::string>& targets,
                            std::size_t r, double alpha, std::uint64_t seed) {
  if (r == 0) throw config_error("lora rank must be positive");
  lora_set set;
  set.rank = r;
  set.alpha = alpha;
  for (const std::string& target : targets) {
    if (!store.has(target)) throw error("unknown lora target: " + target);
    const tensor& w = store.at(target);
    if (!w.is_matrix()) throw error("lora target is not a projection matrix: " + target);
    const std::size_t d_out = w.rows();
    const std::size_t d_in = w.cols();
    if (r > d_out || r > d_in)
      throw config_error("lora rank " + std::to_string(r) + " exceeds target dims of " + target);
    lora_adapter ad;
    ad.target = target;
    ad.r = r;
    ad.alpha = alpha;
    ad.a = gaussian_tensor({r, d_in}, seed, target + ".lora_a", 0.02);
    ad.b = tensor::zeros({d_out, r});
    set.adapters.push_back(std::move(ad));
  }
  return set;
}

// folds (alpha / r) * b * a into each target weight; consumes the adapters
inline parameter_store merge_lora(const parameter_store& store, lora_set& set) {
  if (set.merged) throw error("lora adapters already merged");
  parameter_store out;
  out.config = store.config;
  for (const std::string& name : store.names()) out.add(name, store.at(name), store.role(name));
  for (const lora_adapter& ad : set.adapters) {
    tensor& w = out.at(ad.target);
    const std::size_t d_out = w.rows();
    const std::size_t d_in = w.cols();
    if (ad.b.rows() != d_out || ad.b.cols() != ad.r || ad.a.rows() != ad.r || ad.a.cols() != d_in)
      throw error("lora shape mismatch on target " + ad.target + ": a " +
                  shape_string(ad.a.shape) + ", b " + shape_string(ad.b.shape) + ", weight " +
                  shape_string(w.shape));
    const double scale = ad.scale();
    for (std::size_t i = 0; i < d_out; ++i)
      for (std::size_t j = 0; j < d_in; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < ad.r; ++k)
          acc += static_cast<double>(ad.b.at(i, k)) * static_cast<double>(ad.a.at(k, j));
        w.at(i, j) = static_cast<float>(static_cast<double>(w.at(i, j)) + scale * acc);
      }
  }
  set.merged = true;
  return out;
}

// training stages in their enforced order; base_pretrain builds synthetic
// base models and is the only stage that updates transformer blocks
enum class stage_kind {
  base_pretrain,
  embed_align_mono,
  embed_align_bilingual,
  lora_pretrain,
  instruct_tune
};

inline const char* stage_kind_name(stage_kind k) {
  switch (k) {
    case stage_kind::base_pretrain: return "base_pretrain";
    case stage_kind::embed_align_mono: return "embed_align_mono";
    case stage_kind::embed_align_bilingual: return "embed_align_bilingual";
    case stage_kind::lora_pretrain: return "lora_pretrain";
    case stage_kind::instruct_tune: return "instruct_tune";
  }
  return "unknown";
}

inline stage_kind parse_stage_kind(const std::string& s) {
  if (s == "base_pretrain") return stage_kind::base_pretrain;
  if (s == "embed_align_mono") return stage_kind::embed_align_mono;
  if (s == "embed_align_bilingual") return stage_kind::embed_align_bilingual;
  if (s == "lora_pretrain") return stage_kind::lora_pretrain;
  if (s == "instruct_tune") return stage_kind::instruct_tune;
  throw config_error("unknown stage kind: " + s);
}

inline bool is_alignment_stage(stage_kind k) {
  return k == stage_kind::embed_align_mono || k == stage_kind::embed_align_bilingual;
}

inline bool is_lora_stage(stage_kind k) {
  return k == stage_kind::lora_pretrain || k == stage_kind::instruct_tune;
}

// trainable parameter names for a stage; adapters contribute two names each
inline std::set<std::string> freeze_mask_for_stage(const parameter_store& store, stage_kind kind,
                                                   const lora_set* adapters) {
  std::set<std::string> mask;
  if (kind == stage_kind::base_pretrain) {
    for (const std::string& name : store.names()) mask.insert(name);
    return mask;
  }
  mask.insert("token_embedding");
  mask.insert("lm_head");
  if (is_lora_stage(kind)) {
    const bool have_adapters = adapters != nullptr && !adapters->adapters.empty();
    // instruction tuning without adapters is the no-LoRA variant: it updates
    // embeddings and head only; low-rank pretraining is pointless without them
    if (!have_adapters) {
      if (kind == stage_kind::lora_pretrain)
        throw error("stage lora_pretrain requires lora adapters");
      return mask;
    }
    for (const lora_adapter& ad : adapters->adapters) {
      mask.insert(ad.target + ".lora_a");
      mask.insert(ad.target + ".lora_b");
    }
  }
  return mask;
}

struct lora_spec {
  std::size_t r = 8;
  double alpha = 32.0;
  std::vector<std::string> target_kinds = default_lora_target_kinds();
};

struct param_count_report {
  std::uint64_t total = 0;
  std::uint64_t trainable = 0;
  double percentage = 0.0;  // 100 * trainable / total
};

inline std::pair<std::uint64_t, std::uint64_t> lora_kind_dims(const std::string& kind,
                                                              const model_config& cfg) {
  if (kind == "wq" || kind == "wk" || kind == "wv" || kind == "wo")
    return {cfg.d_model, cfg.d_model};
  if (kind == "w_gate" || kind == "w_up") return {cfg.d_model, cfg.d_ffn};
  if (kind == "w_down") return {cfg.d_ffn, cfg.d_model};
  throw config_error("unknown lora target kind: " + kind);
}

// closed-form accounting; must equal brute-force element counts of the store
inline param_count_report count_parameters(const model_config& cfg, stage_kind kind,
                                           const lora_spec& spec = {}) {
  cfg.validate();
  const std::uint64_t v = cfg.vocab_size;
  const std::uint64_t d = cfg.d_model;
  const std::uint64_t f = cfg.d_ffn;
  const std::uint64_t l = cfg.n_layers;
  const std::uint64_t embeddings = 2 * v * d;
  const std::uint64_t per_layer = 4 * d * d + 3 * f * d + 2 * d;
  const std::uint64_t base_total = embeddings + l * per_layer + d;

  std::uint64_t lora_params = 0;
  for (const std::string& kind_name : spec.target_kinds) {
    auto [d_in, d_out] = lora_kind_dims(kind_name, cfg);
    lora_params += static_cast<std::uint64_t>(spec.r) * (d_in + d_out);
  }
  lora_params *= l;

  param_count_report rep;
  switch (kind) {
    case stage_kind::base_pretrain:
      rep.total = base_total;
      rep.trainable = base_total;
      break;
    case stage_kind::embed_align_mono:
    case stage_kind::embed_align_bilingual:
      rep.total = base_total;
      rep.trainable = embeddings;
      break;
    case stage_kind::lora_pretrain:
    case stage_kind::instruct_tune:
      rep.total = base_total + lora_params;
      rep.trainable = embeddings + lora_params;
      break;
  }
  rep.percentage = 100.0 * static_cast<double>(rep.trainable) / static_cast<double>(rep.total);
  return rep;
}

// per-layer target names for a spec's projection kinds
inline std::vector<std::string> expand_lora_targets(const model_config& cfg,
                                                    const lora_spec& spec) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < cfg.n_layers; ++i)
    for (const std::string& kind : spec.target_kinds) {
      lora_kind_dims(kind, cfg);  // rejects unknown kinds before they reach attach
      out.push_back(layer_param_name(i, kind));
    }
  return out;
}

inline std::uint64_t lora_parameter_count(const model_config& cfg, const lora_spec& spec) {
  std::uint64_t per_layer = 0;
  for (const std::string& kind_name : spec.target_kinds) {
    auto [d_in, d_out] = lora_kind_dims(kind_name, cfg);
    per_layer += static_cast<std::uint64_t>(spec.r) * (d_in + d_out);
  }
  return per_layer * cfg.n_layers;
}

}  // namespace graft
