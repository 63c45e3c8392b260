// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "graft/model.hpp"

namespace graft {

// all activations and gradients are double; parameters stay float32.
// loops run in one fixed order so repeated runs are bit-identical.

using dvec = std::vector<double>;
using grad_map = std::map<std::string, dvec>;

struct forward_options {
  // >0: logits for ids >= vocab_limit forced to -inf (diagnostic masking)
  std::size_t vocab_limit = 0;
};

namespace detail {

// y = w * x with w [out x in]
inline void matvec(const tensor& w, const double* x, double* y) {
  const std::size_t out = w.rows();
  const std::size_t in = w.cols();
  for (std::size_t i = 0; i < out; ++i) {
    double acc = 0.0;
    const float* row = w.data.data() + i * in;
    for (std::size_t j = 0; j < in; ++j) acc += static_cast<double>(row[j]) * x[j];
    y[i] = acc;
  }
}

// y += w^T * dy
inline void matvec_transposed_add(const tensor& w, const double* dy, double* y) {
  const std::size_t out = w.rows();
  const std::size_t in = w.cols();
  for (std::size_t i = 0; i < out; ++i) {
    const float* row = w.data.data() + i * in;
    const double g = dy[i];
    for (std::size_t j = 0; j < in; ++j) y[j] += static_cast<double>(row[j]) * g;
  }
}

// dw += dy (x) x, dw laid out [out x in]
inline void outer_add(dvec& dw, const double* dy, const double* x, std::size_t out,
                      std::size_t in) {
  for (std::size_t i = 0; i < out; ++i) {
    double* row = dw.data() + i * in;
    const double g = dy[i];
    for (std::size_t j = 0; j < in; ++j) row[j] += g * x[j];
  }
}

inline double rms_inverse(const double* x, std::size_t d, double eps) {
  double sum = 0.0;
  for (std::size_t j = 0; j < d; ++j) sum += x[j] * x[j];
  return 1.0 / std::sqrt(sum / static_cast<double>(d) + eps);
}

// y = g (.) x * inv
inline void rmsnorm_apply(const tensor& g, const double* x, double inv, double* y,
                          std::size_t d) {
  for (std::size_t j = 0; j < d; ++j) y[j] = static_cast<double>(g[j]) * x[j] * inv;
}

// dx += per-element norm backward; dg accumulated by caller when trainable
inline void rmsnorm_backward(const tensor& g, const double* x, double inv, const double* dy,
                             double* dx, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) s += dy[j] * static_cast<double>(g[j]) * x[j];
  const double inv3 = inv * inv * inv;
  const double dn = static_cast<double>(d);
  for (std::size_t j = 0; j < d; ++j)
    dx[j] += static_cast<double>(g[j]) * dy[j] * inv - x[j] * inv3 * s / dn;
}

// rotates pair (i, i + hd/2) of every head by pos-dependent angles
inline void rope_apply(double* x, std::size_t pos, std::size_t n_heads, std::size_t hd,
                       double base, bool inverse) {
  const std::size_t half = hd / 2;
  for (std::size_t h = 0; h < n_heads; ++h) {
    double* head = x + h * hd;
    for (std::size_t j = 0; j < half; ++j) {
      const double angle =
          static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(j) /
                                                        static_cast<double>(hd));
      const double c = std::cos(angle);
      const double s = inverse ? -std::sin(angle) : std::sin(angle);
      const double a = head[j];
      const double b = head[j + half];
      head[j] = a * c - b * s;
      head[j + half] = a * s + b * c;
    }
  }
}

}  // namespace detail

struct layer_trace {
  dvec x_in;      // [T*D] residual stream entering the layer
  dvec inv1;      // [T]
  dvec xn1;       // [T*D]
  dvec q, k, v;   // [T*D]; q,k stored post-rotation
  dvec probs;     // [H*T*T], zero above the diagonal
  dvec ctx;       // [T*D]
  dvec x_mid;     // [T*D] after attention residual
  dvec inv2;      // [T]
  dvec xn2;       // [T*D]
  dvec gate_pre;  // [T*F]
  dvec up_pre;    // [T*F]
  dvec sig;       // [T*F] sigmoid(gate_pre)
  dvec prod;      // [T*F] silu(gate_pre) (.) up_pre
  std::map<std::string, dvec> lora_ax;  // target -> [T*r]
};

struct forward_trace {
  std::vector<std::uint32_t> ids;
  std::vector<layer_trace> layers;
  dvec x_final;  // [T*D]
  dvec inv_f;    // [T]
  dvec xnf;      // [T*D]
  dvec logits;   // [T*V]
};

namespace detail {

// projection through w plus optional low-rank path; caches a*x when tracing
inline void project(const tensor& w, const lora_adapter* ad, const double* x, double* y,
                    dvec* ax_cache, std::size_t t) {
  matvec(w, x, y);
  if (ad == nullptr) return;
  const std::size_t r = ad->r;
  const std::size_t d_in = w.cols();
  const std::size_t d_out = w.rows();
  dvec ax(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    const float* row = ad->a.data.data() + i * d_in;
    for (std::size_t j = 0; j < d_in; ++j) acc += static_cast<double>(row[j]) * x[j];
    ax[i] = acc;
  }
  const double scale = ad->scale();
  for (std::size_t i = 0; i < d_out; ++i) {
    double acc = 0.0;
    const float* row = ad->b.data.data() + i * r;
    for (std::size_t k = 0; k < r; ++k) acc += static_cast<double>(row[k]) * ax[k];
    y[i] += scale * acc;
  }
  if (ax_cache != nullptr)
    for (std::size_t i = 0; i < r; ++i) (*ax_cache)[t * r + i] = ax[i];
}

}  // namespace detail

// runs one sequence through the decoder; fills trace when given
inline dvec forward_sequence(const parameter_store& store, const lora_set* adapters,
                             const std::vector<std::uint32_t>& ids, forward_trace* trace,
                             const forward_options& opts = {}) {
  const model_config& cfg = store.config;
  const std::size_t t_len = ids.size();
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.d_ffn;
  const std::size_t v = cfg.vocab_size;
  const std::size_t hd = cfg.head_dim();
  if (t_len == 0) throw error("forward: empty token sequence");
  if (t_len > cfg.max_seq_len)
    throw error("forward: sequence length " + std::to_string(t_len) + " exceeds max_seq_len " +
                std::to_string(cfg.max_seq_len));
  for (std::size_t t = 0; t < t_len; ++t)
    if (ids[t] >= v)
      throw error("forward: token id " + std::to_string(ids[t]) + " at position " +
                  std::to_string(t) + " out of range for vocabulary size " + std::to_string(v));
  if (adapters != nullptr && adapters->merged)
    throw error("forward: lora adapters were already merged");

  const tensor& embedding = store.at("token_embedding");
  dvec x(t_len * d);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x[t * d + j] = static_cast<double>(embedding.at(ids[t], j));

  if (trace != nullptr) {
    trace->ids = ids;
    trace->layers.assign(cfg.n_layers, {});
  }

  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  dvec xn(t_len * d), q(t_len * d), k(t_len * d), val(t_len * d), ctx(t_len * d);
  dvec attn_out(d), gate_pre(t_len * f), up_pre(t_len * f), sig(t_len * f), prod(t_len * f);

  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const tensor& attn_norm = store.at(layer_param_name(layer, "attn_norm"));
    const tensor& wq = store.at(layer_param_name(layer, "wq"));
    const tensor& wk = store.at(layer_param_name(layer, "wk"));
    const tensor& wv = store.at(layer_param_name(layer, "wv"));
    const tensor& wo = store.at(layer_param_name(layer, "wo"));
    const tensor& ffn_norm = store.at(layer_param_name(layer, "ffn_norm"));
    const tensor& w_gate = store.at(layer_param_name(layer, "w_gate"));
    const tensor& w_up = store.at(layer_param_name(layer, "w_up"));
    const tensor& w_down = store.at(layer_param_name(layer, "w_down"));
    auto find_adapter = [&](const char* leaf) -> const lora_adapter* {
      return adapters == nullptr ? nullptr : adapters->find(layer_param_name(layer, leaf));
    };
    const lora_adapter* ad_q = find_adapter("wq");
    const lora_adapter* ad_k = find_adapter("wk");
    const lora_adapter* ad_v = find_adapter("wv");
    const lora_adapter* ad_o = find_adapter("wo");
    const lora_adapter* ad_gate = find_adapter("w_gate");
    const lora_adapter* ad_up = find_adapter("w_up");
    const lora_adapter* ad_down = find_adapter("w_down");

    layer_trace* lt = trace == nullptr ? nullptr : &trace->layers[layer];
    if (lt != nullptr) {
      lt->x_in = x;
      lt->inv1.resize(t_len);
      lt->probs.assign(cfg.n_heads * t_len * t_len, 0.0);
      auto reserve_ax = [&](const lora_adapter* ad) {
        if (ad != nullptr) lt->lora_ax[ad->target].assign(t_len * ad->r, 0.0);
      };
      reserve_ax(ad_q);
      reserve_ax(ad_k);
      reserve_ax(ad_v);
      reserve_ax(ad_o);
      reserve_ax(ad_gate);
      reserve_ax(ad_up);
      reserve_ax(ad_down);
    }
    auto ax_of = [&](const lora_adapter* ad) -> dvec* {
      return (lt != nullptr && ad != nullptr) ? &lt->lora_ax[ad->target] : nullptr;
    };

    for (std::size_t t = 0; t < t_len; ++t) {
      const double inv = detail::rms_inverse(&x[t * d], d, cfg.norm_eps);
      detail::rmsnorm_apply(attn_norm, &x[t * d], inv, &xn[t * d], d);
      if (lt != nullptr) lt->inv1[t] = inv;
      detail::project(wq, ad_q, &xn[t * d], &q[t * d], ax_of(ad_q), t);
      detail::project(wk, ad_k, &xn[t * d], &k[t * d], ax_of(ad_k), t);
      detail::project(wv, ad_v, &xn[t * d], &val[t * d], ax_of(ad_v), t);
      detail::rope_apply(&q[t * d], t, cfg.n_heads, hd, cfg.rotary_base, false);
      detail::rope_apply(&k[t * d], t, cfg.n_heads, hd, cfg.rotary_base, false);
    }

    // causal attention: position t attends to u <= t in ascending order
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * hd;
        dvec scores(t + 1);
        double max_score = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0.0;
          for (std::size_t j = 0; j < hd; ++j)
            acc += q[t * d + off + j] * k[u * d + off + j];
          scores[u] = acc * inv_sqrt_hd;
          if (scores[u] > max_score) max_score = scores[u];
        }
        double denom = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          scores[u] = std::exp(scores[u] - max_score);
          denom += scores[u];
        }
        for (std::size_t j = 0; j < hd; ++j) {
          double acc = 0.0;
          for (std::size_t u = 0; u <= t; ++u)
            acc += (scores[u] / denom) * val[u * d + off + j];
          ctx[t * d + off + j] = acc;
        }
        if (lt != nullptr)
          for (std::size_t u = 0; u <= t; ++u)
            lt->probs[(h * t_len + t) * t_len + u] = scores[u] / denom;
      }
    }

    for (std::size_t t = 0; t < t_len; ++t) {
      detail::project(wo, ad_o, &ctx[t * d], attn_out.data(), ax_of(ad_o), t);
      for (std::size_t j = 0; j < d; ++j) x[t * d + j] += attn_out[j];
    }

    if (lt != nullptr) {
      lt->xn1 = xn;
      lt->q = q;
      lt->k = k;
      lt->v = val;
      lt->ctx = ctx;
      lt->x_mid = x;
      lt->inv2.resize(t_len);
    }

    for (std::size_t t = 0; t < t_len; ++t) {
      const double inv = detail::rms_inverse(&x[t * d], d, cfg.norm_eps);
      detail::rmsnorm_apply(ffn_norm, &x[t * d], inv, &xn[t * d], d);
      if (lt != nullptr) lt->inv2[t] = inv;
      detail::project(w_gate, ad_gate, &xn[t * d], &gate_pre[t * f], ax_of(ad_gate), t);
      detail::project(w_up, ad_up, &xn[t * d], &up_pre[t * f], ax_of(ad_up), t);
      for (std::size_t j = 0; j < f; ++j) {
        const double z = gate_pre[t * f + j];
        const double s = 1.0 / (1.0 + std::exp(-z));
        sig[t * f + j] = s;
        prod[t * f + j] = z * s * up_pre[t * f + j];
      }
      dvec down(d);
      detail::project(w_down, ad_down, &prod[t * f], down.data(), ax_of(ad_down), t);
      for (std::size_t j = 0; j < d; ++j) x[t * d + j] += down[j];
    }

    if (lt != nullptr) {
      lt->xn2 = xn;
      lt->gate_pre = gate_pre;
      lt->up_pre = up_pre;
      lt->sig = sig;
      lt->prod = prod;
    }
  }

  const tensor& final_norm = store.at("final_norm");
  const tensor& lm_head = store.at("lm_head");
  dvec logits(t_len * v);
  dvec xnf(t_len * d);
  if (trace != nullptr) {
    trace->x_final = x;
    trace->inv_f.resize(t_len);
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    const double inv = detail::rms_inverse(&x[t * d], d, cfg.norm_eps);
    detail::rmsnorm_apply(final_norm, &x[t * d], inv, &xnf[t * d], d);
    if (trace != nullptr) trace->inv_f[t] = inv;
    detail::matvec(lm_head, &xnf[t * d], &logits[t * v]);
    if (opts.vocab_limit > 0)
      for (std::size_t i = opts.vocab_limit; i < v; ++i)
        logits[t * v + i] = -std::numeric_limits<double>::infinity();
  }
  if (trace != nullptr) {
    trace->xnf = xnf;
    trace->logits = logits;
  }
  return logits;
}

inline dvec forward_sequence(const parameter_store& store, const lora_set* adapters,
                             const std::vector<std::uint32_t>& ids,
                             const forward_options& opts = {}) {
  return forward_sequence(store, adapters, ids, nullptr, opts);
}

// mean cross entropy over masked positions; logits row t scores targets[t]
inline double next_token_loss(const dvec& logits, const std::vector<std::uint32_t>& targets,
                              const std::vector<std::uint8_t>& mask, std::size_t vocab_size) {
  if (targets.size() != mask.size() || logits.size() != targets.size() * vocab_size)
    throw error("next_token_loss: shape mismatch");
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    const double* row = &logits[t * vocab_size];
    double max_logit = row[0];
    for (std::size_t i = 1; i < vocab_size; ++i)
      if (row[i] > max_logit) max_logit = row[i];
    double denom = 0.0;
    for (std::size_t i = 0; i < vocab_size; ++i) denom += std::exp(row[i] - max_logit);
    total += std::log(denom) - (row[targets[t]] - max_logit);
    ++counted;
  }
  if (counted == 0) throw error("next_token_loss: every position is masked out");
  return total / static_cast<double>(counted);
}

// d(mean masked cross entropy)/d(logits): (softmax - onehot) / n_unmasked
inline dvec next_token_loss_backward(const dvec& logits, const std::vector<std::uint32_t>& targets,
                                     const std::vector<std::uint8_t>& mask,
                                     std::size_t vocab_size) {
  if (targets.size() != mask.size() || logits.size() != targets.size() * vocab_size)
    throw error("next_token_loss: shape mismatch");
  std::size_t counted = 0;
  for (std::size_t t = 0; t < mask.size(); ++t)
    if (mask[t]) ++counted;
  if (counted == 0) throw error("next_token_loss: every position is masked out");
  dvec dlogits(logits.size(), 0.0);
  const double w = 1.0 / static_cast<double>(counted);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    const double* row = &logits[t * vocab_size];
    double max_logit = row[0];
    for (std::size_t i = 1; i < vocab_size; ++i)
      if (row[i] > max_logit) max_logit = row[i];
    double denom = 0.0;
    for (std::size_t i = 0; i < vocab_size; ++i) denom += std::exp(row[i] - max_logit);
    for (std::size_t i = 0; i < vocab_size; ++i)
      dlogits[t * vocab_size + i] = w * std::exp(row[i] - max_logit) / denom;
    dlogits[t * vocab_size + targets[t]] -= w;
  }
  return dlogits;
}

namespace detail {

inline dvec& grad_slot(grad_map& grads, const std::string& name, std::size_t size) {
  auto it = grads.find(name);
  if (it == grads.end()) it = grads.emplace(name, dvec(size, 0.0)).first;
  return it->second;
}

// backward through w (+ optional low-rank path): accumulates parameter
// gradients for names in the mask, always propagates dx
inline void project_backward(const std::string& name, const tensor& w, const lora_adapter* ad,
                             const dvec* ax_cache, std::size_t t, const double* x,
                             const double* dy, double* dx, const std::set<std::string>& mask,
                             grad_map& grads) {
  const std::size_t out = w.rows();
  const std::size_t in = w.cols();
  if (mask.count(name))
    outer_add(grad_slot(grads, name, out * in), dy, x, out, in);
  matvec_transposed_add(w, dy, dx);
  if (ad == nullptr) return;
  const std::size_t r = ad->r;
  const double scale = ad->scale();
  const double* ax = ax_cache->data() + t * r;
  dvec dax(r, 0.0);
  for (std::size_t i = 0; i < out; ++i) {
    const float* row = ad->b.data.data() + i * r;
    const double g = scale * dy[i];
    for (std::size_t k2 = 0; k2 < r; ++k2) dax[k2] += static_cast<double>(row[k2]) * g;
  }
  if (mask.count(name + ".lora_b")) {
    dvec& db = grad_slot(grads, name + ".lora_b", out * r);
    for (std::size_t i = 0; i < out; ++i) {
      const double g = scale * dy[i];
      for (std::size_t k2 = 0; k2 < r; ++k2) db[i * r + k2] += g * ax[k2];
    }
  }
  if (mask.count(name + ".lora_a"))
    outer_add(grad_slot(grads, name + ".lora_a", r * in), dax.data(), x, r, in);
  for (std::size_t i = 0; i < r; ++i) {
    const float* row = ad->a.data.data() + i * in;
    const double g = dax[i];
    for (std::size_t j = 0; j < in; ++j) dx[j] += static_cast<double>(row[j]) * g;
  }
}

}  // namespace detail

// accumulates gradients into grads for exactly the names in freeze_mask
inline void backward_sequence(const parameter_store& store, const lora_set* adapters,
                              const forward_trace& trace, const dvec& dlogits,
                              const std::set<std::string>& freeze_mask, grad_map& grads) {
  const model_config& cfg = store.config;
  const std::size_t t_len = trace.ids.size();
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.d_ffn;
  const std::size_t v = cfg.vocab_size;
  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  if (dlogits.size() != t_len * v) throw error("backward: logit gradient shape mismatch");

  const tensor& final_norm = store.at("final_norm");
  const tensor& lm_head = store.at("lm_head");

  dvec dx(t_len * d, 0.0);
  const bool head_trainable = freeze_mask.count("lm_head") != 0;
  dvec* d_head = head_trainable ? &detail::grad_slot(grads, "lm_head", v * d) : nullptr;
  for (std::size_t t = 0; t < t_len; ++t) {
    dvec dxnf(d, 0.0);
    detail::matvec_transposed_add(lm_head, &dlogits[t * v], dxnf.data());
    if (d_head != nullptr)
      detail::outer_add(*d_head, &dlogits[t * v], &trace.xnf[t * d], v, d);
    if (freeze_mask.count("final_norm")) {
      dvec& dg = detail::grad_slot(grads, "final_norm", d);
      for (std::size_t j = 0; j < d; ++j)
        dg[j] += dxnf[j] * trace.x_final[t * d + j] * trace.inv_f[t];
    }
    detail::rmsnorm_backward(final_norm, &trace.x_final[t * d], trace.inv_f[t], dxnf.data(),
                             &dx[t * d], d);
  }

  for (std::size_t layer = cfg.n_layers; layer-- > 0;) {
    const layer_trace& lt = trace.layers[layer];
    const tensor& attn_norm = store.at(layer_param_name(layer, "attn_norm"));
    const tensor& wq = store.at(layer_param_name(layer, "wq"));
    const tensor& wk = store.at(layer_param_name(layer, "wk"));
    const tensor& wv = store.at(layer_param_name(layer, "wv"));
    const tensor& wo = store.at(layer_param_name(layer, "wo"));
    const tensor& ffn_norm = store.at(layer_param_name(layer, "ffn_norm"));
    const tensor& w_gate = store.at(layer_param_name(layer, "w_gate"));
    const tensor& w_up = store.at(layer_param_name(layer, "w_up"));
    const tensor& w_down = store.at(layer_param_name(layer, "w_down"));
    auto find_adapter = [&](const char* leaf) -> const lora_adapter* {
      return adapters == nullptr ? nullptr : adapters->find(layer_param_name(layer, leaf));
    };
    const lora_adapter* ad_q = find_adapter("wq");
    const lora_adapter* ad_k = find_adapter("wk");
    const lora_adapter* ad_v = find_adapter("wv");
    const lora_adapter* ad_o = find_adapter("wo");
    const lora_adapter* ad_gate = find_adapter("w_gate");
    const lora_adapter* ad_up = find_adapter("w_up");
    const lora_adapter* ad_down = find_adapter("w_down");
    auto ax_of = [&](const lora_adapter* ad) -> const dvec* {
      return ad == nullptr ? nullptr : &lt.lora_ax.at(ad->target);
    };

    // ffn block, reverse: dx is the gradient at the layer output
    dvec dx_mid(t_len * d, 0.0);
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t j = 0; j < d; ++j) dx_mid[t * d + j] += dx[t * d + j];
      dvec dprod(f, 0.0);
      detail::project_backward(layer_param_name(layer, "w_down"), w_down, ad_down,
                               ax_of(ad_down), t, &lt.prod[t * f], &dx[t * d], dprod.data(),
                               freeze_mask, grads);
      dvec dgate_pre(f), dup_pre(f);
      for (std::size_t j = 0; j < f; ++j) {
        const double z = lt.gate_pre[t * f + j];
        const double s = lt.sig[t * f + j];
        const double silu = z * s;
        dup_pre[j] = dprod[j] * silu;
        dgate_pre[j] = dprod[j] * lt.up_pre[t * f + j] * (s + z * s * (1.0 - s));
      }
      dvec dxn2(d, 0.0);
      detail::project_backward(layer_param_name(layer, "w_gate"), w_gate, ad_gate,
                               ax_of(ad_gate), t, &lt.xn2[t * d], dgate_pre.data(), dxn2.data(),
                               freeze_mask, grads);
      detail::project_backward(layer_param_name(layer, "w_up"), w_up, ad_up, ax_of(ad_up), t,
                               &lt.xn2[t * d], dup_pre.data(), dxn2.data(), freeze_mask, grads);
      if (freeze_mask.count(layer_param_name(layer, "ffn_norm"))) {
        dvec& dg = detail::grad_slot(grads, layer_param_name(layer, "ffn_norm"), d);
        for (std::size_t j = 0; j < d; ++j)
          dg[j] += dxn2[j] * lt.x_mid[t * d + j] * lt.inv2[t];
      }
      detail::rmsnorm_backward(ffn_norm, &lt.x_mid[t * d], lt.inv2[t], dxn2.data(),
                               &dx_mid[t * d], d);
    }

    // attention block, reverse
    dvec dq(t_len * d, 0.0), dk(t_len * d, 0.0), dval(t_len * d, 0.0), dctx(t_len * d, 0.0);
    dvec dx_in(t_len * d, 0.0);
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t j = 0; j < d; ++j) dx_in[t * d + j] += dx_mid[t * d + j];
      detail::project_backward(layer_param_name(layer, "wo"), wo, ad_o, ax_of(ad_o), t,
                               &lt.ctx[t * d], &dx_mid[t * d], &dctx[t * d], freeze_mask, grads);
    }
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * hd;
        const double* p = &lt.probs[(h * t_len + t) * t_len];
        dvec dp(t + 1, 0.0);
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0.0;
          for (std::size_t j = 0; j < hd; ++j)
            acc += dctx[t * d + off + j] * lt.v[u * d + off + j];
          dp[u] = acc;
          for (std::size_t j = 0; j < hd; ++j)
            dval[u * d + off + j] += p[u] * dctx[t * d + off + j];
        }
        double dot = 0.0;
        for (std::size_t u = 0; u <= t; ++u) dot += p[u] * dp[u];
        for (std::size_t u = 0; u <= t; ++u) {
          const double dscore = p[u] * (dp[u] - dot) * inv_sqrt_hd;
          for (std::size_t j = 0; j < hd; ++j) {
            dq[t * d + off + j] += dscore * lt.k[u * d + off + j];
            dk[u * d + off + j] += dscore * lt.q[t * d + off + j];
          }
        }
      }
    }
    for (std::size_t t = 0; t < t_len; ++t) {
      detail::rope_apply(&dq[t * d], t, cfg.n_heads, hd, cfg.rotary_base, true);
      detail::rope_apply(&dk[t * d], t, cfg.n_heads, hd, cfg.rotary_base, true);
      dvec dxn1(d, 0.0);
      detail::project_backward(layer_param_name(layer, "wq"), wq, ad_q, ax_of(ad_q), t,
                               &lt.xn1[t * d], &dq[t * d], dxn1.data(), freeze_mask, grads);
      detail::project_backward(layer_param_name(layer, "wk"), wk, ad_k, ax_of(ad_k), t,
                               &lt.xn1[t * d], &dk[t * d], dxn1.data(), freeze_mask, grads);
      detail::project_backward(layer_param_name(layer, "wv"), wv, ad_v, ax_of(ad_v), t,
                               &lt.xn1[t * d], &dval[t * d], dxn1.data(), freeze_mask, grads);
      if (freeze_mask.count(layer_param_name(layer, "attn_norm"))) {
        dvec& dg = detail::grad_slot(grads, layer_param_name(layer, "attn_norm"), d);
        for (std::size_t j = 0; j < d; ++j)
          dg[j] += dxn1[j] * lt.x_in[t * d + j] * lt.inv1[t];
      }
      detail::rmsnorm_backward(attn_norm, &lt.x_in[t * d], lt.inv1[t], dxn1.data(),
                               &dx_in[t * d], d);
    }
    dx = std::move(dx_in);
  }

  if (freeze_mask.count("token_embedding")) {
    dvec& de = detail::grad_slot(grads, "token_embedding", v * d);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = 0; j < d; ++j) de[trace.ids[t] * d + j] += dx[t * d + j];
  }
}

// exp of mean next-token negative log likelihood over whole sequences
inline double corpus_perplexity(const parameter_store& store, const lora_set* adapters,
                                const std::vector<std::vector<std::uint32_t>>& sequences) {
  double total_nll = 0.0;
  std::size_t total_tokens = 0;
  for (const auto& ids : sequences) {
    if (ids.size() < 2) continue;
    const dvec logits = forward_sequence(store, adapters, ids);
    const std::size_t v = store.config.vocab_size;
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      const double* row = &logits[t * v];
      double max_logit = row[0];
      for (std::size_t i = 1; i < v; ++i)
        if (row[i] > max_logit) max_logit = row[i];
      double denom = 0.0;
      for (std::size_t i = 0; i < v; ++i) denom += std::exp(row[i] - max_logit);
      total_nll += std::log(denom) - (row[ids[t + 1]] - max_logit);
      ++total_tokens;
    }
  }
  if (total_tokens == 0) throw error("perplexity: no scorable tokens");
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

// appends argmax continuations until eos, the new-token budget, or the context
// limit is hit; returns only the generated ids (eos included when produced)
inline std::vector<std::uint32_t> generate_greedy(const parameter_store& store,
                                                  const lora_set* adapters,
                                                  std::vector<std::uint32_t> ids,
                                                  std::size_t max_new_tokens,
                                                  std::uint32_t eos_id) {
  const std::size_t prompt_len = ids.size();
  if (prompt_len == 0) throw error("generate: empty prompt");
  if (prompt_len >= store.config.max_seq_len)
    throw error("generate: prompt length " + std::to_string(prompt_len) +
                " leaves no room to decode within max_seq_len " +
                std::to_string(store.config.max_seq_len));
  const std::size_t v = store.config.vocab_size;
  while (ids.size() < store.config.max_seq_len && ids.size() - prompt_len < max_new_tokens) {
    const dvec logits = forward_sequence(store, adapters, ids);
    const double* last = logits.data() + (ids.size() - 1) * v;
    std::uint32_t best = 0;
    for (std::uint32_t i = 1; i < v; ++i)
      if (last[i] > last[best]) best = i;  // ties keep the lowest id
    ids.push_back(best);
    if (best == eos_id) break;
  }
  return std::vector<std::uint32_t>(ids.begin() + static_cast<std::ptrdiff_t>(prompt_len),
                                    ids.end());
}

}  // namespace graft
