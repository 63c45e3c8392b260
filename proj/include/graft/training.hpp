// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "graft/bpe.hpp"
#include "graft/io.hpp"
#include "graft/model.hpp"
#include "graft/transformer.hpp"

namespace graft {

// one training sequence; loss_mask[t] = 1 means token t is predicted from
// position t - 1, so loss_mask[0] is always 0
struct batch_row {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> loss_mask;
  bool truncated = false;

  void validate() const {
    if (ids.size() < 2) throw error("batch row needs at least two tokens");
    if (ids.size() != loss_mask.size()) throw error("batch row mask length mismatch");
    if (loss_mask[0]) throw error("batch row: first token cannot be predicted");
  }
};

// shifts a row into (targets, mask) pairs aligned with logit rows
inline double row_loss_from_logits(const dvec& logits, const batch_row& row,
                                   std::size_t vocab_size) {
  row.validate();
  const std::size_t t_len = row.ids.size();
  std::vector<std::uint32_t> targets(t_len, 0);
  std::vector<std::uint8_t> mask(t_len, 0);
  for (std::size_t t = 0; t + 1 < t_len; ++t) {
    targets[t] = row.ids[t + 1];
    mask[t] = row.loss_mask[t + 1];
  }
  return next_token_loss(logits, targets, mask, vocab_size);
}

inline double row_loss(const parameter_store& store, const lora_set* adapters,
                       const batch_row& row) {
  const dvec logits = forward_sequence(store, adapters, row.ids);
  return row_loss_from_logits(logits, row, store.config.vocab_size);
}

// <s> text tokens </s>, every position after bos predicted; over-length
// rows drop tail tokens before eos and carry the flag
inline batch_row make_monolingual_sequence(const std::string& text, const bpe_codec& codec,
                                           const vocabulary& vocab, std::size_t max_seq_len) {
  std::vector<std::uint32_t> body = codec.encode(text);
  if (body.empty()) throw error("monolingual sequence: text encodes to no tokens");
  batch_row row;
  if (body.size() + 2 > max_seq_len) {
    body.resize(max_seq_len - 2);
    row.truncated = true;
  }
  row.ids.push_back(vocab.bos_id());
  row.ids.insert(row.ids.end(), body.begin(), body.end());
  row.ids.push_back(vocab.eos_id());
  row.loss_mask.assign(row.ids.size(), 1);
  row.loss_mask[0] = 0;
  return row;
}

// aligned translation pair; source is the new language side
struct bilingual_pair {
  std::string source;
  std::string target;

  void validate() const {
    if (source.empty() || target.empty())
      throw error("bilingual pair: both sides must be non-empty");
  }
};

enum class bilingual_direction { new_to_base, base_to_new };

// <s> first <sep> second </s> with loss over both halves by default;
// target_only keeps loss on the second half (tokens after <sep>)
inline batch_row make_bilingual_sequence(const bilingual_pair& pair, bilingual_direction dir,
                                         const bpe_codec& codec, const vocabulary& vocab,
                                         std::size_t max_seq_len, bool target_only = false) {
  pair.validate();
  const std::string& first = dir == bilingual_direction::new_to_base ? pair.source : pair.target;
  const std::string& second = dir == bilingual_direction::new_to_base ? pair.target : pair.source;
  const std::vector<std::uint32_t> src = codec.encode(first);
  std::vector<std::uint32_t> tgt = codec.encode(second);
  if (src.empty() || tgt.empty())
    throw error("bilingual pair: a side encodes to no tokens");

  batch_row row;
  const std::size_t frame = src.size() + 3;  // bos + sep + eos
  if (frame >= max_seq_len)
    throw error("bilingual pair: source side alone exceeds max_seq_len " +
                std::to_string(max_seq_len));
  if (frame + tgt.size() > max_seq_len) {
    tgt.resize(max_seq_len - frame);
    row.truncated = true;
  }
  row.ids.push_back(vocab.bos_id());
  row.ids.insert(row.ids.end(), src.begin(), src.end());
  row.ids.push_back(vocab.sep_id());
  const std::size_t second_start = row.ids.size();
  row.ids.insert(row.ids.end(), tgt.begin(), tgt.end());
  row.ids.push_back(vocab.eos_id());

  row.loss_mask.assign(row.ids.size(), 1);
  row.loss_mask[0] = 0;
  if (target_only)
    for (std::size_t t = 1; t < second_start; ++t) row.loss_mask[t] = 0;
  return row;
}

struct instruction_example {
  std::string instruction;
  std::string input;
  std::string output;
  std::string language = "base";
  std::string task;
  bool is_translation = false;

  void validate() const {
    if (output.empty()) throw error("instruction example: output must be non-empty");
    if (instruction.empty()) throw error("instruction example: instruction must be non-empty");
  }
};

// three-field prompt; the input block disappears when the field is empty
inline std::string render_instruction_prompt(const std::string& instruction,
                                             const std::string& input) {
  std::string out = "### Instruction:\n" + instruction + "\n\n";
  if (!input.empty()) out += "### Input:\n" + input + "\n\n";
  out += "### Response:\n";
  return out;
}

inline std::string render_instruction(const instruction_example& ex) {
  return render_instruction_prompt(ex.instruction, ex.input) + ex.output;
}

namespace detail {

inline void drop_last_word(std::string& text) {
  while (!text.empty() && text.back() == ' ') text.pop_back();
  const std::size_t cut = text.find_last_of(' ');
  if (cut == std::string::npos)
    text.clear();
  else
    text.resize(cut);
}

}  // namespace detail

// loss covers the response tokens and eos only; over-length prompts shed
// the input field word by word, then the instruction, never the response
inline batch_row format_instruction(const instruction_example& ex, const bpe_codec& codec,
                                    const vocabulary& vocab, std::size_t max_seq_len) {
  ex.validate();
  const std::vector<std::uint32_t> response = codec.encode(ex.output);
  if (response.size() + 3 > max_seq_len)
    throw error("instruction example: response alone exceeds max_seq_len " +
                std::to_string(max_seq_len));

  std::string instruction = ex.instruction;
  std::string input = ex.input;
  bool truncated = false;
  std::vector<std::uint32_t> prompt;
  while (true) {
    prompt = codec.encode(render_instruction_prompt(instruction, input));
    if (prompt.size() + response.size() + 2 <= max_seq_len) break;
    truncated = true;
    if (!input.empty())
      detail::drop_last_word(input);
    else if (!instruction.empty())
      detail::drop_last_word(instruction);
    else
      throw error("instruction example: response leaves no room for the prompt template "
                  "within max_seq_len " + std::to_string(max_seq_len));
  }

  batch_row row;
  row.truncated = truncated;
  row.ids.push_back(vocab.bos_id());
  row.ids.insert(row.ids.end(), prompt.begin(), prompt.end());
  const std::size_t response_start = row.ids.size();
  row.ids.insert(row.ids.end(), response.begin(), response.end());
  row.ids.push_back(vocab.eos_id());
  row.loss_mask.assign(row.ids.size(), 0);
  for (std::size_t t = response_start; t < row.ids.size(); ++t) row.loss_mask[t] = 1;
  return row;
}

// instruction JSONL: {instruction, input?, output, language?, task?, is_translation?}
inline std::vector<instruction_example> read_instructions_jsonl(const std::string& path) {
  std::vector<instruction_example> out;
  std::size_t line_no = 0;
  for (const std::string& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      instruction_example ex;
      ex.instruction = j.at("instruction").get<std::string>();
      ex.output = j.at("output").get<std::string>();
      if (j.contains("input")) ex.input = j.at("input").get<std::string>();
      if (j.contains("language")) ex.language = j.at("language").get<std::string>();
      if (j.contains("task")) ex.task = j.at("task").get<std::string>();
      if (j.contains("is_translation")) ex.is_translation = j.at("is_translation").get<bool>();
      ex.validate();
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw io_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const error& e) {
      throw io_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// parallel data TSV: source <tab> target
inline std::vector<bilingual_pair> read_parallel_tsv(const std::string& path) {
  std::vector<bilingual_pair> out;
  std::size_t line_no = 0;
  for (const std::string& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw io_error(path + ":" + std::to_string(line_no) + ": expected source<TAB>target");
    bilingual_pair pair{line.substr(0, tab), line.substr(tab + 1)};
    try {
      pair.validate();
    } catch (const error& e) {
      throw io_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(pair));
  }
  return out;
}

// sampling plan over named instruction datasets: a translation-share coin
// picks the pool, then dataset weights pick within the pool
struct mixture_spec {
  std::map<std::string, double> weights;  // empty: uniform over datasets
  double translation_share = 0.24;
  std::uint64_t seed = 0;

  void validate() const {
    if (translation_share < 0.0 || translation_share > 1.0)
      throw config_error("mixture: translation_share must lie in [0, 1]");
    double total = 0.0;
    for (const auto& [name, w] : weights) {
      if (w < 0.0) throw config_error("mixture: negative weight for dataset " + name);
      total += w;
    }
    if (!weights.empty() && total == 0.0)
      throw config_error("mixture: dataset weights sum to zero");
  }
};

class mixture_stream {
 public:
  mixture_stream(const std::map<std::string, std::vector<instruction_example>>& datasets,
                 const mixture_spec& spec)
      : spec_(spec), gen_(derive_seed(spec.seed, "mixture")) {
    spec_.validate();
    for (const auto& [name, examples] : datasets) {
      for (const instruction_example& ex : examples) {
        const double w = dataset_weight(name);
        if (w == 0.0) continue;
        auto& pool = ex.is_translation ? translation_ : plain_;
        pool.names.push_back(name);
        pool.examples.push_back(&ex);
        pool.weights.push_back(w);
      }
    }
    if (translation_.examples.empty() && plain_.examples.empty())
      throw error("mixture: every dataset is empty");
    if (spec_.translation_share > 0.0 && translation_.examples.empty())
      throw error("mixture: translation share is positive but no translation examples exist");
    if (spec_.translation_share < 1.0 && plain_.examples.empty())
      throw error("mixture: non-translation draws requested but only translations exist");
    translation_.finalize();
    plain_.finalize();
  }

  const instruction_example& next() {
    const bool translation = gen_.next_double() < spec_.translation_share;
    pool& p = translation ? translation_ : plain_;
    return *p.examples[p.pick(gen_)];
  }

 private:
  struct pool {
    std::vector<std::string> names;
    std::vector<const instruction_example*> examples;
    std::vector<double> weights;
    std::vector<double> cumulative;

    void finalize() {
      cumulative.resize(weights.size());
      double run = 0.0;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        run += weights[i];
        cumulative[i] = run;
      }
    }

    std::size_t pick(rng& gen) const {
      const double target = gen.next_double() * cumulative.back();
      const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), target);
      return std::min<std::size_t>(it - cumulative.begin(), cumulative.size() - 1);
    }
  };

  double dataset_weight(const std::string& name) const {
    if (spec_.weights.empty()) return 1.0;
    const auto it = spec_.weights.find(name);
    return it == spec_.weights.end() ? 0.0 : it->second;
  }

  mixture_spec spec_;
  rng gen_;
  pool translation_;
  pool plain_;
};

// decoupled weight decay Adam with linear warmup into cosine decay
struct optimizer_config {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t total_steps = 0;  // 0: constant learning rate
  double warmup_fraction = 0.05;

  double lr_at(std::size_t step) const {  // step counts from 1
    if (total_steps == 0) return lr;
    const auto warmup = static_cast<std::size_t>(
        std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (warmup > 0 && step <= warmup)
      return lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total_steps) return 0.0;
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(total_steps - warmup);
    return lr * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
  }
};

inline optimizer_config default_optimizer_for_stage(stage_kind kind, std::size_t total_steps) {
  optimizer_config cfg;
  cfg.lr = is_lora_stage(kind) ? 1e-4 : 3e-4;
  cfg.total_steps = total_steps;
  return cfg;
}

struct adam_state {
  std::map<std::string, dvec> m;
  std::map<std::string, dvec> v;
  std::size_t step = 0;
};

// finds the float storage a gradient name refers to
inline tensor& resolve_parameter(parameter_store& store, lora_set* adapters,
                                 const std::string& name) {
  auto suffix_is = [&](const char* suffix) {
    const std::string s = suffix;
    return name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  if (suffix_is(".lora_a") || suffix_is(".lora_b")) {
    if (adapters == nullptr) throw error("no adapters attached for parameter " + name);
    const bool is_a = suffix_is(".lora_a");
    const std::string target = name.substr(0, name.size() - 7);
    for (lora_adapter& ad : adapters->adapters)
      if (ad.target == target) return is_a ? ad.a : ad.b;
    throw error("no adapter matches parameter " + name);
  }
  return store.at(name);
}

// applies one update; touches exactly the parameters named in grads
inline void optimizer_step(parameter_store& store, lora_set* adapters, const grad_map& grads,
                           adam_state& state, const optimizer_config& cfg) {
  state.step += 1;
  const double lr_t = cfg.lr_at(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    for (double gi : g)
      if (!std::isfinite(gi)) throw error("non-finite gradient for parameter " + name);
    tensor& param = resolve_parameter(store, adapters, name);
    if (param.numel() != g.size())
      throw error("gradient size mismatch for parameter " + name);
    auto m_it = state.m.find(name);
    if (m_it == state.m.end()) {
      m_it = state.m.emplace(name, dvec(g.size(), 0.0)).first;
      state.v.emplace(name, dvec(g.size(), 0.0));
    }
    dvec& m = m_it->second;
    dvec& v = state.v.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      const double p = static_cast<double>(param.data[i]);
      param.data[i] = static_cast<float>(
          p - lr_t * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p));
    }
  }
}

struct curve_point {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::uint64_t tokens = 0;  // cumulative predicted tokens
};

inline std::string loss_curve_csv(const std::vector<curve_point>& curve) {
  std::ostringstream out;
  out << "step,loss,lr,tokens\n";
  char buf[160];
  for (const curve_point& p : curve) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%llu\n", p.step, p.loss, p.lr,
                  static_cast<unsigned long long>(p.tokens));
    out << buf;
  }
  return out.str();
}

struct stage_config {
  stage_kind kind = stage_kind::embed_align_mono;
  std::size_t steps = 0;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  optimizer_config optim;
  std::string curve_path;  // empty: curve kept in memory only

  void validate() const {
    if (steps == 0) throw config_error("stage config: steps must be positive");
    if (batch_size == 0) throw config_error("stage config: batch_size must be positive");
  }
};

struct train_result {
  std::vector<curve_point> curve;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// one stage: sample batch, forward, backward over the stage freeze mask,
// update; aborts when loss sits above 10x the initial for 100 steps
inline train_result train_stage(parameter_store& store, lora_set* adapters,
                                const stage_config& cfg, const std::vector<batch_row>& data) {
  cfg.validate();
  if (data.empty()) throw error("train_stage: no training rows");
  for (const batch_row& row : data) row.validate();
  const std::set<std::string> mask = freeze_mask_for_stage(store, cfg.kind, adapters);

  rng batch_gen(derive_seed(cfg.seed, "batches"));
  adam_state state;
  train_result result;
  std::uint64_t tokens_seen = 0;
  std::size_t divergent_streak = 0;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    grad_map grads;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const batch_row& row = data[batch_gen.next_below(data.size())];
      forward_trace trace;
      const dvec logits = forward_sequence(store, adapters, row.ids, &trace);
      const std::size_t t_len = row.ids.size();
      std::vector<std::uint32_t> targets(t_len, 0);
      std::vector<std::uint8_t> shifted(t_len, 0);
      for (std::size_t t = 0; t + 1 < t_len; ++t) {
        targets[t] = row.ids[t + 1];
        shifted[t] = row.loss_mask[t + 1];
        if (shifted[t]) ++tokens_seen;
      }
      loss_sum += next_token_loss(logits, targets, shifted, store.config.vocab_size);
      const dvec dlogits =
          next_token_loss_backward(logits, targets, shifted, store.config.vocab_size);
      backward_sequence(store, adapters, trace, dlogits, mask, grads);
    }
    const double batch_scale = 1.0 / static_cast<double>(cfg.batch_size);
    for (auto& [name, g] : grads)
      for (double& gi : g) gi *= batch_scale;
    optimizer_step(store, adapters, grads, state, cfg.optim);

    curve_point point;
    point.step = step;
    point.loss = loss_sum * batch_scale;
    point.lr = cfg.optim.lr_at(step);
    point.tokens = tokens_seen;
    result.curve.push_back(point);
    if (step == 1) result.initial_loss = point.loss;
    result.final_loss = point.loss;

    if (point.loss > 10.0 * result.initial_loss)
      ++divergent_streak;
    else
      divergent_streak = 0;
    if (divergent_streak >= 100) {
      if (!cfg.curve_path.empty()) write_file_atomic(cfg.curve_path, loss_curve_csv(result.curve));
      throw error("train_stage: diverged at step " + std::to_string(step) + " (loss " +
                  std::to_string(point.loss) + " vs initial " +
                  std::to_string(result.initial_loss) + ")");
    }
  }
  if (!cfg.curve_path.empty()) write_file_atomic(cfg.curve_path, loss_curve_csv(result.curve));
  return result;
}

}  // namespace graft
