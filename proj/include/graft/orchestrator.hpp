// SPDX-License-Identifier: Apache-2.0
#pragma once
// Experiment runner: a single JSON config declares the model, vocabulary,
// stage list, and seeds; stages run serially, each resuming from the last
// checkpoint. One master seed fans out per concern via derive_seed with a
// fixed label scheme ("init", "lora", "stage.<index>.<kind>"), so reruns
// with the same config reproduce every artifact bit for bit.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "graft/checkpoint.hpp"
#include "graft/evaluation.hpp"
#include "graft/io.hpp"
#include "graft/model.hpp"
#include "graft/bpe.hpp"
#include "graft/vocab.hpp"
#include "graft/training.hpp"
#include "graft/transformer.hpp"

namespace graft {

inline constexpr int experiment_schema_version = 1;

// per-stage slice of the experiment config
struct stage_plan {
  stage_kind kind = stage_kind::embed_align_mono;
  std::size_t steps = 0;
  std::size_t batch_size = 4;
  double lr = 0.0;  // 0: stage default
  std::string mono_path;
  std::string parallel_path;
  std::string instructions_path;
  double translation_share = 0.24;
  std::map<std::string, double> dataset_weights;
  bool reattach_adapters = false;
};

// published variant menu: each name pins an exact stage subset
inline const std::vector<std::pair<std::string, std::vector<stage_kind>>>& variant_menu() {
  static const std::vector<std::pair<std::string, std::vector<stage_kind>>> menu = {
      {"Llama-2-noLoRA", {stage_kind::instruct_tune}},
      {"Em-aligned",
       {stage_kind::embed_align_mono, stage_kind::embed_align_bilingual,
        stage_kind::instruct_tune}},
      {"Fa-pretrained",
       {stage_kind::embed_align_mono, stage_kind::embed_align_bilingual,
        stage_kind::lora_pretrain, stage_kind::instruct_tune}},
  };
  return menu;
}

inline int stage_order_rank(stage_kind k) {
  switch (k) {
    case stage_kind::base_pretrain: return 0;
    case stage_kind::embed_align_mono: return 1;
    case stage_kind::embed_align_bilingual: return 2;
    case stage_kind::lora_pretrain: return 3;
    case stage_kind::instruct_tune: return 4;
  }
  return -1;
}

struct experiment_config {
  int schema_version = experiment_schema_version;
  std::string variant;  // optional: must match a menu entry's stage subset
  model_config model;
  lora_spec lora;
  std::string vocabulary_path;
  std::uint64_t seed = 1;
  std::string out_dir;
  std::vector<stage_plan> stages;
  std::string eval_tasks_path;   // optional: run the eval harness after the last stage
  std::string init_checkpoint;   // optional: start from this checkpoint instead of fresh weights

  void validate() const {
    if (schema_version != experiment_schema_version)
      throw config_error("experiment config: unsupported schema_version " +
                         std::to_string(schema_version));
    model.validate();
    if (vocabulary_path.empty())
      throw config_error("experiment config: vocabulary path is required");
    if (out_dir.empty()) throw config_error("experiment config: out_dir is required");
    if (stages.empty()) throw config_error("experiment config: at least one stage is required");

    int prev_rank = -1;
    std::string prev_name;
    for (const stage_plan& plan : stages) {
      const std::string name = stage_kind_name(plan.kind);
      const int rank = stage_order_rank(plan.kind);
      if (rank <= prev_rank)
        throw config_error("experiment config: stage " + name + " cannot follow " + prev_name);
      prev_rank = rank;
      prev_name = name;

      if (plan.steps == 0)
        throw config_error("experiment config: stage " + name + ": steps must be positive");
      if (plan.batch_size == 0)
        throw config_error("experiment config: stage " + name + ": batch_size must be positive");
      if (plan.lr < 0.0)
        throw config_error("experiment config: stage " + name + ": lr must be non-negative");

      const bool wants_mono = plan.kind == stage_kind::base_pretrain ||
                              plan.kind == stage_kind::embed_align_mono ||
                              plan.kind == stage_kind::lora_pretrain;
      if (wants_mono && plan.mono_path.empty())
        throw config_error("experiment config: stage " + name + ": mono data path is required");
      if (plan.kind == stage_kind::embed_align_bilingual && plan.parallel_path.empty())
        throw config_error("experiment config: stage " + name +
                           ": parallel data path is required");
      if (plan.kind == stage_kind::instruct_tune) {
        if (plan.instructions_path.empty())
          throw config_error("experiment config: stage " + name +
                             ": instructions data path is required");
        if (plan.translation_share < 0.0 || plan.translation_share > 1.0)
          throw config_error("experiment config: stage " + name +
                             ": translation_share must lie in [0, 1]");
      }
    }

    if (!variant.empty()) {
      const std::vector<stage_kind>* expected = nullptr;
      for (const auto& [name, kinds] : variant_menu())
        if (name == variant) expected = &kinds;
      if (expected == nullptr)
        throw config_error("experiment config: unknown variant " + variant);
      std::vector<stage_kind> actual;
      for (const stage_plan& plan : stages) actual.push_back(plan.kind);
      if (actual != *expected)
        throw config_error("experiment config: variant " + variant +
                           " does not match the configured stage list");
      const bool adapters_allowed = variant == "Fa-pretrained";
      if (!adapters_allowed)
        for (const stage_plan& plan : stages)
          if (plan.reattach_adapters)
            throw config_error("experiment config: variant " + variant +
                               " never attaches adapters");
    }
  }

  static experiment_config from_json(const nlohmann::json& j, const std::string& base_dir);
  static experiment_config from_json_file(const std::string& path) {
    return from_json(parse_json_file(path),
                     std::filesystem::path(path).parent_path().string());
  }
};

namespace detail {

inline std::string resolve_path(const std::string& raw, const std::string& base_dir) {
  if (raw.empty() || base_dir.empty()) return raw;
  const std::filesystem::path p(raw);
  if (p.is_absolute()) return raw;
  return (std::filesystem::path(base_dir) / p).string();
}

}  // namespace detail

inline experiment_config experiment_config::from_json(const nlohmann::json& j,
                                                      const std::string& base_dir) {
  experiment_config cfg;
  try {
    cfg.schema_version = j.at("schema_version").get<int>();
    if (j.contains("variant")) cfg.variant = j.at("variant").get<std::string>();
    cfg.model = model_config::from_json(j.at("model"));
    if (j.contains("lora")) {
      const nlohmann::json& lj = j.at("lora");
      if (lj.contains("r")) cfg.lora.r = lj.at("r").get<std::size_t>();
      if (lj.contains("alpha")) cfg.lora.alpha = lj.at("alpha").get<double>();
      if (lj.contains("targets"))
        cfg.lora.target_kinds = lj.at("targets").get<std::vector<std::string>>();
    }
    cfg.vocabulary_path = detail::resolve_path(j.at("vocabulary").get<std::string>(), base_dir);
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.out_dir = detail::resolve_path(j.at("out_dir").get<std::string>(), base_dir);
    if (j.contains("eval_tasks"))
      cfg.eval_tasks_path = detail::resolve_path(j.at("eval_tasks").get<std::string>(), base_dir);
    if (j.contains("init_checkpoint"))
      cfg.init_checkpoint =
          detail::resolve_path(j.at("init_checkpoint").get<std::string>(), base_dir);

    for (const nlohmann::json& sj : j.at("stages")) {
      stage_plan plan;
      plan.kind = parse_stage_kind(sj.at("kind").get<std::string>());
      plan.steps = sj.at("steps").get<std::size_t>();
      if (sj.contains("batch_size")) plan.batch_size = sj.at("batch_size").get<std::size_t>();
      if (sj.contains("lr")) plan.lr = sj.at("lr").get<double>();
      if (sj.contains("data")) {
        const nlohmann::json& dj = sj.at("data");
        if (dj.contains("mono"))
          plan.mono_path = detail::resolve_path(dj.at("mono").get<std::string>(), base_dir);
        if (dj.contains("parallel"))
          plan.parallel_path =
              detail::resolve_path(dj.at("parallel").get<std::string>(), base_dir);
        if (dj.contains("instructions"))
          plan.instructions_path =
              detail::resolve_path(dj.at("instructions").get<std::string>(), base_dir);
      }
      if (sj.contains("translation_share"))
        plan.translation_share = sj.at("translation_share").get<double>();
      if (sj.contains("dataset_weights"))
        plan.dataset_weights =
            sj.at("dataset_weights").get<std::map<std::string, double>>();
      if (sj.contains("reattach_adapters"))
        plan.reattach_adapters = sj.at("reattach_adapters").get<bool>();
      cfg.stages.push_back(std::move(plan));
    }
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("experiment config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

struct stage_outcome {
  std::string name;  // "01_embed_align_mono"
  stage_kind kind = stage_kind::embed_align_mono;
  std::uint64_t seed = 0;
  bool resumed = false;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::string checkpoint_dir;
};

struct experiment_result {
  bool failed = false;
  std::string failure_stage;
  std::string failure_message;
  std::vector<stage_outcome> stages;
  std::string init_checkpoint;
  std::string final_checkpoint;
  bool has_report = false;
  eval_report report;
};

namespace detail {

inline std::string stage_dir_name(std::size_t index, const std::string& stage_name) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%02zu_", index);
  return buf + stage_name;
}

inline std::vector<batch_row> build_stage_rows(const stage_plan& plan, const bpe_codec& codec,
                                               const vocabulary& vocab, std::size_t max_seq_len,
                                               std::uint64_t stage_seed) {
  std::vector<batch_row> rows;
  const std::string stage_name = stage_kind_name(plan.kind);
  switch (plan.kind) {
    case stage_kind::base_pretrain:
    case stage_kind::embed_align_mono:
    case stage_kind::lora_pretrain: {
      for (const std::string& line : read_lines(plan.mono_path)) {
        if (line.empty()) continue;
        rows.push_back(make_monolingual_sequence(line, codec, vocab, max_seq_len));
      }
      break;
    }
    case stage_kind::embed_align_bilingual: {
      // each pair contributes both translation directions
      for (const bilingual_pair& pair : read_parallel_tsv(plan.parallel_path)) {
        rows.push_back(make_bilingual_sequence(pair, bilingual_direction::new_to_base, codec,
                                               vocab, max_seq_len));
        rows.push_back(make_bilingual_sequence(pair, bilingual_direction::base_to_new, codec,
                                               vocab, max_seq_len));
      }
      break;
    }
    case stage_kind::instruct_tune: {
      // the mixture stream pre-draws one epoch of examples so the translation
      // share holds in expectation over the whole stage
      const std::vector<instruction_example> examples =
          read_instructions_jsonl(plan.instructions_path);
      std::map<std::string, std::vector<instruction_example>> datasets;
      for (const instruction_example& ex : examples)
        datasets[ex.task.empty() ? "default" : ex.task].push_back(ex);
      mixture_spec spec;
      spec.weights = plan.dataset_weights;
      spec.translation_share = plan.translation_share;
      spec.seed = derive_seed(stage_seed, "mixture");
      mixture_stream stream(datasets, spec);
      const std::size_t pool = plan.steps * plan.batch_size;
      for (std::size_t i = 0; i < pool; ++i)
        rows.push_back(format_instruction(stream.next(), codec, vocab, max_seq_len));
      break;
    }
  }
  if (rows.empty())
    throw error("stage " + stage_name + ": no usable training rows");
  return rows;
}

inline std::string hash_file_hex(const std::string& path) {
  return hash_hex(fnv1a64(read_file(path)));
}

// stage data fingerprint: the content hashes of every file the stage read
inline std::string stage_data_hash(const stage_plan& plan) {
  std::uint64_t h = fnv1a64("data");
  auto fold = [&](const std::string& path) {
    if (path.empty()) return;
    h = fnv1a64(read_file(path), h);
  };
  fold(plan.mono_path);
  fold(plan.parallel_path);
  fold(plan.instructions_path);
  return hash_hex(h);
}

// stage config fingerprint; deliberately excludes out_dir so the same recipe
// hashes identically wherever it runs
inline std::string stage_config_hash(const experiment_config& cfg, const stage_plan& plan,
                                     const stage_config& sc, bool adapters_attached) {
  nlohmann::json j{{"model", cfg.model.to_json()},
                   {"kind", stage_kind_name(plan.kind)},
                   {"steps", sc.steps},
                   {"batch_size", sc.batch_size},
                   {"lr", sc.optim.lr},
                   {"seed", sc.seed}};
  if (plan.kind == stage_kind::instruct_tune) {
    j["translation_share"] = plan.translation_share;
    j["dataset_weights"] = plan.dataset_weights;
  }
  if (adapters_attached)
    j["lora"] = nlohmann::json{{"r", cfg.lora.r},
                               {"alpha", cfg.lora.alpha},
                               {"targets", cfg.lora.target_kinds}};
  return hash_hex(fnv1a64(j.dump()));
}

}  // namespace detail

// runs every stage in order, saving one checkpoint per stage; an existing
// stage checkpoint is loaded instead of recomputed, so interrupted runs
// resume where they stopped
inline experiment_result run_experiment(const experiment_config& cfg) {
  cfg.validate();
  experiment_result result;

  const vocabulary vocab = load_vocabulary(cfg.vocabulary_path);
  if (vocab.size() != cfg.model.vocab_size)
    throw config_error("experiment config: model vocab_size " +
                       std::to_string(cfg.model.vocab_size) + " does not match vocabulary size " +
                       std::to_string(vocab.size()));
  const bpe_codec codec(vocab);
  const std::string vocab_bytes = read_file(cfg.vocabulary_path);
  const std::string vocab_hash = hash_hex(fnv1a64(vocab_bytes));

  const std::filesystem::path out_root(cfg.out_dir);
  const std::filesystem::path ckpt_root = out_root / "checkpoints";
  const std::filesystem::path curve_root = out_root / "curves";
  std::filesystem::create_directories(ckpt_root);
  std::filesystem::create_directories(curve_root);
  // a failure record from an earlier attempt is stale once a new run starts
  std::filesystem::remove(out_root / "failure.json");

  parameter_store store;
  lora_set adapters;
  bool has_adapters = false;
  checkpoint_meta meta;
  meta.vocabulary_hash = vocab_hash;

  // checkpoints carry the vocabulary so downstream tools need only the directory
  auto save_stage = [&](const std::string& dir) {
    save_checkpoint(dir, store, has_adapters ? &adapters : nullptr, meta);
    write_file_atomic((std::filesystem::path(dir) / "vocabulary.tsv").string(), vocab_bytes);
  };
  auto adopt = [&](loaded_checkpoint loaded, const std::string& source) {
    if (!(loaded.store.config == cfg.model))
      throw config_error("experiment config: checkpoint at " + source +
                         " was built for a different model config");
    if (loaded.meta.vocabulary_hash != vocab_hash)
      throw config_error("experiment config: checkpoint at " + source +
                         " was trained with a different vocabulary");
    store = std::move(loaded.store);
    adapters = std::move(loaded.adapters);
    has_adapters = loaded.has_adapters;
    meta = std::move(loaded.meta);
  };

  // stage 00: the starting weights, so the first real stage has a baseline
  const std::string init_dir = (ckpt_root / detail::stage_dir_name(0, "init")).string();
  if (std::filesystem::exists(std::filesystem::path(init_dir) / "manifest.json")) {
    adopt(load_checkpoint(init_dir), init_dir);
  } else if (!cfg.init_checkpoint.empty()) {
    adopt(load_checkpoint(cfg.init_checkpoint), cfg.init_checkpoint);
    save_stage(init_dir);
  } else {
    store = build_model(cfg.model, derive_seed(cfg.seed, "init"));
    lineage_entry root;
    root.stage = "init";
    root.seed = cfg.seed;
    root.steps = 0;
    root.config_hash = hash_hex(fnv1a64(cfg.model.to_json().dump()));
    root.data_hash = vocab_hash;
    append_lineage(meta.lineage, std::move(root));
    save_stage(init_dir);
  }
  result.init_checkpoint = init_dir;
  result.final_checkpoint = init_dir;

  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const stage_plan& plan = cfg.stages[i];
    const std::string stage_name = stage_kind_name(plan.kind);
    stage_outcome outcome;
    outcome.kind = plan.kind;
    outcome.name = detail::stage_dir_name(i + 1, stage_name);
    outcome.checkpoint_dir = (ckpt_root / outcome.name).string();
    outcome.seed = derive_seed(cfg.seed, "stage." + std::to_string(i) + "." + stage_name);

    try {
      if (std::filesystem::exists(std::filesystem::path(outcome.checkpoint_dir) /
                                  "manifest.json")) {
        adopt(load_checkpoint(outcome.checkpoint_dir), outcome.checkpoint_dir);
        outcome.resumed = true;
        result.stages.push_back(std::move(outcome));
        result.final_checkpoint = result.stages.back().checkpoint_dir;
        continue;
      }

      // adapters attach once before the low-rank stage and are reused by
      // instruction tuning unless the plan asks for a fresh set
      if (plan.kind == stage_kind::lora_pretrain && !has_adapters) {
        adapters = attach_lora(store, expand_lora_targets(cfg.model, cfg.lora),
                               cfg.lora.r, cfg.lora.alpha, derive_seed(cfg.seed, "lora"));
        has_adapters = true;
      }
      if (plan.kind == stage_kind::instruct_tune && plan.reattach_adapters) {
        adapters = attach_lora(store, expand_lora_targets(cfg.model, cfg.lora),
                               cfg.lora.r, cfg.lora.alpha,
                               derive_seed(cfg.seed, "lora." + std::to_string(i)));
        has_adapters = true;
      }

      stage_config sc;
      sc.kind = plan.kind;
      sc.steps = plan.steps;
      sc.batch_size = plan.batch_size;
      sc.seed = outcome.seed;
      sc.optim = default_optimizer_for_stage(plan.kind, plan.steps);
      if (plan.lr > 0.0) sc.optim.lr = plan.lr;
      sc.curve_path = (curve_root / (outcome.name + ".csv")).string();

      const std::vector<batch_row> rows =
          detail::build_stage_rows(plan, codec, vocab, cfg.model.max_seq_len, sc.seed);
      const train_result trained =
          train_stage(store, has_adapters ? &adapters : nullptr, sc, rows);
      outcome.initial_loss = trained.initial_loss;
      outcome.final_loss = trained.final_loss;

      lineage_entry entry;
      entry.stage = stage_name;
      entry.seed = sc.seed;
      entry.steps = sc.steps;
      entry.config_hash = detail::stage_config_hash(cfg, plan, sc, has_adapters);
      entry.data_hash = detail::stage_data_hash(plan);
      append_lineage(meta.lineage, std::move(entry));
      save_stage(outcome.checkpoint_dir);

      result.stages.push_back(std::move(outcome));
      result.final_checkpoint = result.stages.back().checkpoint_dir;
    } catch (const std::exception& e) {
      // halt here; earlier checkpoints stay on disk for inspection and resume
      result.failed = true;
      result.failure_stage = stage_name;
      result.failure_message = e.what();
      const nlohmann::json failure{{"schema_version", experiment_schema_version},
                                   {"stage", stage_name},
                                   {"stage_index", i},
                                   {"error", result.failure_message}};
      write_file_atomic((out_root / "failure.json").string(), failure.dump(2) + "\n");
      return result;
    }
  }

  if (!cfg.eval_tasks_path.empty()) {
    try {
      const std::vector<task_spec> tasks = read_task_specs(cfg.eval_tasks_path);
      const text_generator generate =
          model_text_generator(store, has_adapters ? &adapters : nullptr, codec, vocab);
      const std::string lineage_tip =
          meta.lineage.empty() ? std::string() : meta.lineage.back().chain;
      result.report = run_eval(generate, tasks, lineage_tip, cfg.seed);
      result.has_report = true;
      write_eval_report(result.report, (out_root / "eval").string());
    } catch (const std::exception& e) {
      result.failed = true;
      result.failure_stage = "evaluate";
      result.failure_message = e.what();
      const nlohmann::json failure{{"schema_version", experiment_schema_version},
                                   {"stage", "evaluate"},
                                   {"stage_index", cfg.stages.size()},
                                   {"error", result.failure_message}};
      write_file_atomic((out_root / "failure.json").string(), failure.dump(2) + "\n");
    }
  }
  return result;
}

}  // namespace graft
