// SPDX-License-Identifier: Apache-2.0
#pragma once
// Downstream-task harness: generative classification with refusal detection,
// BLEU scoring for generation tasks, and report emission as JSON plus a
// rendered text table.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "graft/bpe.hpp"
#include "graft/io.hpp"
#include "graft/metrics.hpp"
#include "graft/training.hpp"
#include "graft/transformer.hpp"
#include "graft/vocab.hpp"

namespace graft {

enum class task_kind { classification, generation };

inline const char* task_kind_name(task_kind k) {
  return k == task_kind::classification ? "classification" : "generation";
}

inline task_kind parse_task_kind(const std::string& s) {
  if (s == "classification") return task_kind::classification;
  if (s == "generation") return task_kind::generation;
  throw config_error("unknown task kind: " + s);
}

struct task_spec {
  std::string name;
  task_kind kind = task_kind::classification;
  std::vector<std::string> labels;  // classification default; examples may override
  std::string language = "base";
  std::string template_id = "instruction";
  bool seen_in_training = true;
  std::string dataset_path;

  void validate() const {
    if (name.empty()) throw config_error("task: name is required");
    if (kind == task_kind::classification && labels.size() < 2)
      throw config_error("task " + name + ": classification needs at least 2 labels");
    if (template_id != "instruction")
      throw config_error("task " + name + ": unknown prompt template " + template_id);
  }
};

// expected accuracy of a uniform-random guesser over the task's label set
inline double random_baseline(const task_spec& task) {
  if (task.kind != task_kind::classification)
    throw error("task " + task.name + ": no random baseline for generation tasks");
  task.validate();
  return 1.0 / static_cast<double>(task.labels.size());
}

struct eval_example {
  std::string instruction;
  std::string input;
  std::vector<std::string> labels;  // optional per-example option set
  std::string gold;
};

// dataset rows: JSON lines {instruction, input?, labels?, gold}
inline std::vector<eval_example> read_eval_examples(const std::string& path) {
  std::vector<eval_example> out;
  std::size_t line_no = 0;
  for (const std::string& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      eval_example ex;
      ex.instruction = j.at("instruction").get<std::string>();
      ex.gold = j.at("gold").get<std::string>();
      if (j.contains("input")) ex.input = j.at("input").get<std::string>();
      if (j.contains("labels"))
        ex.labels = j.at("labels").get<std::vector<std::string>>();
      if (ex.instruction.empty())
        throw error("instruction must not be empty");
      if (ex.gold.empty()) throw error("gold must not be empty");
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw io_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const error& e) {
      throw io_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// task list file: {"tasks": [{name, kind, labels?, language?, template?,
// seen_in_training?, dataset}]}; dataset paths resolve against the file's dir
inline std::vector<task_spec> read_task_specs(const std::string& path) {
  const json j = parse_json_file(path);
  if (!j.contains("tasks") || !j.at("tasks").is_array() || j.at("tasks").empty())
    throw config_error(path + ": needs a non-empty tasks array");
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::vector<task_spec> out;
  for (const json& tj : j.at("tasks")) {
    task_spec t;
    try {
      t.name = tj.at("name").get<std::string>();
      t.kind = parse_task_kind(tj.at("kind").get<std::string>());
      if (tj.contains("labels")) t.labels = tj.at("labels").get<std::vector<std::string>>();
      t.language = tj.value("language", std::string("base"));
      t.template_id = tj.value("template", std::string("instruction"));
      t.seen_in_training = tj.value("seen_in_training", true);
      std::filesystem::path dataset(tj.at("dataset").get<std::string>());
      t.dataset_path = dataset.is_absolute() ? dataset.string() : (base / dataset).string();
    } catch (const nlohmann::json::exception& e) {
      throw config_error(path + ": task entry: " + e.what());
    }
    t.validate();
    out.push_back(std::move(t));
  }
  return out;
}

// prompt-in, text-out hook; the harness never sees model internals, so tests
// and baselines can plug in scripted or random generators
using text_generator = std::function<std::string(const std::string&)>;

inline constexpr std::size_t default_decode_budget = 256;

// wraps a model as a text_generator with greedy decoding; the captured
// references must outlive the returned hook
inline text_generator model_text_generator(const parameter_store& store,
                                           const lora_set* adapters, const bpe_codec& codec,
                                           const vocabulary& vocab,
                                           std::size_t decode_budget = default_decode_budget) {
  return [&store, adapters, &codec, &vocab, decode_budget](const std::string& prompt) {
    std::vector<std::uint32_t> ids;
    ids.push_back(vocab.bos_id());
    const std::vector<std::uint32_t> body = codec.encode(prompt);
    ids.insert(ids.end(), body.begin(), body.end());
    std::vector<std::uint32_t> generated =
        generate_greedy(store, adapters, std::move(ids), decode_budget, vocab.eos_id());
    if (!generated.empty() && generated.back() == vocab.eos_id()) generated.pop_back();
    return codec.decode(generated);
  };
}

// greedy generation parsed back to a label: the label whose normalized form
// occurs earliest in the normalized generation wins; position ties keep label
// order; no occurrence at all is a refusal. Decode failures refuse with the
// failure message in raw.
inline prediction classify_by_generation(const text_generator& generate,
                                         const std::string& prompt,
                                         const std::vector<std::string>& labels) {
  if (labels.empty()) throw error("classify_by_generation: empty label set");
  prediction pred;
  try {
    pred.raw = generate(prompt);
  } catch (const std::exception& ex) {
    pred.refused = true;
    pred.raw = std::string("decode failed: ") + ex.what();
    return pred;
  }
  const std::string haystack = normalize_for_match(pred.raw);
  std::size_t best_pos = std::string::npos;
  for (const std::string& label : labels) {
    const std::string needle = normalize_for_match(label);
    if (needle.empty()) continue;
    const std::size_t pos = haystack.find(needle);
    if (pos != std::string::npos && pos < best_pos) {
      best_pos = pos;
      pred.label = label;
    }
  }
  pred.refused = pred.label.empty();
  return pred;
}

struct task_result {
  std::string name;
  task_kind kind = task_kind::classification;
  std::string language = "base";
  double score = 0.0;
  std::size_t examples = 0;
  std::size_t refusals = 0;
  bool seen_in_training = true;
};

struct eval_report {
  std::vector<task_result> tasks;
  bool has_classification = false;
  bool has_generation = false;
  double avg_classification = 0.0;
  double avg_generation = 0.0;
  std::size_t total_refusals = 0;
  std::string checkpoint_lineage;  // run metadata, no timestamps anywhere
  std::uint64_t seed = 0;

  json to_json() const {
    json tasks_json = json::array();
    for (const task_result& t : tasks) {
      tasks_json.push_back({{"name", t.name},
                            {"kind", task_kind_name(t.kind)},
                            {"language", t.language},
                            {"score", t.score},
                            {"examples", t.examples},
                            {"refusals", t.refusals},
                            {"unseen_in_training", !t.seen_in_training}});
    }
    json out{{"tasks", tasks_json},
             {"refusals", total_refusals},
             {"checkpoint", checkpoint_lineage},
             {"seed", seed}};
    if (has_classification) out["avg_classification"] = avg_classification;
    if (has_generation) out["avg_generation"] = avg_generation;
    return out;
  }

  // task rows with unseen tasks starred, averages at the bottom, dashes where
  // a column does not apply
  std::string to_table() const {
    std::size_t width = std::string("Avg.Classification").size();
    for (const task_result& t : tasks) width = std::max(width, t.name.size() + 1);
    std::string out;
    char line[160];
    std::snprintf(line, sizeof line, "%-*s  %6s  %8s\n", static_cast<int>(width), "task",
                  "score", "refusals");
    out += line;
    out.append(width + 18, '-');
    out += '\n';
    for (const task_result& t : tasks) {
      const std::string name = (t.seen_in_training ? "" : "*") + t.name;
      if (t.kind == task_kind::classification)
        std::snprintf(line, sizeof line, "%-*s  %6.2f  %8zu\n", static_cast<int>(width),
                      name.c_str(), t.score, t.refusals);
      else
        std::snprintf(line, sizeof line, "%-*s  %6.2f  %8s\n", static_cast<int>(width),
                      name.c_str(), t.score, "-");
      out += line;
    }
    out.append(width + 18, '-');
    out += '\n';
    std::snprintf(line, sizeof line, "%-*s  %6s\n", static_cast<int>(width),
                  "Avg.Classification",
                  has_classification ? format_score(avg_classification).c_str() : "-");
    out += line;
    std::snprintf(line, sizeof line, "%-*s  %6s\n", static_cast<int>(width), "Avg.Generation",
                  has_generation ? format_score(avg_generation).c_str() : "-");
    out += line;
    return out;
  }

 private:
  static std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
  }
};

// runs every task against the generator: classification examples are parsed
// to labels and scored by accuracy (refusals wrong), generation examples are
// scored by corpus BLEU against the gold references
inline eval_report run_eval(const text_generator& generate, const std::vector<task_spec>& tasks,
                            const std::string& checkpoint_lineage = "",
                            std::uint64_t seed = 0) {
  if (tasks.empty()) throw error("run_eval: no tasks to evaluate");
  eval_report report;
  report.checkpoint_lineage = checkpoint_lineage;
  report.seed = seed;

  double class_sum = 0.0;
  std::size_t class_count = 0;
  double gen_sum = 0.0;
  std::size_t gen_count = 0;

  for (const task_spec& task : tasks) {
    task.validate();
    if (!std::filesystem::exists(task.dataset_path))
      throw error("task " + task.name + ": missing dataset " + task.dataset_path);
    const std::vector<eval_example> examples = read_eval_examples(task.dataset_path);
    if (examples.empty()) throw error("task " + task.name + ": dataset has no examples");

    task_result result;
    result.name = task.name;
    result.kind = task.kind;
    result.language = task.language;
    result.seen_in_training = task.seen_in_training;
    result.examples = examples.size();

    if (task.kind == task_kind::classification) {
      std::vector<prediction> predictions;
      std::vector<std::string> golds;
      for (const eval_example& ex : examples) {
        const std::vector<std::string>& labels = ex.labels.empty() ? task.labels : ex.labels;
        const std::string prompt = render_instruction_prompt(ex.instruction, ex.input);
        prediction pred = classify_by_generation(generate, prompt, labels);
        if (pred.refused) ++result.refusals;
        predictions.push_back(std::move(pred));
        golds.push_back(ex.gold);
      }
      result.score = accuracy(predictions, golds);
      class_sum += result.score;
      ++class_count;
    } else {
      std::vector<std::string> hypotheses;
      std::vector<std::string> references;
      for (const eval_example& ex : examples) {
        hypotheses.push_back(generate(render_instruction_prompt(ex.instruction, ex.input)));
        references.push_back(ex.gold);
      }
      result.score = bleu(hypotheses, references);
      gen_sum += result.score;
      ++gen_count;
    }
    report.total_refusals += result.refusals;
    report.tasks.push_back(std::move(result));
  }

  report.has_classification = class_count > 0;
  report.has_generation = gen_count > 0;
  if (class_count > 0) report.avg_classification = class_sum / static_cast<double>(class_count);
  if (gen_count > 0) report.avg_generation = gen_sum / static_cast<double>(gen_count);
  return report;
}

// report.json plus report.txt under out_dir
inline void write_eval_report(const eval_report& report, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  write_file((dir / "report.json").string(), report.to_json().dump(2) + "\n");
  write_file((dir / "report.txt").string(), report.to_table());
}

}  // namespace graft
