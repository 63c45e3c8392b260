// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "graft/bpe.hpp"
#include "graft/io.hpp"
#include "graft/model.hpp"
#include "graft/orchestrator.hpp"
#include "graft/vocab.hpp"

namespace graft::cli {

// Resolves a path found inside a config file relative to that file's directory.
inline std::string resolve_relative(const std::string& config_path, const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_absolute()) return path;
    return (std::filesystem::path(config_path).parent_path() / p).string();
}

struct loaded_cleaning_config {
    cleaning_config cfg;
    language_profile profile;
};

inline loaded_cleaning_config load_cleaning_config(const std::string& path) {
    const json j = parse_json_file(path);
    loaded_cleaning_config out;
    if (j.contains("min_words")) out.cfg.min_words = j.at("min_words").get<std::size_t>();
    if (j.contains("lang_threshold")) out.cfg.lang_threshold = j.at("lang_threshold").get<double>();
    if (j.contains("banned_patterns"))
        out.cfg.banned_patterns = j.at("banned_patterns").get<std::vector<std::string>>();
    if (j.contains("dedup")) out.cfg.dedup = j.at("dedup").get<bool>();
    if (j.contains("threads")) out.cfg.threads = j.at("threads").get<unsigned>();
    out.cfg.validate();

    if (!j.contains("language_profile"))
        throw config_error(path + ": missing language_profile {target_seed, contrast_seed}");
    const auto& lp = j.at("language_profile");
    const double alpha = lp.value("alpha", 1.0);
    out.profile = train_language_profile(
        resolve_relative(path, lp.at("target_seed").get<std::string>()),
        resolve_relative(path, lp.at("contrast_seed").get<std::string>()), alpha);
    return out;
}

inline void register_clean(CLI::App& app) {
    auto opts = std::make_shared<std::tuple<std::string, std::string, std::string, std::string>>();
    auto* cmd = app.add_subcommand("clean", "Clean raw documents into a deduplicated sentence corpus");
    cmd->add_option("--in", std::get<0>(*opts), "Input documents (JSON lines: {id, source, text})")
        ->required();
    cmd->add_option("--out", std::get<1>(*opts), "Output corpus file (one sentence per line)")
        ->required();
    cmd->add_option("--config", std::get<2>(*opts), "Cleaning config JSON")->required();
    cmd->add_option("--stats", std::get<3>(*opts), "Write before/after statistics JSON here");
    cmd->callback([opts]() {
        const auto& [in, out, config, stats_path] = *opts;
        auto loaded = load_cleaning_config(config);
        corpus_stats stats =
            run_pipeline_files(in, loaded.cfg, loaded.profile, out, stats_path);
        std::printf("kept %llu of %llu sentences (short %llu, banned %llu, language %llu, duplicate %llu)\n",
                    static_cast<unsigned long long>(stats.kept),
                    static_cast<unsigned long long>(stats.sentences_total),
                    static_cast<unsigned long long>(stats.dropped_short),
                    static_cast<unsigned long long>(stats.dropped_banned),
                    static_cast<unsigned long long>(stats.dropped_language),
                    static_cast<unsigned long long>(stats.dropped_duplicate));
    });
}

inline void register_train_tokenizer(CLI::App& app) {
    struct args {
        std::string in;
        std::string out;
        std::size_t size = 0;
        std::uint64_t seed = 0;
        std::uint64_t sample_bytes = 0;
        bool no_byte_fallback = false;
        bool no_specials = false;
    };
    auto a = std::make_shared<args>();
    auto* cmd = app.add_subcommand("train-tokenizer", "Train a subword vocabulary on a sentence corpus");
    cmd->add_option("--in", a->in, "Training corpus (one sentence per line)")->required();
    cmd->add_option("--out", a->out, "Output vocabulary TSV")->required();
    cmd->add_option("--size", a->size, "Target vocabulary size")->required();
    cmd->add_option("--seed", a->seed, "Sampling seed");
    cmd->add_option("--sample-bytes", a->sample_bytes, "Train on a seeded sample of at most this many bytes");
    cmd->add_flag("--no-byte-fallback", a->no_byte_fallback, "Do not reserve the 256 byte tokens");
    cmd->add_flag("--no-specials", a->no_specials, "Do not reserve control tokens");
    cmd->callback([a]() {
        bpe_train_options opts;
        opts.byte_fallback = !a->no_byte_fallback;
        opts.add_specials = !a->no_specials;
        opts.seed = a->seed;
        opts.max_sample_bytes = a->sample_bytes;
        vocabulary v = train_subword(read_lines(a->in), a->size, opts);
        save_vocabulary(v, a->out);
        std::printf("trained %zu tokens (target %zu) -> %s\n", v.size(), a->size, a->out.c_str());
    });
}

inline void register_merge_vocab(CLI::App& app) {
    struct args {
        std::string base;
        std::string added;
        std::string out;
        std::string report;
        bool ensure_sep = false;
    };
    auto a = std::make_shared<args>();
    auto* cmd = app.add_subcommand("merge-vocab", "Merge a new-language vocabulary into a base vocabulary");
    cmd->add_option("--base", a->base, "Base vocabulary TSV")->required();
    cmd->add_option("--new", a->added, "New-language vocabulary TSV")->required();
    cmd->add_option("--out", a->out, "Merged vocabulary TSV")->required();
    cmd->add_option("--report", a->report, "Merge report JSON");
    cmd->add_flag("--ensure-sep", a->ensure_sep,
                  "Append the reserved <sep> token if the merged vocabulary lacks it");
    cmd->callback([a]() {
        vocabulary base = load_vocabulary(a->base);
        vocabulary added = load_vocabulary(a->added);
        auto [merged, report] = merge_vocabularies(base, added);
        std::size_t appended_sep = 0;
        if (a->ensure_sep && !merged.find("<sep>")) {
            merged.add("<sep>", 0.0, token_provenance::base);
            appended_sep = 1;
        }
        save_vocabulary(merged, a->out);
        if (!a->report.empty()) {
            json rj{{"base_size", report.base_size},
                    {"new_size", report.new_size},
                    {"overlap_count", report.overlap_count},
                    {"merged_size", report.merged_size},
                    {"appended_separator", appended_sep},
                    {"overlap_tokens", report.overlap_tokens}};
            write_file(a->report, rj.dump(2) + "\n");
        }
        std::printf("merged %zu = %zu + %zu - %zu overlap%s\n", report.merged_size, report.base_size,
                    report.new_size, report.overlap_count,
                    appended_sep ? " (+1 reserved separator)" : "");
    });
}

inline lora_spec load_lora_spec(const json& j) {
    lora_spec spec;
    if (!j.contains("lora")) return spec;
    const json& lj = j.at("lora");
    if (lj.contains("r")) spec.r = lj.at("r").get<std::size_t>();
    if (lj.contains("alpha")) spec.alpha = lj.at("alpha").get<double>();
    if (lj.contains("targets")) {
        spec.target_kinds.clear();
        for (const auto& t : lj.at("targets")) spec.target_kinds.push_back(t.get<std::string>());
    }
    return spec;
}

inline void register_model_commands(CLI::App& app) {
    struct args {
        std::string config;
        std::string stage;
    };
    auto a = std::make_shared<args>();
    auto* cmd = app.add_subcommand("count-params",
                                   "Report total and trainable parameter counts for a stage");
    cmd->add_option("--config", a->config, "Model config JSON")->required();
    cmd->add_option("--stage", a->stage,
                    "Stage name: embed_align_mono, embed_align_bilingual, lora_pretrain, "
                    "instruct_tune, or base_pretrain")
        ->required();
    cmd->callback([a]() {
        const json j = parse_json_file(a->config);
        const model_config cfg = model_config::from_json(j);
        const stage_kind kind = parse_stage_kind(a->stage);
        const param_count_report report = count_parameters(cfg, kind, load_lora_spec(j));
        std::printf("stage %s: total %llu, trainable %llu (%.2f%%)\n", stage_kind_name(kind),
                    static_cast<unsigned long long>(report.total),
                    static_cast<unsigned long long>(report.trainable), report.percentage);
    });
}
inline void print_experiment_result(const experiment_result& result) {
    for (const stage_outcome& s : result.stages) {
        if (s.resumed)
            std::printf("stage %s: resumed from %s\n", s.name.c_str(), s.checkpoint_dir.c_str());
        else
            std::printf("stage %s: loss %.4f -> %.4f, checkpoint %s\n", s.name.c_str(),
                        s.initial_loss, s.final_loss, s.checkpoint_dir.c_str());
    }
    if (result.has_report) std::printf("%s", result.report.to_table().c_str());
    if (result.failed)
        throw error("stage " + result.failure_stage + " failed: " + result.failure_message);
    std::printf("final checkpoint: %s\n", result.final_checkpoint.c_str());
}

// shared by the per-stage subcommands; allowed stage kinds keep each command
// on its own slice of the pipeline
inline void register_stage_command(CLI::App& app, const std::string& name,
                                   const std::string& help,
                                   std::vector<stage_kind> allowed) {
    struct args {
        std::string config;
        std::string resume;
        std::uint64_t seed = 0;
    };
    auto a = std::make_shared<args>();
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--config", a->config, "Experiment config JSON (stage list restricted)")
        ->required();
    cmd->add_option("--resume", a->resume, "Start from this checkpoint directory");
    auto* seed_opt = cmd->add_option("--seed", a->seed, "Override the config's master seed");
    cmd->callback([a, seed_opt, allowed = std::move(allowed), name]() {
        experiment_config cfg = experiment_config::from_json_file(a->config);
        for (const stage_plan& plan : cfg.stages) {
            bool ok = false;
            for (stage_kind k : allowed) ok = ok || plan.kind == k;
            if (!ok)
                throw config_error(name + ": stage " + stage_kind_name(plan.kind) +
                                   " is not run by this command");
        }
        if (!a->resume.empty()) cfg.init_checkpoint = a->resume;
        if (seed_opt->count() > 0) cfg.seed = a->seed;
        print_experiment_result(run_experiment(cfg));
    });
}

inline void register_training_commands(CLI::App& app) {
    register_stage_command(app, "pretrain-align",
                           "Align new-language embeddings on monolingual and parallel data",
                           {stage_kind::embed_align_mono, stage_kind::embed_align_bilingual});
    register_stage_command(app, "pretrain-lora",
                           "Continue pretraining through low-rank adapters",
                           {stage_kind::lora_pretrain});
    register_stage_command(app, "instruct-tune",
                           "Instruction-tune on a bilingual instruction mixture",
                           {stage_kind::instruct_tune});
}

inline void register_eval_commands(CLI::App& app) {
    struct args {
        std::string checkpoint;
        std::string tasks;
        std::string out;
    };
    auto a = std::make_shared<args>();
    auto* cmd = app.add_subcommand("evaluate", "Score a checkpoint on a task suite");
    cmd->add_option("--checkpoint", a->checkpoint, "Checkpoint directory")->required();
    cmd->add_option("--tasks", a->tasks, "Task suite JSON")->required();
    cmd->add_option("--out", a->out, "Directory for report.json and report.txt")->required();
    cmd->callback([a]() {
        loaded_checkpoint loaded = load_checkpoint(a->checkpoint);
        const std::string vocab_file =
            (std::filesystem::path(a->checkpoint) / "vocabulary.tsv").string();
        if (!std::filesystem::exists(vocab_file))
            throw error("checkpoint has no vocabulary.tsv: " + a->checkpoint);
        if (hash_hex(fnv1a64(read_file(vocab_file))) != loaded.meta.vocabulary_hash)
            throw error("checkpoint " + a->checkpoint +
                        ": vocabulary.tsv does not match the manifest's vocabulary hash");
        const vocabulary vocab = load_vocabulary(vocab_file);
        const bpe_codec codec(vocab);
        const std::vector<task_spec> tasks = read_task_specs(a->tasks);
        const text_generator generate = model_text_generator(
            loaded.store, loaded.has_adapters ? &loaded.adapters : nullptr, codec, vocab);
        const std::string lineage_tip =
            loaded.meta.lineage.empty() ? std::string() : loaded.meta.lineage.back().chain;
        const eval_report report = run_eval(generate, tasks, lineage_tip, 0);
        write_eval_report(report, a->out);
        std::printf("%s", report.to_table().c_str());
        std::printf("report written to %s\n",
                    (std::filesystem::path(a->out) / "report.json").string().c_str());
    });
}

inline void register_run_commands(CLI::App& app) {
    {
        auto config = std::make_shared<std::string>();
        auto* cmd = app.add_subcommand("run", "Run a full experiment from a config file");
        cmd->add_option("--config", *config, "Experiment config JSON")->required();
        cmd->callback([config]() {
            print_experiment_result(run_experiment(experiment_config::from_json_file(*config)));
        });
    }
    {
        auto opts = std::make_shared<std::pair<std::string, std::string>>();
        auto* cmd = app.add_subcommand("verify", "Compare two checkpoints tensor by tensor");
        cmd->add_option("--a", opts->first, "First checkpoint directory")->required();
        cmd->add_option("--b", opts->second, "Second checkpoint directory")->required();
        cmd->callback([opts]() {
            const checkpoint_diff diff = verify_checkpoint(opts->first, opts->second);
            for (const std::string& name : diff.changed)
                std::printf("changed: %s\n", name.c_str());
            for (const std::string& name : diff.only_in_a)
                std::printf("only in a: %s\n", name.c_str());
            for (const std::string& name : diff.only_in_b)
                std::printf("only in b: %s\n", name.c_str());
            if (!diff.identical())
                throw verify_mismatch(std::to_string(diff.changed.size()) + " changed, " +
                                      std::to_string(diff.only_in_a.size()) + " only in a, " +
                                      std::to_string(diff.only_in_b.size()) + " only in b");
            std::printf("checkpoints identical (%zu tensors)\n", diff.equal.size());
        });
    }
}

inline void register_all(CLI::App& app) {
    register_clean(app);
    register_train_tokenizer(app);
    register_merge_vocab(app);
    register_model_commands(app);
    register_training_commands(app);
    register_eval_commands(app);
    register_run_commands(app);
}

} // namespace graft::cli
