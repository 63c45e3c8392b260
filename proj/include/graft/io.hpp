// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "graft/common.hpp"
#include "graft/corpus.hpp"

namespace graft {

using json = nlohmann::json;

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

inline void write_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open file for writing: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw io_error("write failed: " + path);
}

// Atomic write: write to a temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, std::string_view content) {
    const std::string tmp = path + ".tmp";
    write_file(tmp, content);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error("rename failed: " + tmp + " -> " + path + " (" + ec.message() + ")");
}

inline json parse_json_file(const std::string& path) {
    const std::string text = read_file(path);
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw config_error("invalid JSON in " + path);
    return j;
}

// ----------------------------------------------------------------------------
// Documents: JSON-lines, one object per document {id, source, text}
// ----------------------------------------------------------------------------

inline std::vector<raw_document> read_documents_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open documents file: " + path);
    std::vector<raw_document> docs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw io_error(path + ":" + std::to_string(lineno) + ": invalid JSON document line");
        raw_document doc;
        doc.id = j.value("id", "");
        doc.source = j.value("source", "");
        doc.text = j.value("text", "");
        if (doc.text.empty())
            throw io_error(path + ":" + std::to_string(lineno) + ": document text is empty");
        docs.push_back(std::move(doc));
    }
    return docs;
}

// ----------------------------------------------------------------------------
// Corpus stats <-> JSON
// ----------------------------------------------------------------------------

inline json stats_to_json(const corpus_stats& s) {
    json per_source = json::object();
    for (const auto& [name, src] : s.per_source) {
        per_source[name] = {
            {"documents", src.documents},
            {"sentences_before", src.sentences_before},
            {"bytes_before", src.bytes_before},
            {"sentences_kept", src.sentences_kept},
            {"bytes_after", src.bytes_after},
        };
    }
    return json{
        {"documents", s.documents},
        {"sentences_total", s.sentences_total},
        {"kept", s.kept},
        {"dropped", {{"short", s.dropped_short},
                     {"banned", s.dropped_banned},
                     {"language", s.dropped_language},
                     {"duplicate", s.dropped_duplicate}}},
        {"bytes_before", s.bytes_before},
        {"bytes_after", s.bytes_after},
        {"per_source", per_source},
    };
}

// ----------------------------------------------------------------------------
// File-to-file pipeline run. On an output I/O failure the stats for the
// processed prefix are still written before the error propagates.
// ----------------------------------------------------------------------------

inline corpus_stats run_pipeline_files(const std::string& docs_path, const cleaning_config& cfg,
                                       const language_profile& profile, const std::string& out_path,
                                       const std::string& stats_path = "") {
    const auto docs = read_documents_jsonl(docs_path);
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw io_error("cannot open output corpus for writing: " + out_path);

    corpus_stats stats;
    auto emit_stats = [&]() {
        if (!stats_path.empty()) write_file(stats_path, stats_to_json(stats).dump(2) + "\n");
    };
    try {
        run_pipeline(docs, cfg, profile, [&](const clean_sentence& s) {
            out << s.text << '\n';
            if (!out) throw io_error("write failed: " + out_path);
        }, stats);
    } catch (...) {
        emit_stats();
        throw;
    }
    out.flush();
    if (!out) throw io_error("write failed: " + out_path);
    emit_stats();
    return stats;
}

} // namespace graft
