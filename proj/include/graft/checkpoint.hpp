// SPDX-License-Identifier: Apache-2.0
#pragma once
// Checkpoint directories: manifest.json plus one raw little-endian float32
// blob per tensor. The manifest records the model config, a tensor index
// (name, shape, dtype, role, content hash), the vocabulary hash, optional
// adapter metadata, and a hash-chained stage lineage so every artifact can
// be traced to the exact configs, seeds, and data that produced it.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "graft/common.hpp"
#include "graft/io.hpp"
#include "graft/model.hpp"

namespace graft {

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are raw little-endian float32");

inline constexpr int checkpoint_schema_version = 1;

inline std::uint64_t hash_tensor(const tensor& t) {

  return fnv1a64_bytes(t.data.data(), t.data.size() * sizeof(float));
}

// one completed stage; chain folds the previous chain with this entry's
// fields so tampering anywhere breaks every later link
struct lineage_entry {
  std::string stage;
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;
  std::string config_hash;
  std::string data_hash;
  std::string chain;

  nlohmann::json to_json() const {
    return nlohmann::json{{"stage", stage},             {"seed", seed},
                          {"steps", steps},             {"config_hash", config_hash},
                          {"data_hash", data_hash},     {"chain", chain}};
  }

  static lineage_entry from_json(const nlohmann::json& j) {
    lineage_entry e;
    try {
      e.stage = j.at("stage").get<std::string>();
      e.seed = j.at("seed").get<std::uint64_t>();
      e.steps = j.at("steps").get<std::uint64_t>();
      e.config_hash = j.at("config_hash").get<std::string>();
      e.data_hash = j.at("data_hash").get<std::string>();
      e.chain = j.at("chain").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw config_error(std::string("lineage entry: ") + ex.what());
    }
    return e;
  }
};

inline std::string chain_lineage(const std::string& prev_chain, const lineage_entry& e) {
  std::uint64_t h = fnv1a64(prev_chain);
  h = fnv1a64(e.stage, h);
  h = fnv1a64(std::to_string(e.seed), h);
  h = fnv1a64(std::to_string(e.steps), h);
  h = fnv1a64(e.config_hash, h);
  h = fnv1a64(e.data_hash, h);
  return hash_hex(h);
}

// fills e.chain from the last link and appends
inline void append_lineage(std::vector<lineage_entry>& lineage, lineage_entry e) {
  const std::string prev = lineage.empty() ? std::string() : lineage.back().chain;
  e.chain = chain_lineage(prev, e);
  lineage.push_back(std::move(e));
}

inline void verify_lineage(const std::vector<lineage_entry>& lineage) {
  std::string prev;
  for (const lineage_entry& e : lineage) {
    const std::string expected = chain_lineage(prev, e);
    if (e.chain != expected)
      throw error("lineage hash chain broken at stage " + e.stage);
    prev = e.chain;
  }
}

struct checkpoint_meta {
  std::vector<lineage_entry> lineage;
  std::string vocabulary_hash;

  // stage that produced this checkpoint
  std::string stage() const { return lineage.empty() ? std::string() : lineage.back().stage; }
};

namespace detail {

inline std::string blob_name(const std::string& tensor_name) { return tensor_name + ".bin"; }

inline std::string tensor_bytes(const tensor& t) {
  return std::string(reinterpret_cast<const char*>(t.data.data()),
                     t.data.size() * sizeof(float));
}

inline nlohmann::json tensor_entry(const std::string& name, const tensor& t,
                                   const std::string& role) {
  return nlohmann::json{{"name", name},
                        {"shape", t.shape},
                        {"dtype", "float32"},
                        {"role", role},
                        {"hash", hash_hex(hash_tensor(t))}};
}

}  // namespace detail

inline void save_checkpoint(const std::string& dir, const parameter_store& store,
                            const lora_set* adapters, const checkpoint_meta& meta) {
  if (adapters != nullptr && adapters->merged)
    throw error("save_checkpoint: adapters already merged into the base weights");
  verify_lineage(meta.lineage);
  const std::filesystem::path root(dir);
  std::filesystem::create_directories(root);

  nlohmann::json tensors = nlohmann::json::array();
  auto emit = [&](const std::string& name, const tensor& t, const std::string& role) {
    tensors.push_back(detail::tensor_entry(name, t, role));
    write_file_atomic((root / detail::blob_name(name)).string(), detail::tensor_bytes(t));
  };
  for (const std::string& name : store.names())
    emit(name, store.at(name), param_role_name(store.role(name)));

  nlohmann::json lora = nullptr;
  if (adapters != nullptr && !adapters->adapters.empty()) {
    std::vector<std::string> targets;
    for (const lora_adapter& ad : adapters->adapters) {
      targets.push_back(ad.target);
      emit(ad.target + ".lora_a", ad.a, "adapter");
      emit(ad.target + ".lora_b", ad.b, "adapter");
    }
    lora = nlohmann::json{{"r", adapters->rank}, {"alpha", adapters->alpha}, {"targets", targets}};
  }

  nlohmann::json lineage = nlohmann::json::array();
  for (const lineage_entry& e : meta.lineage) lineage.push_back(e.to_json());

  const nlohmann::json manifest{{"schema_version", checkpoint_schema_version},
                                {"model", store.config.to_json()},
                                {"stage", meta.stage()},
                                {"tensors", tensors},
                                {"lora", lora},
                                {"lineage", lineage},
                                {"vocabulary_hash", meta.vocabulary_hash}};
  write_file_atomic((root / "manifest.json").string(), manifest.dump(2) + "\n");
}

struct loaded_checkpoint {
  parameter_store store;
  lora_set adapters;
  bool has_adapters = false;
  checkpoint_meta meta;
};

inline nlohmann::json read_checkpoint_manifest(const std::string& dir) {
  const std::filesystem::path path = std::filesystem::path(dir) / "manifest.json";
  if (!std::filesystem::exists(path))
    throw io_error("not a checkpoint directory (no manifest.json): " + dir);
  const nlohmann::json manifest = parse_json_file(path.string());
  int version = -1;
  if (manifest.contains("schema_version") && manifest.at("schema_version").is_number_integer())
    version = manifest.at("schema_version").get<int>();
  if (version != checkpoint_schema_version)
    throw config_error("checkpoint " + dir + ": unsupported schema_version");
  return manifest;
}

inline loaded_checkpoint load_checkpoint(const std::string& dir) {
  const std::filesystem::path root(dir);
  const nlohmann::json manifest = read_checkpoint_manifest(dir);

  loaded_checkpoint out;
  try {
    out.store.config = model_config::from_json(manifest.at("model"));

    if (!manifest.at("lora").is_null()) {
      const nlohmann::json& lj = manifest.at("lora");
      out.has_adapters = true;
      out.adapters.rank = lj.at("r").get<std::size_t>();
      out.adapters.alpha = lj.at("alpha").get<double>();
      for (const auto& t : lj.at("targets")) {
        lora_adapter ad;
        ad.target = t.get<std::string>();
        ad.r = out.adapters.rank;
        ad.alpha = out.adapters.alpha;
        out.adapters.adapters.push_back(std::move(ad));
      }
    }

    for (const auto& entry : manifest.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      const std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
      const std::string dtype = entry.at("dtype").get<std::string>();
      const std::string role = entry.at("role").get<std::string>();
      const std::string hash = entry.at("hash").get<std::string>();
      if (dtype != "float32")
        throw config_error("checkpoint tensor " + name + ": unsupported dtype " + dtype);

      tensor t = tensor::zeros(shape);
      const std::string bytes = read_file((root / detail::blob_name(name)).string());
      if (bytes.size() != t.numel() * sizeof(float))
        throw error("checkpoint tensor " + name + ": blob holds " +
                    std::to_string(bytes.size() / sizeof(float)) + " values, manifest expects " +
                    std::to_string(t.numel()));
      std::memcpy(t.data.data(), bytes.data(), bytes.size());
      if (hash_hex(hash_tensor(t)) != hash)
        throw error("checkpoint tensor " + name + ": content hash mismatch");

      // adapter factors route into the lora set, everything else is a base weight
      auto strip_suffix = [&](const char* suffix) -> std::string {
        const std::string s = suffix;
        if (name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0)
          return name.substr(0, name.size() - s.size());
        return {};
      };
      if (const std::string target = strip_suffix(".lora_a"); !target.empty()) {
        lora_adapter* ad = nullptr;
        for (lora_adapter& cand : out.adapters.adapters)
          if (cand.target == target) ad = &cand;
        if (ad == nullptr) throw error("checkpoint tensor " + name + ": no adapter metadata");
        ad->a = std::move(t);
      } else if (const std::string target2 = strip_suffix(".lora_b"); !target2.empty()) {
        lora_adapter* ad = nullptr;
        for (lora_adapter& cand : out.adapters.adapters)
          if (cand.target == target2) ad = &cand;
        if (ad == nullptr) throw error("checkpoint tensor " + name + ": no adapter metadata");
        ad->b = std::move(t);
      } else {
        out.store.add(name, std::move(t), parse_param_role(role));
      }
    }

    for (const lora_adapter& ad : out.adapters.adapters)
      if (ad.a.numel() == 0 || ad.b.numel() == 0)
        throw error("checkpoint adapter " + ad.target + ": missing factor blobs");

    for (const auto& ej : manifest.at("lineage"))
      out.meta.lineage.push_back(lineage_entry::from_json(ej));
    out.meta.vocabulary_hash = manifest.at("vocabulary_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error("checkpoint " + dir + ": " + e.what());
  }
  verify_lineage(out.meta.lineage);
  return out;
}

// bitwise tensor comparison between two checkpoint directories
struct checkpoint_diff {
  std::vector<std::string> equal;
  std::vector<std::string> changed;
  std::vector<std::string> only_in_a;
  std::vector<std::string> only_in_b;

  bool identical() const {
    return changed.empty() && only_in_a.empty() && only_in_b.empty();
  }
};

inline checkpoint_diff verify_checkpoint(const std::string& a_dir, const std::string& b_dir) {
  const nlohmann::json ma = read_checkpoint_manifest(a_dir);
  const nlohmann::json mb = read_checkpoint_manifest(b_dir);
  const model_config ca = model_config::from_json(ma.at("model"));
  const model_config cb = model_config::from_json(mb.at("model"));
  if (!(ca == cb))
    throw config_error("verify_checkpoint: model configs differ between " + a_dir + " and " +
                       b_dir);

  auto names_of = [](const nlohmann::json& m) {
    std::set<std::string> names;
    for (const auto& entry : m.at("tensors")) names.insert(entry.at("name").get<std::string>());
    return names;
  };
  const std::set<std::string> na = names_of(ma);
  const std::set<std::string> nb = names_of(mb);

  checkpoint_diff diff;
  for (const std::string& name : na) {
    if (!nb.count(name)) {
      diff.only_in_a.push_back(name);
      continue;
    }
    const std::string bytes_a = read_file((std::filesystem::path(a_dir) / detail::blob_name(name)).string());
    const std::string bytes_b = read_file((std::filesystem::path(b_dir) / detail::blob_name(name)).string());
    (bytes_a == bytes_b ? diff.equal : diff.changed).push_back(name);
  }
  for (const std::string& name : nb)
    if (!na.count(name)) diff.only_in_b.push_back(name);
  return diff;
}

}  // namespace graft
