#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moetrack/optim.hpp"

namespace moetrack {

namespace detail {

inline void write_f64_le(std::ostream& os, double d) {
    const auto u = std::bit_cast<uint64_t>(d);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

inline double read_f64_le(std::istream& is) {
    char b[8];
    is.read(b, 8);
    if (!is) throw IoError("checkpoint: truncated parameter data");
    uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return std::bit_cast<double>(u);
}

}  // namespace detail

// Checkpoint layout: <dir>/params.bin is every parameter's values as 64-bit
// little-endian floats, concatenated in store order; <dir>/manifest.json maps
// name to shape and byte offset. Optimizer moments are not persisted.
inline void save_checkpoint(const ParamStore& store, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot open for writing: " + (dir / "params.bin").string());

    nlohmann::json manifest;
    manifest["format"] = "moetrack-checkpoint-v1";
    manifest["params"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& p : store.entries()) {
        nlohmann::json entry;
        entry["name"] = p->name;
        entry["shape"] = p->value.shape();
        entry["offset"] = offset;
        entry["count"] = p->value.numel();
        manifest["params"].push_back(entry);
        for (size_t i = 0; i < p->value.numel(); ++i) detail::write_f64_le(bin, p->value[i]);
        offset += 8 * p->value.numel();
    }
    manifest["total_bytes"] = offset;
    bin.close();
    if (!bin) throw IoError("write failed: " + (dir / "params.bin").string());

    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) throw IoError("cannot open for writing: " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";
}

// Loads values into an existing store. The store defines the expected layout;
// any name or shape disagreement is a config mismatch, reported fully.
inline void load_checkpoint(ParamStore& store, const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot open checkpoint manifest: " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    if (!manifest.contains("params") || !manifest["params"].is_array())
        throw IoError("checkpoint manifest lacks a params array");

    std::string mismatches;
    auto note = [&](const std::string& s) {
        if (!mismatches.empty()) mismatches += "; ";
        mismatches += s;
    };
    const auto& entries = manifest["params"];
    if (entries.size() != store.size())
        note("checkpoint has " + std::to_string(entries.size()) + " parameters, model has " +
             std::to_string(store.size()));
    for (const auto& entry : entries) {
        const std::string name = entry.at("name").get<std::string>();
        if (!store.contains(name)) {
            note("unknown parameter " + name);
            continue;
        }
        const auto shape = entry.at("shape").get<std::vector<int>>();
        const auto& p = store.get(name);
        if (shape != p.value.shape())
            note(name + ": checkpoint shape " + shape_str(shape) + " vs model " + shape_str(p.value.shape()));
    }
    if (!mismatches.empty()) throw ConfigError("checkpoint/model mismatch: " + mismatches);

    std::ifstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot open checkpoint data: " + (dir / "params.bin").string());
    for (const auto& entry : entries) {
        Parameter& p = store.get(entry.at("name").get<std::string>());
        bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
        for (size_t i = 0; i < p.value.numel(); ++i) p.value[i] = detail::read_f64_le(bin);
    }
}

}  // namespace moetrack
