#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "scenebooth/nn.hpp"

namespace scenebooth::checkpoint {

constexpr int format_version = 1;

// File layout: 8-byte magic, little-endian u64 header length, JSON header,
// then raw little-endian doubles (parameters in table order, followed by the
// optimizer moments when present).
struct header {
    int version = format_version;
    std::string kind;          // "layout" or "paint"
    nlohmann::json config;     // model-relevant configuration
    std::string config_hash;
    nlohmann::json state;      // trainer bookkeeping (step, phase, ...)
    nlohmann::json tensors;    // [{name, shape, trainable}]
    nlohmann::json optimizer;  // null or {steps, params: [names]}
};

// Written to a temporary file and renamed, so an interrupted save keeps the old file.
void save(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
          const nlohmann::json& state, const nn::parameter_store& store, const nn::adam* optimizer);

header read_header(const std::filesystem::path& path);

// Restores parameter values (shape-checked by name) and, when `optimizer` is
// given and the file holds optimizer state, rebuilds it over the store's
// current trainable parameters.
header load(const std::filesystem::path& path, nn::parameter_store& store, nn::adam* optimizer,
            const std::string& expected_kind);

}  // namespace scenebooth::checkpoint
