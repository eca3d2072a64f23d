#pragma once

#include "pg/backbone.hpp"
#include "pg/baselines.hpp"
#include "pg/experts.hpp"
#include "pg/routing.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace pg {

inline constexpr int kBundleFormatVersion = 1;

// A directory holding manifest.json and one raw little-endian f64 file per array.
struct ArrayBundle {
    std::string kind;
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> arrays;

    [[nodiscard]] const Tensor& array(const std::string& name) const;
};

void write_bundle(const std::filesystem::path& dir, const ArrayBundle& bundle);
// Errors: MissingArtifactError (no manifest or array file), VersionError,
// TruncatedArrayError (file size disagrees with the declared shape), IoError.
ArrayBundle read_bundle(const std::filesystem::path& dir, const std::string& expected_kind);

void save_backbone(const Backbone& backbone, const std::filesystem::path& dir);
// Rebuilds the backbone and checks the stored fingerprint against the loaded weights.
Backbone load_backbone(const std::filesystem::path& dir);

// Throws FingerprintError when `expected` is non-empty and differs from the stored one.
void check_fingerprint(const nlohmann::json& meta, const std::string& expected, const std::string& what);

void save_expert(const LoraExpert& expert, const std::string& backbone_fingerprint, const std::filesystem::path& dir);
LoraExpert load_expert(const std::filesystem::path& dir, const Backbone& backbone);

void save_router(const Router& router, const std::filesystem::path& dir);
Router load_router(const std::filesystem::path& dir, const Backbone& backbone);

void save_index(const EmbeddingIndex& index, const std::filesystem::path& dir);
EmbeddingIndex load_index(const std::filesystem::path& dir, const Backbone& backbone);

void save_merged(const MergedExpert& merged, const std::string& backbone_fingerprint,
                 const std::filesystem::path& dir);
MergedExpert load_merged(const std::filesystem::path& dir, const Backbone& backbone);

}  // namespace pg
