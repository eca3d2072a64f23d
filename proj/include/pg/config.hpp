#pragma once

#include "pg/backbone.hpp"
#include "pg/eval.hpp"
#include "pg/experts.hpp"
#include "pg/taskgen.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pg {

// Every knob of a run. Values come from defaults, then a key=value config
// file, then command-line flags (later sources win).
struct RunConfig {
    std::uint64_t seed = 1;
    taskgen::SuiteConfig suite;
    BackboneConfig backbone;
    long pretrain_steps = 500;
    std::size_t pretrain_batch = 32;
    std::size_t pretrain_heldout = 256;
    ExpertTrainConfig expert;
    std::size_t k = 2;
    std::size_t avg_act_cap = 1000;
    std::size_t index_cap = 1000;
    ScoreNorm norm = ScoreNorm::mean;
    bool joint = true;
    bool multitask = true;

    // Propagates `seed` into the suite and backbone seeds.
    void reseed(std::uint64_t s);
};

using KeyValues = std::map<std::string, std::string>;

// Lines of `key = value`; '#' starts a comment; blank lines are ignored.
// Throws ConfigError with the line number on malformed input.
KeyValues parse_key_values(const std::string& text);
KeyValues read_config_file(const std::filesystem::path& path);

// Applies known keys; throws ConfigError on unknown keys or bad values.
void apply_config(RunConfig& cfg, const KeyValues& kv);

// Every key with its current value, in a stable order (used as the config snapshot).
KeyValues config_snapshot(const RunConfig& cfg);

std::string format_key_values(const KeyValues& kv);

}  // namespace pg
