#pragma once

#include "pg/batch.hpp"
#include "pg/rng.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pg::taskgen {

enum class TaskKind { token_permutation, affix_rule, copy_span, composed };

const char* kind_name(TaskKind k);
TaskKind parse_kind(const std::string& s);

enum class Split { train, validation, test };

const char* split_name(Split s);

// Token id layout shared by the corpus and the backbone:
// 0 = PAD, 1 = BOS, then a pool of prompt-template tokens, then content tokens.
struct VocabLayout {
    std::int32_t vocab_size = 64;
    std::int32_t template_begin = 2;
    std::int32_t template_count = 6;

    [[nodiscard]] std::int32_t content_begin() const { return template_begin + template_count; }
    [[nodiscard]] std::int32_t content_count() const { return vocab_size - content_begin(); }
};

struct TaskSpec {
    std::string task_id;
    TaskKind kind = TaskKind::token_permutation;
    bool held_in = true;
    int template_id = 0;
    TokenSeq prompt;  // fixed template prefix of every input

    // Per-token rules: input alphabet, and the output token for each alphabet entry.
    TokenSeq slice;
    TokenSeq mapping;
    std::int32_t affix = -1;  // affix_rule: trailing token appended after the mapped content
    int shift = 0;            // affix_rule: cyclic shift within the slice

    // composed: ordered component task ids (one span each); unseen permutations
    // record the held-in tasks whose tables they merge.
    std::vector<std::string> components;

    std::size_t min_len = 4;  // content length (per span for composed tasks)
    std::size_t max_len = 8;
};

struct Example {
    TokenSeq input;
    TokenSeq target;
    std::vector<TokenSeq> choices;
    std::size_t answer = 0;  // index of target within choices
};

struct ExampleSet {
    std::string task_id;
    Split split = Split::train;
    std::vector<Example> examples;
};

struct SuiteConfig {
    std::uint64_t seed = 1;
    std::size_t n_heldin = 8;
    std::size_t n_heldout = 4;
    std::size_t train_size = 2000;
    std::size_t validation_size = 200;
    std::size_t test_size = 200;
    std::size_t slice_size = 5;
    std::size_t min_len = 4;
    std::size_t max_len = 8;
    std::size_t composed_min_span = 2;
    std::size_t composed_max_span = 4;
    std::size_t n_choices = 4;
    VocabLayout vocab;
};

struct TaskData {
    ExampleSet train;
    ExampleSet validation;
    ExampleSet test;

    [[nodiscard]] const ExampleSet& split(Split s) const;
};

struct Suite {
    SuiteConfig config;
    std::vector<TaskSpec> tasks;
    std::map<std::string, TaskData> data;

    [[nodiscard]] const TaskSpec& task(const std::string& id) const;
    [[nodiscard]] std::vector<const TaskSpec*> held_in() const;
    [[nodiscard]] std::vector<const TaskSpec*> held_out() const;
    [[nodiscard]] const ExampleSet& examples(const std::string& id, Split s) const;
};

Suite generate_suite(const SuiteConfig& cfg);

// Applies a task's rule to content tokens (the input without its prompt).
// Composed tasks dispatch each token to the component owning its alphabet.
TokenSeq apply_rule(const Suite& suite, const TaskSpec& task, std::span<const std::int32_t> content);

// Uniform sampling with replacement, padded to the longest member.
SeqBatch sample_batch(const ExampleSet& set, std::size_t batch_size, Rng& rng);
SeqBatch batch_of(const ExampleSet& set, std::size_t begin, std::size_t end);

// Task-agnostic pretraining draw: either an identity copy of random content behind a
// random template, or a Markov-chain continuation (no template). Neither carries any
// task rule.
struct PretrainSource {
    VocabLayout vocab;
    std::vector<std::vector<double>> transitions;  // content -> content
    std::size_t min_len = 4;
    std::size_t max_len = 8;
    double copy_fraction = 0.75;

    static PretrainSource make(const VocabLayout& vocab, std::uint64_t seed, std::size_t min_len = 4,
                               std::size_t max_len = 8);
    std::pair<TokenSeq, TokenSeq> draw(Rng& rng) const;
    SeqBatch batch(std::size_t batch_size, Rng& rng) const;
};

// JSON-lines corpus plus suite.json manifest.
void save_suite(const Suite& suite, const std::filesystem::path& dir);
Suite load_suite(const std::filesystem::path& dir);

}  // namespace pg::taskgen
