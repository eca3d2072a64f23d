#pragma once

#include "pg/backbone.hpp"
#include "pg/taskgen.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace pg {

enum class ScoreNorm {
    mean,  // mean per-token log-likelihood (default)
    sum,   // total log-likelihood
};

const char* score_norm_name(ScoreNorm n);
ScoreNorm parse_score_norm(const std::string& s);

// Argmax with ties to the lowest index.
std::size_t argmax_first(std::span<const double> xs);

// Teacher-forced log-likelihood of each choice given the input, normalized per `norm`.
std::vector<double> choice_scores(const Backbone& backbone, const HookMap* hooks, std::span<const std::int32_t> input,
                                  const std::vector<TokenSeq>& choices, ScoreNorm norm = ScoreNorm::mean);

// Index of the best-scoring choice (ties to the lowest index). Needs >= 2
// non-empty choices.
std::size_t rank_classify(const Backbone& backbone, const HookMap* hooks, std::span<const std::int32_t> input,
                          const std::vector<TokenSeq>& choices, ScoreNorm norm = ScoreNorm::mean);

// Predictions for every example of a set, evaluated in chunks of `chunk` examples.
std::vector<std::size_t> classify_set(const Backbone& backbone, const HookMap* hooks, const taskgen::ExampleSet& set,
                                      ScoreNorm norm = ScoreNorm::mean, std::size_t chunk = 32);

// Fraction of examples whose prediction equals the gold answer.
double accuracy_of(const std::vector<std::size_t>& predictions, const taskgen::ExampleSet& set);

double evaluate_accuracy(const Backbone& backbone, const HookMap* hooks, const taskgen::ExampleSet& set,
                         ScoreNorm norm = ScoreNorm::mean);

}  // namespace pg
