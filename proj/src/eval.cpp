#include "pg/eval.hpp"

#include "pg/error.hpp"

#include <algorithm>
#include <cmath>

namespace pg {

const char* score_norm_name(ScoreNorm n) { return n == ScoreNorm::mean ? "mean" : "sum"; }

ScoreNorm parse_score_norm(const std::string& s) {
    if (s == "mean") return ScoreNorm::mean;
    if (s == "sum") return ScoreNorm::sum;
    throw ConfigError("unknown score normalization '" + s + "' (expected mean or sum)");
}

std::size_t argmax_first(std::span<const double> xs) {
    if (xs.empty()) throw ContractError("argmax of an empty list");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (xs[i] > xs[arg]) arg = i;
    }
    return arg;
}

namespace {

// Scores every (input, choice) row of a batch built from `pairs`.
std::vector<double> score_rows(const Backbone& backbone, const HookMap* hooks, std::span<const SeqPair> pairs,
                               ScoreNorm norm) {
    const SeqBatch batch = make_batch(pairs);
    Tape tape;
    ForwardOptions opts;
    opts.hooks = hooks;
    auto fr = backbone.forward(tape, batch, opts);
    const Tensor& logits = fr.logits.value();
    const std::size_t V = logits.dim(1);
    std::vector<double> out(batch.size, 0.0);
    for (std::size_t b = 0; b < batch.size; ++b) {
        double total = 0.0;
        std::size_t cnt = 0;
        for (std::size_t t = 0; t < batch.dec_len; ++t) {
            const std::size_t r = b * batch.dec_len + t;
            if (!batch.dec_mask[r]) continue;
            auto row = logits.row(r);
            const double mx = *std::max_element(row.begin(), row.end());
            double s = 0.0;
            for (std::size_t v = 0; v < V; ++v) s += std::exp(row[v] - mx);
            total += row[static_cast<std::size_t>(batch.dec_targets[r])] - mx - std::log(s);
            ++cnt;
        }
        out[b] = norm == ScoreNorm::mean ? total / static_cast<double>(cnt) : total;
    }
    return out;
}

void check_choices(const std::vector<TokenSeq>& choices) {
    if (choices.size() < 2) throw ContractError("rank classification needs at least 2 choices");
    for (const auto& c : choices) {
        if (c.empty()) throw ContractError("rank classification got an empty choice");
    }
}

}  // namespace

std::vector<double> choice_scores(const Backbone& backbone, const HookMap* hooks, std::span<const std::int32_t> input,
                                  const std::vector<TokenSeq>& choices, ScoreNorm norm) {
    check_choices(choices);
    std::vector<SeqPair> pairs;
    for (const auto& c : choices) pairs.push_back({input, c});
    return score_rows(backbone, hooks, pairs, norm);
}

std::size_t rank_classify(const Backbone& backbone, const HookMap* hooks, std::span<const std::int32_t> input,
                          const std::vector<TokenSeq>& choices, ScoreNorm norm) {
    return argmax_first(choice_scores(backbone, hooks, input, choices, norm));
}

std::vector<std::size_t> classify_set(const Backbone& backbone, const HookMap* hooks, const taskgen::ExampleSet& set,
                                      ScoreNorm norm, std::size_t chunk) {
    std::vector<std::size_t> preds;
    preds.reserve(set.examples.size());
    for (std::size_t b = 0; b < set.examples.size(); b += chunk) {
        const std::size_t e = std::min(set.examples.size(), b + chunk);
        std::vector<SeqPair> pairs;
        for (std::size_t i = b; i < e; ++i) {
            const auto& ex = set.examples[i];
            check_choices(ex.choices);
            for (const auto& c : ex.choices) pairs.push_back({ex.input, c});
        }
        const std::vector<double> scores = score_rows(backbone, hooks, pairs, norm);
        std::size_t off = 0;
        for (std::size_t i = b; i < e; ++i) {
            const std::size_t nc = set.examples[i].choices.size();
            preds.push_back(argmax_first(std::span<const double>(scores).subspan(off, nc)));
            off += nc;
        }
    }
    return preds;
}

double accuracy_of(const std::vector<std::size_t>& predictions, const taskgen::ExampleSet& set) {
    if (set.examples.empty()) throw ContractError("accuracy of an empty example set '" + set.task_id + "'");
    if (predictions.size() != set.examples.size()) throw ContractError("prediction count does not match the set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == set.examples[i].answer;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double evaluate_accuracy(const Backbone& backbone, const HookMap* hooks, const taskgen::ExampleSet& set,
                         ScoreNorm norm) {
    return accuracy_of(classify_set(backbone, hooks, set, norm), set);
}

}  // namespace pg
