#include "pg/taskgen.hpp"

#include "pg/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace pg::taskgen {

using json = nlohmann::json;

namespace {

constexpr int kSuiteFormatVersion = 1;

const TaskKind kHeldInCycle[] = {TaskKind::token_permutation, TaskKind::affix_rule, TaskKind::token_permutation,
                                 TaskKind::copy_span};

const char* short_kind(TaskKind k) {
    switch (k) {
        case TaskKind::token_permutation: return "perm";
        case TaskKind::affix_rule: return "affix";
        case TaskKind::copy_span: return "copy";
        case TaskKind::composed: return "comp";
    }
    return "?";
}

bool per_token_only(TaskKind k) { return k == TaskKind::token_permutation || k == TaskKind::copy_span; }

TokenSeq random_derangement(const TokenSeq& slice, Rng& rng) {
    TokenSeq out = slice;
    if (slice.size() < 2) return out;
    for (;;) {
        shuffle(out, rng);
        bool ok = true;
        for (std::size_t i = 0; i < out.size(); ++i) ok = ok && out[i] != slice[i];
        if (ok) return out;
    }
}

std::int32_t lookup(const TaskSpec& task, std::int32_t token) {
    for (std::size_t i = 0; i < task.slice.size(); ++i) {
        if (task.slice[i] == token) return task.mapping[i];
    }
    throw ContractError("token " + std::to_string(token) + " is outside the alphabet of task " + task.task_id);
}

bool in_slice(const TaskSpec& task, std::int32_t token) {
    return std::find(task.slice.begin(), task.slice.end(), token) != task.slice.end();
}

TokenSeq output_alphabet(const TaskSpec& task) {
    TokenSeq a = task.mapping;
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    return a;
}

struct Generated {
    TokenSeq content;
    std::vector<TokenSeq> alphabets;      // per target position
    std::vector<std::uint8_t> region;     // per target position: 0 = first span, 1 = later spans
};

TokenSeq draw_tokens(const TokenSeq& alphabet, std::size_t len, Rng& rng) {
    TokenSeq out(len);
    for (auto& t : out) t = alphabet[rng.below(alphabet.size())];
    return out;
}

std::size_t draw_len(std::size_t lo, std::size_t hi, Rng& rng) { return lo + rng.below(hi - lo + 1); }

Generated draw_content(const Suite& suite, const TaskSpec& task, Rng& rng) {
    Generated g;
    if (task.kind != TaskKind::composed) {
        g.content = draw_tokens(task.slice, draw_len(task.min_len, task.max_len, rng), rng);
        const TokenSeq alpha = output_alphabet(task);
        g.alphabets.assign(g.content.size(), alpha);
        if (task.kind == TaskKind::affix_rule) g.alphabets.push_back(task.slice);
        g.region.assign(g.alphabets.size(), 0);
        return g;
    }
    for (std::size_t c = 0; c < task.components.size(); ++c) {
        const TaskSpec& comp = suite.task(task.components[c]);
        TokenSeq span = draw_tokens(comp.slice, draw_len(task.min_len, task.max_len, rng), rng);
        const TokenSeq alpha = output_alphabet(comp);
        for (std::size_t i = 0; i < span.size(); ++i) {
            g.alphabets.push_back(alpha);
            g.region.push_back(c == 0 ? 0 : 1);
        }
        if (comp.kind == TaskKind::affix_rule) {
            g.alphabets.push_back(comp.slice);
            g.region.push_back(c == 0 ? 0 : 1);
        }
        g.content.insert(g.content.end(), span.begin(), span.end());
    }
    return g;
}

// Corrupts one or two positions of the gold target within the given region.
// Replacements stay inside the position's output alphabet and never equal the
// aligned input token, so a model that merely copies its input gains nothing.
std::optional<TokenSeq> corrupt(const TokenSeq& gold, const Generated& g, int region, Rng& rng) {
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (region < 0 || g.region[i] == region) positions.push_back(i);
    }
    if (positions.empty()) return std::nullopt;
    shuffle(positions, rng);
    const std::size_t want = std::min<std::size_t>(1 + rng.below(2), positions.size());
    TokenSeq out = gold;
    std::size_t done = 0;
    for (std::size_t pos : positions) {
        if (done == want) break;
        TokenSeq options;
        for (auto t : g.alphabets[pos]) {
            if (t == gold[pos]) continue;
            if (pos < g.content.size() && t == g.content[pos]) continue;
            options.push_back(t);
        }
        if (options.empty()) continue;
        out[pos] = options[rng.below(options.size())];
        ++done;
    }
    if (done == 0) return std::nullopt;
    return out;
}

Example make_example(const Suite& suite, const TaskSpec& task, const Generated& g, Rng& rng) {
    Example ex;
    ex.input = task.prompt;
    ex.input.insert(ex.input.end(), g.content.begin(), g.content.end());
    ex.target = apply_rule(suite, task, g.content);

    const std::size_t n_choices = suite.config.n_choices;
    std::vector<TokenSeq> distractors;
    std::set<TokenSeq> seen{ex.target};
    const std::vector<int> regions = task.kind == TaskKind::composed ? std::vector<int>{0, 1, -1} : std::vector<int>{-1};
    for (std::size_t attempt = 0; distractors.size() + 1 < n_choices; ++attempt) {
        if (attempt > 1000) throw ConfigError("cannot build distinct distractors for task " + task.task_id);
        const int region = regions[distractors.size() % regions.size()];
        auto d = corrupt(ex.target, g, attempt < 100 ? region : -1, rng);
        if (!d || seen.count(*d)) continue;
        seen.insert(*d);
        distractors.push_back(std::move(*d));
    }
    ex.answer = rng.below(n_choices);
    for (std::size_t i = 0, j = 0; i < n_choices; ++i) {
        ex.choices.push_back(i == ex.answer ? ex.target : distractors[j++]);
    }
    return ex;
}

json task_to_json(const TaskSpec& t) {
    return json{{"task_id", t.task_id},   {"kind", kind_name(t.kind)}, {"held_in", t.held_in},
                {"template_id", t.template_id}, {"prompt", t.prompt},  {"slice", t.slice},
                {"mapping", t.mapping},   {"affix", t.affix},          {"shift", t.shift},
                {"components", t.components}, {"min_len", t.min_len}, {"max_len", t.max_len}};
}

TaskSpec task_from_json(const json& j) {
    TaskSpec t;
    t.task_id = j.at("task_id").get<std::string>();
    t.kind = parse_kind(j.at("kind").get<std::string>());
    t.held_in = j.at("held_in").get<bool>();
    t.template_id = j.at("template_id").get<int>();
    t.prompt = j.at("prompt").get<TokenSeq>();
    t.slice = j.at("slice").get<TokenSeq>();
    t.mapping = j.at("mapping").get<TokenSeq>();
    t.affix = j.at("affix").get<std::int32_t>();
    t.shift = j.at("shift").get<int>();
    t.components = j.at("components").get<std::vector<std::string>>();
    t.min_len = j.at("min_len").get<std::size_t>();
    t.max_len = j.at("max_len").get<std::size_t>();
    return t;
}

json config_to_json(const SuiteConfig& c) {
    return json{{"seed", c.seed},
                {"n_heldin", c.n_heldin},
                {"n_heldout", c.n_heldout},
                {"train_size", c.train_size},
                {"validation_size", c.validation_size},
                {"test_size", c.test_size},
                {"slice_size", c.slice_size},
                {"min_len", c.min_len},
                {"max_len", c.max_len},
                {"composed_min_span", c.composed_min_span},
                {"composed_max_span", c.composed_max_span},
                {"n_choices", c.n_choices},
                {"vocab_size", c.vocab.vocab_size},
                {"template_begin", c.vocab.template_begin},
                {"template_count", c.vocab.template_count}};
}

SuiteConfig config_from_json(const json& j) {
    SuiteConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.n_heldin = j.at("n_heldin").get<std::size_t>();
    c.n_heldout = j.at("n_heldout").get<std::size_t>();
    c.train_size = j.at("train_size").get<std::size_t>();
    c.validation_size = j.at("validation_size").get<std::size_t>();
    c.test_size = j.at("test_size").get<std::size_t>();
    c.slice_size = j.at("slice_size").get<std::size_t>();
    c.min_len = j.at("min_len").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.composed_min_span = j.at("composed_min_span").get<std::size_t>();
    c.composed_max_span = j.at("composed_max_span").get<std::size_t>();
    c.n_choices = j.at("n_choices").get<std::size_t>();
    c.vocab.vocab_size = j.at("vocab_size").get<std::int32_t>();
    c.vocab.template_begin = j.at("template_begin").get<std::int32_t>();
    c.vocab.template_count = j.at("template_count").get<std::int32_t>();
    return c;
}

std::string jsonl_name(const std::string& task_id, Split s) {
    return task_id + "." + split_name(s) + ".jsonl";
}

}  // namespace

const char* kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::token_permutation: return "token-permutation";
        case TaskKind::affix_rule: return "affix-rule";
        case TaskKind::copy_span: return "copy-span";
        case TaskKind::composed: return "composed";
    }
    return "?";
}

TaskKind parse_kind(const std::string& s) {
    if (s == "token-permutation") return TaskKind::token_permutation;
    if (s == "affix-rule") return TaskKind::affix_rule;
    if (s == "copy-span") return TaskKind::copy_span;
    if (s == "composed") return TaskKind::composed;
    throw ConfigError("unknown task kind '" + s + "'");
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
    }
    return "?";
}

const ExampleSet& TaskData::split(Split s) const {
    switch (s) {
        case Split::train: return train;
        case Split::validation: return validation;
        case Split::test: return test;
    }
    return test;
}

const TaskSpec& Suite::task(const std::string& id) const {
    for (const auto& t : tasks) {
        if (t.task_id == id) return t;
    }
    throw ContractError("unknown task '" + id + "'");
}

std::vector<const TaskSpec*> Suite::held_in() const {
    std::vector<const TaskSpec*> out;
    for (const auto& t : tasks) {
        if (t.held_in) out.push_back(&t);
    }
    return out;
}

std::vector<const TaskSpec*> Suite::held_out() const {
    std::vector<const TaskSpec*> out;
    for (const auto& t : tasks) {
        if (!t.held_in) out.push_back(&t);
    }
    return out;
}

const ExampleSet& Suite::examples(const std::string& id, Split s) const {
    auto it = data.find(id);
    if (it == data.end()) throw ContractError("no examples for task '" + id + "'");
    return it->second.split(s);
}

TokenSeq apply_rule(const Suite& suite, const TaskSpec& task, std::span<const std::int32_t> content) {
    TokenSeq out;
    switch (task.kind) {
        case TaskKind::token_permutation:
        case TaskKind::copy_span:
            for (auto t : content) out.push_back(lookup(task, t));
            return out;
        case TaskKind::affix_rule:
            for (auto t : content) out.push_back(lookup(task, t));
            out.push_back(task.affix);
            return out;
        case TaskKind::composed: {
            std::size_t i = 0;
            while (i < content.size()) {
                const TaskSpec* owner = nullptr;
                for (const auto& id : task.components) {
                    const TaskSpec& c = suite.task(id);
                    if (in_slice(c, content[i])) owner = &c;
                }
                if (!owner) {
                    throw ContractError("token " + std::to_string(content[i]) + " belongs to no component of " +
                                        task.task_id);
                }
                std::size_t j = i;
                while (j < content.size() && in_slice(*owner, content[j])) ++j;
                TokenSeq part = apply_rule(suite, *owner, content.subspan(i, j - i));
                out.insert(out.end(), part.begin(), part.end());
                i = j;
            }
            return out;
        }
    }
    return out;
}

Suite generate_suite(const SuiteConfig& cfg) {
    if (cfg.n_heldin < 2) throw ConfigError("generate_suite: need at least 2 held-in tasks");
    if (cfg.n_choices < 2) throw ConfigError("generate_suite: need at least 2 answer choices");
    if (cfg.slice_size < 3) throw ConfigError("generate_suite: slice size must be at least 3");
    if (cfg.min_len < 1 || cfg.min_len > cfg.max_len || cfg.composed_min_span < 1 ||
        cfg.composed_min_span > cfg.composed_max_span) {
        throw ConfigError("generate_suite: invalid length range");
    }

    Suite suite;
    suite.config = cfg;
    Rng rng = Rng(cfg.seed).split("taskgen");

    const auto& V = cfg.vocab;
    if (V.template_count < 2 || V.content_begin() >= V.vocab_size) throw ConfigError("generate_suite: invalid vocab layout");

    std::vector<TokenSeq> templates;
    for (std::int32_t a = 0; a < V.template_count; ++a) {
        for (std::int32_t b = 0; b < V.template_count; ++b) {
            if (a != b) templates.push_back({V.template_begin + a, V.template_begin + b});
        }
    }
    Rng trng = rng.split("templates");
    shuffle(templates, trng);
    if (templates.size() < cfg.n_heldin + cfg.n_heldout) {
        throw ConfigError("generate_suite: template pool too small for the requested number of tasks");
    }

    std::size_t n_copy = 0;
    for (std::size_t i = 0; i < cfg.n_heldin; ++i) n_copy += kHeldInCycle[i % 4] == TaskKind::copy_span;
    const std::size_t needed = (cfg.n_heldin + n_copy) * cfg.slice_size;
    if (needed > static_cast<std::size_t>(V.content_count())) {
        throw ConfigError("generate_suite: vocab too small: need " + std::to_string(needed) +
                          " content tokens for the requested slices, have " + std::to_string(V.content_count()));
    }
    TokenSeq content(static_cast<std::size_t>(V.content_count()));
    for (std::size_t i = 0; i < content.size(); ++i) content[i] = V.content_begin() + static_cast<std::int32_t>(i);
    Rng srng = rng.split("slices");
    shuffle(content, srng);
    std::size_t next = 0;
    auto take_slice = [&] {
        TokenSeq s(content.begin() + static_cast<std::ptrdiff_t>(next),
                   content.begin() + static_cast<std::ptrdiff_t>(next + cfg.slice_size));
        next += cfg.slice_size;
        std::sort(s.begin(), s.end());
        return s;
    };

    Rng rules = rng.split("rules");
    for (std::size_t i = 0; i < cfg.n_heldin; ++i) {
        TaskSpec t;
        t.kind = kHeldInCycle[i % 4];
        t.task_id = "h" + std::to_string(i) + "_" + short_kind(t.kind);
        t.held_in = true;
        t.template_id = static_cast<int>(i);
        t.prompt = templates[i];
        t.slice = take_slice();
        t.min_len = cfg.min_len;
        t.max_len = cfg.max_len;
        switch (t.kind) {
            case TaskKind::token_permutation: t.mapping = random_derangement(t.slice, rules); break;
            case TaskKind::affix_rule: {
                t.shift = 1 + static_cast<int>(rules.below(t.slice.size() - 1));
                for (std::size_t j = 0; j < t.slice.size(); ++j) {
                    t.mapping.push_back(t.slice[(j + static_cast<std::size_t>(t.shift)) % t.slice.size()]);
                }
                t.affix = t.slice[rules.below(t.slice.size())];
                break;
            }
            case TaskKind::copy_span: t.mapping = take_slice(); break;
            case TaskKind::composed: break;
        }
        suite.tasks.push_back(std::move(t));
    }

    const std::size_t n_unseen = cfg.n_heldout / 2;
    const std::size_t n_composed = cfg.n_heldout - n_unseen;

    std::vector<std::size_t> perms;
    for (std::size_t i = 0; i < cfg.n_heldin; ++i) {
        if (suite.tasks[i].kind == TaskKind::token_permutation) perms.push_back(i);
    }
    Rng hrng = rng.split("heldout");
    shuffle(perms, hrng);
    std::size_t tmpl = cfg.n_heldin;
    for (std::size_t j = 0; j < n_unseen; ++j) {
        if (perms.size() < 2) throw ConfigError("generate_suite: unseen permutation tasks need two permutation tasks");
        const TaskSpec& a = suite.tasks[perms[(2 * j) % perms.size()]];
        const TaskSpec& b = suite.tasks[perms[(2 * j + 1) % perms.size()]];
        TaskSpec t;
        t.kind = TaskKind::token_permutation;
        t.task_id = "u" + std::to_string(j) + "_perm";
        t.held_in = false;
        t.template_id = static_cast<int>(tmpl);
        t.prompt = templates[tmpl++];
        t.components = {a.task_id, b.task_id};
        std::vector<std::pair<std::int32_t, std::int32_t>> table;
        for (std::size_t i = 0; i < a.slice.size(); ++i) table.emplace_back(a.slice[i], a.mapping[i]);
        for (std::size_t i = 0; i < b.slice.size(); ++i) table.emplace_back(b.slice[i], b.mapping[i]);
        std::sort(table.begin(), table.end());
        for (auto [x, y] : table) {
            t.slice.push_back(x);
            t.mapping.push_back(y);
        }
        t.min_len = cfg.min_len;
        t.max_len = cfg.max_len;
        suite.tasks.push_back(std::move(t));
    }

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t p = 0; p < cfg.n_heldin; ++p) {
        if (!per_token_only(suite.tasks[p].kind)) continue;
        for (std::size_t q = 0; q < cfg.n_heldin; ++q) {
            if (q != p) pairs.emplace_back(p, q);
        }
    }
    shuffle(pairs, hrng);
    // Prefer pairs that do not reuse a task already used by an earlier composed task.
    std::vector<std::pair<std::size_t, std::size_t>> chosen;
    std::set<std::size_t> used;
    for (const auto& pq : pairs) {
        if (chosen.size() == n_composed) break;
        if (used.count(pq.first) || used.count(pq.second)) continue;
        chosen.push_back(pq);
        used.insert(pq.first);
        used.insert(pq.second);
    }
    for (const auto& pq : pairs) {
        if (chosen.size() == n_composed) break;
        if (std::find(chosen.begin(), chosen.end(), pq) == chosen.end()) chosen.push_back(pq);
    }
    for (std::size_t j = 0; j < chosen.size(); ++j) {
        TaskSpec t;
        t.kind = TaskKind::composed;
        t.task_id = "c" + std::to_string(j) + "_comp";
        t.held_in = false;
        t.template_id = static_cast<int>(tmpl);
        t.prompt = templates[tmpl++];
        t.components = {suite.tasks[chosen[j].first].task_id, suite.tasks[chosen[j].second].task_id};
        t.min_len = cfg.composed_min_span;
        t.max_len = cfg.composed_max_span;
        suite.tasks.push_back(std::move(t));
    }

    const std::size_t total = cfg.train_size + cfg.validation_size + cfg.test_size;
    for (const auto& task : suite.tasks) {
        Rng erng = rng.split("examples").split(task.task_id);
        std::set<TokenSeq> seen;
        std::vector<Example> all;
        all.reserve(total);
        std::size_t attempts = 0;
        while (all.size() < total) {
            if (++attempts > 50 * total + 1000) {
                throw ConfigError("generate_suite: task " + task.task_id + " cannot yield " + std::to_string(total) +
                                  " distinct examples");
            }
            Generated g = draw_content(suite, task, erng);
            if (!seen.insert(g.content).second) continue;
            all.push_back(make_example(suite, task, g, erng));
        }
        TaskData d;
        d.train = {task.task_id, Split::train, {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.train_size)}};
        d.validation = {task.task_id, Split::validation,
                        {all.begin() + static_cast<std::ptrdiff_t>(cfg.train_size),
                         all.begin() + static_cast<std::ptrdiff_t>(cfg.train_size + cfg.validation_size)}};
        d.test = {task.task_id, Split::test,
                  {all.begin() + static_cast<std::ptrdiff_t>(cfg.train_size + cfg.validation_size), all.end()}};
        suite.data.emplace(task.task_id, std::move(d));
    }
    return suite;
}

SeqBatch sample_batch(const ExampleSet& set, std::size_t batch_size, Rng& rng) {
    if (set.examples.empty()) throw ContractError("sample_batch: empty example set");
    std::vector<SeqPair> pairs;
    pairs.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const Example& ex = set.examples[rng.below(set.examples.size())];
        pairs.push_back({ex.input, ex.target});
    }
    return make_batch(pairs);
}

SeqBatch batch_of(const ExampleSet& set, std::size_t begin, std::size_t end) {
    std::vector<SeqPair> pairs;
    for (std::size_t i = begin; i < end && i < set.examples.size(); ++i) {
        pairs.push_back({set.examples[i].input, set.examples[i].target});
    }
    return make_batch(pairs);
}

PretrainSource PretrainSource::make(const VocabLayout& vocab, std::uint64_t seed, std::size_t min_len,
                                    std::size_t max_len) {
    PretrainSource src;
    src.vocab = vocab;
    src.min_len = min_len;
    src.max_len = max_len;
    Rng rng = Rng(seed).split("pretrain-markov");
    const auto n = static_cast<std::size_t>(vocab.content_count());
    src.transitions.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        // Four preferred successors carry most of the mass.
        double total = 0.0;
        for (int s = 0; s < 4; ++s) {
            const double w = 1.0 + 4.0 * rng.uniform();
            src.transitions[i][rng.below(n)] += w;
            total += w;
        }
        for (std::size_t j = 0; j < n; ++j) {
            src.transitions[i][j] += 0.05;
            total += 0.05;
        }
        for (auto& p : src.transitions[i]) p /= total;
    }
    return src;
}

std::pair<TokenSeq, TokenSeq> PretrainSource::draw(Rng& rng) const {
    const auto n = static_cast<std::size_t>(vocab.content_count());
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    if (rng.uniform() < copy_fraction) {
        TokenSeq input;
        const auto a = static_cast<std::int32_t>(rng.below(static_cast<std::size_t>(vocab.template_count)));
        auto b = static_cast<std::int32_t>(rng.below(static_cast<std::size_t>(vocab.template_count - 1)));
        if (b >= a) ++b;
        input.push_back(vocab.template_begin + a);
        input.push_back(vocab.template_begin + b);
        TokenSeq content(len);
        for (auto& t : content) t = vocab.content_begin() + static_cast<std::int32_t>(rng.below(n));
        input.insert(input.end(), content.begin(), content.end());
        return {input, content};
    }
    TokenSeq seq(2 * len);
    std::size_t cur = rng.below(n);
    for (auto& t : seq) {
        t = vocab.content_begin() + static_cast<std::int32_t>(cur);
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t nxt = n - 1;
        for (std::size_t j = 0; j < n; ++j) {
            acc += transitions[cur][j];
            if (u < acc) {
                nxt = j;
                break;
            }
        }
        cur = nxt;
    }
    return {TokenSeq(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(len)),
            TokenSeq(seq.begin() + static_cast<std::ptrdiff_t>(len), seq.end())};
}

SeqBatch PretrainSource::batch(std::size_t batch_size, Rng& rng) const {
    std::vector<std::pair<TokenSeq, TokenSeq>> draws;
    draws.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) draws.push_back(draw(rng));
    std::vector<SeqPair> pairs;
    for (const auto& d : draws) pairs.push_back({d.first, d.second});
    return make_batch(pairs);
}

void save_suite(const Suite& suite, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json manifest{{"format_version", kSuiteFormatVersion}, {"config", config_to_json(suite.config)}};
    json tasks = json::array();
    for (const auto& t : suite.tasks) tasks.push_back(task_to_json(t));
    manifest["tasks"] = tasks;
    {
        std::ofstream out(dir / "suite.json", std::ios::binary);
        if (!out) throw IoError("cannot write " + (dir / "suite.json").string());
        out << manifest.dump(2) << '\n';
    }
    for (const auto& t : suite.tasks) {
        const TaskData& d = suite.data.at(t.task_id);
        for (Split s : {Split::train, Split::validation, Split::test}) {
            std::ofstream out(dir / jsonl_name(t.task_id, s), std::ios::binary);
            if (!out) throw IoError("cannot write " + (dir / jsonl_name(t.task_id, s)).string());
            for (const auto& ex : d.split(s).examples) {
                json line{{"input", ex.input}, {"target", ex.target}, {"choices", ex.choices}, {"answer", ex.answer}};
                out << line.dump() << '\n';
            }
        }
    }
}

Suite load_suite(const std::filesystem::path& dir) {
    std::ifstream in(dir / "suite.json");
    if (!in) throw MissingArtifactError("task suite not found at " + dir.string() + " (run gen-tasks first)");
    json manifest = json::parse(in);
    if (manifest.at("format_version").get<int>() != kSuiteFormatVersion) {
        throw VersionError("unsupported suite format version in " + (dir / "suite.json").string());
    }
    Suite suite;
    suite.config = config_from_json(manifest.at("config"));
    for (const auto& j : manifest.at("tasks")) suite.tasks.push_back(task_from_json(j));
    for (const auto& t : suite.tasks) {
        TaskData d;
        for (Split s : {Split::train, Split::validation, Split::test}) {
            ExampleSet set{t.task_id, s, {}};
            std::ifstream f(dir / jsonl_name(t.task_id, s));
            if (!f) throw MissingArtifactError("missing corpus file " + (dir / jsonl_name(t.task_id, s)).string());
            std::string line;
            while (std::getline(f, line)) {
                if (line.empty()) continue;
                json j = json::parse(line);
                Example ex;
                ex.input = j.at("input").get<TokenSeq>();
                ex.target = j.at("target").get<TokenSeq>();
                ex.choices = j.at("choices").get<std::vector<TokenSeq>>();
                ex.answer = j.at("answer").get<std::size_t>();
                set.examples.push_back(std::move(ex));
            }
            (s == Split::train ? d.train : s == Split::validation ? d.validation : d.test) = std::move(set);
        }
        suite.data.emplace(t.task_id, std::move(d));
    }
    return suite;
}

}  // namespace pg::taskgen
