#include "pg/config.hpp"

#include "pg/error.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace pg {

void RunConfig::reseed(std::uint64_t s) {
    seed = s;
    suite.seed = s;
    backbone.seed = s;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) throw ConfigError("config key '" + key + "': '" + value + "' is not a valid number");
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + value + "' is not a valid number");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError("config key '" + key + "': '" + value + "' is not a boolean");
}

std::string fmt(double d) {
    std::ostringstream os;
    os.precision(17);
    os << d;
    return os.str();
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define PG_FIELD(key, expr, parse, show)                                                                  \
    {                                                                                                     \
        key, Field {                                                                                      \
            [](RunConfig& c, const std::string& k, const std::string& v) { expr = parse; (void)k; },       \
                [](const RunConfig& c) { return show; }                                                   \
        }                                                                                                 \
    }

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> f = {
        {"seed", Field{[](RunConfig& c, const std::string& k, const std::string& v) { c.reseed(parse_number<std::uint64_t>(k, v)); },
                       [](const RunConfig& c) { return std::to_string(c.seed); }}},
        PG_FIELD("suite.n_heldin", c.suite.n_heldin, parse_number<std::size_t>(k, v), std::to_string(c.suite.n_heldin)),
        PG_FIELD("suite.n_heldout", c.suite.n_heldout, parse_number<std::size_t>(k, v), std::to_string(c.suite.n_heldout)),
        PG_FIELD("suite.train_size", c.suite.train_size, parse_number<std::size_t>(k, v), std::to_string(c.suite.train_size)),
        PG_FIELD("suite.validation_size", c.suite.validation_size, parse_number<std::size_t>(k, v),
                 std::to_string(c.suite.validation_size)),
        PG_FIELD("suite.test_size", c.suite.test_size, parse_number<std::size_t>(k, v), std::to_string(c.suite.test_size)),
        PG_FIELD("suite.slice_size", c.suite.slice_size, parse_number<std::size_t>(k, v), std::to_string(c.suite.slice_size)),
        PG_FIELD("suite.min_len", c.suite.min_len, parse_number<std::size_t>(k, v), std::to_string(c.suite.min_len)),
        PG_FIELD("suite.max_len", c.suite.max_len, parse_number<std::size_t>(k, v), std::to_string(c.suite.max_len)),
        PG_FIELD("suite.n_choices", c.suite.n_choices, parse_number<std::size_t>(k, v), std::to_string(c.suite.n_choices)),
        PG_FIELD("backbone.vocab_size", c.backbone.vocab_size, parse_number<std::size_t>(k, v),
                 std::to_string(c.backbone.vocab_size)),
        PG_FIELD("backbone.d_model", c.backbone.d_model, parse_number<std::size_t>(k, v), std::to_string(c.backbone.d_model)),
        PG_FIELD("backbone.n_heads", c.backbone.n_heads, parse_number<std::size_t>(k, v), std::to_string(c.backbone.n_heads)),
        PG_FIELD("backbone.d_ff", c.backbone.d_ff, parse_number<std::size_t>(k, v), std::to_string(c.backbone.d_ff)),
        PG_FIELD("backbone.n_encoder_layers", c.backbone.n_encoder_layers, parse_number<std::size_t>(k, v),
                 std::to_string(c.backbone.n_encoder_layers)),
        PG_FIELD("backbone.n_decoder_layers", c.backbone.n_decoder_layers, parse_number<std::size_t>(k, v),
                 std::to_string(c.backbone.n_decoder_layers)),
        PG_FIELD("backbone.max_seq_len", c.backbone.max_seq_len, parse_number<std::size_t>(k, v),
                 std::to_string(c.backbone.max_seq_len)),
        PG_FIELD("pretrain.steps", c.pretrain_steps, parse_number<long>(k, v), std::to_string(c.pretrain_steps)),
        PG_FIELD("pretrain.batch_size", c.pretrain_batch, parse_number<std::size_t>(k, v), std::to_string(c.pretrain_batch)),
        PG_FIELD("expert.rank", c.expert.rank, parse_number<std::size_t>(k, v), std::to_string(c.expert.rank)),
        PG_FIELD("expert.steps", c.expert.steps, parse_number<long>(k, v), std::to_string(c.expert.steps)),
        PG_FIELD("expert.gate_steps", c.expert.gate_steps, parse_number<long>(k, v), std::to_string(c.expert.gate_steps)),
        PG_FIELD("expert.multitask_steps", c.expert.multitask_steps, parse_number<long>(k, v),
                 std::to_string(c.expert.multitask_steps)),
        PG_FIELD("expert.batch_size", c.expert.batch_size, parse_number<std::size_t>(k, v), std::to_string(c.expert.batch_size)),
        PG_FIELD("expert.warmup_ratio", c.expert.warmup_ratio, parse_double(k, v), fmt(c.expert.warmup_ratio)),
        PG_FIELD("expert.eval_every", c.expert.eval_every, parse_number<long>(k, v), std::to_string(c.expert.eval_every)),
        PG_FIELD("expert.lr", c.expert.adamw.lr, parse_double(k, v), fmt(c.expert.adamw.lr)),
        PG_FIELD("expert.weight_decay", c.expert.adamw.weight_decay, parse_double(k, v), fmt(c.expert.adamw.weight_decay)),
        PG_FIELD("expert.beta1", c.expert.adamw.beta1, parse_double(k, v), fmt(c.expert.adamw.beta1)),
        PG_FIELD("expert.beta2", c.expert.adamw.beta2, parse_double(k, v), fmt(c.expert.adamw.beta2)),
        PG_FIELD("expert.eps", c.expert.adamw.eps, parse_double(k, v), fmt(c.expert.adamw.eps)),
        PG_FIELD("expert.joint_gate_lr", c.expert.joint_gate_lr, parse_double(k, v), fmt(c.expert.joint_gate_lr)),
        PG_FIELD("router.k", c.k, parse_number<std::size_t>(k, v), std::to_string(c.k)),
        PG_FIELD("baseline.avg_act_cap", c.avg_act_cap, parse_number<std::size_t>(k, v), std::to_string(c.avg_act_cap)),
        PG_FIELD("baseline.index_cap", c.index_cap, parse_number<std::size_t>(k, v), std::to_string(c.index_cap)),
        PG_FIELD("eval.norm", c.norm, parse_score_norm(v), std::string(score_norm_name(c.norm))),
        PG_FIELD("run.joint", c.joint, parse_bool(k, v), std::string(c.joint ? "true" : "false")),
        PG_FIELD("run.multitask", c.multitask, parse_bool(k, v), std::string(c.multitask ? "true" : "false")),
    };
    return f;
}

#undef PG_FIELD

}  // namespace

KeyValues parse_key_values(const std::string& text) {
    KeyValues kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_key_values(ss.str());
}

void apply_config(RunConfig& cfg, const KeyValues& kv) {
    const auto& f = fields();
    // seed first so explicit suite/backbone keys are not clobbered by reseed().
    if (auto it = kv.find("seed"); it != kv.end()) f.at("seed").set(cfg, it->first, it->second);
    for (const auto& [key, value] : kv) {
        if (key == "seed") continue;
        auto it = f.find(key);
        if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second.set(cfg, key, value);
    }
}

KeyValues config_snapshot(const RunConfig& cfg) {
    KeyValues kv;
    for (const auto& [key, field] : fields()) kv[key] = field.get(cfg);
    return kv;
}

std::string format_key_values(const KeyValues& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

}  // namespace pg
