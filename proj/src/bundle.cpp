#include "pg/bundle.hpp"

#include "pg/error.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t to_little(std::uint64_t x) {
    if constexpr (std::endian::native == std::endian::little) {
        return x;
    } else {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) r |= ((x >> (8 * i)) & 0xffULL) << (8 * (7 - i));
        return r;
    }
}

std::string file_name(const std::string& array) {
    std::string f;
    for (char c : array) f += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-') ? c : '_';
    return f + ".f64";
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write '" + p.string() + "'");
    os << text;
    if (!os) throw IoError("write failed for '" + p.string() + "'");
}

std::vector<std::string> site_list(const json& meta) {
    return meta.at("sites").get<std::vector<std::string>>();
}

template <typename T>
T meta_get(const json& meta, const char* key, const std::string& what) {
    if (!meta.contains(key)) throw ArtifactError(what + " manifest lacks '" + key + "'");
    try {
        return meta.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ArtifactError(what + " manifest field '" + key + "': " + e.what());
    }
}

}  // namespace

const Tensor& ArrayBundle::array(const std::string& name) const {
    for (const auto& [n, t] : arrays) {
        if (n == name) return t;
    }
    throw ArtifactError(kind + " bundle has no array '" + name + "'");
}

void write_bundle(const fs::path& dir, const ArrayBundle& bundle) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    json manifest;
    manifest["format_version"] = kBundleFormatVersion;
    manifest["kind"] = bundle.kind;
    manifest["meta"] = bundle.meta;
    json arrays = json::array();
    for (const auto& [name, t] : bundle.arrays) {
        const std::string fname = file_name(name);
        arrays.push_back({{"name", name}, {"file", fname}, {"shape", t.shape()}});
        std::string bytes(t.numel() * 8, '\0');
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const std::uint64_t le = to_little(std::bit_cast<std::uint64_t>(t[i]));
            std::memcpy(bytes.data() + 8 * i, &le, 8);
        }
        write_text(dir / fname, bytes);
    }
    manifest["arrays"] = arrays;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

ArrayBundle read_bundle(const fs::path& dir, const std::string& expected_kind) {
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw MissingArtifactError("no " + expected_kind + " bundle at '" + dir.string() + "'");
    std::ifstream is(mpath, std::ios::binary);
    if (!is) throw IoError("cannot read '" + mpath.string() + "'");
    json manifest;
    try {
        manifest = json::parse(is);
    } catch (const json::exception& e) {
        throw ArtifactError("malformed manifest '" + mpath.string() + "': " + e.what());
    }
    const int version = manifest.value("format_version", -1);
    if (version != kBundleFormatVersion) {
        throw VersionError("bundle '" + dir.string() + "' has format version " + std::to_string(version) +
                           ", expected " + std::to_string(kBundleFormatVersion));
    }
    ArrayBundle b;
    b.kind = manifest.value("kind", "");
    if (b.kind != expected_kind) {
        throw ArtifactError("bundle '" + dir.string() + "' holds a " + b.kind + ", expected a " + expected_kind);
    }
    b.meta = manifest.value("meta", json::object());
    for (const auto& a : manifest.at("arrays")) {
        const std::string name = a.at("name").get<std::string>();
        const Shape shape = a.at("shape").get<Shape>();
        const fs::path fpath = dir / a.at("file").get<std::string>();
        if (!fs::exists(fpath)) throw MissingArtifactError("array file '" + fpath.string() + "' is missing");
        const std::size_t n = shape_numel(shape);
        const auto size = fs::file_size(fpath);
        if (size != n * 8) {
            throw TruncatedArrayError("array '" + name + "' in '" + dir.string() + "' has " + std::to_string(size) +
                                      " bytes, shape " + shape_str(shape) + " needs " + std::to_string(n * 8));
        }
        std::ifstream fs_in(fpath, std::ios::binary);
        std::string bytes(n * 8, '\0');
        if (!fs_in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
            throw IoError("cannot read '" + fpath.string() + "'");
        }
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t le = 0;
            std::memcpy(&le, bytes.data() + 8 * i, 8);
            data[i] = std::bit_cast<double>(to_little(le));
        }
        b.arrays.emplace_back(name, Tensor(shape, std::move(data)));
    }
    return b;
}

void check_fingerprint(const json& meta, const std::string& expected, const std::string& what) {
    const std::string stored = meta.value("backbone_fingerprint", "");
    if (!expected.empty() && stored != expected) {
        throw FingerprintError(what + " was built for backbone " + (stored.empty() ? "<none>" : stored) +
                               " but the loaded backbone is " + expected);
    }
}

// ---- backbone ----

void save_backbone(const Backbone& backbone, const fs::path& dir) {
    const auto& c = backbone.config();
    ArrayBundle b;
    b.kind = "backbone";
    b.meta = {{"vocab_size", c.vocab_size},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"n_encoder_layers", c.n_encoder_layers},
              {"n_decoder_layers", c.n_decoder_layers},
              {"max_seq_len", c.max_seq_len},
              {"seed", c.seed},
              {"fingerprint", backbone.fingerprint()}};
    for (const auto& [name, t] : backbone.parameters()) b.arrays.emplace_back(name, *t);
    write_bundle(dir, b);
}

Backbone load_backbone(const fs::path& dir) {
    const ArrayBundle b = read_bundle(dir, "backbone");
    BackboneConfig c;
    const std::string what = "backbone";
    c.vocab_size = meta_get<std::size_t>(b.meta, "vocab_size", what);
    c.d_model = meta_get<std::size_t>(b.meta, "d_model", what);
    c.n_heads = meta_get<std::size_t>(b.meta, "n_heads", what);
    c.d_ff = meta_get<std::size_t>(b.meta, "d_ff", what);
    c.n_encoder_layers = meta_get<std::size_t>(b.meta, "n_encoder_layers", what);
    c.n_decoder_layers = meta_get<std::size_t>(b.meta, "n_decoder_layers", what);
    c.max_seq_len = meta_get<std::size_t>(b.meta, "max_seq_len", what);
    c.seed = meta_get<std::uint64_t>(b.meta, "seed", what);
    Backbone bb = Backbone::build(c);
    for (auto& [name, t] : bb.parameters()) {
        const Tensor& src = b.array(name);
        if (src.shape() != t->shape()) {
            throw ArtifactError("backbone array '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                                shape_str(t->shape()));
        }
        t->values() = src.values();
    }
    const std::string stored = meta_get<std::string>(b.meta, "fingerprint", what);
    if (stored != bb.fingerprint()) {
        throw FingerprintError("backbone weights in '" + dir.string() + "' do not match their recorded fingerprint");
    }
    return bb;
}

// ---- experts ----

void save_expert(const LoraExpert& expert, const std::string& backbone_fingerprint, const fs::path& dir) {
    ArrayBundle b;
    b.kind = "expert";
    const auto& m = expert.meta;
    std::vector<std::string> sites;
    for (const auto& s : expert.sites) sites.push_back(s.site_id);
    b.meta = {{"expert_id", expert.expert_id},
              {"backbone_fingerprint", backbone_fingerprint},
              {"rank", expert.rank()},
              {"sites", sites},
              {"task_id", m.task_id},
              {"training", m.training},
              {"seed", m.seed},
              {"hyperparameters",
               {{"steps", m.steps},
                {"gate_steps", m.gate_steps},
                {"selected_step", m.selected_step},
                {"lr", m.lr},
                {"weight_decay", m.weight_decay},
                {"warmup_ratio", m.warmup_ratio},
                {"batch_size", m.batch_size}}}};
    for (const auto& s : expert.sites) {
        b.arrays.emplace_back(s.site_id + ".A", s.A);
        b.arrays.emplace_back(s.site_id + ".B", s.B);
        b.arrays.emplace_back(s.site_id + ".v", s.v);
    }
    write_bundle(dir, b);
}

LoraExpert load_expert(const fs::path& dir, const Backbone& backbone) {
    const ArrayBundle b = read_bundle(dir, "expert");
    const std::string what = "expert bundle '" + dir.string() + "'";
    check_fingerprint(b.meta, backbone.fingerprint(), what);
    LoraExpert e;
    e.expert_id = meta_get<std::string>(b.meta, "expert_id", what);
    e.meta.task_id = b.meta.value("task_id", "");
    e.meta.training = b.meta.value("training", "post-hoc");
    e.meta.seed = b.meta.value("seed", std::uint64_t{0});
    const json h = b.meta.value("hyperparameters", json::object());
    e.meta.steps = h.value("steps", 0L);
    e.meta.gate_steps = h.value("gate_steps", 0L);
    e.meta.selected_step = h.value("selected_step", 0L);
    e.meta.lr = h.value("lr", 0.0);
    e.meta.weight_decay = h.value("weight_decay", 0.0);
    e.meta.warmup_ratio = h.value("warmup_ratio", 0.0);
    e.meta.batch_size = h.value("batch_size", std::size_t{0});
    for (const auto& site : meta_get<std::vector<std::string>>(b.meta, "sites", what)) {
        SiteLora s;
        s.site_id = site;
        s.A = b.array(site + ".A");
        s.B = b.array(site + ".B");
        s.v = b.array(site + ".v");
        e.sites.push_back(std::move(s));
    }
    e.validate(backbone);
    return e;
}

// ---- routers ----

void save_router(const Router& router, const fs::path& dir) {
    ArrayBundle b;
    b.kind = "router";
    std::vector<std::string> sites;
    for (const auto& s : router.sites) sites.push_back(s.site_id);
    b.meta = {{"router_kind", router_kind_name(router.kind)},
              {"k", router.k},
              {"expert_ids", router.expert_ids},
              {"backbone_fingerprint", router.backbone_fingerprint},
              {"sites", sites}};
    for (const auto& s : router.sites) b.arrays.emplace_back(s.site_id + ".gates", s.gates);
    write_bundle(dir, b);
}

Router load_router(const fs::path& dir, const Backbone& backbone) {
    const ArrayBundle b = read_bundle(dir, "router");
    const std::string what = "router bundle '" + dir.string() + "'";
    check_fingerprint(b.meta, backbone.fingerprint(), what);
    Router r;
    r.kind = parse_router_kind(meta_get<std::string>(b.meta, "router_kind", what));
    r.k = meta_get<std::size_t>(b.meta, "k", what);
    r.expert_ids = meta_get<std::vector<std::string>>(b.meta, "expert_ids", what);
    r.backbone_fingerprint = meta_get<std::string>(b.meta, "backbone_fingerprint", what);
    if (r.k < 1 || r.k > r.expert_ids.size()) throw ArtifactError(what + ": k outside [1, pool size]");
    for (const auto& site : site_list(b.meta)) {
        SiteRouter s;
        s.site_id = site;
        s.expert_ids = r.expert_ids;
        s.gates = b.array(site + ".gates");
        if (s.gates.ndim() != 2 || s.gates.dim(0) != r.expert_ids.size()) {
            throw ArtifactError(what + ": gate matrix at '" + site + "' does not match the expert list");
        }
        s.n = s.gates.dim(1);
        if (backbone.site(site).n != s.n) throw ArtifactError(what + ": gate width does not fit '" + site + "'");
        s.k = r.k;
        s.scoring = r.kind == RouterKind::arrow ? Scoring::absolute_raw : Scoring::standardized;
        r.sites.push_back(std::move(s));
    }
    return r;
}

// ---- retrieval index ----

void save_index(const EmbeddingIndex& index, const fs::path& dir) {
    ArrayBundle b;
    b.kind = "retrieval-index";
    b.meta = {{"expert_ids", index.expert_ids},
              {"backbone_fingerprint", index.backbone_fingerprint},
              {"owner", index.owner}};
    b.arrays.emplace_back("embeddings", index.embeddings);
    write_bundle(dir, b);
}

EmbeddingIndex load_index(const fs::path& dir, const Backbone& backbone) {
    const ArrayBundle b = read_bundle(dir, "retrieval-index");
    const std::string what = "index bundle '" + dir.string() + "'";
    check_fingerprint(b.meta, backbone.fingerprint(), what);
    EmbeddingIndex idx;
    idx.expert_ids = meta_get<std::vector<std::string>>(b.meta, "expert_ids", what);
    idx.backbone_fingerprint = meta_get<std::string>(b.meta, "backbone_fingerprint", what);
    idx.owner = meta_get<std::vector<std::size_t>>(b.meta, "owner", what);
    idx.embeddings = b.array("embeddings");
    if (idx.embeddings.ndim() != 2 || idx.embeddings.dim(0) != idx.owner.size() ||
        idx.embeddings.dim(1) != backbone.config().d_model) {
        throw ArtifactError(what + ": embedding matrix does not match its owner list or the backbone width");
    }
    for (auto o : idx.owner) {
        if (o >= idx.expert_ids.size()) throw ArtifactError(what + ": owner index out of range");
    }
    return idx;
}

// ---- merged ----

void save_merged(const MergedExpert& merged, const std::string& backbone_fingerprint, const fs::path& dir) {
    ArrayBundle b;
    b.kind = "merged";
    b.meta = {{"name", merged.name}, {"backbone_fingerprint", backbone_fingerprint}, {"sites", merged.site_ids}};
    for (std::size_t i = 0; i < merged.site_ids.size(); ++i) b.arrays.emplace_back(merged.site_ids[i] + ".D", merged.deltas[i]);
    write_bundle(dir, b);
}

MergedExpert load_merged(const fs::path& dir, const Backbone& backbone) {
    const ArrayBundle b = read_bundle(dir, "merged");
    const std::string what = "merged bundle '" + dir.string() + "'";
    check_fingerprint(b.meta, backbone.fingerprint(), what);
    MergedExpert m;
    m.name = meta_get<std::string>(b.meta, "name", what);
    for (const auto& site : site_list(b.meta)) {
        const Tensor& D = b.array(site + ".D");
        const ModuleSite& ms = backbone.site(site);
        if (D.ndim() != 2 || D.dim(0) != ms.d || D.dim(1) != ms.n) {
            throw ArtifactError(what + ": delta at '" + site + "' does not fit the site");
        }
        m.site_ids.push_back(site);
        m.deltas.push_back(D);
    }
    return m;
}

}  // namespace pg
