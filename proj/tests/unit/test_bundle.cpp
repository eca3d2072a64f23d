#include "fd.hpp"

#include "pg/bundle.hpp"
#include "pg/error.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>

using namespace pg;
using namespace pg::testing;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("pg_test_bundle_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

bool same_files(const fs::path& a, const fs::path& b) {
    std::size_t count = 0;
    for (const auto& entry : fs::directory_iterator(a)) {
        const fs::path other = b / entry.path().filename();
        if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) return false;
        ++count;
    }
    return count == static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator{}));
}

BackboneConfig tiny_config(std::uint64_t seed = 1) {
    BackboneConfig c;
    c.vocab_size = 20;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 12;
    c.n_encoder_layers = 1;
    c.n_decoder_layers = 1;
    c.max_seq_len = 10;
    c.seed = seed;
    return c;
}

LoraExpert random_expert(const Backbone& bb, std::uint64_t seed, const std::string& id) {
    LoraExpert e = init_expert(bb, 2, seed, id);
    Rng rng(seed + 50);
    for (auto& s : e.sites) {
        for (auto& x : s.B.values()) x = rng.normal();
        for (auto& x : s.v.values()) x = rng.normal();
    }
    e.meta.steps = 12;
    e.meta.seed = seed;
    return e;
}

}  // namespace

TEST_CASE("array bundles round-trip bit-exactly", "[bundle]") {
    ArrayBundle b;
    b.kind = "test";
    b.meta = {{"note", "x"}, {"n", 3}};
    Tensor special({6}, std::vector<double>{1.0, -0.0, 1e-310, std::numeric_limits<double>::max(),
                                            std::numeric_limits<double>::infinity(), 0.1});
    Rng rng(1);
    b.arrays = {{"special", special}, {"grid", random_tensor({3, 4}, rng)}, {"layer.0/w", random_tensor({2}, rng)}};
    const fs::path a = fresh_dir("a"), c = fresh_dir("c");
    write_bundle(a, b);
    const ArrayBundle r = read_bundle(a, "test");
    REQUIRE(r.arrays.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(r.arrays[i].first == b.arrays[i].first);
        CHECK(r.arrays[i].second.shape() == b.arrays[i].second.shape());
        for (std::size_t j = 0; j < b.arrays[i].second.numel(); ++j) {
            CHECK(std::bit_cast<std::uint64_t>(r.arrays[i].second[j]) == std::bit_cast<std::uint64_t>(b.arrays[i].second[j]));
        }
    }
    CHECK(std::signbit(r.array("special")[1]));
    CHECK(r.meta == b.meta);
    write_bundle(c, r);
    CHECK(same_files(a, c));
    fs::remove_all(a);
    fs::remove_all(c);
}

TEST_CASE("array files are raw little-endian doubles", "[bundle]") {
    ArrayBundle b;
    b.kind = "test";
    b.arrays = {{"one", Tensor({1}, 1.0)}};
    const fs::path d = fresh_dir("le");
    write_bundle(d, b);
    std::string bytes;
    for (const auto& e : fs::directory_iterator(d)) {
        if (e.path().filename() != "manifest.json") bytes = slurp(e.path());
    }
    REQUIRE(bytes.size() == 8);
    const unsigned char expect[8] = {0, 0, 0, 0, 0, 0, 0xF0, 0x3F};
    for (int i = 0; i < 8; ++i) CHECK(static_cast<unsigned char>(bytes[i]) == expect[i]);
    fs::remove_all(d);
}

TEST_CASE("bundle read errors", "[bundle][errors]") {
    ArrayBundle b;
    b.kind = "test";
    b.arrays = {{"x", Tensor({4}, 2.0)}};
    const fs::path d = fresh_dir("errors");
    CHECK_THROWS_AS(read_bundle(d, "test"), MissingArtifactError);
    write_bundle(d, b);
    CHECK_THROWS_AS(read_bundle(d, "other"), ArtifactError);

    fs::path array_file;
    for (const auto& e : fs::directory_iterator(d)) {
        if (e.path().filename() != "manifest.json") array_file = e.path();
    }
    fs::resize_file(array_file, 24);
    CHECK_THROWS_AS(read_bundle(d, "test"), TruncatedArrayError);
    fs::remove(array_file);
    CHECK_THROWS_AS(read_bundle(d, "test"), MissingArtifactError);

    write_bundle(d, b);
    std::string manifest = slurp(d / "manifest.json");
    const auto at = manifest.find("\"format_version\": 1");
    REQUIRE(at != std::string::npos);
    manifest.replace(at, 19, "\"format_version\": 99");
    std::ofstream(d / "manifest.json", std::ios::binary) << manifest;
    CHECK_THROWS_AS(read_bundle(d, "test"), VersionError);
    std::ofstream(d / "manifest.json", std::ios::binary) << "{not json";
    CHECK_THROWS_AS(read_bundle(d, "test"), ArtifactError);
    fs::remove_all(d);
}

TEST_CASE("backbones round-trip with their fingerprint", "[bundle]") {
    const Backbone bb = Backbone::build(tiny_config(3));
    const fs::path d = fresh_dir("backbone");
    save_backbone(bb, d);
    const Backbone back = load_backbone(d);
    CHECK(back.fingerprint() == bb.fingerprint());
    const auto pa = bb.parameters(), pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second->values() == pb[i].second->values());
    fs::remove_all(d);
}

TEST_CASE("experts, routers, indexes and merged deltas round-trip", "[bundle]") {
    const Backbone bb = Backbone::build(tiny_config());
    const LoraExpert a = random_expert(bb, 1, "a"), b = random_expert(bb, 2, "b");
    const fs::path root = fresh_dir("artifacts");

    save_expert(a, bb.fingerprint(), root / "expert");
    const LoraExpert ea = load_expert(root / "expert", bb);
    CHECK(ea.expert_id == "a");
    CHECK(ea.meta.steps == 12);
    for (std::size_t i = 0; i < a.sites.size(); ++i) {
        CHECK(ea.sites[i].A.values() == a.sites[i].A.values());
        CHECK(ea.sites[i].B.values() == a.sites[i].B.values());
        CHECK(ea.sites[i].v.values() == a.sites[i].v.values());
    }

    const Router r = build_phatgoose_router(bb, {&a, &b}, 2);
    save_router(r, root / "router");
    const Router rr = load_router(root / "router", bb);
    CHECK(rr.expert_ids == r.expert_ids);
    CHECK(rr.k == 2);
    for (std::size_t s = 0; s < r.sites.size(); ++s) CHECK(rr.sites[s].gates.values() == r.sites[s].gates.values());

    EmbeddingIndex idx;
    idx.expert_ids = {"a", "b"};
    idx.backbone_fingerprint = bb.fingerprint();
    Rng rng(4);
    idx.embeddings = random_tensor({5, 8}, rng);
    idx.owner = {0, 1, 1, 0, 1};
    save_index(idx, root / "index");
    const EmbeddingIndex ri = load_index(root / "index", bb);
    CHECK(ri.owner == idx.owner);
    CHECK(ri.embeddings.values() == idx.embeddings.values());

    const MergedExpert m = merge_experts({&a, &b});
    save_merged(m, bb.fingerprint(), root / "merged");
    const MergedExpert rm = load_merged(root / "merged", bb);
    for (std::size_t s = 0; s < m.site_ids.size(); ++s) CHECK(rm.deltas[s].values() == m.deltas[s].values());
    fs::remove_all(root);
}

TEST_CASE("artifacts refuse a different backbone", "[bundle][errors]") {
    const Backbone bb = Backbone::build(tiny_config(1));
    const Backbone other = Backbone::build(tiny_config(2));
    const LoraExpert a = random_expert(bb, 1, "a");
    const fs::path d = fresh_dir("fingerprint");
    save_expert(a, bb.fingerprint(), d / "expert");
    CHECK_THROWS_AS(load_expert(d / "expert", other), FingerprintError);
    save_router(build_phatgoose_router(bb, {&a}, 1), d / "router");
    CHECK_THROWS_AS(load_router(d / "router", other), FingerprintError);
    fs::remove_all(d);
}
