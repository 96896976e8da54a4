#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cdnpg/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

using namespace cdnpg;

namespace {

struct TempFile {
    std::filesystem::path path;
    explicit TempFile(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("cdnpg_test_" + tag + ".ckpt");
    }
    ~TempFile() {
        std::error_code ec;
        std::filesystem::remove(path, ec);
    }
    std::string str() const { return path.string(); }
};

ModelConfig small_cfg() {
    ModelConfig c;
    c.vocab_size = 11;
    c.hidden = 8;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 0;  // resolved to 4*hidden at use sites, stored as written
    c.max_len = 12;
    c.dropout = 0.1;
    c.mask_mode = MaskMode::RPlusS;
    c.epsilon = 3;
    c.renormalize = true;
    c.ga_enabled = true;
    return c;
}

}  // namespace

TEST_CASE("checkpoint roundtrip restores a float model exactly") {
    TempFile f("roundtrip_f32");
    Model<float> m(small_cfg(), 17);
    save_checkpoint(f.str(), m);

    auto r = load_checkpoint<float>(f.str());
    const ModelConfig& c = r.config();
    CHECK(c.vocab_size == 11);
    CHECK(c.hidden == 8);
    CHECK(c.layers == 2);
    CHECK(c.heads == 2);
    CHECK(c.ffn_dim == 0);
    CHECK(c.max_len == 12);
    CHECK(c.dropout == doctest::Approx(0.1));
    CHECK(c.mask_mode == MaskMode::RPlusS);
    CHECK(c.epsilon == 3);
    CHECK(c.renormalize);
    CHECK(c.ga_enabled);

    auto pa = m.named_parameters();
    auto pb = r.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(pa[i].second.shape() == pb[i].second.shape());
        CHECK(pa[i].second.data() == pb[i].second.data());  // bit-for-bit
    }

    auto la = m.forward({4, 5, 6}, {1, 4});
    auto lb = r.forward({4, 5, 6}, {1, 4});
    CHECK(la.data() == lb.data());
}

TEST_CASE("double weights roundtrip through 32-bit storage") {
    TempFile f("roundtrip_f64");
    Model<double> m(small_cfg(), 23);
    save_checkpoint(f.str(), m);
    auto r = load_checkpoint<double>(f.str());
    auto pa = m.named_parameters();
    auto pb = r.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto& a = pa[i].second.data();
        const auto& b = pb[i].second.data();
        REQUIRE(a.size() == b.size());
        for (std::size_t j = 0; j < a.size(); ++j)
            CHECK(b[j] == static_cast<double>(static_cast<float>(a[j])));
    }
}

TEST_CASE("checkpoint configuration can be read without loading weights") {
    TempFile f("config_only");
    Model<float> m(small_cfg(), 3);
    save_checkpoint(f.str(), m);
    ModelConfig c = load_checkpoint_config(f.str());
    CHECK(c.vocab_size == 11);
    CHECK(c.mask_mode == MaskMode::RPlusS);
    CHECK(c.epsilon == 3);
    CHECK(c.renormalize);
    CHECK(c.ffn_dim == 0);
}

TEST_CASE("checkpoint loading rejects damaged files") {
    SUBCASE("missing file") {
        CHECK_THROWS_WITH_AS(load_checkpoint<float>("/nonexistent/dir/x.ckpt"),
                             doctest::Contains("open"), std::runtime_error);
    }
    SUBCASE("wrong magic") {
        TempFile f("bad_magic");
        Model<float> m(small_cfg(), 3);
        save_checkpoint(f.str(), m);
        {
            std::fstream fs(f.path, std::ios::in | std::ios::out | std::ios::binary);
            fs.put('X');
        }
        CHECK_THROWS_WITH_AS(load_checkpoint<float>(f.str()), doctest::Contains("magic"),
                             std::runtime_error);
    }
    SUBCASE("truncated data") {
        TempFile f("truncated");
        Model<float> m(small_cfg(), 3);
        save_checkpoint(f.str(), m);
        const auto full = std::filesystem::file_size(f.path);
        std::filesystem::resize_file(f.path, full - 64);
        CHECK_THROWS_AS(load_checkpoint<float>(f.str()), std::runtime_error);
    }
    SUBCASE("not a checkpoint at all") {
        TempFile f("garbage");
        std::ofstream(f.path) << "definitely not binary weights";
        CHECK_THROWS_AS(load_checkpoint<float>(f.str()), std::runtime_error);
    }
}
