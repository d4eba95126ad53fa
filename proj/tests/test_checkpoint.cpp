#include "geoformer/checkpoint.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cstring>

using namespace geoformer;
using geoformer::testing::read_text;
using geoformer::testing::TempDir;
using geoformer::testing::write_text;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.seed = 4;
    return c;
}

/// A model and optimizer a few steps into training, so the moments are
/// non-trivial.
struct Trained {
    GptModel<float> model{small_config()};
    AdamW<float> opt{model.params()};
    Rng rng{123};

    Trained() {
        TrainConfig tc;
        const std::vector<TokenId> ids{10, 11, 1, 3, 20, 21, 530, 2, 0};
        const std::vector<std::size_t> len{ids.size()};
        const auto targets = next_token_targets(ids, 1, ids.size(), len);
        for (int s = 0; s < 3; ++s) {
            ag::Tape<float> tape;
            model.zero_grad();
            auto loss = next_token_loss(&tape, model.forward(&tape, ids, 1, ids.size(), true, &rng), targets);
            tape.backward(loss);
            opt.step(model.params(), tc, 1e-2);
        }
    }
};

std::vector<float> logits_of(const GptModel<float>& m) {
    const std::vector<TokenId> ids{1, 2, 3, 4, 5, 6, 600, 700};
    const auto y = m.forward(nullptr, ids, 1, ids.size());
    return {y.data().begin(), y.data().end()};
}

} // namespace

TEST_CASE("save/load round trip is bit-exact") {
    TempDir dir("ckpt_roundtrip");
    Trained t;
    nlohmann::json extra = {{"note", "hello"}, {"losses", {1.5, 0.25}}};
    const auto ckpt = Checkpoint::capture(t.model, &t.opt, 3, &t.rng, extra);
    save_checkpoint(dir / "a.geof", ckpt);
    const auto back = load_checkpoint(dir / "a.geof");

    CHECK(back.model == ckpt.model);
    CHECK(back.step == 3);
    CHECK(back.optimizer_steps == 3);
    CHECK(back.extra == extra);
    CHECK(back.tensors == ckpt.tensors);
    CHECK(back.find("adam.m.wte") != nullptr);
    CHECK(back.find("missing") == nullptr);

    const auto restored = back.make_model();
    CHECK(logits_of(restored) == logits_of(t.model));

    AdamW<float> opt2;
    CHECK(back.restore_optimizer(restored, opt2));
    CHECK(opt2.steps_taken() == 3);
    CHECK(opt2.first_moments() == t.opt.first_moments());
    CHECK(opt2.second_moments() == t.opt.second_moments());

    auto rng2 = back.restore_rng();
    REQUIRE(rng2.has_value());
    CHECK(*rng2 == t.rng);
    CHECK(rng2->next_u64() == t.rng.next_u64());

    // saving the loaded checkpoint reproduces the same bytes
    save_checkpoint(dir / "b.geof", back);
    CHECK(read_text(dir / "a.geof") == read_text(dir / "b.geof"));
}

TEST_CASE("weights-only checkpoint") {
    TempDir dir("ckpt_weights");
    Trained t;
    save_checkpoint(dir / "w.geof", Checkpoint::capture(t.model, nullptr, 0, nullptr));
    const auto back = load_checkpoint(dir / "w.geof");
    AdamW<float> opt;
    CHECK_FALSE(back.restore_optimizer(back.make_model(), opt));
    CHECK_FALSE(back.restore_rng().has_value());
    CHECK(logits_of(back.make_model()) == logits_of(t.model));
}

TEST_CASE("restore into a mismatched model") {
    Trained t;
    const auto ckpt = Checkpoint::capture(t.model, nullptr, 0, nullptr);
    auto other = small_config();
    other.d_model = 32;
    GptModel<float> m(other);
    CHECK_THROWS_AS(ckpt.restore_weights(m), CheckpointError);
}

TEST_CASE("corruption is rejected") {
    TempDir dir("ckpt_corrupt");
    Trained t;
    save_checkpoint(dir / "c.geof", Checkpoint::capture(t.model, &t.opt, 3, &t.rng));
    const auto good = read_text(dir / "c.geof");

    SUBCASE("every sampled byte flip fails the checksum") {
        Rng rng(9);
        for (int i = 0; i < 50; ++i) {
            auto bad = good;
            // past magic and version so the checksum is what catches it
            const std::size_t pos = 8 + rng.below(bad.size() - 8);
            bad[pos] = static_cast<char>(bad[pos] ^ (1 << rng.below(8)));
            write_text(dir / "bad.geof", bad);
            CHECK_THROWS_AS(load_checkpoint(dir / "bad.geof"), CheckpointError);
        }
    }
    SUBCASE("truncation") {
        for (std::size_t keep : {std::size_t{0}, std::size_t{6}, good.size() / 2, good.size() - 1}) {
            write_text(dir / "short.geof", good.substr(0, keep));
            CHECK_THROWS_AS(load_checkpoint(dir / "short.geof"), CheckpointError);
        }
    }
    SUBCASE("bad magic") {
        auto bad = good;
        bad[0] = 'X';
        write_text(dir / "magic.geof", bad);
        CHECK_THROWS_AS(load_checkpoint(dir / "magic.geof"), CheckpointError);
    }
    SUBCASE("future version") {
        auto bad = good;
        const std::uint32_t v = kCheckpointVersion + 1;
        std::memcpy(bad.data() + 4, &v, 4);
        write_text(dir / "future.geof", bad);
        try {
            load_checkpoint(dir / "future.geof");
            FAIL("expected a version error");
        } catch (const CheckpointError& e) {
            CHECK(std::string(e.what()).find("version") != std::string::npos);
        }
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint(dir / "nope.geof"), CheckpointError);
    }
}

TEST_CASE("header layout") {
    TempDir dir("ckpt_layout");
    Trained t;
    save_checkpoint(dir / "l.geof", Checkpoint::capture(t.model, nullptr, 7, nullptr));
    const auto bytes = read_text(dir / "l.geof");
    CHECK(bytes.substr(0, 4) == "GEOF");
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    CHECK(version == kCheckpointVersion);
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + 8, 8);
    const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
    CHECK(header.at("model").at("d_model").get<int>() == 16);
}
