#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "p2i/encoder.hpp"
#include "p2i/trainer.hpp"

using namespace p2i;

namespace {

EncoderSpec small_spec() {
    EncoderSpec s;
    s.input_dim = 4;
    s.image_h = s.image_w = 8;
    s.image_ch = 1;
    s.stem_channels = 8;
    s.deconv_stages = 2;
    s.block_widths = {4, 8};
    s.latent_layers = 2;
    s.latent_width = 8;
    return s;
}

std::vector<double> some_input(int dim) {
    std::vector<double> p(dim);
    for (int i = 0; i < dim; ++i) p[i] = -2.0 + 0.3 * i;
    return p;
}

} // namespace

TEST_CASE("full-scale spec reproduces the published architecture figures") {
    EncoderSpec s = EncoderSpec::paper_scale();
    CHECK(s.latent_layers == 18);
    CHECK(s.latent_width == 512);
    CHECK(s.flat_feature_width() == 8640); // 576 + 1152 + 2304 + 4608
    CHECK_NOTHROW(s.validate());
}

TEST_CASE("spec validation rejects inconsistent dimensions") {
    EncoderSpec s = small_spec();
    CHECK_NOTHROW(s.validate());
    s.image_h = 10; // not divisible by 2^deconv_stages
    CHECK_THROWS_AS(s.validate(), Error);
    s = small_spec();
    s.input_dim = 1;
    CHECK_THROWS_AS(s.validate(), Error);
    s = small_spec();
    s.block_widths = {};
    CHECK_THROWS_AS(s.validate(), Error);
    s = small_spec();
    s.latent_layers = 0;
    CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("shape contract holds over a sweep of random small configs") {
    RandomSource rng(303);
    for (int trial = 0; trial < 20; ++trial) {
        EncoderSpec s;
        s.input_dim = 2 + (int)rng.below(8);
        s.deconv_stages = 1 + (int)rng.below(3);
        int base = 1 << s.deconv_stages;
        s.image_h = s.image_w = base * (int)(1 + rng.below(3));
        s.image_ch = 1;
        s.stem_channels = 4 + (int)rng.below(8);
        s.block_widths = {};
        for (std::size_t k = 0, nb = 1 + rng.below(3); k < nb; ++k)
            s.block_widths.push_back(2 + (int)rng.below(6));
        s.latent_layers = 1 + (int)rng.below(4);
        s.latent_width = 2 + (int)rng.below(12);

        PAEState state(s, 7 + trial);
        auto [fe, w] = encode(state, some_input(s.input_dim));
        CHECK(fe.values.shape() ==
              std::vector<std::size_t>{(std::size_t)s.image_ch, (std::size_t)s.image_h,
                                       (std::size_t)s.image_w});
        CHECK(w.values.shape() ==
              std::vector<std::size_t>{(std::size_t)s.latent_layers, (std::size_t)s.latent_width});
        CHECK(fe.values.all_finite());
        CHECK(w.values.all_finite());
    }
}

TEST_CASE("encode is pure and rejects wrong input lengths") {
    PAEState state(small_spec(), 5);
    auto [f1, w1] = encode(state, some_input(4));
    auto [f2, w2] = encode(state, some_input(4));
    CHECK(f1.values.vec() == f2.values.vec());
    CHECK(w1.values.vec() == w2.values.vec());
    CHECK_THROWS_AS(encode(state, some_input(5)), Error);
}

TEST_CASE("composition with the generator runs end to end and leaves it frozen") {
    EncoderSpec s = small_spec();
    PAEState state(s, 5);
    BlobGenerator gen(2, 8, 8, 8, 4, 11);
    std::uint64_t before = gen.param_hash();
    auto [img, fe, w] = forward(state, gen, some_input(4));
    CHECK(img.shape() == std::vector<std::size_t>{1, 8, 8});
    CHECK(img.all_finite());
    CHECK(gen.param_hash() == before);

    // forward() equals encode() + generate() composed
    auto [fe2, w2] = encode(state, some_input(4));
    CHECK(w.values.vec() == w2.values.vec());
    CHECK(img.vec() == generate(gen, w2).vec());
}

TEST_CASE("gradient of the rendered image reaches encoder head parameters") {
    EncoderSpec s = small_spec();
    PAEState state(s, 5);
    BlobGenerator gen(2, 8, 8, 8, 4, 11);
    std::vector<ad::Param*> params = state.params();
    ad::Param* head_bias = params.back(); // last head's bias
    const double h = 1e-4;

    for (ad::Param* p : params) p->zero_grad();
    ad::Tape t;
    auto enc = state.encode_on(t, t.constant(Tensor({4}, some_input(4))));
    ad::Tape::Handle img = gen.render_on(t, enc.latent);
    ad::Tape::Handle loss = t.mean_sq_diff(img, t.constant(Tensor({1, 8, 8})));
    t.backward(loss);

    auto eval_loss = [&]() {
        auto [i2, f2, w2] = forward(state, gen, some_input(4));
        return squared_l2_diff(i2, Tensor({1, 8, 8})) / double(i2.size());
    };
    int checked = 0;
    for (std::size_t i = 0; i < head_bias->value.size() && checked < 10; ++i, ++checked) {
        double keep = head_bias->value[i];
        head_bias->value[i] = keep + h;
        double fp = eval_loss();
        head_bias->value[i] = keep - h;
        double fm = eval_loss();
        head_bias->value[i] = keep;
        double num = (fp - fm) / (2.0 * h);
        double ana = head_bias->grad[i];
        double denom = std::max({1e-6, std::abs(num), std::abs(ana)});
        CHECK(std::abs(ana - num) / denom < 1e-3);
    }
    CHECK(checked == 8); // the head bias has latent_width entries
}

TEST_CASE("checkpoints round-trip bit-identically") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "p2i_encoder_ckpt";
    fs::create_directories(dir);
    std::string base = (dir / "ck").string();

    EncoderSpec s = small_spec();
    PAEState state(s, 99);
    state.bump_step();
    state.bump_step();
    save_checkpoint(state, base);
    PAEState back = load_checkpoint(base, &s);

    CHECK(back.step() == 2);
    CHECK(back.seed() == 99);
    CHECK(params_hash(back.params()) == params_hash(state.params()));
    auto [f1, w1] = encode(state, some_input(4));
    auto [f2, w2] = encode(back, some_input(4));
    CHECK(w1.values.vec() == w2.values.vec()); // bit-identical latents

    // wrong expected spec is refused
    EncoderSpec other = small_spec();
    other.latent_width = 4;
    try {
        load_checkpoint(base, &other);
        FAIL("expected ManifestMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == "ManifestMismatch");
    }

    // truncated blob is detected
    std::vector<char> blob = read_file_bytes(base + ".bin");
    blob.resize(blob.size() / 2);
    write_file_bytes(base + ".bin", blob);
    try {
        load_checkpoint(base, &s);
        FAIL("expected IoError");
    } catch (const Error& e) {
        CHECK(e.kind() == "IoError");
    }
    fs::remove_all(dir);
}
