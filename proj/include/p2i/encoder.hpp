#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "p2i/autodiff.hpp"
#include "p2i/benchkit.hpp"
#include "p2i/core.hpp"
#include "p2i/error.hpp"
#include "p2i/nn.hpp"

namespace p2i {

// Architecture of the Prediction Alignment Encoder: linear stem, deconv
// stages up to image size (producing the intermediate feature f_E), a conv
// backbone tapped after every block, and L parallel heads onto the latent
// rows.
struct EncoderSpec {
    int input_dim = 16; // C
    int image_h = 32;
    int image_w = 32;
    int image_ch = 1;
    int stem_channels = 32;
    int deconv_stages = 3;
    std::vector<int> block_widths = {16, 32, 64, 128};
    int latent_layers = 6; // L
    int latent_width = 32; // D

    int flat_feature_width() const {
        return std::accumulate(block_widths.begin(), block_widths.end(), 0);
    }

    void validate() const {
        require(input_dim >= 2, "InvalidConfig", "encoder input_dim >= 2");
        require(deconv_stages >= 1, "InvalidConfig", "need at least one deconv stage");
        int f = 1 << deconv_stages;
        require(image_h % f == 0 && image_w % f == 0, "InvalidConfig",
                "image dims must be divisible by 2^deconv_stages");
        require(!block_widths.empty(), "InvalidConfig", "backbone needs blocks");
        require(latent_layers >= 1 && latent_width >= 1, "InvalidConfig", "latent dims");
        require(stem_channels >= 1 && image_ch >= 1, "InvalidConfig", "channel counts");
    }

    bool operator==(const EncoderSpec&) const = default;

    // Full-scale configuration: 18x512 latent, 8,640-wide multi-scale feature.
    static EncoderSpec paper_scale() {
        EncoderSpec s;
        s.input_dim = 1000;
        s.image_h = s.image_w = 64;
        s.image_ch = 3;
        s.stem_channels = 64;
        s.deconv_stages = 3;
        s.block_widths = {576, 1152, 2304, 4608};
        s.latent_layers = 18;
        s.latent_width = 512;
        return s;
    }
};

inline void to_json(nlohmann::json& j, const EncoderSpec& s) {
    j = nlohmann::json{{"input_dim", s.input_dim},       {"image_h", s.image_h},
                       {"image_w", s.image_w},           {"image_ch", s.image_ch},
                       {"stem_channels", s.stem_channels},
                       {"deconv_stages", s.deconv_stages},
                       {"block_widths", s.block_widths},
                       {"latent_layers", s.latent_layers},
                       {"latent_width", s.latent_width}};
}

inline void from_json(const nlohmann::json& j, EncoderSpec& s) {
    EncoderSpec d;
    s.input_dim = j.value("input_dim", d.input_dim);
    s.image_h = j.value("image_h", d.image_h);
    s.image_w = j.value("image_w", d.image_w);
    s.image_ch = j.value("image_ch", d.image_ch);
    s.stem_channels = j.value("stem_channels", d.stem_channels);
    s.deconv_stages = j.value("deconv_stages", d.deconv_stages);
    s.block_widths = j.value("block_widths", d.block_widths);
    s.latent_layers = j.value("latent_layers", d.latent_layers);
    s.latent_width = j.value("latent_width", d.latent_width);
}

// All encoder parameters plus training bookkeeping. Parameters are kept
// float32-exact so checkpoints round-trip bit-identically.
class PAEState {
public:
    PAEState() = default;

    PAEState(const EncoderSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
        spec.validate();
        RandomSource rng = RandomSource(seed).substream("encoder-init");
        int h0 = spec.image_h >> spec.deconv_stages;
        int w0 = spec.image_w >> spec.deconv_stages;
        stem_ = nn::Linear((std::size_t)(spec.stem_channels * h0 * w0),
                           (std::size_t)spec.input_dim, rng);
        int ch = spec.stem_channels;
        for (int s = 0; s < spec.deconv_stages; ++s) {
            int out_ch = std::max(4, ch / 2);
            deconvs_.emplace_back((std::size_t)ch, (std::size_t)out_ch, 4, 2, 1, rng);
            ch = out_ch;
        }
        to_image_ = nn::Conv2d((std::size_t)spec.image_ch, (std::size_t)ch, 3, 1, 1, rng);
        // the backbone sees f_E plus two fixed coordinate channels, so the
        // pooled taps can carry spatial information
        int in_ch = spec.image_ch + 2;
        for (int w : spec.block_widths) {
            blocks_.emplace_back((std::size_t)w, (std::size_t)in_ch, 3, 2, 1, rng);
            in_ch = w;
        }
        for (int l = 0; l < spec.latent_layers; ++l)
            heads_.emplace_back((std::size_t)spec.latent_width,
                                (std::size_t)spec.flat_feature_width(), rng);
        quantize_params();
    }

    const EncoderSpec& spec() const { return spec_; }
    std::uint64_t seed() const { return seed_; }
    std::uint64_t step() const { return step_; }
    void bump_step() { ++step_; }

    struct ForwardOut {
        ad::Tape::Handle feature; // f_E, image-shaped
        ad::Tape::Handle latent;  // {L,D}
    };

    // Differentiable encoder pass on an existing tape.
    ForwardOut encode_on(ad::Tape& t, ad::Tape::Handle p_log) {
        require(t.value(p_log).size() == (std::size_t)spec_.input_dim, "ShapeMismatch",
                "encoder input length != C");
        int h0 = spec_.image_h >> spec_.deconv_stages;
        int w0 = spec_.image_w >> spec_.deconv_stages;
        ad::Tape::Handle x = stem_.fwd(t, p_log);
        x = t.reshape(x, {(std::size_t)spec_.stem_channels, (std::size_t)h0, (std::size_t)w0});
        for (auto& dc : deconvs_) x = t.relu(dc.fwd(t, x));
        ad::Tape::Handle f_e = t.tanh_act(to_image_.fwd(t, x));
        std::vector<ad::Tape::Handle> taps;
        ad::Tape::Handle y = t.reshape(
            t.concat({f_e, t.constant(coord_maps())}),
            {(std::size_t)(spec_.image_ch + 2), (std::size_t)spec_.image_h,
             (std::size_t)spec_.image_w});
        for (auto& blk : blocks_) {
            y = t.relu(blk.fwd(t, y));
            taps.push_back(t.global_avg_pool(y));
        }
        ad::Tape::Handle flat = t.concat(taps);
        std::vector<ad::Tape::Handle> rows;
        // bounded head outputs: the generator is designed for latents with
        // entries of order one, and an unbounded head lets training park
        // poorly-controlled dimensions at huge values where the render
        // saturates and gradients vanish
        for (auto& head : heads_)
            rows.push_back(t.scale(t.tanh_act(t.scale(head.fwd(t, flat), 0.25)), 4.0));
        ad::Tape::Handle latent = t.reshape(
            t.concat(rows), {(std::size_t)spec_.latent_layers, (std::size_t)spec_.latent_width});
        return {f_e, latent};
    }

    std::vector<ad::Param*> params() {
        std::vector<ad::Param*> ps{&stem_.W, &stem_.b};
        for (auto& d : deconvs_) {
            ps.push_back(&d.K);
            ps.push_back(&d.b);
        }
        ps.push_back(&to_image_.K);
        ps.push_back(&to_image_.b);
        for (auto& b : blocks_) {
            ps.push_back(&b.K);
            ps.push_back(&b.b);
        }
        for (auto& h : heads_) {
            ps.push_back(&h.W);
            ps.push_back(&h.b);
        }
        return ps;
    }

    void quantize_params() {
        for (ad::Param* p : params()) quantize_to_f32(p->value);
    }

private:
    // fixed x/y coordinate channels in [-1, 1], shape {2, H, W}
    Tensor coord_maps() const {
        std::size_t h = (std::size_t)spec_.image_h, w = (std::size_t)spec_.image_w;
        Tensor c({2, h, w});
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                c[y * w + x] = w > 1 ? 2.0 * double(x) / double(w - 1) - 1.0 : 0.0;
                c[h * w + y * w + x] = h > 1 ? 2.0 * double(y) / double(h - 1) - 1.0 : 0.0;
            }
        return c;
    }

    EncoderSpec spec_;
    std::uint64_t seed_ = 0;
    std::uint64_t step_ = 0;
    nn::Linear stem_;
    std::vector<nn::ConvTranspose2d> deconvs_;
    nn::Conv2d to_image_;
    std::vector<nn::Conv2d> blocks_;
    std::vector<nn::Linear> heads_;
};

// Inference-only encode: prediction (already log-prepared) to feature+latent.
inline std::pair<EncoderFeature, LatentCode> encode(PAEState& state,
                                                    const std::vector<double>& p_log) {
    ad::Tape t;
    auto out = state.encode_on(t, t.constant(Tensor({p_log.size()}, p_log)));
    return {EncoderFeature{t.value(out.feature)}, LatentCode{t.value(out.latent)}};
}

// Frozen-generator render of a latent; delegates to the generator.
inline ImageTensor generate(const BlobGenerator& gen, const LatentCode& w) {
    return render(gen, w);
}

// Full differentiable pass: prediction -> f_E -> latent -> image. Gradients
// reach PAEState parameters only; the generator enters as constants.
inline std::tuple<ImageTensor, EncoderFeature, LatentCode> forward(
    PAEState& state, const BlobGenerator& gen, const std::vector<double>& p_log) {
    ad::Tape t;
    auto enc = state.encode_on(t, t.constant(Tensor({p_log.size()}, p_log)));
    ad::Tape::Handle img = gen.render_on(t, enc.latent);
    return {t.value(img), EncoderFeature{t.value(enc.feature)}, LatentCode{t.value(enc.latent)}};
}

} // namespace p2i
