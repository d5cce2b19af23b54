#pragma once

#include <cstdint>
#include <vector>

#include "p2i/autodiff.hpp"
#include "p2i/benchkit.hpp"
#include "p2i/core.hpp"
#include "p2i/error.hpp"

namespace p2i {

struct LossWeights {
    double lambda1 = 0.2; // perceptual
    double lambda2 = 0.1; // identity
    double lambda3 = 0.1; // parsing
    double lambda4 = 1.0; // alignment regularizer
};

// Frozen random conv stack used as the perceptual feature extractor at desk
// scale. Parameters are plain tensors and enter tapes as constants.
class PerceptualExtractor {
public:
    PerceptualExtractor() = default;

    PerceptualExtractor(int in_ch, std::uint64_t seed) {
        RandomSource rng = RandomSource(seed).substream("perceptual-extractor");
        int widths[3] = {8, 16, 32};
        int c = in_ch;
        for (int w : widths) {
            double sd = 1.0 / std::sqrt(double(c * 9));
            Tensor K({(std::size_t)w, (std::size_t)c, 3, 3});
            for (std::size_t i = 0; i < K.size(); ++i) K[i] = sd * rng.normal();
            Tensor b({(std::size_t)w});
            for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.01 * rng.normal();
            quantize_to_f32(K);
            quantize_to_f32(b);
            kernels_.push_back(std::move(K));
            biases_.push_back(std::move(b));
            c = w;
        }
    }

    bool valid() const { return !kernels_.empty(); }

    ad::Tape::Handle forward_on(ad::Tape& t, ad::Tape::Handle img) const {
        ad::Tape::Handle x = img;
        for (std::size_t i = 0; i < kernels_.size(); ++i)
            x = t.relu(t.conv2d(x, t.constant(kernels_[i]), t.constant(biases_[i]), 2, 1));
        return x;
    }

    Tensor features(const ImageTensor& img) const {
        ad::Tape t;
        return t.value(forward_on(t, t.constant(img)));
    }

private:
    std::vector<Tensor> kernels_;
    std::vector<Tensor> biases_;
};

// Pluggable frozen extractors for the composite objective. The parsing
// extractor is optional; when absent the parse term is identically zero.
struct FeatureExtractors {
    PerceptualExtractor F;
    ClassifierHandle* identity = nullptr; // 5 taps (evaluation classifier at desk scale)
    ClassifierHandle* parsing = nullptr;  // absent at desk scale
};

struct LossBreakdown {
    double mse = 0, lpips = 0, id = 0, parse = 0, align_reg = 0, recon = 0, total = 0;
};

// --- plain (non-tape) operations ---

inline double pixel_mse(const ImageTensor& a, const ImageTensor& b) {
    require(a.same_shape(b), "ShapeMismatch", "pixel_mse shapes differ");
    return squared_l2_diff(a, b) / double(a.size());
}

inline double perceptual_dist(const PerceptualExtractor& F, const ImageTensor& a,
                              const ImageTensor& b) {
    require(a.same_shape(b), "ShapeMismatch", "perceptual_dist shapes differ");
    Tensor fa = F.features(a);
    Tensor fb = F.features(b);
    return squared_l2_diff(fa, fb) / double(fa.size());
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "ShapeMismatch", "cosine shapes differ");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    require(na >= 1e-12 && nb >= 1e-12, "ZeroVectorAtTap", "cosine of (near-)zero vector");
    return dot / (na * nb);
}

// sum_{j=1..5} (1 - cos(taps_a[j], taps_b[j])); range [0, 10].
inline double multilayer_cosine_loss(const std::vector<Tensor>& taps_a,
                                     const std::vector<Tensor>& taps_b) {
    require(taps_a.size() == 5 && taps_b.size() == 5, "ShapeMismatch",
            "expected exactly 5 tap levels");
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += 1.0 - cosine_similarity(taps_a[j], taps_b[j]);
    return s;
}

inline double align_reg(const EncoderFeature& f_e, const ImageTensor& x) {
    require(f_e.values.same_shape(x), "ShapeMismatch", "align_reg shapes differ");
    return squared_l2_diff(f_e.values, x) / double(x.size());
}

inline LossBreakdown combine_losses(const LossWeights& w, double mse, double lpips, double id,
                                    double parse, double align) {
    LossBreakdown b;
    b.mse = mse;
    b.lpips = lpips;
    b.id = id;
    b.parse = parse;
    b.align_reg = align;
    b.recon = mse + w.lambda1 * lpips + w.lambda2 * id + w.lambda3 * parse;
    b.total = b.recon + w.lambda4 * align;
    return b;
}

inline LossBreakdown total_loss(const LossWeights& weights, FeatureExtractors& extractors,
                                const ImageTensor& recon_image, const ImageTensor& x,
                                const EncoderFeature& f_e) {
    double mse = pixel_mse(recon_image, x);
    double lpips = extractors.F.valid() ? perceptual_dist(extractors.F, recon_image, x) : 0.0;
    double id = 0.0;
    if (extractors.identity)
        id = multilayer_cosine_loss(extractors.identity->taps(recon_image),
                                    extractors.identity->taps(x));
    double parse = 0.0;
    if (extractors.parsing)
        parse = multilayer_cosine_loss(extractors.parsing->taps(recon_image),
                                       extractors.parsing->taps(x));
    return combine_losses(weights, mse, lpips, id, parse, align_reg(f_e, x));
}

// --- tape builders for training ---

struct LossHandles {
    ad::Tape::Handle mse = -1, lpips = -1, id = -1, parse = -1, align = -1, total = -1;
};

inline ad::Tape::Handle multilayer_cosine_on(ad::Tape& t,
                                             const std::vector<ad::Tape::Handle>& taps_a,
                                             const std::vector<ad::Tape::Handle>& taps_b) {
    require(taps_a.size() == taps_b.size() && !taps_a.empty(), "ShapeMismatch",
            "tap lists differ");
    ad::Tape::Handle sum = -1;
    for (std::size_t j = 0; j < taps_a.size(); ++j) {
        ad::Tape::Handle term = t.add_const(t.scale(t.cosine(taps_a[j], taps_b[j]), -1.0), 1.0);
        sum = (sum < 0) ? term : t.add(sum, term);
    }
    return sum;
}

// Builds the composite objective on the tape. `x` is a constant node of the
// real image; taps of frozen extractors are built with constant parameters.
inline LossHandles build_total_loss_on(ad::Tape& t, const LossWeights& w,
                                       FeatureExtractors& extractors, ad::Tape::Handle recon,
                                       ad::Tape::Handle x, ad::Tape::Handle f_e) {
    LossHandles h;
    h.mse = t.mean_sq_diff(recon, x);
    ad::Tape::Handle total = h.mse;
    if (extractors.F.valid()) {
        h.lpips = t.mean_sq_diff(extractors.F.forward_on(t, recon), extractors.F.forward_on(t, x));
        total = t.add(total, t.scale(h.lpips, w.lambda1));
    }
    if (extractors.identity) {
        auto ta = extractors.identity->forward_frozen_on(t, recon);
        auto tb = extractors.identity->forward_frozen_on(t, x);
        h.id = multilayer_cosine_on(t, ta.taps, tb.taps);
        total = t.add(total, t.scale(h.id, w.lambda2));
    }
    if (extractors.parsing) {
        auto ta = extractors.parsing->forward_frozen_on(t, recon);
        auto tb = extractors.parsing->forward_frozen_on(t, x);
        h.parse = multilayer_cosine_on(t, ta.taps, tb.taps);
        total = t.add(total, t.scale(h.parse, w.lambda3));
    }
    h.align = t.mean_sq_diff(f_e, x);
    h.total = t.add(total, t.scale(h.align, w.lambda4));
    return h;
}

} // namespace p2i
