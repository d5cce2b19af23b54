#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "p2i/autodiff.hpp"
#include "p2i/core.hpp"
#include "p2i/error.hpp"
#include "p2i/nn.hpp"
#include "p2i/rng.hpp"

namespace p2i {

// Frozen differentiable image synthesizer: a fixed random affine map from the
// latent code to Gaussian blob parameters, splatted onto the canvas. Each of
// the L latent rows drives a disjoint slice of blob parameters, so layers
// control separate factors of the image.
class BlobGenerator {
public:
    BlobGenerator() = default;

    BlobGenerator(std::size_t layers, std::size_t width, std::size_t image_h, std::size_t image_w,
                  std::size_t blob_count, std::uint64_t seed, double sigma_min = 0.9)
        : L_(layers), D_(width), H_(image_h), W_(image_w), B_(blob_count), sigma_min_(sigma_min),
          seed_(seed) {
        RandomSource rng = RandomSource(seed).substream("blob-generator");
        double sd = 1.0 / std::sqrt(static_cast<double>(D_));
        map_ = Tensor({4 * B_, D_});
        for (std::size_t i = 0; i < map_.size(); ++i) map_[i] = sd * rng.normal();
        bias_ = Tensor({4 * B_});
        for (std::size_t i = 0; i < bias_.size(); ++i) bias_[i] = 0.5 * rng.normal();
        quantize_to_f32(map_);
        quantize_to_f32(bias_);
        // each blob owns a home cell on a fixed grid; without anchoring,
        // permuting blobs would leave the image unchanged and the render
        // would have many latent preimages
        std::size_t gx = (std::size_t)std::ceil(std::sqrt((double)B_));
        std::size_t gy = (B_ + gx - 1) / gx;
        home_x_ = Tensor({B_});
        home_y_ = Tensor({B_});
        for (std::size_t b = 0; b < B_; ++b) {
            home_x_[b] = (double(b % gx) + 0.5) / double(gx) * double(W_ - 1);
            home_y_[b] = (double(b / gx) + 0.5) / double(gy) * double(H_ - 1);
        }
        quantize_to_f32(home_x_);
        quantize_to_f32(home_y_);
    }

    std::size_t layers() const { return L_; }
    std::size_t width() const { return D_; }
    std::size_t image_h() const { return H_; }
    std::size_t image_w() const { return W_; }
    std::size_t blob_count() const { return B_; }
    std::uint64_t seed() const { return seed_; }
    double sigma_min() const { return sigma_min_; }
    const Tensor& affine_map() const { return map_; }
    const Tensor& affine_bias() const { return bias_; }

    // Latent row driving flat blob-parameter index j (contiguous slices).
    std::size_t layer_of(std::size_t j) const { return j * L_ / (4 * B_); }

    std::uint64_t param_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](const Tensor& t) {
            for (double v : t.vec()) {
                std::uint64_t bits;
                static_assert(sizeof(bits) == sizeof(v));
                std::memcpy(&bits, &v, sizeof(bits));
                for (int k = 0; k < 8; ++k) {
                    h ^= (bits >> (8 * k)) & 0xff;
                    h *= 0x100000001b3ULL;
                }
            }
        };
        mix(map_);
        mix(bias_);
        return h;
    }

    // Differentiable render on an existing tape; w_handle holds an {L,D} node.
    ad::Tape::Handle render_on(ad::Tape& t, ad::Tape::Handle w_handle) const {
        const Tensor& w = t.value(w_handle);
        require(w.shape() == std::vector<std::size_t>{L_, D_}, "ShapeMismatch",
                "latent shape does not match generator");
        ad::Tape::Handle flat = t.reshape(w_handle, {L_ * D_});
        // raw blob parameters, layer by layer (contiguous j-slices)
        std::vector<ad::Tape::Handle> pieces;
        std::size_t j = 0;
        while (j < 4 * B_) {
            std::size_t l = layer_of(j);
            std::size_t end = j;
            while (end < 4 * B_ && layer_of(end) == l) ++end;
            std::size_t len = end - j;
            Tensor sub_map({len, D_});
            Tensor sub_bias({len});
            for (std::size_t r = 0; r < len; ++r) {
                sub_bias[r] = bias_[j + r];
                for (std::size_t d = 0; d < D_; ++d) sub_map.at(r, d) = map_.at(j + r, d);
            }
            ad::Tape::Handle row = t.slice(flat, l * D_, D_);
            pieces.push_back(
                t.linear(t.constant(std::move(sub_map)), row, t.constant(std::move(sub_bias))));
            j = end;
        }
        ad::Tape::Handle raw = t.concat(pieces);
        // gentle squashes (pre-scaled by 0.5) keep derivatives alive over
        // the whole typical parameter range; hard saturation would make the
        // affected latent dimensions unrecoverable from the image
        ad::Tape::Handle amp = t.sigmoid(t.scale(t.slice(raw, 0, B_), 0.5));
        // bounded center wiggle keeps every blob on canvas, and the bounded
        // width range prevents amplitude/width trade-offs between neighbors;
        // both are needed for the image to pin down the latent
        ad::Tape::Handle cx = t.add(t.scale(t.tanh_act(t.scale(t.slice(raw, B_, B_), 0.5)), 3.0),
                                    t.constant(home_x_));
        ad::Tape::Handle cy =
            t.add(t.scale(t.tanh_act(t.scale(t.slice(raw, 2 * B_, B_), 0.5)), 3.0),
                  t.constant(home_y_));
        ad::Tape::Handle sig = t.add_const(
            t.scale(t.sigmoid(t.scale(t.slice(raw, 3 * B_, B_), 0.5)), 0.6), sigma_min_);
        ad::Tape::Handle img = t.gauss_splat(amp, cx, cy, sig, H_, W_);
        return t.clamp(img, -1.0, 1.0);
    }

private:
    std::size_t L_ = 0, D_ = 0, H_ = 0, W_ = 0, B_ = 0;
    double sigma_min_ = 1.5;
    std::uint64_t seed_ = 0;
    Tensor map_;  // {4B, D}
    Tensor bias_; // {4B}
    Tensor home_x_, home_y_; // {B} fixed grid anchors
};

inline ImageTensor render(const BlobGenerator& gen, const LatentCode& w) {
    ad::Tape t;
    ad::Tape::Handle h = gen.render_on(t, t.constant(w.values));
    return t.value(h);
}

struct SyntheticIdentity {
    IdentityId id;
    LatentCode w_id;
    double noise_scale = 0.15;
};

struct BenchmarkSpec {
    int n_private_ids = 16;
    int n_public_ids = 64;
    int images_per_id = 10;
    int resolution = 32;
    int blob_count = 12;
    int latent_layers = 6;
    int latent_width = 32;
    double noise_scale = 0.15;
    // Public identities are task-related: each centroid mixes a private
    // centroid (weight alpha drawn from [affinity_lo, affinity_hi]) with a
    // fresh random direction, so public images resemble private identities
    // to varying degrees while the identity sets stay disjoint.
    double affinity_lo = 0.3;
    double affinity_hi = 0.85;
    std::uint64_t seed = 0;

    void validate() const {
        require(n_private_ids >= 2 && images_per_id >= 2, "SpecTooSmall",
                "need at least 2 private identities and 2 images per identity");
        require(n_public_ids >= 1, "SpecTooSmall", "need at least 1 public identity");
        require(resolution >= 4 && blob_count >= 1, "SpecTooSmall", "degenerate image spec");
    }
};

struct LabeledImage {
    ImageTensor image;
    int identity = 0; // index within its own split's identity set
    LatentCode latent;
    std::string ref; // stable dataset reference, also the selection tie-break key
};

using Dataset = std::vector<LabeledImage>;

// Snap pixels to the 8-bit grid PNG persistence uses, so in-memory and
// on-disk pipelines see identical values.
inline void quantize_image_8bit(ImageTensor& img) {
    for (std::size_t i = 0; i < img.size(); ++i) {
        double v01 = (img[i] + 1.0) * 0.5;
        double q = std::round(v01 * 255.0) / 255.0;
        img[i] = -1.0 + 2.0 * q;
    }
}

struct Benchmark {
    BlobGenerator gen;
    std::vector<SyntheticIdentity> private_ids;
    std::vector<SyntheticIdentity> public_ids;
    Dataset d_priv;
    Dataset d_pub;
};

inline Benchmark build_benchmark(const BenchmarkSpec& spec) {
    spec.validate();
    Benchmark b;
    b.gen = BlobGenerator(spec.latent_layers, spec.latent_width, spec.resolution, spec.resolution,
                          spec.blob_count, spec.seed);
    RandomSource root(spec.seed);

    auto make_ids = [&](const char* stream, int count, int id_offset) {
        RandomSource rng = root.substream(stream);
        std::vector<SyntheticIdentity> ids;
        for (int i = 0; i < count; ++i) {
            LatentCode w;
            w.values = Tensor({(std::size_t)spec.latent_layers, (std::size_t)spec.latent_width});
            for (std::size_t k = 0; k < w.values.size(); ++k) w.values[k] = rng.normal();
            quantize_to_f32(w.values);
            ids.push_back({IdentityId{id_offset + i}, std::move(w), spec.noise_scale});
        }
        return ids;
    };
    // Disjoint identity index ranges: private [0, P), public [P, P+Q).
    b.private_ids = make_ids("identities/private", spec.n_private_ids, 0);
    {
        RandomSource rng = root.substream("identities/public");
        for (int i = 0; i < spec.n_public_ids; ++i) {
            // round-robin anchors so every private identity has public relatives,
            // with stratified affinities so each one gets both close and
            // distant relatives (even coverage of the confidence range)
            std::size_t j = (std::size_t)(i % spec.n_private_ids);
            int stratum = i / spec.n_private_ids;
            int n_strata = std::max(1, spec.n_public_ids / spec.n_private_ids);
            double span = (spec.affinity_hi - spec.affinity_lo) / double(n_strata);
            double lo = spec.affinity_lo + span * double(stratum % n_strata);
            double alpha = rng.uniform(lo, lo + span);
            double beta = std::sqrt(std::max(0.0, 1.0 - alpha * alpha));
            const Tensor& anchor = b.private_ids[j].w_id.values;
            LatentCode w;
            w.values = Tensor(anchor.shape());
            for (std::size_t k = 0; k < w.values.size(); ++k)
                w.values[k] = alpha * anchor[k] + beta * rng.normal();
            quantize_to_f32(w.values);
            b.public_ids.push_back(
                {IdentityId{spec.n_private_ids + i}, std::move(w), spec.noise_scale});
        }
    }

    auto make_images = [&](const char* stream, const std::vector<SyntheticIdentity>& ids,
                           const char* prefix) {
        RandomSource rng = root.substream(stream);
        Dataset ds;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (int k = 0; k < spec.images_per_id; ++k) {
                LatentCode w;
                w.values = ids[i].w_id.values;
                for (std::size_t q = 0; q < w.values.size(); ++q)
                    w.values[q] += spec.noise_scale * rng.normal();
                quantize_to_f32(w.values);
                ImageTensor img = render(b.gen, w);
                quantize_image_8bit(img);
                char ref[64];
                std::snprintf(ref, sizeof(ref), "%s/%03zu_%02d", prefix, i, k);
                ds.push_back({std::move(img), (int)i, std::move(w), ref});
            }
        }
        return ds;
    };
    b.d_priv = make_images("images/private", b.private_ids, "priv");
    b.d_pub = make_images("images/public", b.public_ids, "pub");
    return b;
}

// Extra attacker-side data: images sampled from random latents through the
// frozen generator (the synthesized-data branch of training-set building).
inline Dataset sample_synthetic(const BlobGenerator& gen, int count, std::uint64_t seed) {
    RandomSource rng = RandomSource(seed).substream("images/synthetic");
    Dataset ds;
    for (int k = 0; k < count; ++k) {
        LatentCode w;
        w.values = Tensor({gen.layers(), gen.width()});
        for (std::size_t q = 0; q < w.values.size(); ++q) w.values[q] = rng.normal();
        quantize_to_f32(w.values);
        ImageTensor img = render(gen, w);
        quantize_image_8bit(img);
        char ref[64];
        std::snprintf(ref, sizeof(ref), "syn/%05d", k);
        ds.push_back({std::move(img), -1, std::move(w), ref});
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Small convolutional classifier with 5 inspectable feature taps:
// the 4 pooled conv-block outputs plus the penultimate feature layer.

struct ClassifierSpec {
    int num_classes = 16;
    int in_ch = 1;
    std::vector<int> block_widths = {8, 16, 32, 64};
    int feat_dim = 32;
    int image_hw = 32;
};

class ClassifierHandle {
public:
    ClassifierHandle() = default;

    ClassifierHandle(const ClassifierSpec& spec, std::uint64_t seed) : spec_(spec) {
        RandomSource rng = RandomSource(seed).substream("classifier-init");
        int in_ch = spec.in_ch;
        for (int w : spec.block_widths) {
            blocks_.emplace_back((std::size_t)w, (std::size_t)in_ch, 3, 2, 1, rng);
            in_ch = w;
        }
        fc_feat_ = nn::Linear((std::size_t)spec.feat_dim, (std::size_t)spec.block_widths.back(),
                              rng);
        fc_out_ = nn::Linear((std::size_t)spec.num_classes, (std::size_t)spec.feat_dim, rng);
    }

    const ClassifierSpec& spec() const { return spec_; }

    struct TapsOut {
        std::vector<ad::Tape::Handle> taps; // 5 entries
        ad::Tape::Handle features;          // penultimate layer
        ad::Tape::Handle logits;
    };

    // Differentiable forward on an existing tape. The frozen variant binds
    // parameters as constants (used as a loss-side extractor).
    TapsOut forward_on(ad::Tape& t, ad::Tape::Handle image) { return fwd_impl(t, image, false); }
    TapsOut forward_frozen_on(ad::Tape& t, ad::Tape::Handle image) {
        return fwd_impl(t, image, true);
    }

    std::vector<double> logits(const ImageTensor& img) {
        ad::Tape t;
        TapsOut o = forward_on(t, t.constant(img));
        return t.value(o.logits).vec();
    }

    // Softmax prediction, rounded to float32 the way an external model would
    // emit it.
    PredictionVector predict(const ImageTensor& img) {
        std::vector<double> z = logits(img);
        double zmax = *std::max_element(z.begin(), z.end());
        double denom = 0.0;
        for (double& v : z) {
            v = std::exp(v - zmax);
            denom += v;
        }
        PredictionVector p;
        p.values.resize(z.size());
        for (std::size_t i = 0; i < z.size(); ++i)
            p.values[i] = static_cast<double>(static_cast<float>(z[i] / denom));
        return p;
    }

    int predict_class(const ImageTensor& img) {
        std::vector<double> z = logits(img);
        return int(std::max_element(z.begin(), z.end()) - z.begin());
    }

    Tensor features(const ImageTensor& img) {
        ad::Tape t;
        TapsOut o = forward_on(t, t.constant(img));
        return t.value(o.features);
    }

    std::vector<Tensor> taps(const ImageTensor& img) {
        ad::Tape t;
        TapsOut o = forward_on(t, t.constant(img));
        std::vector<Tensor> r;
        for (auto h : o.taps) r.push_back(t.value(h));
        return r;
    }

    std::vector<ad::Param*> params() {
        std::vector<ad::Param*> ps;
        for (auto& b : blocks_) {
            ps.push_back(&b.K);
            ps.push_back(&b.b);
        }
        ps.push_back(&fc_feat_.W);
        ps.push_back(&fc_feat_.b);
        ps.push_back(&fc_out_.W);
        ps.push_back(&fc_out_.b);
        return ps;
    }

    void quantize_params() {
        for (ad::Param* p : params()) quantize_to_f32(p->value);
    }

private:
    TapsOut fwd_impl(ad::Tape& t, ad::Tape::Handle image, bool frozen) {
        TapsOut out;
        ad::Tape::Handle x = image;
        for (auto& blk : blocks_) {
            // taps pool the pre-activation maps: a relu'd map can be all
            // zero for off-distribution inputs, which the cosine guard of
            // the identity loss must never see
            ad::Tape::Handle pre = frozen ? blk.fwd_const(t, x) : blk.fwd(t, x);
            out.taps.push_back(t.global_avg_pool(pre));
            x = t.relu(pre);
        }
        ad::Tape::Handle pooled = t.global_avg_pool(x);
        ad::Tape::Handle pre_feat = frozen ? fc_feat_.fwd_const(t, pooled) : fc_feat_.fwd(t, pooled);
        out.taps.push_back(pre_feat);
        out.features = t.relu(pre_feat);
        out.logits = frozen ? fc_out_.fwd_const(t, out.features) : fc_out_.fwd(t, out.features);
        return out;
    }

    ClassifierSpec spec_;
    std::vector<nn::Conv2d> blocks_;
    nn::Linear fc_feat_, fc_out_;
};

struct ClassifierTrainOptions {
    int epochs = 30;
    int batch_size = 16;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

inline ClassifierHandle train_classifier(const Dataset& data, const ClassifierSpec& spec,
                                         std::uint64_t seed,
                                         ClassifierTrainOptions opt = {}) {
    bool multi_class = false;
    require(!data.empty(), "SingleClassData", "empty training set");
    for (const auto& s : data)
        if (s.identity != data.front().identity) multi_class = true;
    require(multi_class, "SingleClassData", "training data contains a single class");

    ClassifierHandle clf(spec, seed);
    auto params = clf.params();
    nn::SgdMomentum sgd(opt.learning_rate, opt.momentum, opt.weight_decay);
    RandomSource shuffle_rng = RandomSource(seed).substream("classifier-shuffle");

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
            std::size_t end = std::min(order.size(), start + opt.batch_size);
            ad::Tape t;
            ad::Tape::Handle loss = -1;
            for (std::size_t k = start; k < end; ++k) {
                const LabeledImage& s = data[order[k]];
                auto o = clf.forward_on(t, t.constant(s.image));
                ad::Tape::Handle li = t.softmax_xent(o.logits, (std::size_t)s.identity);
                loss = (loss < 0) ? li : t.add(loss, li);
            }
            loss = t.scale(loss, 1.0 / double(end - start));
            t.backward(loss);
            sgd.step(params);
        }
    }
    clf.quantize_params();
    return clf;
}

inline double classifier_accuracy(ClassifierHandle& clf, const Dataset& data) {
    require(!data.empty(), "EmptyResults", "accuracy over empty dataset");
    std::size_t correct = 0;
    for (const auto& s : data)
        if (clf.predict_class(s.image) == s.identity) ++correct;
    return double(correct) / double(data.size());
}

} // namespace p2i
