#pragma once

#include <chrono>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2i/encoder.hpp"
#include "p2i/losses.hpp"
#include "p2i/selection.hpp"
#include "p2i/target_gateway.hpp"

namespace p2i {

// --- float32 parameter blob + JSON manifest checkpoints ---

inline std::uint64_t hash_bytes(const std::vector<char>& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::vector<char> params_to_blob(const std::vector<ad::Param*>& params) {
    std::vector<char> blob;
    for (const ad::Param* p : params)
        for (double v : p->value.vec()) {
            float f = static_cast<float>(v);
            const char* b = reinterpret_cast<const char*>(&f);
            blob.insert(blob.end(), b, b + sizeof(float));
        }
    return blob;
}

inline std::uint64_t params_hash(const std::vector<ad::Param*>& params) {
    return hash_bytes(params_to_blob(params));
}

inline void blob_to_params(const std::vector<char>& blob, std::vector<ad::Param*>& params) {
    std::size_t need = 0;
    for (const ad::Param* p : params) need += p->value.size() * sizeof(float);
    require(blob.size() == need, "ManifestMismatch",
            "parameter blob has " + std::to_string(blob.size()) + " bytes, expected " +
                std::to_string(need));
    std::size_t off = 0;
    for (ad::Param* p : params)
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            float f;
            std::memcpy(&f, blob.data() + off, sizeof(float));
            off += sizeof(float);
            p->value[i] = static_cast<double>(f);
        }
}

inline void write_file_bytes(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "IoError", "cannot open " + path + " for writing");
    out.write(bytes.data(), (std::streamsize)bytes.size());
    require(out.good(), "IoError", "short write to " + path);
}

inline std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    require(in.good(), "IoError", "cannot open " + path);
    std::streamsize n = in.tellg();
    in.seekg(0);
    std::vector<char> bytes((std::size_t)n);
    in.read(bytes.data(), n);
    require(in.good(), "IoError", "short read from " + path);
    return bytes;
}

// Saves <base>.bin (float32 blob) and <base>.json (manifest).
inline void save_checkpoint(PAEState& state, const std::string& base) {
    auto params = state.params();
    std::vector<char> blob = params_to_blob(params);
    write_file_bytes(base + ".bin", blob);
    nlohmann::json manifest{{"kind", "pae-encoder"},
                            {"spec", state.spec()},
                            {"step", state.step()},
                            {"seed", state.seed()},
                            {"blob_hash", hash_bytes(blob)}};
    std::ofstream out(base + ".json");
    require(out.good(), "IoError", "cannot open " + base + ".json");
    out << manifest.dump(2) << "\n";
}

inline PAEState load_checkpoint(const std::string& base,
                                const EncoderSpec* expected_spec = nullptr) {
    std::ifstream in(base + ".json");
    require(in.good(), "IoError", "missing checkpoint manifest " + base + ".json");
    nlohmann::json manifest = nlohmann::json::parse(in, nullptr, true);
    require(manifest.value("kind", "") == std::string("pae-encoder"), "ManifestMismatch",
            "not an encoder checkpoint");
    EncoderSpec spec = manifest.at("spec").get<EncoderSpec>();
    if (expected_spec)
        require(spec == *expected_spec, "ManifestMismatch",
                "checkpoint encoder spec differs from the expected spec");
    PAEState state(spec, manifest.value("seed", 0ULL));
    std::vector<char> blob = read_file_bytes(base + ".bin");
    require(hash_bytes(blob) == manifest.value("blob_hash", 0ULL), "IoError",
            "checkpoint blob hash mismatch (corrupted file?)");
    auto params = state.params();
    blob_to_params(blob, params);
    for (std::uint64_t i = manifest.value("step", 0ULL); i > 0; --i) state.bump_step();
    return state;
}

// --- encoder training ---

struct TrainReport {
    std::vector<LossBreakdown> epoch_means;
    double wall_seconds = 0.0;
    std::uint64_t final_param_hash = 0;
};

using ImageLookup = std::function<ImageTensor(const std::string&)>;

inline EncoderSpec encoder_spec_from(const RunConfig& cfg) {
    EncoderSpec s;
    s.input_dim = cfg.num_classes;
    s.image_h = cfg.image_h;
    s.image_w = cfg.image_w;
    s.image_ch = cfg.image_ch;
    s.latent_layers = cfg.latent_layers;
    s.latent_width = cfg.latent_width;
    return s;
}

// Optimizes the encoder on the selected (image, prediction) pairs with the
// composite objective. The generator and all extractors stay frozen; the
// target model is never queried here.
inline std::pair<PAEState, TrainReport> train_encoder_with_spec(
    const RunConfig& cfg, const EncoderSpec& spec, const SelectedTrainingSet& data,
    const BlobGenerator& gen, FeatureExtractors& extractors, const ImageLookup& image_by_ref,
    const std::string& optimizer = "adaptive_momentum", double log_epsilon = 1e-8) {
    cfg.validate();
    require(data.total() > 0, "EmptyTrainingSet", "no selected records to train on");

    struct Pair {
        std::vector<double> p_log;
        ImageTensor image;
    };
    std::vector<Pair> pairs;
    for (const auto& list : data.per_identity)
        for (const auto& rec : list)
            pairs.push_back({log_prepare(rec.prediction, log_epsilon), image_by_ref(rec.image_ref)});

    PAEState state(spec, cfg.seed);
    auto params = state.params();
    LossWeights weights{cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4};

    nn::AdaptiveMomentum adaptive(cfg.learning_rate, 0.95, 0.999);
    nn::SgdMomentum sgd(cfg.learning_rate, 0.9);
    require(optimizer == "adaptive_momentum" || optimizer == "sgd_momentum", "InvalidConfig",
            "unknown optimizer variant " + optimizer);

    RandomSource shuffle_rng = RandomSource(cfg.seed).substream("trainer-shuffle");
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainReport report;
    auto t0 = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        LossBreakdown mean;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t end = std::min(order.size(), start + (std::size_t)cfg.batch_size);
            ad::Tape t;
            ad::Tape::Handle batch_total = -1;
            for (std::size_t k = start; k < end; ++k) {
                const Pair& pr = pairs[order[k]];
                auto enc = state.encode_on(
                    t, t.constant(Tensor({pr.p_log.size()}, pr.p_log)));
                ad::Tape::Handle recon = gen.render_on(t, enc.latent);
                ad::Tape::Handle x = t.constant(pr.image);
                LossHandles lh =
                    build_total_loss_on(t, weights, extractors, recon, x, enc.feature);
                batch_total = (batch_total < 0) ? lh.total : t.add(batch_total, lh.total);
                mean.mse += t.value(lh.mse)[0];
                if (lh.lpips >= 0) mean.lpips += t.value(lh.lpips)[0];
                if (lh.id >= 0) mean.id += t.value(lh.id)[0];
                if (lh.parse >= 0) mean.parse += t.value(lh.parse)[0];
                mean.align_reg += t.value(lh.align)[0];
            }
            batch_total = t.scale(batch_total, 1.0 / double(end - start));
            t.backward(batch_total);
            if (optimizer == "adaptive_momentum")
                adaptive.step(params);
            else
                sgd.step(params);
            for (ad::Param* p : params) quantize_to_f32(p->value);
            state.bump_step();
        }
        double inv = 1.0 / double(pairs.size());
        LossBreakdown b = combine_losses(weights, mean.mse * inv, mean.lpips * inv,
                                         mean.id * inv, mean.parse * inv, mean.align_reg * inv);
        report.epoch_means.push_back(b);
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.final_param_hash = params_hash(params);
    return {std::move(state), std::move(report)};
}

inline std::pair<PAEState, TrainReport> train_encoder(
    const RunConfig& cfg, const SelectedTrainingSet& data, const BlobGenerator& gen,
    FeatureExtractors& extractors, const ImageLookup& image_by_ref,
    const std::string& optimizer = "adaptive_momentum", double log_epsilon = 1e-8) {
    return train_encoder_with_spec(cfg, encoder_spec_from(cfg), data, gen, extractors,
                                   image_by_ref, optimizer, log_epsilon);
}

} // namespace p2i
