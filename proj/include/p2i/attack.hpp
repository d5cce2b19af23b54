#pragma once

#include <string>
#include <vector>

#include "p2i/encoder.hpp"
#include "p2i/selection.hpp"
#include "p2i/target_gateway.hpp"

namespace p2i {

enum class AttackScheme { AlignedEnsemble, PredictionEnsemble, OneHot };

inline AttackScheme parse_scheme(const std::string& s) {
    if (s == "aligned_ensemble") return AttackScheme::AlignedEnsemble;
    if (s == "prediction_ensemble") return AttackScheme::PredictionEnsemble;
    if (s == "one_hot") return AttackScheme::OneHot;
    fail("InvalidConfig", "unknown attack scheme " + s);
}

inline const char* scheme_name(AttackScheme s) {
    switch (s) {
        case AttackScheme::AlignedEnsemble: return "aligned_ensemble";
        case AttackScheme::PredictionEnsemble: return "prediction_ensemble";
        case AttackScheme::OneHot: return "one_hot";
    }
    return "?";
}

struct AttackConfig {
    double m = 0.035;
    AttackScheme scheme = AttackScheme::AlignedEnsemble;
    // Eq.-8 weights default to the pre-enhancement max confidences; the
    // post-enhancement alternative sits behind this flag.
    bool weights_after_enhancement = false;
    double log_epsilon = 1e-8;
};

struct Contributor {
    std::string image_ref;
    double weight = 0.0; // max-confidence ensemble weight
    double m_used = 0.0; // clamped when the requested m exceeded 1 - S_c
};

struct AttackResult {
    IdentityId identity;
    LatentCode ensembled_latent;
    ImageTensor image;
    std::vector<Contributor> contributors;
};

// Additive boost of the target entry with proportional redistribution of the
// remainder; the output sums to 1 and preserves non-target ratios.
inline PredictionVector enhance_prediction(const PredictionVector& p, IdentityId c, double m) {
    validate_prediction(p);
    double sc = p.values[(std::size_t)c.index];
    if (m == 0.0) return p;
    require(sc < 1.0, "DegenerateOneHot", "target entry already 1; cannot enhance");
    require(m <= 1.0 - sc, "EnhancementTooLarge",
            "m = " + std::to_string(m) + " exceeds 1 - S_c = " + std::to_string(1.0 - sc));
    PredictionVector out = p;
    double shrink = 1.0 - m / (1.0 - sc);
    for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] *= shrink;
    out.values[(std::size_t)c.index] = sc + m;
    return out;
}

// Confidence-weighted mean of latent codes: W_ens = sum(max(p_i) w_i) / sum(max(p_i)).
inline LatentCode aligned_ensemble(const std::vector<LatentCode>& ws,
                                   const std::vector<PredictionVector>& ps) {
    require(!ws.empty(), "EmptyEnsemble", "no latents to ensemble");
    require(ws.size() == ps.size(), "ShapeMismatch", "latent/prediction counts differ");
    double wsum = 0.0;
    LatentCode out;
    out.values = Tensor::zeros(ws[0].values.shape());
    for (std::size_t i = 0; i < ws.size(); ++i) {
        require(ws[i].values.same_shape(out.values), "ShapeMismatch", "latent shapes differ");
        double wi = ps[i].max_confidence();
        require(wi > 0.0, "EmptyEnsemble", "ensemble weight must be positive");
        wsum += wi;
        for (std::size_t k = 0; k < out.values.size(); ++k)
            out.values[k] += wi * ws[i].values[k];
    }
    for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] /= wsum;
    return out;
}

// Full attack for one identity. Zero target-model queries in every scheme:
// everything below runs on captured predictions and local models.
inline AttackResult attack_identity(IdentityId c, const SelectedTrainingSet& selected,
                                    PAEState& state, const BlobGenerator& gen,
                                    const AttackConfig& cfg) {
    require(c.index >= 0 && (std::size_t)c.index < selected.num_classes, "NoContributors",
            "identity out of range");
    AttackResult result;
    result.identity = c;

    if (cfg.scheme == AttackScheme::OneHot) {
        PredictionVector onehot;
        onehot.values.assign(selected.num_classes, 0.0);
        onehot.values[(std::size_t)c.index] = 1.0;
        auto [fe, w] = encode(state, log_prepare(onehot, cfg.log_epsilon));
        result.ensembled_latent = std::move(w);
        result.image = generate(gen, result.ensembled_latent);
        return result;
    }

    const auto& records = selected.per_identity[(std::size_t)c.index];
    require(!records.empty(), "NoContributors",
            "identity " + std::to_string(c.index) + " has no selected records");

    std::vector<PredictionVector> enhanced;
    for (const auto& rec : records) {
        double sc = rec.prediction.values[(std::size_t)c.index];
        double m_eff = std::min(cfg.m, 1.0 - sc); // clamp-and-record policy
        if (sc >= 1.0) m_eff = 0.0;
        enhanced.push_back(enhance_prediction(rec.prediction, c, m_eff));
        double weight = cfg.weights_after_enhancement ? enhanced.back().max_confidence()
                                                      : rec.prediction.max_confidence();
        result.contributors.push_back({rec.image_ref, weight, m_eff});
    }

    if (cfg.scheme == AttackScheme::AlignedEnsemble) {
        std::vector<LatentCode> ws;
        std::vector<PredictionVector> weight_src;
        for (std::size_t i = 0; i < records.size(); ++i) {
            auto [fe, w] = encode(state, log_prepare(enhanced[i], cfg.log_epsilon));
            ws.push_back(std::move(w));
            weight_src.push_back(cfg.weights_after_enhancement ? enhanced[i]
                                                               : records[i].prediction);
        }
        result.ensembled_latent = aligned_ensemble(ws, weight_src);
    } else { // PredictionEnsemble: average the enhanced vectors, encode once
        std::vector<double> avg(selected.num_classes, 0.0);
        double wsum = 0.0;
        for (std::size_t i = 0; i < enhanced.size(); ++i) {
            double wi = result.contributors[i].weight;
            wsum += wi;
            for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += wi * enhanced[i].values[k];
        }
        double total = 0.0;
        for (double& v : avg) {
            v /= wsum;
            total += v;
        }
        for (double& v : avg) v /= total; // renormalize to sum exactly 1
        PredictionVector pavg{std::move(avg)};
        auto [fe, w] = encode(state, log_prepare(pavg, cfg.log_epsilon));
        result.ensembled_latent = std::move(w);
    }

    result.image = generate(gen, result.ensembled_latent);
    return result;
}

} // namespace p2i
