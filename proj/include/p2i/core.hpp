#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2i/error.hpp"
#include "p2i/rng.hpp"
#include "p2i/tensor.hpp"

namespace p2i {

// Length-C non-negative confidence vector summing to 1. The attack's only
// information channel.
struct PredictionVector {
    std::vector<double> values;

    std::size_t num_classes() const { return values.size(); }
    double max_confidence() const {
        double m = values[0];
        for (double v : values) m = std::max(m, v);
        return m;
    }
};

// L x D point in the generator's extended latent space.
struct LatentCode {
    Tensor values; // shape {L, D}

    std::size_t layers() const { return values.dim(0); }
    std::size_t width() const { return values.dim(1); }
};

// H x W x Ch image with entries in [-1, 1]; stored channel-first {Ch,H,W}.
using ImageTensor = Tensor;

// Image-shaped intermediate feature of the alignment encoder, consumed by the
// alignment regularizer.
struct EncoderFeature {
    Tensor values; // {Ch,H,W}
};

struct IdentityId {
    int index = 0;
};

inline constexpr double kIngestSumTolerance = 1e-6;   // external float32 producers
inline constexpr double kInternalSumTolerance = 1e-9; // values this artifact emits

inline const PredictionVector& validate_prediction(const PredictionVector& p,
                                                   std::size_t expected_classes = 0,
                                                   double tolerance = kIngestSumTolerance) {
    if (expected_classes != 0 && p.values.size() != expected_classes)
        fail("WrongLength", "expected " + std::to_string(expected_classes) + " classes, got " +
                                std::to_string(p.values.size()));
    require(p.values.size() >= 2, "WrongLength", "prediction needs at least 2 classes");
    double sum = 0.0;
    for (double v : p.values) {
        if (!(v >= 0.0)) fail("NegativeEntry", "prediction entry " + std::to_string(v) + " < 0");
        sum += v;
    }
    if (std::abs(sum - 1.0) > tolerance)
        fail("SumNotOne", "prediction sums to " + std::to_string(sum));
    return p;
}

// Run configuration shared by the whole pipeline. Serializes to JSON; every
// CLI run writes the fully resolved form next to its outputs.
struct RunConfig {
    int num_classes = 16;
    int image_h = 32;
    int image_w = 32;
    int image_ch = 1;
    int latent_layers = 6;
    int latent_width = 32;
    int top_n = 8;
    double enhancement_m = 0.035;
    double lambda1 = 0.2;
    double lambda2 = 0.1;
    double lambda3 = 0.1;
    double lambda4 = 1.0;
    int epochs = 30;
    int batch_size = 4;
    double learning_rate = 1e-4;
    std::uint64_t seed = 0;

    void validate() const {
        require(num_classes >= 2, "InvalidConfig", "num_classes >= 2 required");
        require(image_h >= 1 && image_w >= 1 && image_ch >= 1, "InvalidConfig",
                "image dims must be >= 1");
        require(latent_layers >= 1 && latent_width >= 1, "InvalidConfig",
                "latent dims must be >= 1");
        require(top_n >= 1, "InvalidConfig", "top_n >= 1 required");
        require(enhancement_m >= 0.0 && enhancement_m < 1.0, "InvalidConfig", "m in [0,1)");
        require(epochs >= 0, "InvalidConfig", "epochs >= 0 required");
        require(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0 && lambda4 >= 0, "InvalidConfig",
                "loss weights must be non-negative");
        require(batch_size >= 1, "InvalidConfig", "batch_size >= 1 required");
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"num_classes", c.num_classes},
                       {"image_h", c.image_h},
                       {"image_w", c.image_w},
                       {"image_ch", c.image_ch},
                       {"latent_layers", c.latent_layers},
                       {"latent_width", c.latent_width},
                       {"top_n", c.top_n},
                       {"enhancement_m", c.enhancement_m},
                       {"lambda1", c.lambda1},
                       {"lambda2", c.lambda2},
                       {"lambda3", c.lambda3},
                       {"lambda4", c.lambda4},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig d;
    c.num_classes = j.value("num_classes", d.num_classes);
    c.image_h = j.value("image_h", d.image_h);
    c.image_w = j.value("image_w", d.image_w);
    c.image_ch = j.value("image_ch", d.image_ch);
    c.latent_layers = j.value("latent_layers", d.latent_layers);
    c.latent_width = j.value("latent_width", d.latent_width);
    c.top_n = j.value("top_n", d.top_n);
    c.enhancement_m = j.value("enhancement_m", d.enhancement_m);
    c.lambda1 = j.value("lambda1", d.lambda1);
    c.lambda2 = j.value("lambda2", d.lambda2);
    c.lambda3 = j.value("lambda3", d.lambda3);
    c.lambda4 = j.value("lambda4", d.lambda4);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.seed = j.value("seed", d.seed);
}

} // namespace p2i
