#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "p2i/attack.hpp"
#include "p2i/benchkit.hpp"
#include "p2i/losses.hpp"
#include "p2i/target_gateway.hpp"

namespace p2i {

struct MetricsRow {
    int identity = 0;
    bool correct = false;
    double knn = 0.0;
    double feat = 0.0;
    double lpips_proxy = 0.0;
};

struct MetricsReport {
    double attack_acc = 0.0;
    double knn_dist = 0.0;
    double feat_dist = 0.0;
    double lpips_proxy = 0.0;
    std::vector<MetricsRow> rows;
};

inline double euclidean(const Tensor& a, const Tensor& b) {
    return std::sqrt(squared_l2_diff(a, b));
}

// Fraction of reconstructions the evaluation classifier assigns to their
// target identity. Each call is one evaluation-phase forward pass.
inline double attack_accuracy(const std::vector<AttackResult>& results,
                              ClassifierHandle& eval_classifier, QueryLedger& ledger) {
    require(!results.empty(), "EmptyResults", "no attack results to evaluate");
    std::size_t correct = 0;
    for (const auto& r : results) {
        ledger.charge(Phase::Evaluation, 1);
        if (eval_classifier.predict_class(r.image) == r.identity.index) ++correct;
    }
    return double(correct) / double(results.size());
}

using FeatureSets = std::map<int, std::vector<Tensor>>; // identity -> private features

// Mean over results of the distance to the nearest private feature of the
// target identity.
inline double knn_dist(const std::vector<AttackResult>& results,
                       const std::vector<Tensor>& recon_features, const FeatureSets& private_feats) {
    require(!results.empty(), "EmptyResults", "no attack results");
    require(results.size() == recon_features.size(), "ShapeMismatch",
            "one feature per result required");
    double sum = 0.0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        auto it = private_feats.find(results[i].identity.index);
        require(it != private_feats.end() && !it->second.empty(), "MissingIdentityFeatures",
                "no private features for identity " + std::to_string(results[i].identity.index));
        double best = euclidean(recon_features[i], it->second.front());
        for (const Tensor& f : it->second) best = std::min(best, euclidean(recon_features[i], f));
        sum += best;
    }
    return sum / double(results.size());
}

// Mean distance to the per-identity private feature centroid.
inline double feat_dist(const std::vector<AttackResult>& results,
                        const std::vector<Tensor>& recon_features,
                        const std::map<int, Tensor>& centroids) {
    require(!results.empty(), "EmptyResults", "no attack results");
    require(results.size() == recon_features.size(), "ShapeMismatch",
            "one feature per result required");
    double sum = 0.0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        auto it = centroids.find(results[i].identity.index);
        require(it != centroids.end(), "MissingIdentityFeatures",
                "no centroid for identity " + std::to_string(results[i].identity.index));
        sum += euclidean(recon_features[i], it->second);
    }
    return sum / double(results.size());
}

// Desk-scale perceptual metric: mean perceptual_dist against one reference
// image per identity. Labeled a proxy in every output.
inline double lpips_proxy(const std::vector<AttackResult>& results,
                          const std::map<int, ImageTensor>& references,
                          const PerceptualExtractor& F) {
    require(!results.empty(), "EmptyResults", "no attack results");
    double sum = 0.0;
    for (const auto& r : results) {
        auto it = references.find(r.identity.index);
        require(it != references.end(), "MissingReference",
                "no reference image for identity " + std::to_string(r.identity.index));
        sum += perceptual_dist(F, r.image, it->second);
    }
    return sum / double(results.size());
}

struct InterpolationPoint {
    double target_value = 0.0;
    double dist_w = 0.0;
    int predicted_id = -1;
};

struct InterpolationTrace {
    std::vector<InterpolationPoint> points; // target_value strictly increasing
    double normalization = 0.0;             // raw distance at the first step
};

// Interpolates the target dimension of p0 from S_c(p0) to 0.95 using the
// proportional redistribution rule, encodes each step and records the latent
// distance to the ground-truth w_id, normalized to the first step.
inline InterpolationTrace interpolation_trace(const PredictionVector& p0, IdentityId c, int steps,
                                              PAEState& state, const BlobGenerator& gen,
                                              const LatentCode& w_id,
                                              ClassifierHandle* eval_classifier = nullptr,
                                              QueryLedger* ledger = nullptr,
                                              double log_epsilon = 1e-8) {
    require(steps >= 2, "StepsTooFew", "need at least 2 interpolation steps");
    validate_prediction(p0);
    double s0 = p0.values[(std::size_t)c.index];
    require(s0 < 0.95, "TargetAlreadySaturated", "S_c(p0) >= 0.95");

    InterpolationTrace trace;
    for (int k = 0; k < steps; ++k) {
        double v = s0 + (0.95 - s0) * double(k) / double(steps - 1);
        PredictionVector pv = enhance_prediction(p0, c, v - s0);
        auto [fe, w] = encode(state, log_prepare(pv, log_epsilon));
        double raw = euclidean(w.values, w_id.values);
        if (k == 0) trace.normalization = raw;
        InterpolationPoint pt;
        pt.target_value = v;
        pt.dist_w = trace.normalization > 0.0 ? raw / trace.normalization : 0.0;
        if (eval_classifier) {
            ImageTensor img = generate(gen, w);
            if (ledger) ledger->charge(Phase::Evaluation, 1);
            pt.predicted_id = eval_classifier->predict_class(img);
        }
        trace.points.push_back(pt);
    }
    return trace;
}

struct QueryReportRow {
    std::string phase;
    std::uint64_t count = 0;
    std::uint64_t cumulative = 0;
};

struct QueryReport {
    std::vector<QueryReportRow> rows;
    std::uint64_t total = 0;       // all phases, including evaluation
    std::uint64_t target_cost = 0; // attack cost: selection + training + attack
    bool attack_phase_clean = true;
};

inline QueryReport query_report(const QueryLedger& ledger) {
    QueryReport r;
    std::uint64_t cum = 0;
    for (Phase p : {Phase::Selection, Phase::Training, Phase::Attack, Phase::Evaluation}) {
        std::uint64_t c = ledger.count(p);
        cum += c;
        r.rows.push_back({phase_name(p), c, cum});
    }
    r.total = cum;
    r.target_cost = ledger.target_cost();
    r.attack_phase_clean = ledger.count(Phase::Attack) == 0;
    return r;
}

// Spearman rank correlation (average ranks on ties).
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    require(xs.size() == ys.size() && xs.size() >= 2, "StepsTooFew",
            "spearman needs >= 2 paired samples");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> order(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        std::size_t i = 0;
        while (i < order.size()) {
            std::size_t j = i;
            while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
            double avg = 0.5 * double(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> rx = ranks(xs), ry = ranks(ys);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= double(rx.size());
    my /= double(ry.size());
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    require(sxx > 0 && syy > 0, "StepsTooFew", "spearman undefined for constant input");
    return sxy / std::sqrt(sxx * syy);
}

} // namespace p2i
