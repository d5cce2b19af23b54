#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "p2i/benchkit.hpp"
#include "p2i/core.hpp"
#include "p2i/error.hpp"
#include "p2i/target_gateway.hpp"

namespace p2i {

struct SelectionRecord {
    std::string image_ref;
    PredictionVector prediction;
    IdentityId predicted_identity; // the identity this record was selected under
    double target_score = 0.0;     // prediction.values[predicted_identity]
};

// Per-identity lists of selected records, each sorted by descending score.
struct SelectedTrainingSet {
    std::size_t num_classes = 0;
    std::vector<std::vector<SelectionRecord>> per_identity;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& l : per_identity) n += l.size();
        return n;
    }
};

struct ScoredImage {
    std::string image_ref;
    PredictionVector prediction;
};

// One metered sweep of the whole dataset through the target.
inline std::vector<ScoredImage> score_public(const TargetModelHandle& target, const Dataset& data,
                                             QueryLedger& ledger, std::size_t batch_size = 32) {
    require(!data.empty(), "EmptyBatch", "cannot score an empty dataset");
    std::vector<ScoredImage> out;
    out.reserve(data.size());
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::size_t end = std::min(data.size(), start + batch_size);
        std::vector<ImageTensor> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(data[i].image);
        std::vector<PredictionVector> preds =
            predict_metered(target, batch, Phase::Selection, ledger);
        for (std::size_t i = start; i < end; ++i)
            out.push_back({data[i].ref, std::move(preds[i - start])});
    }
    return out;
}

// For each identity c, rank all scored images by S_c descending (ties broken
// by ascending image_ref) and keep the first min(n, available). An image may
// be selected under several identities.
inline SelectedTrainingSet select_top_n(const std::vector<ScoredImage>& scores, int n,
                                        std::size_t num_classes) {
    require(n >= 1, "InvalidConfig", "top_n must be >= 1");
    SelectedTrainingSet out;
    out.num_classes = num_classes;
    out.per_identity.resize(num_classes);
    std::vector<std::size_t> order(scores.size());
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            double sa = scores[a].prediction.values[c];
            double sb = scores[b].prediction.values[c];
            if (sa != sb) return sa > sb;
            return scores[a].image_ref < scores[b].image_ref;
        });
        std::size_t keep = std::min<std::size_t>((std::size_t)n, scores.size());
        for (std::size_t k = 0; k < keep; ++k) {
            const ScoredImage& s = scores[order[k]];
            out.per_identity[c].push_back(
                {s.image_ref, s.prediction, IdentityId{(int)c}, s.prediction.values[c]});
        }
    }
    return out;
}

// Alternative ranking (config flag, not the default): each image competes
// only under its argmax identity.
inline SelectedTrainingSet select_top_n_argmax(const std::vector<ScoredImage>& scores, int n,
                                               std::size_t num_classes) {
    require(n >= 1, "InvalidConfig", "top_n must be >= 1");
    SelectedTrainingSet out;
    out.num_classes = num_classes;
    out.per_identity.resize(num_classes);
    for (const auto& s : scores) {
        const auto& v = s.prediction.values;
        std::size_t c = std::max_element(v.begin(), v.end()) - v.begin();
        if (c < num_classes)
            out.per_identity[c].push_back({s.image_ref, s.prediction, IdentityId{(int)c}, v[c]});
    }
    for (auto& list : out.per_identity) {
        std::stable_sort(list.begin(), list.end(),
                         [](const SelectionRecord& a, const SelectionRecord& b) {
                             if (a.target_score != b.target_score)
                                 return a.target_score > b.target_score;
                             return a.image_ref < b.image_ref;
                         });
        if (list.size() > (std::size_t)n) list.resize((std::size_t)n);
    }
    return out;
}

inline SelectedTrainingSet merge_synthetic(const SelectedTrainingSet& pub,
                                           const SelectedTrainingSet& syn) {
    require(pub.num_classes == syn.num_classes, "ClassCountMismatch",
            "selected sets built with different class counts");
    SelectedTrainingSet out = pub;
    for (std::size_t c = 0; c < out.per_identity.size(); ++c)
        out.per_identity[c].insert(out.per_identity[c].end(), syn.per_identity[c].begin(),
                                   syn.per_identity[c].end());
    return out;
}

} // namespace p2i
