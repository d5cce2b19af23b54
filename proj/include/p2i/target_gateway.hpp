#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2i/core.hpp"
#include "p2i/error.hpp"

namespace p2i {

enum class Phase { Selection = 0, Training = 1, Attack = 2, Evaluation = 3 };

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::Selection: return "selection";
        case Phase::Training: return "training";
        case Phase::Attack: return "attack";
        case Phase::Evaluation: return "evaluation";
    }
    return "?";
}

// Monotone per-phase counter of single-image forward passes.
class QueryLedger {
public:
    QueryLedger() = default;
    QueryLedger(const QueryLedger& o) { *this = o; }
    QueryLedger& operator=(const QueryLedger& o) {
        for (int i = 0; i < 4; ++i) counts_[i].store(o.counts_[i].load());
        return *this;
    }

    void charge(Phase p, std::uint64_t n) { counts_[static_cast<int>(p)] += n; }

    std::uint64_t count(Phase p) const { return counts_[static_cast<int>(p)].load(); }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (const auto& c : counts_) t += c.load();
        return t;
    }

    // Target-model cost excludes the evaluation phase: the evaluation
    // classifier is the attacker's own model.
    std::uint64_t target_cost() const {
        return count(Phase::Selection) + count(Phase::Training) + count(Phase::Attack);
    }

    nlohmann::json to_json() const {
        return {{"selection", count(Phase::Selection)},
                {"training", count(Phase::Training)},
                {"attack", count(Phase::Attack)},
                {"evaluation", count(Phase::Evaluation)}};
    }

    static QueryLedger from_json(const nlohmann::json& j) {
        QueryLedger l;
        l.charge(Phase::Selection, j.value("selection", 0ULL));
        l.charge(Phase::Training, j.value("training", 0ULL));
        l.charge(Phase::Attack, j.value("attack", 0ULL));
        l.charge(Phase::Evaluation, j.value("evaluation", 0ULL));
        return l;
    }

private:
    std::array<std::atomic<std::uint64_t>, 4> counts_{};
};

// The only doorway to the target classifier. The raw callable is private;
// everything outside this header goes through predict_metered.
class TargetModelHandle {
public:
    using BatchFn = std::function<std::vector<PredictionVector>(const std::vector<ImageTensor>&)>;

    TargetModelHandle() = default;
    TargetModelHandle(BatchFn fn, std::size_t num_classes)
        : fn_(std::move(fn)), num_classes_(num_classes) {}

    std::size_t num_classes() const { return num_classes_; }

    friend std::vector<PredictionVector> predict_metered(const TargetModelHandle&,
                                                         const std::vector<ImageTensor>&, Phase,
                                                         QueryLedger&);

private:
    BatchFn fn_;
    std::size_t num_classes_ = 0;
};

inline std::vector<PredictionVector> predict_metered(const TargetModelHandle& handle,
                                                     const std::vector<ImageTensor>& batch,
                                                     Phase phase, QueryLedger& ledger) {
    require(!batch.empty(), "EmptyBatch", "predict_metered needs a non-empty batch");
    std::vector<PredictionVector> out = handle.fn_(batch);
    ledger.charge(phase, batch.size());
    if (out.size() != batch.size())
        fail("InvalidModelOutput", "model returned " + std::to_string(out.size()) +
                                       " rows for " + std::to_string(batch.size()) + " images");
    for (const auto& p : out) {
        try {
            validate_prediction(p, handle.num_classes());
        } catch (const Error& e) {
            fail("InvalidModelOutput", std::string("model output row invalid: ") + e.what());
        }
    }
    return out;
}

// Elementwise log(p_i + eps); the encoder consumes this, never raw p.
// No renormalization.
inline std::vector<double> log_prepare(const PredictionVector& p, double epsilon = 1e-8) {
    require(epsilon > 0.0, "NonPositiveEpsilon", "epsilon must be > 0");
    std::vector<double> out(p.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(p.values[i] + epsilon);
    return out;
}

} // namespace p2i
