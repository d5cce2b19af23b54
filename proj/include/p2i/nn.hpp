#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "p2i/autodiff.hpp"
#include "p2i/rng.hpp"
#include "p2i/tensor.hpp"

namespace p2i::nn {

using ad::Param;
using ad::Tape;

inline Tensor random_tensor(std::vector<std::size_t> shape, double stddev, RandomSource& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal();
    return t;
}

struct Linear {
    Param W, b;

    Linear() = default;
    Linear(std::size_t out_dim, std::size_t in_dim, RandomSource& rng)
        : W(random_tensor({out_dim, in_dim}, 1.0 / std::sqrt(double(in_dim)), rng)),
          b(random_tensor({out_dim}, 0.01, rng)) {}

    Tape::Handle fwd(Tape& t, Tape::Handle x) { return t.linear(t.param(W), x, t.param(b)); }
    Tape::Handle fwd_const(Tape& t, Tape::Handle x) const {
        return t.linear(t.constant(W.value), x, t.constant(b.value));
    }
};

struct Conv2d {
    Param K, b;
    std::size_t stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(std::size_t out_ch, std::size_t in_ch, std::size_t ksize, std::size_t stride_,
           std::size_t pad_, RandomSource& rng)
        : K(random_tensor({out_ch, in_ch, ksize, ksize},
                          1.0 / std::sqrt(double(in_ch * ksize * ksize)), rng)),
          b(random_tensor({out_ch}, 0.01, rng)), stride(stride_), pad(pad_) {}

    Tape::Handle fwd(Tape& t, Tape::Handle x) {
        return t.conv2d(x, t.param(K), t.param(b), stride, pad);
    }
    Tape::Handle fwd_const(Tape& t, Tape::Handle x) const {
        return t.conv2d(x, t.constant(K.value), t.constant(b.value), stride, pad);
    }
};

struct ConvTranspose2d {
    Param K, b;
    std::size_t stride = 2, pad = 1;

    ConvTranspose2d() = default;
    ConvTranspose2d(std::size_t in_ch, std::size_t out_ch, std::size_t ksize, std::size_t stride_,
                    std::size_t pad_, RandomSource& rng)
        : K(random_tensor({in_ch, out_ch, ksize, ksize},
                          1.0 / std::sqrt(double(in_ch * ksize * ksize)), rng)),
          b(random_tensor({out_ch}, 0.01, rng)), stride(stride_), pad(pad_) {}

    Tape::Handle fwd(Tape& t, Tape::Handle x) {
        return t.conv_transpose2d(x, t.param(K), t.param(b), stride, pad);
    }
};

// Adaptive momentum optimizer. Beta defaults follow the training recipe
// (beta1 = 0.95, beta2 = 0.999).
class AdaptiveMomentum {
public:
    AdaptiveMomentum(double lr, double beta1 = 0.95, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Param*>& params) {
        ++t_;
        if (m_.empty()) {
            for (Param* p : params) {
                m_.push_back(Tensor::zeros(p->value.shape()));
                v_.push_back(Tensor::zeros(p->value.shape()));
            }
        }
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t k = 0; k < params.size(); ++k) {
            Param& p = *params[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                double g = p.grad[i];
                m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
                v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
                double mhat = m_[k][i] / bc1;
                double vhat = v_[k][i] / bc2;
                p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
            p.zero_grad();
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<Tensor> m_, v_;
};

class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum = 0.9, double weight_decay = 0.0)
        : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

    void step(std::vector<Param*>& params) {
        if (vel_.empty())
            for (Param* p : params) vel_.push_back(Tensor::zeros(p->value.shape()));
        for (std::size_t k = 0; k < params.size(); ++k) {
            Param& p = *params[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                double g = p.grad[i] + weight_decay_ * p.value[i];
                vel_[k][i] = momentum_ * vel_[k][i] + g;
                p.value[i] -= lr_ * vel_[k][i];
            }
            p.zero_grad();
        }
    }

private:
    double lr_, momentum_, weight_decay_;
    std::vector<Tensor> vel_;
};

} // namespace p2i::nn
