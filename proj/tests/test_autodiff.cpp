#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "p2i/autodiff.hpp"
#include "p2i/rng.hpp"

using namespace p2i;
using Builder = std::function<ad::Tape::Handle(ad::Tape&, ad::Tape::Handle)>;

namespace {

double eval_at(const Builder& f, const Tensor& x) {
    ad::Tape t;
    return t.value(f(t, t.constant(x)))[0];
}

// Max relative error between the tape gradient and central finite differences
// over every input entry.
double max_rel_err(const Builder& f, const Tensor& x0, double h = 1e-5) {
    ad::Tape t;
    ad::Tape::Handle in = t.leaf(x0);
    ad::Tape::Handle out = f(t, in);
    t.backward(out);
    Tensor g = t.grad(in);
    double worst = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        Tensor xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        double num = (eval_at(f, xp) - eval_at(f, xm)) / (2.0 * h);
        double denom = std::max({1e-6, std::abs(num), std::abs(g[i])});
        worst = std::max(worst, std::abs(g[i] - num) / denom);
    }
    return worst;
}

Tensor random_tensor(std::vector<std::size_t> shape, RandomSource& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

} // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    RandomSource rng(11);
    Tensor x = random_tensor({12}, rng);
    Tensor other = random_tensor({12}, rng);
    Tensor target = random_tensor({12}, rng);

    auto reduce = [&](ad::Tape& t, ad::Tape::Handle y) {
        return t.mean_sq_diff(y, t.constant(target));
    };

    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.add(in, t.constant(other)));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.sub(t.constant(other), in));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.mul(in, t.constant(other)));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.scale(in, -2.5));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.add_const(in, 0.7));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.tanh_act(in));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.sigmoid(in));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.softplus(in));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.mul(in, in));
          }, x) < 1e-4);
}

TEST_CASE("kinked op gradients away from their kinks") {
    RandomSource rng(13);
    Tensor x({10});
    // keep every entry at least 0.2 away from the relu kink and the clamp
    // boundaries so central differences see a smooth function
    for (std::size_t i = 0; i < x.size(); ++i) {
        double v = rng.normal();
        x[i] = (v >= 0 ? 0.2 : -0.2) + 0.5 * v;
    }
    Tensor target = random_tensor({10}, rng);
    auto reduce = [&](ad::Tape& t, ad::Tape::Handle y) {
        return t.mean_sq_diff(y, t.constant(target));
    };
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.relu(in));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.leaky_relu(in));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return reduce(t, t.clamp(in, -1.0, 1.0));
          }, x) < 1e-4);
}

TEST_CASE("clamp zeroes gradients outside the interval") {
    ad::Tape t;
    ad::Tape::Handle in = t.leaf(Tensor({3}, {-2.0, 0.5, 3.0}));
    ad::Tape::Handle out = t.mean_sq_diff(t.clamp(in, -1.0, 1.0), t.constant(Tensor({3})));
    t.backward(out);
    CHECK(t.grad(in)[0] == 0.0);
    CHECK(t.grad(in)[1] != 0.0);
    CHECK(t.grad(in)[2] == 0.0);
}

TEST_CASE("shape op gradients match finite differences") {
    RandomSource rng(17);
    Tensor x = random_tensor({2, 3, 2}, rng);
    Tensor target = random_tensor({4}, rng);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              ad::Tape::Handle flat = t.reshape(in, {12});
              ad::Tape::Handle a = t.slice(flat, 1, 2);
              ad::Tape::Handle b = t.slice(flat, 7, 2);
              return t.mean_sq_diff(t.concat({a, b}), t.constant(target));
          }, x) < 1e-4);
}

TEST_CASE("linear gradients match finite differences for W, x and b") {
    RandomSource rng(19);
    Tensor W = random_tensor({3, 4}, rng);
    Tensor x = random_tensor({4}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor target = random_tensor({3}, rng);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.linear(in, t.constant(x), t.constant(b)), t.constant(target));
          }, W) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.linear(t.constant(W), in, t.constant(b)), t.constant(target));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.linear(t.constant(W), t.constant(x), in), t.constant(target));
          }, b) < 1e-4);
}

TEST_CASE("conv2d gradients match finite differences") {
    RandomSource rng(23);
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor K = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor target = random_tensor({3, 3, 3}, rng);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.conv2d(in, t.constant(K), t.constant(b), 2, 1),
                                    t.constant(target));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.conv2d(t.constant(x), in, t.constant(b), 2, 1),
                                    t.constant(target));
          }, K) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.conv2d(t.constant(x), t.constant(K), in, 2, 1),
                                    t.constant(target));
          }, b) < 1e-4);
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
    RandomSource rng(29);
    Tensor x = random_tensor({2, 3, 3}, rng);
    Tensor K = random_tensor({2, 3, 4, 4}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor target = random_tensor({3, 6, 6}, rng);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.conv_transpose2d(in, t.constant(K), t.constant(b), 2, 1),
                                    t.constant(target));
          }, x) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.conv_transpose2d(t.constant(x), in, t.constant(b), 2, 1),
                                    t.constant(target));
          }, K) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.conv_transpose2d(t.constant(x), t.constant(K), in, 2, 1),
                                    t.constant(target));
          }, b) < 1e-4);
}

TEST_CASE("pooling and reduction gradients match finite differences") {
    RandomSource rng(31);
    Tensor x = random_tensor({3, 4, 4}, rng);
    Tensor target = random_tensor({3}, rng);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.mean_sq_diff(t.global_avg_pool(in), t.constant(target));
          }, x) < 1e-4);

    Tensor v = random_tensor({8}, rng);
    Tensor w = random_tensor({8}, rng);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.cosine(in, t.constant(w));
          }, v) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.cosine(t.constant(w), in);
          }, v) < 1e-4);
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              return t.softmax_xent(in, 2);
          }, v) < 1e-4);
}

TEST_CASE("cosine rejects near-zero vectors") {
    ad::Tape t;
    ad::Tape::Handle z = t.constant(Tensor({4}));
    ad::Tape::Handle v = t.constant(Tensor({4}, {1, 2, 3, 4}));
    CHECK_THROWS_AS(t.cosine(z, v), Error);
}

TEST_CASE("gauss_splat gradients match finite differences for all blob params") {
    RandomSource rng(37);
    const std::size_t B = 3, H = 9, W = 9;
    Tensor target = random_tensor({1, H, W}, rng, 0.2);
    // packed [amp | cx | cy | sigma] so one leaf covers all four inputs
    Tensor packed({4 * B});
    for (std::size_t b = 0; b < B; ++b) {
        packed[b] = 0.3 + 0.5 * rng.uniform();         // amp
        packed[B + b] = 2.0 + 5.0 * rng.uniform();     // cx
        packed[2 * B + b] = 2.0 + 5.0 * rng.uniform(); // cy
        packed[3 * B + b] = 1.2 + rng.uniform();       // sigma
    }
    CHECK(max_rel_err([&](ad::Tape& t, auto in) {
              ad::Tape::Handle img =
                  t.gauss_splat(t.slice(in, 0, B), t.slice(in, B, B), t.slice(in, 2 * B, B),
                                t.slice(in, 3 * B, B), H, W);
              return t.mean_sq_diff(img, t.constant(target));
          }, packed, 1e-5) < 1e-4);
}

TEST_CASE("gauss_splat closed form at a blob center") {
    ad::Tape t;
    // single blob, amplitude 1, centered on pixel (3, 4): value -1 + 2*e^0 = 1
    ad::Tape::Handle img = t.gauss_splat(t.constant(Tensor({1}, {1.0})),
                                         t.constant(Tensor({1}, {4.0})),
                                         t.constant(Tensor({1}, {3.0})),
                                         t.constant(Tensor({1}, {2.0})), 8, 8);
    CHECK(t.value(img).at(0, 3, 4) == Catch::Approx(1.0).margin(1e-12));
    // zero amplitude: uniform -1 canvas
    ad::Tape::Handle flat = t.gauss_splat(t.constant(Tensor({1}, {0.0})),
                                          t.constant(Tensor({1}, {4.0})),
                                          t.constant(Tensor({1}, {3.0})),
                                          t.constant(Tensor({1}, {2.0})), 8, 8);
    for (double v : t.value(flat).vec()) CHECK(v == -1.0);
}

TEST_CASE("param binding is memoized and gradients accumulate") {
    RandomSource rng(41);
    ad::Param p(random_tensor({4}, rng));
    ad::Tape t;
    ad::Tape::Handle h1 = t.param(p);
    ad::Tape::Handle h2 = t.param(p);
    CHECK(h1 == h2); // one node per Param per tape

    // f = mean((p + p)^2): grad = 8 p / n
    ad::Tape::Handle out = t.mean_sq_diff(t.add(h1, h2), t.constant(Tensor({4})));
    t.backward(out);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(p.grad[i] == Catch::Approx(8.0 * p.value[i] / 4.0).epsilon(1e-12));

    // gradients accumulate across tapes until the optimizer consumes them
    Tensor after_one = p.grad;
    ad::Tape t2;
    ad::Tape::Handle out2 =
        t2.mean_sq_diff(t2.add(t2.param(p), t2.param(p)), t2.constant(Tensor({4})));
    t2.backward(out2);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(p.grad[i] == Catch::Approx(2.0 * after_one[i]).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar root and constants get no gradient") {
    ad::Tape t;
    ad::Tape::Handle v = t.leaf(Tensor({3}, {1, 2, 3}));
    CHECK_THROWS_AS(t.backward(v), Error);
    ad::Tape::Handle c = t.constant(Tensor({3}, {1, 1, 1}));
    ad::Tape::Handle out = t.mean_sq_diff(v, c);
    t.backward(out);
    CHECK(t.grad(c).size() == 0);
    CHECK(t.grad(v).size() == 3);
}
