#include "fskgc/pooler.hpp"

#include "test_oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace fskgc;

namespace {

std::vector<double> oracle_pool(const PoolerParams& p, const Tensor& X) {
    const int w = p.width;
    const int n = X.rows();
    Tensor qp = oracle::naive_linear(p.q->value, p.W_q->value, nullptr);
    Tensor keys = oracle::naive_linear(X, p.W_k->value, nullptr);
    Tensor values = oracle::naive_linear(X, p.W_v->value, nullptr);
    std::vector<double> scores(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < w; ++j) s += qp.at(j) * keys.at(i, j);
        scores[static_cast<size_t>(i)] = s / std::sqrt(static_cast<double>(w));
    }
    auto weights = oracle::naive_softmax(scores);
    Tensor pooled({w});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) pooled.at(j) += weights[static_cast<size_t>(i)] * values.at(i, j);
    Tensor hidden = oracle::naive_linear(pooled, p.mlp_w1->value, &p.mlp_b1->value);
    for (double& v : hidden.data) v = v >= 0 ? v : kLeakySlope * v;
    Tensor out = oracle::naive_linear(hidden, p.mlp_w2->value, &p.mlp_b2->value);
    return out.data;
}

}  // namespace

TEST_CASE("pooling one row applies the value projection and the MLP") {
    ParamRegistry reg;
    Rng rng(1);
    PoolerParams p = PoolerParams::create(reg, "pool", 4, rng);
    for (Param* b : {p.mlp_b1, p.mlp_b2})
        for (double& v : b->value.data) v = rng.uniform(-0.5, 0.5);
    Tape t;
    Tensor Xv = rng.normal_tensor({1, 4});
    Val X = t.constant(Xv);

    Val wts = attn_weights(t, p, X);
    REQUIRE(t.value(wts).numel() == 1);
    CHECK(t.value(wts).at(0) == Catch::Approx(1.0));

    Val out = attn_pool(t, p, X);
    auto want = oracle_pool(p, Xv);
    for (int i = 0; i < 4; ++i) CHECK(t.value(out).at(i) == Catch::Approx(want[static_cast<size_t>(i)]).margin(1e-12));
}

TEST_CASE("identical rows pool to the single-row output") {
    ParamRegistry reg;
    Rng rng(2);
    PoolerParams p = PoolerParams::create(reg, "pool", 6, rng);
    Tape t;
    Tensor rowv = rng.normal_tensor({1, 6});
    Tensor Xv({5, 6});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) Xv.at(i, j) = rowv.at(0, j);
    Val one = attn_pool(t, p, t.constant(rowv));
    Val many = attn_pool(t, p, t.constant(Xv));
    for (int i = 0; i < 6; ++i) CHECK(t.value(many).at(i) == Catch::Approx(t.value(one).at(i)).margin(1e-12));
}

TEST_CASE("pooling matches the scaled-dot-product oracle") {
    ParamRegistry reg;
    Rng rng(3);
    PoolerParams p = PoolerParams::create(reg, "pool", 6, rng);
    for (Param* b : {p.mlp_b1, p.mlp_b2})
        for (double& v : b->value.data) v = rng.uniform(-0.5, 0.5);
    Tape t;
    Tensor Xv = rng.normal_tensor({7, 6});
    Val out = attn_pool(t, p, t.constant(Xv));
    auto want = oracle_pool(p, Xv);
    for (int i = 0; i < 6; ++i) CHECK(t.value(out).at(i) == Catch::Approx(want[static_cast<size_t>(i)]).margin(1e-12));
}

TEST_CASE("attention weights form a distribution") {
    ParamRegistry reg;
    Rng rng(4);
    PoolerParams p = PoolerParams::create(reg, "pool", 4, rng);
    for (int trial = 0; trial < 10; ++trial) {
        Rng data(static_cast<uint64_t>(trial) + 50);
        Tape t;
        Val wts = attn_weights(t, p, t.constant(data.normal_tensor({6, 4})));
        double sum = 0.0;
        for (int i = 0; i < 6; ++i) {
            CHECK(t.value(wts).at(i) >= 0.0);
            sum += t.value(wts).at(i);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("pooling is invariant to row order") {
    ParamRegistry reg;
    Rng rng(5);
    PoolerParams p = PoolerParams::create(reg, "pool", 4, rng);
    Rng data(6);
    Tensor Xv = data.normal_tensor({5, 4});
    Tensor Xp({5, 4});
    const int perm[5] = {3, 0, 4, 1, 2};
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) Xp.at(i, j) = Xv.at(perm[i], j);
    Tape t;
    Val a = attn_pool(t, p, t.constant(Xv));
    Val b = attn_pool(t, p, t.constant(Xp));
    for (int i = 0; i < 4; ++i) CHECK(std::abs(t.value(a).at(i) - t.value(b).at(i)) < 1e-12);
}

TEST_CASE("positive and negative halves pool separately and concatenate") {
    ParamRegistry reg;
    Rng rng(7);
    PoolerParams pos = PoolerParams::create(reg, "pool_pos", 4, rng);
    PoolerParams neg = PoolerParams::create(reg, "pool_neg", 4, rng);
    Rng data(8);
    Tape t;
    Tensor Zv = data.normal_tensor({10, 4});
    Val z = pool_pos_neg(t, pos, neg, t.constant(Zv), 5);
    CHECK(t.value(z).shape == std::vector<int>{8});

    Tensor top({5, 4}), bottom({5, 4});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) {
            top.at(i, j) = Zv.at(i, j);
            bottom.at(i, j) = Zv.at(5 + i, j);
        }
    Val zp = attn_pool(t, pos, t.constant(top));
    Val zn = attn_pool(t, neg, t.constant(bottom));
    for (int i = 0; i < 4; ++i) {
        CHECK(t.value(z).at(i) == Catch::Approx(t.value(zp).at(i)).margin(1e-12));
        CHECK(t.value(z).at(4 + i) == Catch::Approx(t.value(zn).at(i)).margin(1e-12));
    }

    CHECK_THROWS_AS(pool_pos_neg(t, pos, neg, t.constant(Zv), 4), ContractError);
    CHECK_THROWS_AS(pool_pos_neg(t, pos, neg, t.constant(Tensor({9, 4})), 5), ContractError);
}

TEST_CASE("identical halves through shared parameters give identical halves of z") {
    ParamRegistry reg;
    Rng rng(9);
    PoolerParams shared = PoolerParams::create(reg, "pool", 4, rng);
    Rng data(10);
    Tensor half = data.normal_tensor({3, 4});
    Tensor Zv({6, 4});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            Zv.at(i, j) = half.at(i, j);
            Zv.at(3 + i, j) = half.at(i, j);
        }
    Tape t;
    Val z = pool_pos_neg(t, shared, shared, t.constant(Zv), 3);
    for (int i = 0; i < 4; ++i) CHECK(t.value(z).at(i) == Catch::Approx(t.value(z).at(4 + i)).margin(1e-15));
}

TEST_CASE("the latent depends on the negative rows") {
    ParamRegistry reg;
    Rng rng(11);
    PoolerParams pos = PoolerParams::create(reg, "pool_pos", 4, rng);
    PoolerParams neg = PoolerParams::create(reg, "pool_neg", 4, rng);
    Param& Z = reg.create("test.z0hat", {6, 4}, rng);
    Tape t;
    Val z = pool_pos_neg(t, pos, neg, t.leaf(Z), 3);
    backward(t, sum(t, z), reg);
    double neg_grad = 0.0;
    for (int i = 3; i < 6; ++i)
        for (int j = 0; j < 4; ++j) neg_grad += std::abs(Z.grad.at(i, j));
    CHECK(neg_grad > 1e-8);
}

TEST_CASE("pooler gradients pass finite-difference checks") {
    ParamRegistry reg;
    Rng rng(12);
    PoolerParams pos = PoolerParams::create(reg, "pool_pos", 4, rng);
    PoolerParams neg = PoolerParams::create(reg, "pool_neg", 4, rng);
    Param& Z = reg.create("test.z0hat", {6, 4}, rng);
    auto build = [&](Tape& t) { return sum(t, pool_pos_neg(t, pos, neg, t.leaf(Z), 3)); };
    GradCheckReport rep = check_gradients(build, reg, 1e-3, 1e-5, 6);
    INFO(rep.summary());
    CHECK(rep.pass);
}
