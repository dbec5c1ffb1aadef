#include <doctest.h>

#include "diffslam/ops.hpp"
#include "diffslam/tensor.hpp"

using namespace diffslam;

TEST_CASE("constant construction and accessors") {
    Tensor t = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(-1) == 3);
    CHECK(t.at({1, 2}) == 6.0);
    CHECK_FALSE(t.requires_grad());
    CHECK_THROWS_AS(Tensor::constant({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("scalar value() contract") {
    CHECK(Tensor::scalar(3.5).value() == 3.5);
    Tensor v = Tensor::constant({2}, {1, 2});
    CHECK_THROWS_AS(v.value(), ContractError);
}

TEST_CASE("reshape shares data and validates element count") {
    Tensor t = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor r = t.reshape({3, 2});
    CHECK(r.at({2, 1}) == 6.0);
    CHECK_THROWS_AS(t.reshape({4, 2}), ShapeError);
}

TEST_CASE("ops on constants stay off-tape") {
    Tensor a = Tensor::constant({2}, {1, 2});
    Tensor b = Tensor::constant({2}, {3, 4});
    Tensor c = add(a, b);
    CHECK_FALSE(c.requires_grad());
    CHECK(c.at(0) == 4.0);
    CHECK(c.at(1) == 6.0);
}

TEST_CASE("backward populates reachable leaves; fig-2 style product graph") {
    // loss = 3(xy + z) at x=2, y=4, z=1 -> grads x:12, y:6, z:3
    Tape tape;
    Tensor x = tape.leaf({}, {2});
    Tensor y = tape.leaf({}, {4});
    Tensor z = tape.leaf({}, {1});
    Tensor loss = 3.0 * (x * y + z);
    CHECK(loss.value() == doctest::Approx(27.0));
    tape.backward(loss);
    CHECK(x.grad().value() == doctest::Approx(12.0));
    CHECK(y.grad().value() == doctest::Approx(6.0));
    CHECK(z.grad().value() == doctest::Approx(3.0));
}

TEST_CASE("unreachable leaf keeps grad undefined") {
    Tape tape;
    Tensor x = tape.leaf({}, {2});
    Tensor unused = tape.leaf({}, {5});
    Tensor loss = x * x;
    tape.backward(loss);
    CHECK(x.grad().value() == doctest::Approx(4.0));
    CHECK_FALSE(unused.has_grad());
}

TEST_CASE("fan-out accumulates additively") {
    Tape tape;
    Tensor x = tape.leaf({}, {3});
    Tensor loss = x + x;
    tape.backward(loss);
    CHECK(x.grad().value() == doctest::Approx(2.0));
}

TEST_CASE("non-scalar loss is rejected") {
    Tape tape;
    Tensor x = tape.leaf({2}, {1, 2});
    Tensor y = x * x;
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("mixing tapes is a contract error") {
    Tape t1, t2;
    Tensor a = t1.leaf({}, {1});
    Tensor b = t2.leaf({}, {2});
    CHECK_THROWS_AS(add(a, b), ContractError);
}

TEST_CASE("backward is deterministic: identical tapes give bit-identical gradients") {
    auto run = [] {
        Tape tape;
        Tensor x = tape.leaf({4}, {0.3, -1.2, 2.5, 0.9});
        Tensor y = sum(sigmoid(x * x - exp(x) / 3.0));
        tape.backward(y);
        return x.grad().to_vector();
    };
    auto g1 = run();
    auto g2 = run();
    for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("f32 tape rounds storage to single precision") {
    Tape tape(DType::f32);
    Tensor x = tape.leaf({}, {0.1});
    CHECK(x.value() == doctest::Approx(static_cast<double>(0.1f)).epsilon(1e-12));
    Tensor y = x * x;
    const double expect = static_cast<double>(static_cast<float>(static_cast<double>(0.1f) * static_cast<double>(0.1f)));
    CHECK(y.value() == expect);
}

TEST_CASE("broadcasting follows trailing-dimension rules") {
    Tensor a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::constant({3}, {10, 20, 30});
    Tensor c = add(a, b);
    CHECK(c.shape() == Shape{2, 3});
    CHECK(c.at({1, 0}) == 14.0);
    Tensor bad = Tensor::constant({2}, {1, 2});
    CHECK_THROWS_WITH_AS(add(a, bad), doctest::Contains("[2,3]"), ShapeError);
}

TEST_CASE("broadcast gradients reduce over expanded dims") {
    Tape tape;
    Tensor a = tape.leaf({2, 2}, {1, 2, 3, 4});
    Tensor b = tape.leaf({2}, {10, 20});
    Tensor loss = sum(a * b);
    tape.backward(loss);
    auto gb = b.grad().to_vector();
    CHECK(gb[0] == doctest::Approx(1 + 3));
    CHECK(gb[1] == doctest::Approx(2 + 4));
}
