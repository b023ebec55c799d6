#include <doctest.h>

#include "labelreg/ops.hpp"
#include "labelreg/optim.hpp"
#include "testutil.hpp"

using namespace labelreg;
using testutil::random_tensor;

TEST_CASE("adam: zero gradients leave fresh parameters unchanged") {
  ParamStore<float> store;
  store.add("p", {1, 1, 2, 2}, (VecX<float>(4) << 1, -2, 3, 0.5f).finished());
  const VecX<float> before = store.at("p").value;
  AdamState<float> state;
  GradsByName<float> grads;
  grads["p"] = VecX<float>::Zero(4);
  adam_step(store, grads, state, 1e-4f);
  CHECK((store.at("p").value == before).all());
  CHECK(state.t == 1);
}

TEST_CASE("adam: bias-corrected first step on a scalar") {
  ParamStore<double> store;
  store.add("p", {1, 1, 1, 1}, VecX<double>::Zero(1));
  AdamState<double> state;
  GradsByName<double> grads;
  grads["p"] = VecX<double>::Constant(1, 1.0);
  const double lr = 1e-4;
  adam_step(store, grads, state, lr);
  // m_hat = v_hat = 1 at t=1, so the update is -lr / (1 + eps)
  CHECK(store.at("p").value[0] == doctest::Approx(-lr / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam: frozen parameters are bitwise untouched, even with gradients") {
  RngStream rng = stream(31, "adam_frozen");
  ParamStore<float> store;
  store.add("a", {2, 2, 3, 3}, random_tensor({2, 2, 3, 3}, rng).values().cast<float>());
  store.add("b", {1, 4, 1, 1}, random_tensor({1, 4, 1, 1}, rng).values().cast<float>());
  store.freeze("a");
  const VecX<float> a_before = store.at("a").value;
  const VecX<float> b_before = store.at("b").value;
  AdamState<float> state;
  GradsByName<float> grads;
  grads["a"] = VecX<float>::Constant(36, 2.5f);
  grads["b"] = VecX<float>::Constant(4, 2.5f);
  for (int i = 0; i < 5; ++i) adam_step(store, grads, state, 1e-2f);
  CHECK(std::memcmp(store.at("a").value.data(), a_before.data(), 36 * sizeof(float)) == 0);
  CHECK((store.at("b").value != b_before).any());
}

TEST_CASE("adam: random frozen masks stay bitwise invariant (property)") {
  RngStream rng = stream(32, "adam_prop");
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore<double> store;
    const int num = 1 + int(rng.below(5));
    std::vector<std::string> frozen;
    for (int i = 0; i < num; ++i) {
      const std::string name = "p" + std::to_string(i);
      const int len = 1 + int(rng.below(6));
      store.add(name, {1, 1, 1, len}, random_tensor({1, 1, 1, len}, rng).values());
      if (rng.bernoulli(0.5)) {
        store.freeze(name);
        frozen.push_back(name);
      }
    }
    std::map<std::string, VecX<double>> before;
    for (const auto& n : store.names()) before[n] = store.at(n).value;
    AdamState<double> state;
    for (int step = 0; step < 3; ++step) {
      GradsByName<double> grads;
      for (const auto& n : store.names())
        grads[n] = random_tensor({1, 1, 1, int(store.at(n).value.size())}, rng).values();
      adam_step(store, grads, state, 1e-3);
      CHECK((state.v.count("p0") == 0 || (state.v.at("p0") >= 0.0).all()));
    }
    for (const auto& n : store.names()) {
      const bool is_frozen = store.is_frozen(n);
      const bool unchanged =
          std::memcmp(store.at(n).value.data(), before[n].data(),
                      std::size_t(store.at(n).value.size()) * sizeof(double)) == 0;
      if (is_frozen) CHECK(unchanged);
    }
  }
}

TEST_CASE("adam: missing gradient for a non-frozen parameter is a usage error") {
  ParamStore<float> store;
  store.add("p", {1, 1, 1, 1}, VecX<float>::Zero(1));
  store.add("q", {1, 1, 1, 1}, VecX<float>::Zero(1));
  store.freeze("q");
  AdamState<float> state;
  GradsByName<float> grads;  // nothing for p
  CHECK_THROWS_AS(adam_step(store, grads, state, 1e-4f), UsageError);
  grads["p"] = VecX<float>::Zero(1);
  CHECK_NOTHROW(adam_step(store, grads, state, 1e-4f));  // frozen q needs none
}

TEST_CASE("param store rejects duplicates and unknown freezes") {
  ParamStore<float> store;
  store.add("p", {1, 1, 1, 1}, VecX<float>::Zero(1));
  CHECK_THROWS_AS(store.add("p", {1, 1, 1, 1}, VecX<float>::Zero(1)), UsageError);
  CHECK_THROWS_AS(store.freeze("nope"), UsageError);
  CHECK_THROWS_AS(store.freeze_prefix("nope."), UsageError);
}

TEST_CASE("session: frozen parameters still receive gradient buffers") {
  ParamStore<double> store;
  store.add("w", {1, 1, 1, 2}, (VecX<double>(2) << 1.0, 2.0).finished());
  store.add("unused", {1, 1, 1, 3}, VecX<double>::Zero(3));
  store.freeze("w");
  Tape<double> tape;
  Session<double> s(tape, store);
  auto w = s.param("w");
  auto loss = sum_all(tape, mul(tape, w, w));
  auto grads = s.grads(loss);
  CHECK(grads.at("w")[0] == doctest::Approx(2.0));  // d(w^2)/dw = 2w
  CHECK(grads.at("w")[1] == doctest::Approx(4.0));
  // parameters the loss never touched come back as zeros, so optimizer
  // coverage is always total
  CHECK((grads.at("unused") == 0.0).all());
}

TEST_CASE("kaiming init depends only on (seed, name), not registration order") {
  ParamStore<float> a, b;
  init_conv_param(a, 99, "net.c1.w", 8, 3, 3, 3);
  init_conv_param(a, 99, "net.c2.w", 4, 8, 1, 1);
  init_conv_param(b, 99, "net.c2.w", 4, 8, 1, 1);  // reversed order
  init_conv_param(b, 99, "net.c1.w", 8, 3, 3, 3);
  CHECK((a.at("net.c1.w").value == b.at("net.c1.w").value).all());
  CHECK((a.at("net.c2.w").value == b.at("net.c2.w").value).all());
  ParamStore<float> c;
  init_conv_param(c, 100, "net.c1.w", 8, 3, 3, 3);
  CHECK((a.at("net.c1.w").value != c.at("net.c1.w").value).any());
  // fan-in bound: |w| <= 1/sqrt(fan_in)
  const float bound = 1.0f / std::sqrt(float(3 * 3 * 3));
  CHECK(a.at("net.c1.w").value.abs().maxCoeff() <= bound);
  CHECK(a.at("net.c1.w").value.abs().maxCoeff() > bound * 0.8f);  // actually fills the range
}
