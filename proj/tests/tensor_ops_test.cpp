#include <doctest.h>

#include <cmath>

#include "labelreg/labels.hpp"
#include "labelreg/ops.hpp"
#include "labelreg/optim.hpp"
#include "testutil.hpp"

using namespace labelreg;
using testutil::random_tensor;

namespace {

// Direct-summation convolution, the independent reference for conv2d.
template <class S>
Tensor<S> conv2d_naive(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride,
                       int pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
  const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  Tensor<S> out({xs.n, ws.n, oh, ow});
  for (int ni = 0; ni < xs.n; ++ni)
    for (int oc = 0; oc < ws.n; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = double(b.values()[oc]);
          for (int ic = 0; ic < xs.c; ++ic)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += double(x.values()[x.channel_offset(ni, ic) + std::int64_t(iy) * xs.w + ix]) *
                       double(w.values()[w.channel_offset(oc, ic) + std::int64_t(ky) * ws.w + kx]);
              }
          out.mutable_values()[out.channel_offset(ni, oc) + std::int64_t(oy) * ow + ox] = S(acc);
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel maps input through unchanged") {
  Tape<double> tape;
  RngStream rng = stream(7, "conv_id");
  auto x = random_tensor({2, 3, 5, 4}, rng);
  Tensor<double> w({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w.mutable_values()[c * 3 + c] = 1.0;
  Tensor<double> b({1, 3, 1, 1});
  auto y = conv2d(tape, x, w, b, 1, 0);
  CHECK(y.shape() == x.shape());
  CHECK((y.values() - x.values()).abs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d: all-ones 3x3 kernel on all-ones 4x4 input, pad 1") {
  Tape<float> tape;
  Tensor<float> x({1, 1, 4, 4}, VecX<float>::Ones(16));
  Tensor<float> w({1, 1, 3, 3}, VecX<float>::Ones(9));
  Tensor<float> b({1, 1, 1, 1});
  auto y = conv2d(tape, x, w, b, 1, 1);
  // interior pixels see the full window, corners a 2x2 one
  CHECK(y.values()[1 * 4 + 1] == doctest::Approx(9.0));
  CHECK(y.values()[0] == doctest::Approx(4.0));
  CHECK(y.values()[3] == doctest::Approx(4.0));
  CHECK(y.values()[15] == doctest::Approx(4.0));
}

TEST_CASE("conv2d: 7x7 stride-2 pad-3 halves 256x256") {
  Tape<float> tape;
  Tensor<float> x({1, 3, 256, 256});
  Tensor<float> w({1, 3, 7, 7});
  Tensor<float> b({1, 1, 1, 1});
  auto y = conv2d(tape, x, w, b, 2, 3);
  CHECK(y.shape() == TensorShape{1, 1, 128, 128});
}

TEST_CASE("conv2d matches direct summation on random tensors") {
  RngStream rng = stream(11, "conv_ref");
  for (auto [stride, pad] : {std::pair{1, 1}, {2, 0}, {2, 3}, {1, 0}}) {
    Tape<double> tape;
    auto x = random_tensor({2, 3, 9, 7}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto b = random_tensor({1, 4, 1, 1}, rng);
    auto got = conv2d(tape, x, w, b, stride, pad);
    auto want = conv2d_naive(x, w, b, stride, pad);
    REQUIRE(got.shape() == want.shape());
    CHECK((got.values() - want.values()).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad wiring") {
  Tape<float> tape;
  Tensor<float> x({1, 3, 8, 8});
  Tensor<float> w({4, 2, 3, 3});
  Tensor<float> b({1, 4, 1, 1});
  CHECK_THROWS_AS(conv2d(tape, x, w, b, 1, 1), ConfigError);
  Tensor<float> w2({4, 3, 9, 9});
  CHECK_THROWS_AS(conv2d(tape, x, w2, b, 1, 0), ConfigError);
  Tensor<float> w3({4, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(tape, x, w3, b, 0, 1), ConfigError);
}

TEST_CASE("pool2d examples on [[1,2],[3,4]]") {
  Tape<float> tape;
  Tensor<float> x({1, 1, 2, 2}, (VecX<float>(4) << 1, 2, 3, 4).finished());
  auto mx = pool2d(tape, x, PoolKind::kMax, 2, 2);
  CHECK(mx.shape() == TensorShape{1, 1, 1, 1});
  CHECK(mx.values()[0] == 4.0f);
  auto av = pool2d(tape, x, PoolKind::kAvg, 2, 2);
  CHECK(av.values()[0] == doctest::Approx(2.5));

  Tensor<float> c({1, 2, 4, 4}, VecX<float>::Constant(32, 3.25f));
  auto mc = pool2d(tape, c, PoolKind::kMax, 2, 2);
  CHECK(mc.shape() == TensorShape{1, 2, 2, 2});
  CHECK((mc.values() == 3.25f).all());

  CHECK_THROWS_AS(pool2d(tape, x, PoolKind::kMax, 0, 2), ConfigError);
  CHECK_THROWS_AS(pool2d(tape, x, PoolKind::kMax, 2, 0), ConfigError);
  CHECK_THROWS_AS(pool2d(tape, x, PoolKind::kMax, 3, 1), ConfigError);
}

TEST_CASE("max-pool ties route gradient to the first window element") {
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 2, 2}, VecX<double>::Constant(4, 2.0), true);
  auto y = pool2d(tape, x, PoolKind::kMax, 2, 2);
  auto loss = sum_all(tape, y);
  auto g = tape.backward(loss);
  const auto& dx = g.at(x.id());
  CHECK(dx[0] == 1.0);
  CHECK(dx[1] == 0.0);
  CHECK(dx[2] == 0.0);
  CHECK(dx[3] == 0.0);
}

TEST_CASE("upsample nearest2x replicates pixels") {
  Tape<float> tape;
  Tensor<float> x({1, 1, 2, 2}, (VecX<float>(4) << 1, 2, 3, 4).finished());
  auto y = upsample_nearest2x(tape, x);
  VecX<float> want(16);
  want << 1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4;
  CHECK((y.values() - want).abs().maxCoeff() == 0.0f);
}

TEST_CASE("bilinear upsample: identity and constant preservation are exact") {
  Tape<float> tape;
  RngStream rng = stream(3, "bilinear");
  VecX<float> v(12);
  for (int i = 0; i < 12; ++i) v[i] = float(rng.uniform(-2, 2));
  Tensor<float> x({1, 1, 3, 4}, v);
  auto same = upsample_bilinear(tape, x, 3, 4);
  CHECK((same.values() - x.values()).abs().maxCoeff() == 0.0f);

  Tensor<float> c({1, 1, 2, 2}, VecX<float>::Constant(4, 0.7f));
  auto up = upsample_bilinear(tape, c, 4, 4);
  CHECK((up.values() == 0.7f).all());

  CHECK_THROWS_AS(upsample_bilinear(tape, x, 2, 4), ConfigError);
}

TEST_CASE("relu forward and subgradient convention") {
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 1, 3}, (VecX<double>(3) << -1, 0, 2).finished(), true);
  auto y = relu(tape, x);
  CHECK(y.values()[0] == 0.0);
  CHECK(y.values()[1] == 0.0);
  CHECK(y.values()[2] == 2.0);
  auto loss = sum_all(tape, y);
  auto g = tape.backward(loss);
  const auto& dx = g.at(x.id());
  CHECK(dx[0] == 0.0);
  CHECK(dx[1] == 0.0);  // subgradient at exactly 0 is 0
  CHECK(dx[2] == 1.0);
}

TEST_CASE("concat_channels sums channel counts and slicing inverts it") {
  Tape<double> tape;
  RngStream rng = stream(5, "concat");
  auto a = random_tensor({2, 3, 4, 4}, rng);
  auto b = random_tensor({2, 5, 4, 4}, rng);
  auto cat = concat_channels(tape, {a, b});
  CHECK(cat.shape().c == 8);
  auto sa = slice_channels(tape, cat, 0, 3);
  auto sb = slice_channels(tape, cat, 3, 8);
  CHECK((sa.values() - a.values()).abs().maxCoeff() == 0.0);
  CHECK((sb.values() - b.values()).abs().maxCoeff() == 0.0);

  Tensor<double> bad({2, 5, 3, 4});
  CHECK_THROWS_AS(concat_channels(tape, {a, bad}), ConfigError);
}

TEST_CASE("softmax_ce_loss: uniform logits give ln K, confident logits vanish") {
  Tape<float> tape;
  Tensor<float> logits({1, 2, 2, 2});
  LabelMap target(1, 2, 2);
  auto loss = softmax_ce_loss(tape, logits, target);
  CHECK(loss.values()[0] == doctest::Approx(std::log(2.0)));

  Tensor<float> confident({1, 2, 1, 1}, (VecX<float>(2) << 30.0f, 0.0f).finished());
  LabelMap t1(1, 1, 1);
  auto l1 = softmax_ce_loss(tape, confident, t1);
  CHECK(l1.values()[0] < 1e-6);
}

TEST_CASE("softmax_ce_loss: void pixels are excluded from value and gradient") {
  // 2-pixel map, one void: loss equals the single-pixel CE of the other pixel.
  Tape<double> tape;
  VecX<double> z(4);
  z << 0.3, -0.7, 1.1, 0.4;  // class-major: pixel0 has (0.3, 1.1), pixel1 (-0.7, 0.4)
  auto logits = tape.leaf({1, 2, 1, 2}, z, true);
  LabelMap target(1, 1, 2);
  target.ids = {1, kVoidId};
  auto loss = softmax_ce_loss(tape, logits, target);
  const double z0 = 0.3, z1 = 1.1;
  const double want = std::log(std::exp(z0) + std::exp(z1)) - z1;
  CHECK(loss.values()[0] == doctest::Approx(want));

  auto g = tape.backward(loss);
  const auto& dz = g.at(logits.id());
  CHECK(dz[1] == 0.0);  // void pixel, class 0 slot
  CHECK(dz[3] == 0.0);  // void pixel, class 1 slot
  CHECK(dz[0] != 0.0);

  // Mutating the void pixel's logits changes nothing.
  VecX<double> z2 = z;
  z2[1] = 123.0;
  z2[3] = -55.0;
  Tape<double> tape2;
  auto logits2 = tape2.leaf({1, 2, 1, 2}, z2, true);
  auto loss2 = softmax_ce_loss(tape2, logits2, target);
  CHECK(loss2.values()[0] == loss.values()[0]);
  auto g2 = tape2.backward(loss2);
  CHECK(g2.at(logits2.id())[0] == dz[0]);
  CHECK(g2.at(logits2.id())[2] == dz[2]);

  LabelMap all_void(1, 1, 2);
  all_void.ids = {kVoidId, kVoidId};
  CHECK_THROWS_AS(softmax_ce_loss(tape, logits, all_void), DataError);
  LabelMap bad(1, 1, 2);
  bad.ids = {0, 9};
  CHECK_THROWS_AS(softmax_ce_loss(tape, logits, bad), DataError);
}

TEST_CASE("mse_loss examples and mask support") {
  Tape<float> tape;
  RngStream rng = stream(9, "mse");
  VecX<float> t(8);
  for (int i = 0; i < 8; ++i) t[i] = float(rng.uniform(-1, 1));
  Tensor<float> target({1, 2, 2, 2}, t);
  Tensor<float> same = target;
  CHECK(mse_loss(tape, same, target).values()[0] == 0.0f);

  Tensor<float> off({1, 2, 2, 2}, (t + 1.0f).eval());
  CHECK(mse_loss(tape, off, target).values()[0] == doctest::Approx(1.0));

  // Half the pixels masked out: mean over the remaining half only.
  std::vector<std::uint8_t> mask = {1, 0, 1, 0};
  Tensor<float> pred({1, 2, 2, 2}, (t + 2.0f).eval());
  // every included element differs by 2 -> mean of squares is 4
  CHECK(mse_loss(tape, pred, target, &mask).values()[0] == doctest::Approx(4.0));

  // Hand evaluation with distinct errors: only pixels 0 and 2 count.
  VecX<float> p2 = t;
  p2[0] += 1.0f;  // ch0 pixel0 (included)
  p2[1] += 5.0f;  // ch0 pixel1 (masked)
  p2[6] += 3.0f;  // ch1 pixel2 (included)
  Tensor<float> pred2({1, 2, 2, 2}, p2);
  const double want = (1.0 * 1.0 + 3.0 * 3.0) / 4.0;  // 2 pixels x 2 channels included
  CHECK(mse_loss(tape, pred2, target, &mask).values()[0] == doctest::Approx(want));

  // Mutating masked entries leaves loss and gradients unchanged.
  VecX<float> p3 = p2;
  p3[1] = -77.0f;
  p3[3] = 12.0f;
  {
    Tape<double> t1, t2;
    auto a1 = t1.leaf({1, 2, 2, 2}, p2.cast<double>(), true);
    auto a2 = t2.leaf({1, 2, 2, 2}, p3.cast<double>(), true);
    const Tensor<double> tgt({1, 2, 2, 2}, t.cast<double>().eval());
    auto l1 = mse_loss(t1, a1, tgt, &mask);
    auto l2 = mse_loss(t2, a2, tgt, &mask);
    CHECK(l1.values()[0] == l2.values()[0]);
    const auto g1 = t1.backward(l1);
    const auto g2 = t2.backward(l2);
    CHECK((g1.at(a1.id()) == g2.at(a2.id())).all());
  }

  std::vector<std::uint8_t> empty_mask = {0, 0, 0, 0};
  CHECK_THROWS_AS(mse_loss(tape, pred, target, &empty_mask), DataError);
}

TEST_CASE("backward: d(sum(w*x))/dw equals x") {
  Tape<double> tape;
  RngStream rng = stream(21, "wx");
  auto x_const = random_tensor({1, 2, 3, 3}, rng);
  auto w = tape.leaf({1, 2, 3, 3}, random_tensor({1, 2, 3, 3}, rng).values(), true);
  auto loss = sum_all(tape, mul(tape, w, x_const));
  auto g = tape.backward(loss);
  CHECK((g.at(w.id()) - x_const.values()).abs().maxCoeff() < 1e-15);
  CHECK_FALSE(g.has(x_const.id()));  // constants get no gradient buffer
}

TEST_CASE("backward rejects off-tape losses and non-scalars") {
  Tape<double> tape;
  Tensor<double> loose({1, 1, 1, 1});
  CHECK_THROWS_AS(tape.backward(loose), UsageError);
  auto x = tape.leaf({1, 1, 2, 2}, VecX<double>::Ones(4), true);
  auto y = relu(tape, x);
  CHECK_THROWS_AS(tape.backward(y), UsageError);
}

TEST_CASE("gradcheck: every op against central finite differences") {
  RngStream rng = stream(42, "opgrad");
  ParamStore<double> store;
  store.add("x", {2, 3, 6, 6}, random_tensor({2, 3, 6, 6}, rng).values());
  store.add("w", {4, 3, 3, 3}, random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5).values());
  store.add("b", {1, 4, 1, 1}, random_tensor({1, 4, 1, 1}, rng, -0.2, 0.2).values());
  store.add("w2", {2, 4, 1, 1}, random_tensor({2, 4, 1, 1}, rng, -0.5, 0.5).values());
  store.add("b2", {1, 2, 1, 1}, random_tensor({1, 2, 1, 1}, rng, -0.2, 0.2).values());
  LabelMap target(2, 6, 6);
  RngStream trng = stream(43, "opgrad_t");
  for (auto& id : target.ids) id = std::uint8_t(trng.below(3) == 2 ? kVoidId : trng.below(2));
  auto mse_ref = random_tensor({2, 4, 3, 3}, rng);

  // conv -> relu -> maxpool -> bilinear -> CE, plus avg-pool/nearest/MSE and
  // concat/slice/standardize so every differentiable op sits on some path.
  auto forward_full = [&](labelreg::GradsByName<double>* out_grads) {
    Tape<double> tape;
    Session<double> s(tape, store);
    auto x = s.param("x");
    auto c1 = conv2d(tape, x, s.param("w"), s.param("b"), 1, 1);
    auto r1 = relu(tape, c1);
    auto p1 = pool2d(tape, r1, PoolKind::kMax, 2, 2);
    auto cat = concat_channels(tape, {p1, p1});
    auto sl = slice_channels(tape, cat, 2, 6);
    auto up = upsample_bilinear(tape, sl, 6, 6);
    auto c2 = conv2d(tape, up, s.param("w2"), s.param("b2"), 1, 0);
    auto ce = softmax_ce_loss(tape, c2, target);

    auto a1 = pool2d(tape, c1, PoolKind::kAvg, 2, 2);
    auto n1 = upsample_nearest2x(tape, a1);
    VecX<double> mean = VecX<double>::Constant(4, 0.1);
    VecX<double> stdd = VecX<double>::Constant(4, 1.7);
    auto st = standardize_channels(tape, pool2d(tape, n1, PoolKind::kMax, 2, 2), mean, stdd);
    auto ms = mse_loss(tape, st, mse_ref);

    auto total = add(tape, ce, scale(tape, ms, 0.5));
    if (out_grads) *out_grads = s.grads(total);
    return double(total.values()[0]);
  };

  labelreg::GradsByName<double> grads;
  forward_full(&grads);
  auto rep = testutil::gradcheck(store, [&] { return forward_full(nullptr); }, grads);
  INFO("worst element: ", rep.worst);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("forward/backward determinism: identical runs are bitwise equal") {
  RngStream rng = stream(77, "det");
  ParamStore<double> store;
  store.add("w", {3, 2, 3, 3}, random_tensor({3, 2, 3, 3}, rng).values());
  store.add("b", {1, 3, 1, 1}, random_tensor({1, 3, 1, 1}, rng).values());
  auto x = random_tensor({1, 2, 8, 8}, rng);
  LabelMap t(1, 4, 4);
  for (std::size_t i = 0; i < t.ids.size(); ++i) t.ids[i] = std::uint8_t(i % 3);

  auto run = [&] {
    Tape<double> tape;
    Session<double> s(tape, store);
    auto y = pool2d(tape, relu(tape, conv2d(tape, x, s.param("w"), s.param("b"), 1, 1)),
                    PoolKind::kMax, 2, 2);
    auto loss = softmax_ce_loss(tape, y, t);
    return std::pair{double(loss.values()[0]), s.grads(loss)};
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  for (const auto& [name, g] : g1) CHECK((g == g2.at(name)).all());
}
