#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "repdib/checkpoint.hpp"
#include "repdib/nn.hpp"
#include "repdib/rng.hpp"
#include "repdib/tape.hpp"
#include "repdib/tensor.hpp"

using namespace repdib;
using repdib::testing::fd_grad;
using repdib::testing::max_rel_err;
using repdib::testing::random_tensor;

namespace {

// Runs an FD check for a scalar-valued graph built from one input tensor.
// build() receives a fresh tape and the input leaf and returns the loss var.
void check_grad(
    int rows, int cols, Rng& rng,
    const std::function<Var<double>(Tape<double>&, Var<double>)>& build,
    double lo = -1.0, double hi = 1.0, double tol = 1e-4) {
  Param<double> p("x", random_tensor(rows, cols, rng, lo, hi));
  Tape<double> tape;
  Var<double> x = tape.leaf(p);
  Var<double> loss = build(tape, x);
  tape.backward(loss);

  auto f = [&](const std::vector<double>& flat) {
    Param<double> q("x", Tensor<double>(rows, cols, flat));
    Tape<double> t2;
    return build(t2, t2.leaf(q)).value().item();
  };
  auto numeric = fd_grad(f, p.value.v);
  CHECK(max_rel_err(numeric, p.grad) < tol);
}

}  // namespace

TEST_CASE("gradients match finite differences for every op") {
  Rng rng(7);
  const int kSeeds = 100;

  SUBCASE("matmul") {
    for (int s = 0; s < kSeeds; ++s) {
      Tensor<double> b = random_tensor(3, 4, rng);
      check_grad(2, 3, rng, [&](Tape<double>& t, Var<double> x) {
        return total_sum(square(matmul(x, t.constant(b))));
      });
    }
  }
  SUBCASE("matmul right operand") {
    for (int s = 0; s < kSeeds; ++s) {
      Tensor<double> a = random_tensor(2, 3, rng);
      check_grad(3, 4, rng, [&](Tape<double>& t, Var<double> x) {
        return total_sum(square(matmul(t.constant(a), x)));
      });
    }
  }
  SUBCASE("add sub mul div with broadcast") {
    for (int s = 0; s < kSeeds; ++s) {
      Tensor<double> row = random_tensor(1, 4, rng, 0.5, 1.5);
      Tensor<double> col = random_tensor(3, 1, rng, 0.5, 1.5);
      check_grad(3, 4, rng, [&](Tape<double>& t, Var<double> x) {
        Var<double> y = add(x, t.constant(row));
        y = mul(y, t.constant(col));
        y = sub(y, t.constant(row));
        y = div(y, t.constant(col));
        return total_sum(square(y));
      });
      // broadcast operand as the tracked side
      Tensor<double> big = random_tensor(3, 4, rng);
      check_grad(1, 4, rng, [&](Tape<double>& t, Var<double> x) {
        return total_sum(mul(t.constant(big), x));
      });
    }
  }
  SUBCASE("relu away from kink") {
    for (int s = 0; s < kSeeds; ++s)
      check_grad(2, 5, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(relu(x));
      }, 0.05, 1.0);
  }
  SUBCASE("tanh exp log sqrt square") {
    for (int s = 0; s < kSeeds; ++s) {
      check_grad(2, 4, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(repdib::tanh(x));
      });
      check_grad(2, 4, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(repdib::exp(x));
      });
      check_grad(2, 4, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(repdib::log(x));
      }, 0.2, 2.0);
      check_grad(2, 4, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(repdib::sqrt(x));
      }, 0.2, 2.0);
      check_grad(2, 4, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(square(x));
      });
    }
  }
  SUBCASE("clamp interior and clipped regions") {
    for (int s = 0; s < kSeeds; ++s)
      check_grad(2, 4, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(square(clamp(x, -0.5, 0.5)));
      }, -2.0, 2.0);
  }
  SUBCASE("softmax and log_softmax") {
    for (int s = 0; s < kSeeds; ++s) {
      Tensor<double> w = random_tensor(2, 5, rng);
      check_grad(2, 5, rng, [&](Tape<double>& t, Var<double> x) {
        return total_sum(mul(softmax_rows(x), t.constant(w)));
      }, -2.0, 2.0);
      check_grad(2, 5, rng, [&](Tape<double>& t, Var<double> x) {
        return total_sum(mul(log_softmax_rows(x), t.constant(w)));
      }, -2.0, 2.0);
    }
  }
  SUBCASE("l2_normalize_rows") {
    for (int s = 0; s < kSeeds; ++s) {
      Tensor<double> w = random_tensor(3, 4, rng);
      check_grad(3, 4, rng, [&](Tape<double>& t, Var<double> x) {
        return total_sum(mul(l2_normalize_rows(x), t.constant(w)));
      }, 0.3, 1.5);
    }
  }
  SUBCASE("reductions slices concat gather select") {
    for (int s = 0; s < kSeeds; ++s) {
      check_grad(3, 4, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(square(row_sum(x)));
      });
      check_grad(3, 4, rng, [](Tape<double>&, Var<double> x) {
        return mean_all(square(x));
      });
      check_grad(3, 6, rng, [](Tape<double>&, Var<double> x) {
        Var<double> a = slice_cols(x, 0, 2);
        Var<double> b = slice_cols(x, 2, 6);
        return total_sum(square(concat_cols(b, a)));
      });
      check_grad(5, 3, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(square(gather_rows(x, {4, 0, 0, 2})));
      });
      check_grad(4, 3, rng, [](Tape<double>&, Var<double> x) {
        return total_sum(square(select_cols(x, {2, 0, 1, 1})));
      });
    }
  }
  SUBCASE("stop_gradient blocks and straight_through passes") {
    Param<double> p("x", random_tensor(2, 3, rng));
    {
      Tape<double> t;
      Var<double> x = t.leaf(p);
      t.backward(total_sum(mul(x, stop_gradient(x))));
      // d/dx (x * const) = const = value of x
      for (std::size_t i = 0; i < p.value.v.size(); ++i)
        CHECK(p.grad.v[i] == doctest::Approx(p.value.v[i]));
    }
    p.zero_grad();
    {
      Tape<double> t;
      Var<double> x = t.leaf(p);
      Tensor<double> replacement = random_tensor(2, 3, rng);
      Var<double> y = straight_through(x, replacement);
      CHECK(y.value() == replacement);
      t.backward(total_sum(scale(y, 3.0)));
      for (std::size_t i = 0; i < p.value.v.size(); ++i)
        CHECK(p.grad.v[i] == doctest::Approx(3.0));
    }
  }
}

TEST_CASE("backward linear and quadratic closed forms") {
  Rng rng(3);
  Param<double> w("w", random_tensor(1, 5, rng));
  Tensor<double> x = random_tensor(1, 5, rng);
  {
    Tape<double> t;
    t.backward(total_sum(mul(t.leaf(w), t.constant(x))));
    for (int i = 0; i < 5; ++i) CHECK(w.grad.v[i] == doctest::Approx(x.v[i]));
  }
  w.zero_grad();
  {
    Tape<double> t;
    t.backward(total_sum(square(t.leaf(w))));
    for (int i = 0; i < 5; ++i)
      CHECK(w.grad.v[i] == doctest::Approx(2.0 * w.value.v[i]));
  }
}

TEST_CASE("backward requires a scalar loss") {
  Rng rng(1);
  Param<double> p("x", random_tensor(2, 2, rng));
  Tape<double> t;
  Var<double> x = t.leaf(p);
  CHECK_THROWS_AS(t.backward(square(x)), ContractError);
}

TEST_CASE("non-finite results raise a named error") {
  Tape<double> t;
  Var<double> x = t.constant(Tensor<double>(1, 2, {0.0, -1.0}));
  try {
    repdib::log(x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("log") != std::string::npos);
  }
}

TEST_CASE("mlp forward identity and relu kill cases") {
  Rng rng(1);
  // 1-layer identity net with weight I, bias 0.
  Mlp<double> net("net", {2, 2}, Activation::identity, rng);
  net.weights[0].value = Tensor<double>(2, 2, {1.0, 0.0, 0.0, 1.0});
  Tensor<double> x(1, 2, {1.0, 2.0});
  Tensor<double> y = net.forward(x);
  CHECK(y.v[0] == 1.0);
  CHECK(y.v[1] == 2.0);

  // relu net with all-negative hidden pre-activations collapses to zero.
  Mlp<double> rnet("rnet", {2, 3, 2}, Activation::relu, rng);
  for (auto& v : rnet.weights[0].value.v) v = -std::abs(v) - 0.1;
  Tensor<double> xin(1, 2, {1.0, 1.0});
  Tensor<double> out = rnet.forward(xin);
  CHECK(out.v[0] == 0.0);
  CHECK(out.v[1] == 0.0);
}

TEST_CASE("mlp forward matches naive matmul oracle") {
  Rng rng(42);
  Mlp<double> net("net", {4, 6, 3}, Activation::tanh, rng);
  Tensor<double> x = random_tensor(5, 4, rng);
  Tensor<double> got = net.forward(x);

  // independent recomputation
  auto naive = [&](const Tensor<double>& in, const Tensor<double>& w,
                   const Tensor<double>& b) {
    Tensor<double> o(in.rows, w.cols, 0.0);
    for (int i = 0; i < in.rows; ++i)
      for (int j = 0; j < w.cols; ++j) {
        double acc = b.v[j];
        for (int k = 0; k < in.cols; ++k) acc += in.at(i, k) * w.at(k, j);
        o.at(i, j) = acc;
      }
    return o;
  };
  Tensor<double> h = naive(x, net.weights[0].value, net.biases[0].value);
  for (auto& v : h.v) v = std::tanh(v);
  Tensor<double> want = naive(h, net.weights[1].value, net.biases[1].value);
  for (std::size_t i = 0; i < want.v.size(); ++i)
    CHECK(got.v[i] == doctest::Approx(want.v[i]).epsilon(1e-12));

  // tape forward agrees with raw forward
  Tape<double> t;
  Var<double> out = net.forward(t, t.constant(x));
  for (std::size_t i = 0; i < want.v.size(); ++i)
    CHECK(out.value().v[i] == doctest::Approx(got.v[i]).epsilon(1e-12));
}

TEST_CASE("mlp gradient check through both layers") {
  Rng rng(11);
  Mlp<double> net("net", {3, 4, 2}, Activation::tanh, rng);
  Tensor<double> x = random_tensor(4, 3, rng);

  Tape<double> t;
  Var<double> loss = mean_all(square(net.forward(t, t.constant(x))));
  t.backward(loss);

  std::vector<Param<double>*> params;
  net.collect(params);
  for (auto* p : params) {
    auto f = [&](const std::vector<double>& flat) {
      Tensor<double> saved = p->value;
      p->value.v = flat;
      Tape<double> t2;
      double out = mean_all(square(net.forward(t2, t2.constant(x)))).value().item();
      p->value = saved;
      return out;
    };
    auto numeric = fd_grad(f, p->value.v);
    CHECK(max_rel_err(numeric, p->grad) < 1e-4);
  }
}

TEST_CASE("mlp shape mismatch raises dimension error") {
  Rng rng(1);
  Mlp<double> net("net", {3, 2}, Activation::identity, rng);
  Tensor<double> x(1, 4, 0.0);
  CHECK_THROWS_AS(net.forward(x), ContractError);
}

TEST_CASE("mlp parameter count is a pure function of widths") {
  Rng rng(1);
  Mlp<double> a("a", {5, 7, 3}, Activation::relu, rng);
  Mlp<double> b("b", {5, 7, 3}, Activation::tanh, rng);
  CHECK(a.param_count() == b.param_count());
  CHECK(a.param_count() == 5 * 7 + 7 + 7 * 3 + 3);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  Rng rng(5);
  Param<double> p("p", random_tensor(2, 2, rng));
  Tensor<double> before = p.value;
  Adam<double> opt(0.01);
  opt.add(p);
  for (int i = 0; i < 3; ++i) opt.step();
  CHECK(p.value == before);
  CHECK(opt.steps() == 3);
}

TEST_CASE("adam approaches lr * sign(g) under constant gradient") {
  Param<double> p("p", Tensor<double>(1, 1, {0.0}));
  Adam<double> opt(0.05);
  opt.add(p);
  double prev = p.value.v[0];
  double step_size = 0.0;
  for (int i = 0; i < 500; ++i) {
    p.grad.v[0] = -3.7;  // constant gradient, so the step tends to lr * sign
    opt.step();
    step_size = p.value.v[0] - prev;
    prev = p.value.v[0];
  }
  CHECK(step_size == doctest::Approx(0.05).epsilon(1e-3));
}

TEST_CASE("adam single step matches hand computation") {
  Param<double> p("p", Tensor<double>(1, 1, {1.0}));
  Adam<double> opt(0.1, 0.9, 0.999, 1e-8);
  opt.add(p);
  p.grad.v[0] = 0.5;
  opt.step();
  // t=1: m=0.05, v=0.00025; mhat=0.5, vhat=0.25; update = 0.1*0.5/(0.5+1e-8)
  const double want = 1.0 - 0.1 * 0.5 / (std::sqrt(0.25) + 1e-8);
  CHECK(p.value.v[0] == doctest::Approx(want).epsilon(1e-12));
  CHECK(p.grad.v[0] == 0.0);  // cleared
}

TEST_CASE("adam rejects NaN gradients naming the parameter") {
  Param<double> p("encoder.w0", Tensor<double>(1, 1, {1.0}));
  Adam<double> opt(0.1);
  opt.add(p);
  p.grad.v[0] = std::nan("");
  try {
    opt.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("encoder.w0") != std::string::npos);
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto run = [] {
    Rng rng(123);
    Mlp<float> net("net", {3, 8, 2}, Activation::relu, rng);
    Adam<float> opt(3e-3);
    std::vector<Param<float>*> ps;
    net.collect(ps);
    opt.add(ps);
    for (int step = 0; step < 50; ++step) {
      Tensor<float> x(4, 3);
      for (auto& v : x.v) v = static_cast<float>(rng.uniform(-1, 1));
      Tape<float> t;
      t.backward(mean_all(square(net.forward(t, t.constant(x)))));
      opt.step();
    }
    std::vector<float> flat;
    for (auto* p : ps) flat.insert(flat.end(), p->value.v.begin(), p->value.v.end());
    return flat;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round-trips tensors bit-exactly") {
  Rng rng(9);
  Mlp<float> net("enc", {3, 4}, Activation::identity, rng);
  std::vector<TensorRecord> recs;
  recs.push_back(to_record("enc.w0", net.weights[0].value));
  recs.push_back(to_record("enc.b0", net.biases[0].value));
  std::vector<float> misc;
  push_u64(misc, 0xdeadbeefcafe1234ULL);
  recs.push_back({"misc", {4}, misc});
  recs.push_back(string_record("rng", rng.serialize()));

  const std::string path = "numcore_ckpt_test.bin";
  write_checkpoint(path, recs);
  CheckpointReader reader(path);

  Tensor<float> w(3, 4), b(1, 4);
  from_record(reader.get("enc.w0"), w);
  from_record(reader.get("enc.b0"), b);
  CHECK(w == net.weights[0].value);
  CHECK(b == net.biases[0].value);
  std::size_t pos = 0;
  CHECK(pull_u64(reader.get("misc").data, pos) == 0xdeadbeefcafe1234ULL);

  Rng restored(0);
  restored.deserialize(record_string(reader.get("rng")));
  CHECK(restored == rng);
  std::remove(path.c_str());
}

TEST_CASE("rng serialization resumes the exact stream") {
  Rng a(77);
  for (int i = 0; i < 10; ++i) a.normal();
  std::string state = a.serialize();
  Rng b(0);
  b.deserialize(state);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.uniform() == b.uniform());
    CHECK(a.normal() == b.normal());
    CHECK(a.uniform_int(17) == b.uniform_int(17));
  }
}
