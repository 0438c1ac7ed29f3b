// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "udst/diffnet.hpp"
#include "udst/distill.hpp"

using namespace udst;

TEST_CASE("linear layer with zero weights") {
  ParamStore ps;
  ps.add("w", Tensor::mat(3, 4));
  ps.add("b", Tensor::vec(3));
  Tape t;
  Tensor x = Tensor::vec(4);
  x.data = {1.0, -2.0, 3.0, 0.5};
  Tape::Var y = t.affine(t.param(ps, "w"), t.input(std::move(x)),
                         t.param(ps, "b"));
  for (double v : t.value(y).data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("gradient of sum of squares") {
  ParamStore ps;
  Tensor x0 = Tensor::vec(2);
  x0.data = {1.0, 2.0};
  ps.add("x", x0);
  Tape t;
  Tape::Var x = t.param(ps, "x");
  Grads grads = t.backward(t.dot(x, x));
  CHECK(grads.at("x").data[0] == doctest::Approx(2.0));
  CHECK(grads.at("x").data[1] == doctest::Approx(4.0));
}

TEST_CASE("zero loss gradient gives zero parameter gradients") {
  ParamStore ps;
  ps.add("w", init_uniform({2, 2}, 2, 1));
  Tape t;
  Tensor x = Tensor::vec(2, 1.0);
  Tape::Var y = t.matvec(t.param(ps, "w"), t.input(std::move(x)));
  Grads grads = t.backward(t.scale(t.sum(y), 0.0));
  for (double v : grads.at("w").data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("tape reuse is an error") {
  ParamStore ps;
  ps.add("x", Tensor::vec(2, 1.0));
  Tape t;
  Tape::Var s = t.sum(t.param(ps, "x"));
  t.backward(s);
  CHECK_THROWS_AS(t.backward(s), std::logic_error);
}

TEST_CASE("shape mismatch errors") {
  Tape t;
  Tape::Var a = t.input(Tensor::vec(2, 1.0));
  Tape::Var b = t.input(Tensor::vec(3, 1.0));
  CHECK_THROWS(t.add(a, b));
  Tape::Var m = t.input(Tensor::mat(2, 4, 1.0));
  CHECK_THROWS(t.matvec(m, b));
  CHECK_THROWS(t.matmul(m, m));
}

TEST_CASE("GRU cell with zero weights blends with gate 0.5") {
  ParamStore ps;
  add_gru_params(ps, "gru", 3, 2, 7);
  for (const std::string& name : ps.names())
    for (double& v : ps.at(name).data) v = 0.0;
  Tape t;
  GruParams p = gru_params(t, ps, "gru");
  Tensor x = Tensor::vec(3, 1.0);
  Tensor h = Tensor::vec(2);
  h.data = {0.4, -0.8};
  Tape::Var h_next = gru_cell(t, p, t.input(std::move(x)), t.input(std::move(h)));
  // z = 0.5, r = 0.5, n = tanh(0) = 0, h' = 0.5 * h.
  CHECK(t.value(h_next).data[0] == doctest::Approx(0.2));
  CHECK(t.value(h_next).data[1] == doctest::Approx(-0.4));
}

TEST_CASE("attention with a single key returns the projected value") {
  ParamStore ps;
  add_attention_params(ps, "attn", 4, 3);
  Tape t;
  Tensor q = Tensor::mat(1, 4);
  q.data = {0.5, -0.5, 1.0, 0.0};
  Tensor kv = q;
  Tape::Var out =
      attention(t, ps, "attn", t.input(std::move(q)), t.input(std::move(kv)), 2);
  // Softmax over one key is 1, so output = value row through wo.
  Tape t2;
  Tensor kv2 = Tensor::mat(1, 4);
  kv2.data = {0.5, -0.5, 1.0, 0.0};
  Tape::Var v = t2.matmul_nt(t2.input(std::move(kv2)), t2.param(ps, "attn.wv"));
  Tape::Var expect = t2.matmul_nt(v, t2.param(ps, "attn.wo"));
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(t.value(out).data[i] ==
          doctest::Approx(t2.value(expect).data[i]).epsilon(1e-12));
}

TEST_CASE("softmax outputs are valid distributions") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tape t;
    Tensor x = Tensor::vec(5);
    for (double& v : x.data)
      v = std::uniform_real_distribution<double>(-10.0, 10.0)(rng);
    const Tensor& y = t.value(t.softmax_vec(t.input(std::move(x))));
    double sum = 0.0;
    for (double v : y.data) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

namespace {

// Builds a small composite graph exercising a layer kind and returns the
// scalar loss. Used for finite-difference checks.
double layer_zoo_loss(const ParamStore& ps, int kind) {
  Tape t;
  Tensor x = Tensor::mat(3, 4);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    x.data[i] = 0.1 * static_cast<double>(i % 7) - 0.25;
  Tape::Var input = t.input(std::move(x));
  Tape::Var out;
  switch (kind) {
    case 0: {  // linear + softmax + cross entropy
      Tape::Var y = t.affine(t.param(ps, "w"), t.row(input, 0), t.param(ps, "b"));
      out = t.cross_entropy_const({0.2, 0.5, 0.3}, t.softmax_vec(y));
      break;
    }
    case 1: {  // GRU over 3 steps
      GruParams p = gru_params(t, ps, "gru");
      Tape::Var h = t.input(Tensor::vec(3));
      for (std::size_t step = 0; step < 3; ++step)
        h = gru_cell(t, p, t.row(input, step), h);
      out = t.dot(h, h);
      break;
    }
    case 2: {  // attention
      Tape::Var y = attention(t, ps, "attn", input, input, 2);
      out = t.sum(t.mul(y, y));
      break;
    }
    case 3: {  // conv1d + mean pool
      Tape::Var y = t.conv1d3(input, t.param(ps, "conv_w"), t.param(ps, "conv_b"));
      Tape::Var pooled = t.mean_rows(t.tanh_(y));
      out = t.dot(pooled, pooled);
      break;
    }
    case 4: {  // embedding + sigmoid head
      Tape::Var e = t.embed(t.param(ps, "table"), {1, 3, 1, 0});
      Tape::Var pooled = t.mean_rows(e);
      out = t.sum(t.sigmoid(pooled));
      break;
    }
    case 5: {  // cosine similarity head
      Tape::Var a = t.matvec(t.param(ps, "w"), t.row(input, 0));
      Tape::Var b = t.matvec(t.param(ps, "w2"), t.row(input, 1));
      Tape::Var c = t.cosine(a, b);
      out = t.mul(c, c);
      break;
    }
    default:
      throw std::logic_error("unknown kind");
  }
  return t.value(out).data[0];
}

ParamStore layer_zoo_params() {
  ParamStore ps;
  ps.add("w", init_uniform({3, 4}, 4, 100));
  ps.add("w2", init_uniform({3, 4}, 4, 101));
  ps.add("b", init_uniform({3}, 3, 102));
  add_gru_params(ps, "gru", 4, 3, 103);
  add_attention_params(ps, "attn", 4, 120);
  ps.add("conv_w", init_uniform({3, 2, 4}, 12, 130));
  ps.add("conv_b", init_uniform({2}, 2, 131));
  ps.add("table", init_uniform({5, 4}, 4, 140));
  return ps;
}

}  // namespace

TEST_CASE("finite-difference check for every layer kind") {
  for (int kind = 0; kind <= 5; ++kind) {
    CAPTURE(kind);
    ParamStore ps = layer_zoo_params();
    // Analytic gradients via one tape pass, replayed through layer_zoo_loss.
    Grads grads;
    {
      // Re-run the same graph on a tape with parameter leaves.
      Tape t;
      Tensor x = Tensor::mat(3, 4);
      for (std::size_t i = 0; i < x.data.size(); ++i)
        x.data[i] = 0.1 * static_cast<double>(i % 7) - 0.25;
      Tape::Var input = t.input(std::move(x));
      Tape::Var out;
      switch (kind) {
        case 0:
          out = t.cross_entropy_const(
              {0.2, 0.5, 0.3},
              t.softmax_vec(t.affine(t.param(ps, "w"), t.row(input, 0),
                                     t.param(ps, "b"))));
          break;
        case 1: {
          GruParams p = gru_params(t, ps, "gru");
          Tape::Var h = t.input(Tensor::vec(3));
          for (std::size_t step = 0; step < 3; ++step)
            h = gru_cell(t, p, t.row(input, step), h);
          out = t.dot(h, h);
          break;
        }
        case 2: {
          Tape::Var y = attention(t, ps, "attn", input, input, 2);
          out = t.sum(t.mul(y, y));
          break;
        }
        case 3: {
          Tape::Var y = t.conv1d3(input, t.param(ps, "conv_w"),
                                  t.param(ps, "conv_b"));
          Tape::Var pooled = t.mean_rows(t.tanh_(y));
          out = t.dot(pooled, pooled);
          break;
        }
        case 4: {
          Tape::Var e = t.embed(t.param(ps, "table"), {1, 3, 1, 0});
          out = t.sum(t.sigmoid(t.mean_rows(e)));
          break;
        }
        case 5: {
          Tape::Var a = t.matvec(t.param(ps, "w"), t.row(input, 0));
          Tape::Var b = t.matvec(t.param(ps, "w2"), t.row(input, 1));
          Tape::Var c = t.cosine(a, b);
          out = t.mul(c, c);
          break;
        }
      }
      grads = t.backward(out);
    }
    auto loss_fn = [kind](const ParamStore& p) { return layer_zoo_loss(p, kind); };
    auto report = finite_diff_check(loss_fn, ps, grads, 1e-4);
    CHECK(report.pass);
  }
}

TEST_CASE("deliberately corrupted gradient fails the check") {
  ParamStore ps;
  ps.add("w", init_uniform({2, 2}, 2, 9));
  auto loss_fn = [](const ParamStore& p) {
    Tape t;
    Tape::Var w = t.param(p, "w");
    return t.value(t.dot(w, w)).data[0];
  };
  Tape t;
  Tape::Var w = t.param(ps, "w");
  Grads grads = t.backward(t.dot(w, w));
  grads.at("w").data[0] += 1.0;  // corrupt
  auto report = finite_diff_check(loss_fn, ps, grads, 1e-4);
  CHECK_FALSE(report.pass);
}

TEST_CASE("adam first step with constant gradient") {
  ParamStore ps;
  ps.add("x", Tensor::vec(1));
  Grads grads;
  grads["x"] = Tensor::vec(1, 1.0);
  adam_step(ps, grads, 0.1);
  // Bias-corrected first step moves by -lr (mhat/vhat^0.5 = 1).
  CHECK(ps.at("x").data[0] == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(ps.step == 1);
}

TEST_CASE("adam zero gradients leave parameters unchanged") {
  ParamStore ps;
  ps.add("x", Tensor::vec(3, 2.5));
  Grads grads;
  grads["x"] = Tensor::vec(3, 0.0);
  adam_step(ps, grads, 0.1);
  for (double v : ps.at("x").data) CHECK(v == doctest::Approx(2.5));
  CHECK(ps.step == 1);
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
  ParamStore ps;
  ps.add("bad_param", Tensor::vec(1));
  Grads grads;
  grads["bad_param"] = Tensor::vec(1, std::nan(""));
  try {
    adam_step(ps, grads, 0.1);
    CHECK(false);
  } catch (const std::invalid_argument& err) {
    CHECK(std::string(err.what()).find("bad_param") != std::string::npos);
  }
}

TEST_CASE("training determinism") {
  auto run = [] {
    ParamStore ps;
    ps.add("w", init_uniform({4, 4}, 4, 77));
    for (int iter = 0; iter < 20; ++iter) {
      Tape t;
      Tape::Var w = t.param(ps, "w");
      Grads grads = t.backward(t.dot(w, w));
      adam_step(ps, grads, 0.01);
    }
    return ps.at("w").data;
  };
  CHECK(run() == run());  // bit-identical
}
