#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "omnidrl/learner.hpp"
#include "omnidrl/nn.hpp"

using namespace omnidrl;
using namespace omnidrl::nn;

namespace {

ArchSpec mini_arch() {
  ArchSpec a;
  a.in_channels = 2;
  a.in_height = a.in_width = 10;
  a.shared = {{4, 3, 2, 1}, {5, 3, 1, 0}};
  a.branch = {{3, 2, 1, 0}};
  a.fc_hidden = 6;
  return a;
}

std::vector<Observation> random_obs(const Layout& layout, int n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> byte(0, 255);
  std::vector<Observation> out(n, Observation(layout.input_size()));
  for (auto& o : out)
    for (auto& b : o) b = static_cast<std::uint8_t>(byte(rng));
  return out;
}

Mat<double> input_of(const Layout& layout, const std::vector<Observation>& obs) {
  std::vector<const std::uint8_t*> ptrs;
  for (const auto& o : obs) ptrs.push_back(o.data());
  return make_input<double>(layout, ptrs);
}

// Direct-loop reference implementation of one input column.
using Tensor = std::vector<double>;

Tensor ref_conv(const Tensor& in, const ConvGeom& g, const std::vector<double>& p) {
  Tensor out(static_cast<std::size_t>(g.out_c) * g.out_h * g.out_w);
  for (int o = 0; o < g.out_c; ++o)
    for (int y = 0; y < g.out_h; ++y)
      for (int x = 0; x < g.out_w; ++x) {
        double acc = p[g.b_off + o];
        for (int c = 0; c < g.in_c; ++c)
          for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
              const int iy = y * g.s - g.p + ky, ix = x * g.s - g.p + kx;
              if (iy < 0 || ix < 0 || iy >= g.in_h || ix >= g.in_w) continue;
              const double w = p[g.w_off + static_cast<std::size_t>(o) * g.in_c * g.k * g.k + (c * g.k + ky) * g.k + kx];
              acc += w * in[(static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w + ix];
            }
        out[(static_cast<std::size_t>(o) * g.out_h + y) * g.out_w + x] = std::max(0.0, acc);
      }
  return out;
}

Tensor ref_dense(const Tensor& in, const DenseGeom& g, const std::vector<double>& p) {
  Tensor out(g.out);
  for (int o = 0; o < g.out; ++o) {
    double acc = p[g.b_off + o];
    for (int i = 0; i < g.in; ++i) acc += p[g.w_off + static_cast<std::size_t>(o) * g.in + i] * in[i];
    out[o] = g.relu ? std::max(0.0, acc) : acc;
  }
  return out;
}

Tensor ref_branch(Tensor x, const BranchGeom& b, const std::vector<double>& p) {
  for (const auto& g : b.convs) x = ref_conv(x, g, p);
  for (const auto& d : b.dense) x = ref_dense(x, d, p);
  return x;
}

double group_rel_error(const std::vector<double>& a, const std::vector<double>& n, const ParamGroup& g) {
  double diff = 0, na = 0, nn_ = 0;
  for (std::size_t i = g.begin; i < g.end; ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn_ += n[i] * n[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nn_);
  return denom < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

}  // namespace

TEST_CASE("layout sizes") {
  const Layout desk(ArchSpec::desk());
  CHECK(desk.q_branch().dense.back().out == 9);
  CHECK(desk.cls_branch().dense.back().out == 2);
  CHECK(desk.input_size() == 64 * 64);

  const ArchSpec paper = ArchSpec::paper();
  const Layout big(paper);
  CHECK(big.input_size() == 224 * 224);
  // (224 + 4 - 8) / 4 + 1 = 56, (56 + 2 - 4) / 2 + 1 = 28, then 28.
  CHECK(big.shared()[0].out_h == 56);
  CHECK(big.shared()[1].out_h == 28);
  CHECK(big.shared()[2].out_h == 28);
  CHECK(big.shared()[2].out_c == 64);
  CHECK(big.q_branch().dense.front().out == 512);

  std::size_t covered = 0;
  for (const auto& g : desk.groups()) covered += g.end - g.begin;
  CHECK(covered == desk.num_params());

  ArchSpec bad = ArchSpec::desk();
  bad.shared.push_back({8, 40, 1, 0});
  CHECK_THROWS(Layout(bad));
}

TEST_CASE("architecture JSON round trip") {
  const ArchSpec a = mini_arch();
  const nlohmann::json j = a;
  CHECK(j.get<ArchSpec>() == a);
}

TEST_CASE("forward matches a direct-loop reference") {
  const Layout layout(mini_arch());
  std::mt19937_64 rng(1);
  std::vector<double> p(layout.num_params());
  init_params<double>(layout, p, rng);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (auto& v : p) v += jitter(rng);  // non-zero biases
  const auto obs = random_obs(layout, 3, rng);
  const auto pass = forward<double>(layout, p, input_of(layout, obs), 3, {true, true}, false);
  for (int k = 0; k < 3; ++k) {
    Tensor x(obs[k].begin(), obs[k].end());
    for (auto& v : x) v /= 255.0;
    for (const auto& g : layout.shared()) x = ref_conv(x, g, p);
    const Tensor q = ref_branch(x, layout.q_branch(), p);
    const Tensor c = ref_branch(x, layout.cls_branch(), p);
    for (int a = 0; a < 9; ++a) CHECK(pass.q(a, k) == doctest::Approx(q[a]).epsilon(1e-12));
    for (int a = 0; a < 2; ++a) CHECK(pass.logits(a, k) == doctest::Approx(c[a]).epsilon(1e-12));
  }
}

TEST_CASE("zero weights give zero outputs") {
  const Layout layout(ArchSpec::desk());
  std::mt19937_64 rng(2);
  const std::vector<double> p(layout.num_params(), 0.0);
  const auto obs = random_obs(layout, 2, rng);
  const auto pass = forward<double>(layout, p, input_of(layout, obs), 2, {true, true}, false);
  CHECK(pass.q.cwiseAbs().maxCoeff() == 0.0);
  CHECK(pass.logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identical inputs in a batch give identical outputs") {
  const Layout layout(mini_arch());
  std::mt19937_64 rng(3);
  std::vector<float> p(layout.num_params());
  init_params<float>(layout, p, rng);
  auto obs = random_obs(layout, 1, rng);
  obs.push_back(obs[0]);
  obs.push_back(obs[0]);
  std::vector<const std::uint8_t*> ptrs;
  for (const auto& o : obs) ptrs.push_back(o.data());
  const auto pass = forward<float>(layout, p, make_input<float>(layout, ptrs), 3, {true, true}, false);
  // Blocked GEMM may round tail columns differently, so allow a few ulps.
  const float scale = 1.0f + pass.q.cwiseAbs().maxCoeff();
  for (int k = 1; k < 3; ++k) {
    CHECK((pass.q.col(0) - pass.q.col(k)).cwiseAbs().maxCoeff() <= 1e-6f * scale);
    CHECK((pass.logits.col(0) - pass.logits.col(k)).cwiseAbs().maxCoeff() <= 1e-6f * scale);
  }
}

TEST_CASE("outputs are finite for random parameters and inputs") {
  const Layout layout(mini_arch());
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<float> p(layout.num_params());
    init_params<float>(layout, p, rng);
    const auto obs = random_obs(layout, 4, rng);
    std::vector<const std::uint8_t*> ptrs;
    for (const auto& o : obs) ptrs.push_back(o.data());
    const auto pass = forward<float>(layout, p, make_input<float>(layout, ptrs), 4, {true, true}, false);
    CHECK(pass.q.allFinite());
    CHECK(pass.logits.allFinite());
  }
}

TEST_CASE("He initialization: zero biases and fan-in scaled weights") {
  const Layout layout(ArchSpec::desk());
  std::mt19937_64 rng(5);
  std::vector<double> p(layout.num_params());
  init_params<double>(layout, p, rng);
  const ConvGeom& g = layout.shared()[0];
  double sq = 0;
  for (std::size_t i = g.w_off; i < g.b_off; ++i) sq += p[i] * p[i];
  const double var = sq / static_cast<double>(g.b_off - g.w_off);
  CHECK(var == doctest::Approx(2.0 / (g.in_c * g.k * g.k)).epsilon(0.2));
  for (int o = 0; o < g.out_c; ++o) CHECK(p[g.b_off + o] == 0.0);
}

TEST_CASE("gradient check of the Q-regression loss") {
  const Layout layout(mini_arch());
  std::mt19937_64 rng(6);
  std::vector<double> p(layout.num_params());
  init_params<double>(layout, p, rng);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (auto& v : p) v += jitter(rng);
  const auto obs = random_obs(layout, 4, rng);
  std::vector<Experience> exps(4);
  std::vector<const Experience*> batch;
  std::vector<double> targets;
  for (int k = 0; k < 4; ++k) {
    exps[k].state = obs[k];
    exps[k].action = (3 * k + 1) % 9;
    batch.push_back(&exps[k]);
    targets.push_back(0.5 * k - 0.7);
  }
  std::vector<double> grad(p.size(), 0.0);
  drl_loss<double>(batch, targets, layout, p, grad);

  std::vector<double> numeric(p.size(), 0.0);
  const double h = 1e-5;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = drl_loss<double>(batch, targets, layout, p, {});
    p[i] = keep - h;
    const double down = drl_loss<double>(batch, targets, layout, p, {});
    p[i] = keep;
    numeric[i] = (up - down) / (2 * h);
  }
  for (const auto& g : layout.groups()) {
    if (g.name.rfind("cls.", 0) == 0) {
      for (std::size_t i = g.begin; i < g.end; ++i) CHECK(grad[i] == 0.0);
      continue;
    }
    INFO(g.name);
    CHECK(group_rel_error(grad, numeric, g) < 1e-4);
  }
}

TEST_CASE("gradient check of the classification loss") {
  const Layout layout(mini_arch());
  std::mt19937_64 rng(7);
  std::vector<double> p(layout.num_params());
  init_params<double>(layout, p, rng);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (auto& v : p) v += jitter(rng);
  const auto obs = random_obs(layout, 5, rng);
  std::vector<ClassSample> samples(5);
  std::vector<const ClassSample*> batch;
  for (int k = 0; k < 5; ++k) {
    samples[k] = {obs[k], k % 2};
    batch.push_back(&samples[k]);
  }
  std::vector<double> grad(p.size(), 0.0);
  cls_loss<double>(batch, layout, p, grad);

  std::vector<double> numeric(p.size(), 0.0);
  const double h = 1e-5;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = cls_loss<double>(batch, layout, p, {});
    p[i] = keep - h;
    const double down = cls_loss<double>(batch, layout, p, {});
    p[i] = keep;
    numeric[i] = (up - down) / (2 * h);
  }
  for (const auto& g : layout.groups()) {
    if (g.name.rfind("q.", 0) == 0) {
      for (std::size_t i = g.begin; i < g.end; ++i) CHECK(grad[i] == 0.0);
      continue;
    }
    INFO(g.name);
    CHECK(group_rel_error(grad, numeric, g) < 1e-4);
  }
}

TEST_CASE("float and double passes agree") {
  const Layout layout(ArchSpec::desk());
  std::mt19937_64 rng(8);
  std::vector<float> pf(layout.num_params());
  init_params<float>(layout, pf, rng);
  const std::vector<double> pd(pf.begin(), pf.end());
  const auto obs = random_obs(layout, 2, rng);
  std::vector<const std::uint8_t*> ptrs{obs[0].data(), obs[1].data()};
  const auto a = forward<float>(layout, pf, make_input<float>(layout, ptrs), 2, {true, true}, false);
  const auto b = forward<double>(layout, pd, make_input<double>(layout, ptrs), 2, {true, true}, false);
  CHECK((a.q.cast<double>() - b.q).cwiseAbs().maxCoeff() < 1e-4 * (1.0 + b.q.cwiseAbs().maxCoeff()));
}
