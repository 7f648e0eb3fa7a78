#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "outfitlab/losses.hpp"
#include "outfitlab/model.hpp"
#include "outfitlab/optim.hpp"
#include "outfitlab/tape.hpp"
#include "support/fd.hpp"

using namespace outfitlab;
using diff::Tape;
using diff::Tensor;
using fdtest::Instance;
using fdtest::rand_tensor;
using fdtest::rand_tensor_away_from_zero;
using fdtest::reduce_with;
using DVar = Tape<double>::Var;

namespace {

constexpr double kFdTol = 1e-4;
constexpr int kFdInstances = 20;

void expect_grads_ok(const Instance& inst) {
  auto r = fdtest::run_fd(inst);
  REQUIRE(r.elements_checked > 0);
  CHECK(r.max_rel_err < kFdTol);
}

int dim(RngStream& rng, int lo, int hi) { return static_cast<int>(rng.uniform_int(lo, hi)); }

}  // namespace

TEST_CASE("elementwise add, sub, mul gradients") {
  RngStream rng(101, "fd.elementwise");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 1, 5);
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, m, n), rand_tensor(rng, m, n)};
    int which = it % 3;
    inst.build = [w, which](Tape<double>& t, const std::vector<DVar>& v) {
      DVar y = which == 0   ? diff::add(t, v[0], v[1])
               : which == 1 ? diff::sub(t, v[0], v[1])
                            : diff::mul(t, v[0], v[1]);
      return reduce_with(t, y, w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("scale gradients") {
  RngStream rng(102, "fd.scale");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 1, 5);
    double s = rng.uniform(-2.0, 2.0);
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, m, n)};
    inst.build = [w, s](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::scale(t, v[0], s), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("matmul gradients and value against a naive product") {
  RngStream rng(103, "fd.matmul");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), k = dim(rng, 1, 5), n = dim(rng, 1, 4);
    auto a = rand_tensor(rng, m, k);
    auto b = rand_tensor(rng, k, n);
    {
      Tape<double> t;
      auto c = diff::matmul(t, t.input(a), t.input(b));
      const auto& vc = t.value(c);
      for (int r = 0; r < m; ++r)
        for (int cc = 0; cc < n; ++cc) {
          double acc = 0;
          for (int j = 0; j < k; ++j) acc += a.at(r, j) * b.at(j, cc);
          CHECK(vc.at(r, cc) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {a, b};
    inst.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::matmul(t, v[0], v[1]), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("matmul_nt gradients and equivalence with explicit transpose") {
  RngStream rng(104, "fd.matmul_nt");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), k = dim(rng, 1, 5), n = dim(rng, 1, 4);
    auto a = rand_tensor(rng, m, k);
    auto b = rand_tensor(rng, n, k);
    {
      Tape<double> t;
      auto c = diff::matmul_nt(t, t.input(a), t.input(b));
      const auto& vc = t.value(c);
      for (int r = 0; r < m; ++r)
        for (int cc = 0; cc < n; ++cc) {
          double acc = 0;
          for (int j = 0; j < k; ++j) acc += a.at(r, j) * b.at(cc, j);
          CHECK(vc.at(r, cc) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {a, b};
    inst.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::matmul_nt(t, v[0], v[1]), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("add_row_bias gradients") {
  RngStream rng(105, "fd.bias");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, m, n), rand_tensor(rng, 1, n)};
    inst.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::add_row_bias(t, v[0], v[1]), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("relu gradients away from the kink") {
  RngStream rng(106, "fd.relu");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 1, 5);
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor_away_from_zero(rng, m, n, 0.05, 2.0)};
    inst.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::relu(t, v[0]), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("softplus gradients") {
  RngStream rng(107, "fd.softplus");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 1, 5);
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, m, n, -6.0, 6.0)};
    inst.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::softplus(t, v[0]), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("reshape gradients") {
  RngStream rng(108, "fd.reshape");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 1, 4);
    auto w = rand_tensor_away_from_zero(rng, 1, m * n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, m, n)};
    inst.build = [w, m, n](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::reshape(t, v[0], 1, m * n), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("slice_rows gradients") {
  RngStream rng(109, "fd.slice");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 2, 6), n = dim(rng, 1, 4);
    int first = dim(rng, 0, m - 1);
    int count = dim(rng, 1, m - first);
    auto w = rand_tensor_away_from_zero(rng, count, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, m, n)};
    inst.build = [w, first, count](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::slice_rows(t, v[0], first, count), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("gather_rows gradients with repeated indices") {
  RngStream rng(110, "fd.gather");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 2, 5), n = dim(rng, 1, 4), picks = dim(rng, 2, 6);
    std::vector<int> idx;
    for (int i = 0; i < picks; ++i) idx.push_back(dim(rng, 0, m - 1));
    idx.push_back(idx[0]);  // force at least one duplicate
    auto w = rand_tensor_away_from_zero(rng, static_cast<int>(idx.size()), n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, m, n)};
    inst.build = [w, idx](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::gather_rows(t, v[0], idx), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("repeat_rows gradients") {
  RngStream rng(111, "fd.repeat");
  for (int it = 0; it < kFdInstances; ++it) {
    int n = dim(rng, 1, 5), copies = dim(rng, 1, 5);
    auto w = rand_tensor_away_from_zero(rng, copies, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, 1, n)};
    inst.build = [w, copies](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::repeat_rows(t, v[0], copies), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("mean_rows and mean_all gradients") {
  RngStream rng(112, "fd.means");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
    auto w = rand_tensor_away_from_zero(rng, 1, n, 0.5, 1.5);
    Instance rows;
    rows.inputs = {rand_tensor(rng, m, n)};
    rows.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::mean_rows(t, v[0]), w);
    };
    expect_grads_ok(rows);

    Instance all;
    all.inputs = {rand_tensor(rng, m, n)};
    all.build = [](Tape<double>& t, const std::vector<DVar>& v) { return diff::mean_all(t, v[0]); };
    expect_grads_ok(all);
  }
}

TEST_CASE("softmax_rows gradients and normalization") {
  RngStream rng(113, "fd.softmax");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 2, 6);
    double tau = rng.uniform(0.4, 2.5);
    auto x = rand_tensor(rng, m, n, -2.0, 2.0);
    {
      Tape<double> t;
      auto y = diff::softmax_rows(t, t.input(x), tau);
      const auto& vy = t.value(y);
      for (int r = 0; r < m; ++r) {
        double s = 0;
        for (int c = 0; c < n; ++c) s += vy.at(r, c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {x};
    inst.build = [w, tau](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::softmax_rows(t, v[0], tau), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("layer_norm gradients and standardized rows") {
  RngStream rng(114, "fd.layernorm");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 2, 6);
    auto x = rand_tensor(rng, m, n, -2.0, 2.0);
    {
      Tape<double> t;
      auto ones = t.input(diff::full<double>(1, n, 1.0));
      auto zero = t.input(diff::zeros<double>(1, n));
      auto y = diff::layer_norm(t, t.input(x), ones, zero);
      const auto& vy = t.value(y);
      for (int r = 0; r < m; ++r) {
        double in_mu = 0, in_var = 0;
        for (int c = 0; c < n; ++c) in_mu += x.at(r, c);
        in_mu /= n;
        for (int c = 0; c < n; ++c) in_var += (x.at(r, c) - in_mu) * (x.at(r, c) - in_mu);
        in_var /= n;
        double mu = 0, var = 0;
        for (int c = 0; c < n; ++c) mu += vy.at(r, c);
        mu /= n;
        for (int c = 0; c < n; ++c) var += (vy.at(r, c) - mu) * (vy.at(r, c) - mu);
        var /= n;
        CHECK(std::abs(mu) < 1e-9);
        // The stabilizer inside the root shrinks the output variance to
        // exactly var / (var + eps).
        CHECK(var == doctest::Approx(in_var / (in_var + 1e-5)).epsilon(1e-9));
      }
    }
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {x, rand_tensor_away_from_zero(rng, 1, n, 0.4, 1.6), rand_tensor(rng, 1, n)};
    inst.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::layer_norm(t, v[0], v[1], v[2]), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("normalize_rows gradients and unit norms") {
  RngStream rng(115, "fd.normalize");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 2, 6);
    auto x = rand_tensor_away_from_zero(rng, m, n, 0.3, 1.5);
    {
      Tape<double> t;
      auto y = diff::normalize_rows(t, t.input(x));
      const auto& vy = t.value(y);
      for (int r = 0; r < m; ++r) {
        double s = 0;
        for (int c = 0; c < n; ++c) s += vy.at(r, c) * vy.at(r, c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
    auto w = rand_tensor_away_from_zero(rng, m, n, 0.5, 1.5);
    Instance inst;
    inst.inputs = {x};
    inst.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::normalize_rows(t, v[0]), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("rows_cosine gradients and self-similarity") {
  RngStream rng(116, "fd.rows_cosine");
  for (int it = 0; it < kFdInstances; ++it) {
    int m = dim(rng, 1, 4), n = dim(rng, 2, 6);
    auto a = rand_tensor_away_from_zero(rng, m, n, 0.3, 1.5);
    {
      Tape<double> t;
      auto va = t.input(a);
      auto c = diff::rows_cosine(t, va, va);
      for (int r = 0; r < m; ++r) {
        // Within rounding of 1 from below; the clamp caps overshoot at 1.
        CHECK(t.value(c).at(r, 0) <= 1.0);
        CHECK(t.value(c).at(r, 0) > 1.0 - 1e-14);
      }
    }
    auto w = rand_tensor_away_from_zero(rng, m, 1, 0.5, 1.5);
    Instance inst;
    inst.inputs = {a, rand_tensor_away_from_zero(rng, m, n, 0.3, 1.5)};
    inst.build = [w](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::rows_cosine(t, v[0], v[1]), w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("cosine accepts row and column vectors") {
  RngStream rng(117, "fd.cosine");
  for (int it = 0; it < kFdInstances; ++it) {
    int n = dim(rng, 2, 6);
    bool a_col = it % 2 == 0, b_col = it % 3 == 0;
    Instance inst;
    inst.inputs = {rand_tensor_away_from_zero(rng, a_col ? n : 1, a_col ? 1 : n, 0.3, 1.5),
                   rand_tensor_away_from_zero(rng, b_col ? n : 1, b_col ? 1 : n, 0.3, 1.5)};
    inst.build = [](Tape<double>& t, const std::vector<DVar>& v) {
      return diff::cosine(t, v[0], v[1]);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("grouped multi-head attention matches a naive per-group oracle") {
  RngStream rng(118, "attn.oracle");
  for (int it = 0; it < 10; ++it) {
    int heads = it % 2 == 0 ? 1 : 2;
    int dq = 4, dv = 6;
    std::vector<diff::AttentionGroup> groups;
    int ng = dim(rng, 1, 3);
    for (int i = 0; i < ng; ++i) {
      int kl = dim(rng, 1, 4);
      groups.push_back({it % 3 == 0 ? 1 : kl, kl});
    }
    int qr = 0, kr = 0;
    for (auto& g : groups) {
      qr += g.q_len;
      kr += g.k_len;
    }
    auto q = rand_tensor(rng, qr, dq);
    auto k = rand_tensor(rng, kr, dq);
    auto v = rand_tensor(rng, kr, dv);

    Tape<double> t;
    auto out = diff::multihead_grouped_attention(t, t.input(q), t.input(k), t.input(v), groups,
                                                 heads);
    const auto& vo = t.value(out);

    // Naive oracle: per group, per head, explicit softmax(QK^T / sqrt(dh)) V.
    int dqh = dq / heads, dvh = dv / heads;
    int qo = 0, ko = 0;
    for (auto& g : groups) {
      for (int h = 0; h < heads; ++h) {
        for (int r = 0; r < g.q_len; ++r) {
          std::vector<double> logits(static_cast<std::size_t>(g.k_len));
          for (int c = 0; c < g.k_len; ++c) {
            double s = 0;
            for (int j = 0; j < dqh; ++j)
              s += q.at(qo + r, h * dqh + j) * k.at(ko + c, h * dqh + j);
            logits[static_cast<std::size_t>(c)] = s / std::sqrt(double(dqh));
          }
          double mx = *std::max_element(logits.begin(), logits.end());
          double z = 0;
          for (double& l : logits) {
            l = std::exp(l - mx);
            z += l;
          }
          for (int j = 0; j < dvh; ++j) {
            double acc = 0;
            for (int c = 0; c < g.k_len; ++c)
              acc += logits[static_cast<std::size_t>(c)] / z * v.at(ko + c, h * dvh + j);
            CHECK(vo.at(qo + r, h * dvh + j) == doctest::Approx(acc).epsilon(1e-12));
          }
        }
      }
      qo += g.q_len;
      ko += g.k_len;
    }
  }
}

TEST_CASE("grouped multi-head attention gradients") {
  RngStream rng(119, "fd.attn");
  for (int it = 0; it < kFdInstances; ++it) {
    int heads = it % 2 == 0 ? 1 : 2;
    int dq = heads * dim(rng, 1, 3);
    int dv = heads * dim(rng, 1, 3);
    std::vector<diff::AttentionGroup> groups;
    int ng = dim(rng, 1, 3);
    int qr = 0, kr = 0;
    for (int i = 0; i < ng; ++i) {
      int kl = dim(rng, 1, 4);
      int ql = it % 3 == 0 ? 1 : dim(rng, 1, 3);
      groups.push_back({ql, kl});
      qr += ql;
      kr += kl;
    }
    auto w = rand_tensor_away_from_zero(rng, qr, dv, 0.5, 1.5);
    Instance inst;
    inst.inputs = {rand_tensor(rng, qr, dq), rand_tensor(rng, kr, dq), rand_tensor(rng, kr, dv)};
    inst.build = [w, groups, heads](Tape<double>& t, const std::vector<DVar>& v) {
      return reduce_with(t, diff::multihead_grouped_attention(t, v[0], v[1], v[2], groups, heads),
                         w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("bpr gradients and the equal-scores closed form") {
  RngStream rng(120, "fd.bpr");
  for (int it = 0; it < kFdInstances; ++it) {
    int n = dim(rng, 1, 6);
    double tau = rng.uniform(0.2, 2.0);
    Instance inst;
    inst.inputs = {rand_tensor(rng, n, 1), rand_tensor(rng, n, 1)};
    inst.build = [tau](Tape<double>& t, const std::vector<DVar>& v) {
      return loss::bpr(t, v[0], v[1], tau);
    };
    expect_grads_ok(inst);
  }
  for (int n : {1, 2, 3, 5, 8}) {
    Tape<double> t;
    auto p = t.input(diff::full<double>(n, 1, 0.37));
    auto q = t.input(diff::full<double>(n, 1, 0.37));
    auto l = loss::bpr(t, p, q, 0.1);
    CHECK(std::abs(t.value(l).data[0] - std::log(2.0)) < 1e-12);
  }
}

TEST_CASE("npair gradients and the equal-scores closed form") {
  RngStream rng(121, "fd.npair");
  for (int it = 0; it < kFdInstances; ++it) {
    int n = dim(rng, 1, 5), m = dim(rng, 1, 6);
    double tau = rng.uniform(0.2, 2.0);
    Instance inst;
    inst.inputs = {rand_tensor(rng, n, 1), rand_tensor(rng, n, m)};
    inst.build = [tau](Tape<double>& t, const std::vector<DVar>& v) {
      return loss::npair(t, v[0], v[1], tau);
    };
    expect_grads_ok(inst);
  }
  // Equal scores: every exponent is exactly zero, so the loss is exactly
  // log(M + 1) for M negatives, independent of the temperature.
  for (int m : {1, 2, 4, 8, 32}) {
    for (int n : {1, 2, 4}) {
      Tape<double> t;
      auto p = t.input(diff::full<double>(n, 1, -0.2));
      auto q = t.input(diff::full<double>(n, m, -0.2));
      auto l = loss::npair(t, p, q, 0.1);
      CHECK(t.value(l).data[0] == std::log(double(m + 1)));
    }
  }
  // Temperature to infinity flattens the softmax toward the same constant.
  {
    RngStream r2(122, "fd.npair.tau");
    Tape<double> t;
    auto p = t.input(rand_tensor(r2, 4, 1));
    auto q = t.input(rand_tensor(r2, 4, 7));
    auto l = loss::npair(t, p, q, 1e4);
    CHECK(std::abs(t.value(l).data[0] - std::log(8.0)) < 1e-3);
  }
}

TEST_CASE("fnd gradients with random teacher weights") {
  RngStream rng(123, "fd.fnd");
  for (int it = 0; it < kFdInstances; ++it) {
    int n = dim(rng, 1, 5), m = dim(rng, 1, 6);
    double tau = rng.uniform(0.2, 2.0);
    auto signals = rand_tensor(rng, n, m, -2.0, 2.0);
    Instance inst;
    inst.inputs = {rand_tensor(rng, n, 1), rand_tensor(rng, n, m)};
    inst.build = [tau, signals](Tape<double>& t, const std::vector<DVar>& v) {
      return loss::fnd(t, v[0], v[1], signals, tau);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("fnd with unit weights is bitwise npair") {
  RngStream rng(124, "fnd.unit");
  for (int it = 0; it < 10; ++it) {
    int n = dim(rng, 1, 5), m = dim(rng, 1, 6);
    auto pos = rand_tensor(rng, n, 1);
    auto negs = rand_tensor(rng, n, m);
    auto ones = diff::full<double>(n, m, 1.0);

    Tape<double> ta;
    auto pa = ta.input(pos, true);
    auto na = ta.input(negs, true);
    auto la = loss::npair(ta, pa, na, 0.1);
    Tape<double> tb;
    auto pb = tb.input(pos, true);
    auto nb = tb.input(negs, true);
    auto lb = loss::fnd(tb, pb, nb, ones, 0.1);
    CHECK(ta.value(la).data[0] == tb.value(lb).data[0]);

    ta.backward(la);
    tb.backward(lb);
    CHECK(ta.grad(pa).data == tb.grad(pb).data);
    CHECK(ta.grad(na).data == tb.grad(nb).data);
  }
  // Same check at single precision, where any stray multiply would show.
  {
    RngStream r2(125, "fnd.unit.f32");
    diff::Tensor<float> pos(3, 1), negs(3, 4);
    auto ones = diff::full<float>(3, 4, 1.0f);
    for (auto& v : pos.data) v = static_cast<float>(r2.uniform(-1, 1));
    for (auto& v : negs.data) v = static_cast<float>(r2.uniform(-1, 1));
    Tape<float> ta;
    auto pa = ta.input(pos, true);
    auto na = ta.input(negs, true);
    auto la = loss::npair(ta, pa, na, 0.1f);
    Tape<float> tb;
    auto pb = tb.input(pos, true);
    auto nb = tb.input(negs, true);
    auto lb = loss::fnd(tb, pb, nb, ones, 0.1f);
    CHECK(ta.value(la).data[0] == tb.value(lb).data[0]);
    ta.backward(la);
    tb.backward(lb);
    CHECK(ta.grad(pa).data == tb.grad(pb).data);
    CHECK(ta.grad(na).data == tb.grad(nb).data);
  }
}

TEST_CASE("fnd gradient direction flips with the sign of the weight") {
  // A negative with weight w contributes p * w / tau to its own gradient:
  // pushed down when the teacher says it is a true negative (w > 0) and
  // pulled up when the teacher flags it as a false negative (w < 0).
  Tape<double> t;
  auto pos = t.input(diff::full<double>(1, 1, 0.2), true);
  diff::Tensor<double> negs(1, 2, {0.1, 0.3});
  diff::Tensor<double> sig(1, 2, {0.8, -0.6});
  auto nv = t.input(negs, true);
  auto l = loss::fnd(t, pos, nv, sig, 0.1);
  t.backward(l);
  const auto& g = t.grad(nv);
  CHECK(g.at(0, 0) > 0.0);
  CHECK(g.at(0, 1) < 0.0);
}

TEST_CASE("ntxent gradients and closed forms") {
  RngStream rng(126, "fd.ntxent");
  for (int it = 0; it < kFdInstances; ++it) {
    int n2 = 2 * dim(rng, 1, 4);
    double tau = rng.uniform(0.2, 2.0);
    auto sim = rand_tensor(rng, n2, n2);
    Instance inst;
    inst.inputs = {sim};
    inst.build = [tau](Tape<double>& t, const std::vector<DVar>& v) {
      return loss::ntxent_from_similarity(t, v[0], tau);
    };
    expect_grads_ok(inst);
  }
  // One pair: the partner is the only candidate, so the loss is exactly 0.
  {
    Tape<double> t;
    diff::Tensor<double> sim(2, 2, {1.0, 0.42, 0.42, 1.0});
    auto l = loss::ntxent_from_similarity(t, t.input(sim), 0.1);
    CHECK(t.value(l).data[0] == 0.0);
  }
  // All views identical: every candidate ties, leaving log(2N - 1).
  for (int n : {1, 2, 4, 8}) {
    Tape<double> t;
    auto sim = diff::full<double>(2 * n, 2 * n, 1.0);
    auto l = loss::ntxent_from_similarity(t, t.input(sim), 0.1);
    CHECK(std::abs(t.value(l).data[0] - std::log(double(2 * n - 1))) < 1e-10);
  }
}

TEST_CASE("cl gradients through normalization and similarity") {
  RngStream rng(127, "fd.cl");
  for (int it = 0; it < kFdInstances; ++it) {
    int n2 = 2 * dim(rng, 1, 3);
    int d = dim(rng, 2, 5);
    double tau = rng.uniform(0.2, 2.0);
    Instance inst;
    inst.inputs = {rand_tensor_away_from_zero(rng, n2, d, 0.3, 1.5)};
    inst.build = [tau](Tape<double>& t, const std::vector<DVar>& v) {
      return loss::cl(t, v[0], tau);
    };
    expect_grads_ok(inst);
  }
  // Identical views give the all-ties closed form through the full path.
  {
    RngStream r2(128, "fd.cl.ties");
    for (int n : {1, 2, 4}) {
      auto row = rand_tensor_away_from_zero(r2, 1, 5, 0.3, 1.5);
      diff::Tensor<double> views(2 * n, 5);
      for (int r = 0; r < 2 * n; ++r)
        for (int c = 0; c < 5; ++c) views.at(r, c) = row.at(0, c);
      Tape<double> t;
      auto l = loss::cl(t, t.input(views), 0.1);
      if (n == 1)
        CHECK(t.value(l).data[0] == 0.0);
      else
        CHECK(std::abs(t.value(l).data[0] - std::log(double(2 * n - 1))) < 1e-10);
    }
  }
  // Rotating every view by one orthogonal matrix leaves the loss alone.
  {
    RngStream r2(129, "fd.cl.rot");
    int d = 4, n2 = 6;
    auto views = rand_tensor_away_from_zero(r2, n2, d, 0.3, 1.5);
    // Gram-Schmidt on a random matrix gives the rotation.
    auto q = rand_tensor(r2, d, d);
    for (int c = 0; c < d; ++c) {
      for (int prev = 0; prev < c; ++prev) {
        double dot = 0;
        for (int r = 0; r < d; ++r) dot += q.at(r, c) * q.at(r, prev);
        for (int r = 0; r < d; ++r) q.at(r, c) -= dot * q.at(r, prev);
      }
      double nrm = 0;
      for (int r = 0; r < d; ++r) nrm += q.at(r, c) * q.at(r, c);
      nrm = std::sqrt(nrm);
      for (int r = 0; r < d; ++r) q.at(r, c) /= nrm;
    }
    diff::Tensor<double> rotated(n2, d);
    for (int r = 0; r < n2; ++r)
      for (int c = 0; c < d; ++c) {
        double acc = 0;
        for (int j = 0; j < d; ++j) acc += views.at(r, j) * q.at(j, c);
        rotated.at(r, c) = acc;
      }
    Tape<double> ta, tb;
    auto la = loss::cl(ta, ta.input(views), 0.1);
    auto lb = loss::cl(tb, tb.input(rotated), 0.1);
    CHECK(std::abs(ta.value(la).data[0] - tb.value(lb).data[0]) < 1e-6);
  }
}

TEST_CASE("fnd_cl gradients of the combined objective") {
  RngStream rng(130, "fd.fndcl");
  for (int it = 0; it < kFdInstances; ++it) {
    int n = dim(rng, 1, 3), m = dim(rng, 1, 4);
    int d = dim(rng, 2, 4);
    double tau = rng.uniform(0.2, 2.0);
    double lambda = rng.uniform(0.0, 1.0);
    auto signals = rand_tensor(rng, n, m, -2.0, 2.0);
    Instance inst;
    inst.inputs = {rand_tensor(rng, n, 1), rand_tensor(rng, n, m),
                   rand_tensor_away_from_zero(rng, 2 * n, d, 0.3, 1.5)};
    inst.build = [tau, lambda, signals](Tape<double>& t, const std::vector<DVar>& v) {
      auto f = loss::fnd(t, v[0], v[1], signals, tau);
      auto c = loss::cl(t, v[2], tau);
      return loss::fnd_cl(t, f, c, lambda);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("end-to-end encoder scoring gradients") {
  model::ModelConfig cfg;
  cfg.d_in = 3;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.sab_count = 2;
  cfg.user_count = 3;
  cfg.tier = model::Tier::xs;

  RngStream rng(131, "fd.encoder");
  std::vector<std::vector<int>> size_sets = {{3}, {2, 4}, {1, 3, 2}};
  for (const auto& sizes : size_sets) {
    auto params = model::init_model<double>(cfg, rng);
    int total = 0;
    for (int s : sizes) total += s;
    auto feats = rand_tensor(rng, total, cfg.d_in);
    std::vector<int> users;
    for (std::size_t i = 0; i < sizes.size(); ++i)
      users.push_back(static_cast<int>(i) % cfg.user_count);

    Instance inst;
    model::for_each_param(params, [&](const std::string&, diff::Tensor<double>& t) {
      inst.inputs.push_back(t);
    });
    auto w = rand_tensor_away_from_zero(rng, static_cast<int>(sizes.size()), 1, 0.5, 1.5);
    inst.build = [&params, feats, sizes, users, w](Tape<double>& t,
                                                   const std::vector<DVar>& v) {
      model::BoundModel<double> bm;
      bm.config = params.config;
      std::size_t i = 0;
      model::for_each_param(params, [&](const std::string& name, diff::Tensor<double>&) {
        bm.named.emplace_back(name, v[i]);
        bm.ordered.push_back(v[i]);
        ++i;
      });
      auto reps = model::encode_outfits(t, bm, t.input(feats), sizes);
      auto scores = model::score_outfit_rows(t, bm, reps, users);
      return reduce_with(t, scores, w);
    };
    expect_grads_ok(inst);
  }
}

TEST_CASE("end-to-end training objective gradients") {
  model::ModelConfig cfg;
  cfg.d_in = 3;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.sab_count = 1;
  cfg.user_count = 2;
  cfg.tier = model::Tier::xs;

  RngStream rng(132, "fd.fullstep");
  auto params = model::init_model<double>(cfg, rng);
  // Two pairs, two negatives each, two views per pair: the whole training
  // graph at miniature scale.
  std::vector<int> sizes = {2, 3, 2, 2, 3, 2, 2, 2, 3, 2};
  int total = 0;
  for (int s : sizes) total += s;
  auto feats = rand_tensor(rng, total, cfg.d_in);
  auto signals = rand_tensor(rng, 2, 2, -1.5, 1.5);

  Instance inst;
  model::for_each_param(params, [&](const std::string&, diff::Tensor<double>& t) {
    inst.inputs.push_back(t);
  });
  inst.build = [&params, feats, sizes, signals](Tape<double>& t, const std::vector<DVar>& v) {
    model::BoundModel<double> bm;
    bm.config = params.config;
    std::size_t i = 0;
    model::for_each_param(params, [&](const std::string& name, diff::Tensor<double>&) {
      bm.named.emplace_back(name, v[i]);
      bm.ordered.push_back(v[i]);
      ++i;
    });
    auto reps = model::encode_outfits(t, bm, t.input(feats), sizes);
    auto pos_reps = diff::slice_rows(t, reps, 0, 2);
    auto neg_reps = diff::slice_rows(t, reps, 2, 4);
    auto view_reps = diff::slice_rows(t, reps, 6, 4);
    auto pos_scores = model::score_outfit_rows(t, bm, pos_reps, {0, 1});
    auto neg_scores = model::score_outfit_rows(t, bm, neg_reps, {0, 0, 1, 1});
    auto negs = diff::reshape(t, neg_scores, 2, 2);
    auto f = loss::fnd(t, pos_scores, negs, signals, 0.1);
    auto c = loss::cl(t, model::project_views(t, bm, view_reps), 0.1);
    return loss::fnd_cl(t, f, c, 0.2);
  };
  expect_grads_ok(inst);
}

TEST_CASE("tape mechanics") {
  SUBCASE("a variable used twice accumulates both contributions") {
    Tape<double> t;
    auto x = t.input(diff::full<double>(2, 2, 3.0), true);
    auto y = diff::add(t, x, x);
    auto l = diff::mean_all(t, y);
    t.backward(l);
    for (double g : t.grad(x).data) CHECK(g == doctest::Approx(2.0 / 4.0));
  }
  SUBCASE("constant-only graphs record no backward nodes") {
    Tape<double> t;
    auto a = t.input(diff::full<double>(3, 3, 1.0));
    auto b = t.input(diff::full<double>(3, 3, 2.0));
    auto c = diff::matmul(t, diff::add(t, a, b), b);
    (void)c;
    CHECK(t.node_count() == 0);
  }
  SUBCASE("backward twice is rejected") {
    Tape<double> t;
    auto x = t.input(diff::full<double>(1, 1, 1.0), true);
    auto l = diff::mean_all(t, x);
    t.backward(l);
    CHECK_THROWS_AS(t.backward(l), ConfigError);
  }
  SUBCASE("backward needs a scalar") {
    Tape<double> t;
    auto x = t.input(diff::full<double>(2, 1, 1.0), true);
    CHECK_THROWS_AS(t.backward(x), DimensionError);
  }
  SUBCASE("shape mismatches are rejected") {
    Tape<double> t;
    auto a = t.input(diff::zeros<double>(2, 3));
    auto b = t.input(diff::zeros<double>(3, 2));
    CHECK_THROWS_AS(diff::add(t, a, b), DimensionError);
    CHECK_THROWS_AS(diff::matmul(t, a, a), DimensionError);
  }
  SUBCASE("normalize_rows rejects a near-zero row") {
    Tape<double> t;
    auto x = t.input(diff::full<double>(1, 3, 1e-9));
    CHECK_THROWS_AS(diff::normalize_rows(t, x), NumericError);
  }
  SUBCASE("gradients of unrelated branches stay zero") {
    Tape<double> t;
    auto x = t.input(diff::full<double>(1, 2, 1.0), true);
    auto y = t.input(diff::full<double>(1, 2, 1.0), true);
    auto used = diff::mean_all(t, x);
    auto unused = diff::relu(t, y);
    (void)unused;
    t.backward(used);
    for (double g : t.grad(y).data) CHECK(g == 0.0);
  }
}

TEST_CASE("sgd with momentum") {
  SUBCASE("two hand-computed steps") {
    diff::Tensor<double> p(1, 1, {1.0});
    diff::Tensor<double> v;
    diff::Tensor<double> g(1, 1, {0.5});
    diff::sgd_momentum_step(p, v, g, 0.1, 0.9);
    CHECK(p.data[0] == doctest::Approx(0.95));
    CHECK(v.data[0] == doctest::Approx(0.5));
    diff::sgd_momentum_step(p, v, g, 0.1, 0.9);
    CHECK(v.data[0] == doctest::Approx(0.95));
    CHECK(p.data[0] == doctest::Approx(0.855));
  }
  SUBCASE("non-finite gradients raise divergence") {
    diff::Tensor<double> p(1, 2, {1.0, 1.0});
    diff::Tensor<double> v;
    diff::Tensor<double> g(1, 2, {0.1, std::numeric_limits<double>::quiet_NaN()});
    CHECK_THROWS_AS(diff::sgd_momentum_step(p, v, g, 0.1, 0.9), DivergenceError);
  }
  SUBCASE("shape mismatch is rejected") {
    diff::Tensor<double> p(1, 2);
    diff::Tensor<double> v;
    diff::Tensor<double> g(2, 1);
    CHECK_THROWS_AS(diff::sgd_momentum_step(p, v, g, 0.1, 0.9), DimensionError);
  }
}
