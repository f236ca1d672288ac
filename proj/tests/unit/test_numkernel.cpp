#include <cmath>
#include <limits>
#include <numeric>

#include "attnprof/errors.hpp"
#include "attnprof/numkernel/counters.hpp"
#include "attnprof/numkernel/kernels.hpp"
#include "attnprof/numkernel/memory.hpp"
#include "attnprof/numkernel/parallel.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace attnprof;
using namespace attnprof::nk;
using testutil::random_tensor;
using testutil::ref_matmul;
using testutil::to_double;

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

std::vector<double> ref_conv1d(const std::vector<double>& x, std::int64_t c_in, std::int64_t len,
                               const std::vector<double>& w, std::int64_t c_out, std::int64_t k,
                               const Conv1dParams& p, std::int64_t* out_len) {
  const std::int64_t cin_g = c_in / p.groups, cout_g = c_out / p.groups;
  const std::int64_t t_out = (len + 2 * p.padding - k) / p.stride + 1;
  *out_len = t_out;
  std::vector<double> y(static_cast<std::size_t>(c_out * t_out), 0.0);
  for (std::int64_t co = 0; co < c_out; ++co) {
    const std::int64_t grp = co / cout_g;
    for (std::int64_t t = 0; t < t_out; ++t) {
      double s = 0.0;
      for (std::int64_t ci = 0; ci < cin_g; ++ci)
        for (std::int64_t kk = 0; kk < k; ++kk) {
          const std::int64_t src = t * p.stride + kk - p.padding;
          if (src < 0 || src >= len) continue;
          s += w[(co * cin_g + ci) * k + kk] * x[(grp * cin_g + ci) * len + src];
        }
      y[co * t_out + t] = s;
    }
  }
  return y;
}

}  // namespace

TEST_CASE("gemm variants agree with a naive double reference on ragged shapes") {
  for (auto [m, k, n] : {std::tuple{13, 7, 70}, std::tuple{6, 64, 64}, std::tuple{1, 1, 1}, std::tuple{29, 33, 130}}) {
    Tensor a = random_tensor({m, k}, 1);
    Tensor b = random_tensor({k, n}, 2);
    auto ref = ref_matmul(to_double(a), to_double(b), m, k, n);
    Tensor c = matmul(a, b);
    CHECK(testutil::max_abs_diff(c, ref) < 1e-4);

    Tensor bt = transpose(b);
    Tensor c2 = Tensor::zeros({m, n});
    gemm_nt(a.matrix(), bt.matrix(), c2.matrix());
    CHECK(testutil::max_abs_diff(c2, ref) < 1e-4);

    Tensor at = transpose(a);
    Tensor c3 = Tensor::full({m, n}, 1.f);
    gemm_tn(at.matrix(), b.matrix(), c3.matrix(), 2.f, 0.5f);
    std::vector<double> expect(ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) expect[i] = 2.0 * ref[i] + 0.5;
    CHECK(testutil::max_abs_diff(c3, expect) < 1e-4);
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DimensionError);
}

TEST_CASE("thread count does not change gemm results") {
  Tensor a = random_tensor({50, 40}, 3);
  Tensor b = random_tensor({40, 90}, 4);
  set_thread_count(1);
  Tensor c1 = matmul(a, b);
  set_thread_count(3);
  Tensor c3 = matmul(a, b);
  set_thread_count(1);
  CHECK(testutil::max_abs_diff(c1, c3) == 0.0);
}

TEST_CASE("op counting attributes MACs and elementwise work to the active tag") {
  CountingScope counting;
  {
    ScopedTag tag({TagKind::Intermediate, 2});
    (void)matmul(Tensor::zeros({3, 4}), Tensor::zeros({4, 5}));
  }
  {
    ScopedTag tag({TagKind::SelfAttention, 0});
    (void)softmax_rows(Tensor::zeros({2, 7}));
  }
  (void)gelu(Tensor::zeros({10}));
  const auto& t = counting.per_tag();
  CHECK(t.at({TagKind::Intermediate, 2}).macs == 60);
  CHECK(t.at({TagKind::SelfAttention, 0}).elementwise == 14 * kElementwiseOpsPerElement);
  CHECK(t.at({TagKind::Other, 0}).elementwise == 50);
  CHECK(counting.total().macs == 60);
}

TEST_CASE("no counts are kept without a live CountingScope") {
  (void)matmul(Tensor::zeros({3, 4}), Tensor::zeros({4, 5}));
  CountingScope counting;
  CHECK(counting.total().macs == 0);
}

TEST_CASE("softmax rows sum to one, survive large logits and zero out fully masked rows") {
  const float inf = std::numeric_limits<float>::infinity();
  Tensor x = Tensor::from_values({3, 3}, {1.f, 2.f, 3.f, 1000.f, 1001.f, -inf, -inf, -inf, -inf});
  Tensor p = softmax_rows(x);
  auto r0 = testutil::ref_softmax_row({1, 2, 3});
  for (int j = 0; j < 3; ++j) CHECK(p.at(0, j) == doctest::Approx(r0[j]).epsilon(1e-6));
  CHECK(p.at(1, 0) + p.at(1, 1) == doctest::Approx(1.0));
  CHECK(p.at(1, 2) == 0.f);
  CHECK(std::isfinite(p.at(1, 1)));
  for (int j = 0; j < 3; ++j) CHECK(p.at(2, j) == 0.f);
}

TEST_CASE("softmax backward matches finite differences") {
  Tensor x = random_tensor({4, 9}, 5);
  Tensor g = random_tensor({4, 9}, 6);
  Tensor p = softmax_rows(x);
  Tensor gx = softmax_rows_backward(p, g);
  const float eps = 1e-2f;
  for (std::int64_t i = 0; i < x.numel(); i += 5) {
    Tensor xp(x), xm(x);
    xp[i] += eps;
    xm[i] -= eps;
    const double fd = (dot(softmax_rows(xp), g) - dot(softmax_rows(xm), g)) / (2 * eps);
    CHECK(gx[i] == doctest::Approx(fd).epsilon(2e-3).scale(1.0));
  }
}

TEST_CASE("layernorm normalises rows and its backward matches finite differences") {
  Tensor x = random_tensor({5, 8}, 7, 3.f);
  std::vector<float> gamma(8), beta(8);
  for (int i = 0; i < 8; ++i) {
    gamma[i] = 0.5f + 0.1f * i;
    beta[i] = 0.05f * i;
  }
  NormStats stats;
  Tensor y = layernorm(x, gamma, beta, 1e-5f, &stats);
  for (int r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (int c = 0; c < 8; ++c) mean += x.at(r, c);
    mean /= 8;
    for (int c = 0; c < 8; ++c) var += (x.at(r, c) - mean) * (x.at(r, c) - mean);
    var /= 8;
    for (int c = 0; c < 8; ++c) {
      const double expect = (x.at(r, c) - mean) / std::sqrt(var + 1e-5) * gamma[c] + beta[c];
      CHECK(y.at(r, c) == doctest::Approx(expect).epsilon(1e-5).scale(1.0));
    }
  }
  Tensor g = random_tensor({5, 8}, 8);
  NormGrads grads = layernorm_backward(x, stats, gamma, g);
  const float eps = 1e-2f;
  for (std::int64_t i = 0; i < x.numel(); i += 3) {
    Tensor xp(x), xm(x);
    xp[i] += eps;
    xm[i] -= eps;
    const double fd = (dot(layernorm(xp, gamma, beta, 1e-5f), g) - dot(layernorm(xm, gamma, beta, 1e-5f), g)) / (2 * eps);
    CHECK(grads.grad_x[i] == doctest::Approx(fd).epsilon(5e-3).scale(1.0));
  }
  double gb0 = 0;
  for (int r = 0; r < 5; ++r) gb0 += g.at(r, 0);
  CHECK(grads.grad_beta[0] == doctest::Approx(gb0).epsilon(1e-5));
}

TEST_CASE("channel norm normalises each row over time with per-row affine") {
  Tensor x = random_tensor({3, 20}, 9, 2.f);
  std::vector<float> gamma{1.f, 2.f, 3.f}, beta{0.f, 1.f, -1.f};
  Tensor y = channel_norm(x, gamma, beta, 1e-5f);
  for (int r = 0; r < 3; ++r) {
    double mean = 0;
    for (int c = 0; c < 20; ++c) mean += y.at(r, c);
    CHECK(mean / 20 == doctest::Approx(beta[r]).epsilon(1e-4).scale(1.0));
  }
}

TEST_CASE("gelu and tanh take known values") {
  Tensor x = Tensor::from_values({3}, {-1.f, 0.f, 1.f});
  Tensor y = gelu(x);
  CHECK(y[0] == doctest::Approx(-0.158655254).epsilon(1e-6));
  CHECK(y[1] == 0.f);
  CHECK(y[2] == doctest::Approx(0.841344746).epsilon(1e-6));
  Tensor t = tanh_act(x);
  CHECK(t[2] == doctest::Approx(std::tanh(1.0)).epsilon(1e-6));
  Tensor g = gelu_backward(x, Tensor::full({3}, 1.f));
  CHECK(g[1] == doctest::Approx(0.5));
  CHECK(g[2] == doctest::Approx(1.0833154705876864).epsilon(1e-6));
}

TEST_CASE("conv1d matches a direct reference for strides, padding and groups") {
  struct Case {
    std::int64_t c_in, c_out, len, k;
    Conv1dParams p;
  };
  for (const Case& cs : {Case{1, 4, 40, 10, {5, 0, 1}}, Case{4, 6, 23, 3, {2, 0, 1}}, Case{8, 8, 17, 6, {1, 3, 4}},
                         Case{3, 3, 9, 2, {2, 0, 1}}}) {
    Tensor x = random_tensor({cs.c_in, cs.len}, 10);
    Tensor w = random_tensor({cs.c_out, cs.c_in / cs.p.groups, cs.k}, 11);
    std::int64_t t_out = 0;
    auto ref = ref_conv1d(to_double(x), cs.c_in, cs.len, to_double(w), cs.c_out, cs.k, cs.p, &t_out);
    CountingScope counting;
    Tensor y = conv1d(x, w, {}, cs.p);
    REQUIRE(y.dim(1) == t_out);
    CHECK(y.dim(1) == conv1d_output_length(cs.len, cs.k, cs.p));
    CHECK(testutil::max_abs_diff(y, ref) < 1e-4);
    CHECK(counting.total().macs == cs.c_out * t_out * (cs.c_in / cs.p.groups) * cs.k);

    // conv is bilinear, so the adjoint identities are exact oracles for the backward pass.
    Tensor g = random_tensor(y.shape(), 12);
    Conv1dGrads grads = conv1d_backward(x, w, g, cs.p, true);
    CHECK(dot(grads.grad_x, x) == doctest::Approx(dot(y, g)).epsilon(1e-4));
    CHECK(dot(grads.grad_weight, w) == doctest::Approx(dot(y, g)).epsilon(1e-4));
    double gsum = 0;
    for (std::int64_t t = 0; t < t_out; ++t) gsum += g.at(0, t);
    CHECK(grads.grad_bias[0] == doctest::Approx(gsum).epsilon(1e-4));
  }
}

TEST_CASE("conv1d rejects inputs shorter than the kernel") {
  CHECK_THROWS_AS(conv1d(Tensor::zeros({1, 5}), Tensor::zeros({2, 1, 10}), {}, {5, 0, 1}), TooShortError);
  CHECK_THROWS_AS(conv1d(Tensor::zeros({3, 5}), Tensor::zeros({2, 2, 1}), {}, {1, 0, 1}), DimensionError);
}

TEST_CASE("embedding lookup gathers rows and backward scatter-adds") {
  Tensor table = Tensor::from_values({3, 2}, {0, 1, 10, 11, 20, 21});
  std::vector<std::int32_t> ids{2, 0, 2};
  Tensor e = embedding_lookup(table, ids);
  CHECK(e.at(0, 1) == 21.f);
  CHECK(e.at(1, 0) == 0.f);
  Tensor grad = Tensor::zeros({3, 2});
  embedding_backward(Tensor::full({3, 2}, 1.f), ids, grad);
  CHECK(grad.at(2, 0) == 2.f);
  CHECK(grad.at(1, 0) == 0.f);
  std::vector<std::int32_t> bad{3};
  CHECK_THROWS_AS(embedding_lookup(table, bad), DimensionError);
}

TEST_CASE("patchify lays out patches row-major and round-trips through its backward") {
  Tensor img = Tensor::uninitialized({4, 6, 2});
  std::iota(img.values().begin(), img.values().end(), 0.f);
  Tensor p = patchify(img, 2);
  CHECK(p.dim(0) == 6);
  CHECK(p.dim(1) == 8);
  // patch (0,1): pixels (0,2),(0,3),(1,2),(1,3)
  CHECK(p.at(1, 0) == img[(0 * 6 + 2) * 2]);
  CHECK(p.at(1, 4) == img[(1 * 6 + 2) * 2]);
  Tensor back = patchify_backward(p, img.shape(), 2);
  CHECK(testutil::max_abs_diff(back, img) == 0.0);
  CHECK_THROWS_AS(patchify(img, 4), DimensionError);
}

TEST_CASE("memory accountant tracks live bytes, peaks and per-tag attribution") {
  auto& acc = accountant();
  MemoryScope scope;
  const std::size_t before = acc.current_bytes();
  {
    ScopedTag tag({TagKind::SelfAttention, 1});
    Tensor a = Tensor::zeros({256});
    CHECK(acc.current_bytes() == before + 1024);
    CHECK(a.tag() == LayerTag{TagKind::SelfAttention, 1});
    {
      Tensor b = Tensor::zeros({512});
      CHECK(scope.peak_delta_bytes() == 3072);
    }
    Tensor moved = std::move(a);
    CHECK(acc.current_bytes() == before + 1024);
  }
  CHECK(acc.current_bytes() == before);
  CHECK(scope.peak_delta_bytes() == 3072);
  CHECK(scope.per_tag_peak().at({TagKind::SelfAttention, 1}) >= 3072);
  CHECK(acc.peak_bytes() >= acc.current_bytes());
}

TEST_CASE("a budget turns oversized allocations into OutOfBudgetError without leaking") {
  auto& acc = accountant();
  const std::size_t before = acc.current_bytes();
  {
    ScopedBudget budget(before + 4096);
    Tensor ok = Tensor::zeros({512});
    CHECK_THROWS_AS(Tensor::zeros({1024}), OutOfBudgetError);
    CHECK(acc.current_bytes() == before + 2048);
  }
  CHECK(acc.current_bytes() == before);
  CHECK_FALSE(acc.budget().has_value());
}

TEST_CASE("tensor reshape keeps storage and validates element count") {
  Tensor t = Tensor::full({2, 6}, 3.f);
  const float* p = t.data();
  Tensor r = std::move(t).reshaped({3, 4});
  CHECK(r.data() == p);
  CHECK(r.dim(1) == 4);
  CHECK_THROWS(Tensor::full({2, 6}, 1.f).reshaped({5, 2}));
}
