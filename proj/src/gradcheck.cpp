#include "fusionformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fusionformer/error.hpp"
#include "fusionformer/rng.hpp"

namespace ff {

namespace {

double eval(const std::function<Tensor()>& loss) {
  NoGradGuard guard;
  return loss().item();
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad, double lo = -1.0,
                     double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Weighted sum so every output coordinate has a distinct upstream gradient.
Tensor probe(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss,
                                  const std::vector<NamedTensor>& leaves, double h) {
  std::vector<Tensor> xs;
  for (const auto& [name, t] : leaves) {
    if (!t.requires_grad()) throw Error("finite_diff_check: leaf '" + name + "' has no gradient");
    xs.push_back(t);
  }
  for (auto& x : xs) x.zero_grad();

  Tensor y = loss();
  const double again = eval(loss);
  if (!same_bits(y.item(), again)) {
    throw NumericError("finite_diff_check: loss is not deterministic");
  }
  y.backward();

  GradCheckResult res;
  for (std::size_t li = 0; li < xs.size(); ++li) {
    Tensor& x = xs[li];
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto d = x.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double orig = d[i];
      d[i] = orig + h;
      const double fp = eval(loss);
      d[i] = orig - h;
      const double fm = eval(loss);
      d[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
      ++res.coordinates;
      if (res.worst.empty() || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = leaves[li].first;
        res.worst_index = i;
        res.analytic = analytic[i];
        res.numeric = fd;
      }
    }
  }
  return res;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h) {
  return finite_diff_check([&] { return f(x); }, {{"x", x}}, h).max_rel_error;
}

std::vector<GradCheckResult> check_primitive_ops(std::uint64_t seed, double h) {
  Rng rng(seed);
  std::vector<GradCheckResult> out;
  auto run = [&](const char* name, const std::function<Tensor()>& loss,
                 std::vector<NamedTensor> leaves) {
    GradCheckResult r = finite_diff_check(loss, leaves, h);
    r.worst = name;
    out.push_back(std::move(r));
  };

  {
    auto a = random_tensor(rng, {2, 3, 4}, true);
    auto b = random_tensor(rng, {3, 4}, true);
    auto w = random_tensor(rng, {2, 3, 4}, false);
    run("add", [=] { return probe(add(a, b), w); }, {{"a", a}, {"b", b}});
    run("sub", [=] { return probe(sub(a, b), w); }, {{"a", a}, {"b", b}});
    run("mul", [=] { return probe(mul(a, b), w); }, {{"a", a}, {"b", b}});
    run("scale", [=] { return probe(scale(a, -1.7), w); }, {{"a", a}});
    run("gelu", [=] { return probe(gelu(scale(a, 2.0)), w); }, {{"a", a}});
    run("sum", [=] { return mul(sum(a), sum(a)); }, {{"a", a}});
    run("mean", [=] { return mul(mean(a), mean(a)); }, {{"a", a}});
    auto pos = random_tensor(rng, {2, 3, 4}, true, 0.5, 2.0);
    run("sqrt", [=] { return probe(sqrt(pos), w); }, {{"x", pos}});
    auto w2 = random_tensor(rng, {2, 3}, false);
    run("l2_norm", [=] { return probe(l2_norm_lastaxis(a), w2); }, {{"a", a}});
  }
  {
    auto a = random_tensor(rng, {2, 3, 4}, true);
    auto b = random_tensor(rng, {2, 4, 5}, true);
    auto shared = random_tensor(rng, {4, 2}, true);
    auto w = random_tensor(rng, {2, 3, 5}, false);
    auto w2 = random_tensor(rng, {2, 3, 2}, false);
    run("matmul",
        [=] { return add(probe(matmul(a, b), w), probe(matmul(a, shared), w2)); },
        {{"a", a}, {"b", b}, {"b_shared", shared}});
  }
  {
    auto x = random_tensor(rng, {3, 4, 5}, true, -3.0, 3.0);
    auto w = random_tensor(rng, {3, 4, 5}, false);
    run("softmax", [=] { return add(probe(softmax(x, 2), w), probe(softmax(x, 1), w)); },
        {{"x", x}});
    auto g = random_tensor(rng, {5}, true, 0.5, 1.5);
    auto b = random_tensor(rng, {5}, true);
    run("layer_norm", [=] { return probe(layer_norm(x, g, b), w); },
        {{"x", x}, {"gamma", g}, {"beta", b}});
    auto wp = random_tensor(rng, {5, 3, 4}, false);
    run("permute", [=] { return probe(permute(x, {2, 0, 1}), wp); }, {{"x", x}});
    auto wr = random_tensor(rng, {12, 5}, false);
    run("reshape", [=] { return probe(reshape(x, {12, 5}), wr); }, {{"x", x}});
    auto y = random_tensor(rng, {3, 2, 5}, true);
    auto wc = random_tensor(rng, {3, 6, 5}, false);
    run("concat", [=] { return probe(concat({x, y}, 1), wc); }, {{"x", x}, {"y", y}});
    auto ws = random_tensor(rng, {3, 2, 5}, false);
    run("slice", [=] { return probe(slice(x, 1, 1, 2), ws); }, {{"x", x}});
  }
  {
    auto x = random_tensor(rng, {6, 4}, true);
    auto wt = random_tensor(rng, {3, 6}, true);
    auto b = random_tensor(rng, {3}, true);
    auto w = random_tensor(rng, {3, 4}, false);
    run("framewise_conv1d", [=] { return probe(framewise_conv1d(x, wt, b), w); },
        {{"x", x}, {"weight", wt}, {"bias", b}});
  }
  return out;
}

}  // namespace ff
