#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pbt/autodiff.hpp"
#include "pbt/matrix.hpp"
#include "pbt/rng.hpp"

namespace testutil {

inline pbt::Mat rand_mat(pbt::Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
  pbt::Mat m(rows, cols);
  for (double& v : m.a) v = rng.uniform(lo, hi);
  return m;
}

inline double rel_err(double got, double want, double floor = 1e-5) {
  double denom = std::max({std::fabs(got), std::fabs(want), floor});
  return std::fabs(got - want) / denom;
}

// Central finite differences over every element of every listed parameter.
// `build` must construct a fresh graph ending in a 1x1 scalar node that reads
// the listed Mats through Graph::param. Returns the worst relative error.
struct FdReport {
  double max_rel_err = 0;
  std::string worst_param;
  size_t checked = 0;
};

inline FdReport fd_check(const std::function<int(pbt::Graph&)>& build,
                         const std::vector<std::pair<std::string, pbt::Mat*>>& params,
                         double h = 1e-5) {
  pbt::Graph g;
  int loss = build(g);
  g.backward(loss);

  std::vector<pbt::Mat> grads;
  grads.reserve(params.size());
  for (const auto& [name, p] : params)
    grads.push_back(g.has_param(*p) ? g.grad_of(*p) : pbt::Mat(p->rows, p->cols));

  auto value = [&]() {
    pbt::Graph g2;
    return g2.val(build(g2))(0, 0);
  };

  FdReport rep;
  for (size_t k = 0; k < params.size(); ++k) {
    pbt::Mat* p = params[k].second;
    for (size_t i = 0; i < p->a.size(); ++i) {
      double saved = p->a[i];
      p->a[i] = saved + h;
      double f1 = value();
      p->a[i] = saved - h;
      double f0 = value();
      p->a[i] = saved;
      double fd = (f1 - f0) / (2.0 * h);
      double err = rel_err(fd, grads[k].a[i]);
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = params[k].first;
      }
      rep.checked += 1;
    }
  }
  return rep;
}

// Fresh unique directory under the system temp root; removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    static uint64_t counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("pbt_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }

  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }

  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

}  // namespace testutil
