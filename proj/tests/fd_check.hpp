#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "kvlab/policy.hpp"
#include "kvlab/rng.hpp"

// Central finite differences against an analytic gradient on randomly chosen
// coordinates. Independent of every gradient implementation it checks: the
// loss callback is evaluated on perturbed copies of the parameter vector.
namespace fd {

struct Report {
  double max_rel_err = 0.0;
  int checked = 0;
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

inline Report check_gradient(const kvlab::PolicyParams& params,
                             const std::function<double(const kvlab::PolicyParams&)>& loss_fn,
                             const std::vector<double>& grad, int n_coords, uint64_t seed,
                             double h = 1e-5) {
  Report rep;
  kvlab::Rng rng(seed);
  kvlab::PolicyParams probe = params;
  for (int i = 0; i < n_coords; ++i) {
    const size_t c = static_cast<size_t>(rng.below(params.values.size()));
    const double saved = probe.values[c];
    probe.values[c] = saved + h;
    const double up = loss_fn(probe);
    probe.values[c] = saved - h;
    const double down = loss_fn(probe);
    probe.values[c] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = grad[c];
    if (std::abs(numeric) < 1e-9 && std::abs(analytic) < 1e-9) {
      ++rep.checked;
      continue;  // inactive coordinate, both sides vanish
    }
    const double r = rel_err(analytic, numeric);
    if (r > rep.max_rel_err) rep.max_rel_err = r;
    ++rep.checked;
  }
  return rep;
}

}  // namespace fd
