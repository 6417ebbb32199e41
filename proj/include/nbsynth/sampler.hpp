#pragma once

// Blocked adaptive random-walk Metropolis, multi-chain runs, convergence
// diagnostics and posterior summaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "nbsynth/target.hpp"

namespace nbsynth {

class sampler_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  std::size_t n_chains = 4;
  std::size_t n_iterations = 200000;
  double burn_in_fraction = 0.5;
  std::size_t thinning = 20;
  std::vector<std::uint64_t> seeds;  // one per chain; derived from master_seed if empty
  std::uint64_t master_seed = 1;
  bool parallel = true;
};

struct BlockStats {
  std::string name;
  std::size_t burn_in_proposed = 0;
  std::size_t burn_in_accepted = 0;
  std::size_t proposed = 0;  // after burn-in
  std::size_t accepted = 0;

  double acceptance() const {
    return proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
  }
};

/// Proposal scale of every block: log step size and the lower-triangular
/// factor of the proposal covariance (identity for shift/scale moves).
struct ScaleSnapshot {
  std::vector<double> log_scale;
  std::vector<Eigen::MatrixXd> chol;

  bool operator==(const ScaleSnapshot& o) const {
    if (log_scale != o.log_scale || chol.size() != o.chol.size()) return false;
    for (std::size_t i = 0; i < chol.size(); ++i) {
      if (chol[i].rows() != o.chol[i].rows() || chol[i] != o.chol[i]) return false;
    }
    return true;
  }
};

struct ChainDiagnostics {
  std::vector<BlockStats> blocks;
  ScaleSnapshot after_burn_in;
  ScaleSnapshot at_end;
};

struct ChainSet {
  std::vector<Eigen::MatrixXd> chains;  // retained draws x parameters
  std::vector<std::uint64_t> seeds;
  double burn_in_fraction = 0.5;
  std::size_t thinning = 1;
  std::size_t n_iterations = 0;
  std::size_t burn_in = 0;
  std::vector<std::string> param_names;
  std::vector<std::size_t> retained_iterations;  // shared by all chains
  std::vector<ChainDiagnostics> diagnostics;

  std::size_t n_params() const { return param_names.size(); }
  std::size_t draws_per_chain() const { return chains.empty() ? 0 : chains.front().rows(); }

  std::size_t index_of(const std::string& name) const {
    const auto it = std::find(param_names.begin(), param_names.end(), name);
    if (it == param_names.end()) throw std::out_of_range("unknown parameter " + name);
    return static_cast<std::size_t>(it - param_names.begin());
  }

  /// Draws of one parameter from every chain, concatenated in chain order.
  std::vector<double> pooled(std::size_t col) const {
    std::vector<double> out;
    for (const auto& c : chains) {
      for (Eigen::Index r = 0; r < c.rows(); ++r) out.push_back(c(r, static_cast<Eigen::Index>(col)));
    }
    return out;
  }
};

namespace detail {

struct BlockAdaptation {
  std::size_t dim = 1;
  double target_rate = 0.44;
  double log_scale = 0.0;
  Eigen::MatrixXd chol;
  // Welford accumulators for the empirical covariance
  std::size_t count = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd m2;

  explicit BlockAdaptation(std::size_t d, bool covariance)
      : dim(d),
        target_rate(d > 1 ? 0.234 : 0.44),
        log_scale(std::log(2.38 / std::sqrt(static_cast<double>(d)))),
        chol(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)) *
             (covariance ? 0.1 : 1.0)),
        mean(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d))),
        m2(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d))) {
    if (!covariance) log_scale = std::log(0.1);
  }

  void observe(const Eigen::VectorXd& v) {
    ++count;
    const Eigen::VectorXd delta = v - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (v - mean).transpose();
  }

  void reset_moments() {
    count = 0;
    mean.setZero();
    m2.setZero();
  }

  void refresh_chol() {
    if (count < std::max<std::size_t>(50, 10 * dim)) return;
    Eigen::MatrixXd cov = m2 / static_cast<double>(count - 1);
    const double ridge = 1e-10 + 1e-8 * cov.diagonal().maxCoeff();
    cov.diagonal().array() += ridge;
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success) chol = llt.matrixL();
  }
};

template <BlockTarget Target>
class ChainRunner {
 public:
  ChainRunner(const Target& target, const RunOptions& opt, std::size_t chain, std::uint64_t seed)
      : target_(target), opt_(opt), chain_(chain), rng_(seed), blocks_(target.blocks()) {
    for (const Block& b : blocks_) {
      adapt_.emplace_back(b.proposal_dim(), b.kind == MoveKind::random_walk);
      stats_.push_back({.name = b.name});
    }
  }

  Eigen::MatrixXd run(std::size_t burn_in, ChainDiagnostics& diag) {
    x_ = target_.initial_state(chain_, rng_);
    if (x_.size() != target_.dimension()) throw sampler_error("initial state has wrong dimension");
    const std::size_t n_iter = opt_.n_iterations;
    const std::size_t thin = opt_.thinning;
    const std::size_t n_keep = n_iter > burn_in ? (n_iter - burn_in + thin - 1) / thin : 0;
    Eigen::MatrixXd out(static_cast<Eigen::Index>(n_keep), static_cast<Eigen::Index>(x_.size()));
    std::size_t row = 0;
    const std::size_t reset_at = burn_in / 5;

    for (std::size_t t = 0; t < n_iter; ++t) {
      const bool adapting = t < burn_in;
      if (adapting && t == reset_at) {
        for (auto& a : adapt_) a.reset_moments();
      }
      for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const bool acc = step(b);
        BlockStats& s = stats_[b];
        if (adapting) {
          ++s.burn_in_proposed;
          s.burn_in_accepted += acc;
          adapt(b, acc, t);
        } else {
          ++s.proposed;
          s.accepted += acc;
        }
      }
      if (adapting && (t + 1) % 100 == 0) {
        for (auto& a : adapt_) a.refresh_chol();
      }
      if (t + 1 == burn_in) diag.after_burn_in = snapshot();
      if (t >= burn_in && (t - burn_in) % thin == 0) {
        for (std::size_t j = 0; j < x_.size(); ++j) {
          out(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) = x_[j];
        }
        ++row;
      }
    }
    if (burn_in == 0) diag.after_burn_in = snapshot();
    diag.at_end = snapshot();
    diag.blocks = stats_;
    return out;
  }

 private:
  ScaleSnapshot snapshot() const {
    ScaleSnapshot s;
    for (const auto& a : adapt_) {
      s.log_scale.push_back(a.log_scale);
      s.chol.push_back(a.chol);
    }
    return s;
  }

  bool step(std::size_t b) {
    const Block& blk = blocks_[b];
    BlockAdaptation& ad = adapt_[b];
    const double current = target_.block_log_density(x_, b);
    saved_.assign(x_.begin(), x_.end());
    const double scale = std::exp(ad.log_scale);
    double log_jacobian = 0.0;

    switch (blk.kind) {
      case MoveKind::random_walk: {
        Eigen::VectorXd z(static_cast<Eigen::Index>(ad.dim));
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal_(rng_);
        const Eigen::VectorXd step = scale * (ad.chol * z);
        for (std::size_t i = 0; i < blk.coords.size(); ++i) {
          x_[blk.coords[i]] += step(static_cast<Eigen::Index>(i));
        }
        break;
      }
      case MoveKind::shift: {
        const double c = scale * normal_(rng_);
        for (std::size_t i : blk.coords) x_[i] += c;
        for (std::size_t i : blk.negated) x_[i] -= c;
        break;
      }
      case MoveKind::scale: {
        const double s = scale * normal_(rng_);
        const double centre = blk.centre ? x_[*blk.centre] : 0.0;
        x_[blk.coords.front()] += s;
        const double f = std::exp(s);
        for (std::size_t i : blk.members) x_[i] = centre + f * (x_[i] - centre);
        log_jacobian = s * static_cast<double>(blk.members.size());
        break;
      }
    }

    const double proposed = target_.block_log_density(x_, b);
    double log_alpha = proposed - current + log_jacobian;
    if (!std::isfinite(current) && std::isfinite(proposed)) log_alpha = 0.0;
    const bool accept = std::isfinite(proposed) && std::log(uniform_(rng_)) < log_alpha;
    if (!accept) x_.assign(saved_.begin(), saved_.end());
    return accept;
  }

  void adapt(std::size_t b, bool accepted, std::size_t t) {
    BlockAdaptation& ad = adapt_[b];
    const double gain = std::pow(static_cast<double>(t) + 1.0, -0.6);
    ad.log_scale += gain * ((accepted ? 1.0 : 0.0) - ad.target_rate);
    ad.log_scale = std::clamp(ad.log_scale, -30.0, 10.0);
    const Block& blk = blocks_[b];
    if (blk.kind == MoveKind::random_walk) {
      Eigen::VectorXd v(static_cast<Eigen::Index>(blk.coords.size()));
      for (std::size_t i = 0; i < blk.coords.size(); ++i) {
        v(static_cast<Eigen::Index>(i)) = x_[blk.coords[i]];
      }
      ad.observe(v);
    }
  }

  const Target& target_;
  const RunOptions& opt_;
  std::size_t chain_;
  Rng rng_;
  std::vector<Block> blocks_;
  std::vector<BlockAdaptation> adapt_;
  std::vector<BlockStats> stats_;
  std::vector<double> x_;
  std::vector<double> saved_;
  std::normal_distribution<double> normal_;
  std::uniform_real_distribution<double> uniform_;
};

}  // namespace detail

/// Runs independent chains. Deterministic given the seeds: each chain owns
/// its generator and buffers, so parallel and serial execution agree
/// bit for bit. Proposal scales adapt during burn-in only.
template <BlockTarget Target>
ChainSet run_chains(const Target& target, RunOptions opt) {
  if (opt.n_chains < 1) throw sampler_error("need at least one chain");
  if (opt.thinning < 1) throw sampler_error("thinning must be positive");
  if (!(opt.burn_in_fraction >= 0.0 && opt.burn_in_fraction < 1.0)) {
    throw sampler_error("burn-in fraction must lie in [0, 1)");
  }
  if (opt.seeds.empty()) opt.seeds = derive_seeds(opt.master_seed, opt.n_chains);
  if (opt.seeds.size() != opt.n_chains) throw sampler_error("need one seed per chain");
  {
    auto s = opt.seeds;
    std::sort(s.begin(), s.end());
    if (std::adjacent_find(s.begin(), s.end()) != s.end()) {
      throw sampler_error("chain seeds must be distinct");
    }
  }

  ChainSet set;
  set.seeds = opt.seeds;
  set.burn_in_fraction = opt.burn_in_fraction;
  set.thinning = opt.thinning;
  set.n_iterations = opt.n_iterations;
  set.burn_in = static_cast<std::size_t>(std::floor(opt.burn_in_fraction *
                                                    static_cast<double>(opt.n_iterations)));
  set.param_names = target.param_names();
  for (std::size_t t = set.burn_in; t < opt.n_iterations; t += opt.thinning) {
    set.retained_iterations.push_back(t);
  }
  set.chains.resize(opt.n_chains);
  set.diagnostics.resize(opt.n_chains);

  std::vector<std::exception_ptr> errors(opt.n_chains);
  auto work = [&](std::size_t c) {
    try {
      detail::ChainRunner<Target> runner(target, opt, c, opt.seeds[c]);
      set.chains[c] = runner.run(set.burn_in, set.diagnostics[c]);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  if (opt.parallel && opt.n_chains > 1) {
    std::vector<std::thread> threads;
    for (std::size_t c = 0; c < opt.n_chains; ++c) threads.emplace_back(work, c);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t c = 0; c < opt.n_chains; ++c) work(c);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Potential scale reduction

struct PsrfResult {
  std::vector<std::size_t> params;
  std::vector<double> univariate;  // NaN for degenerate parameters
  std::vector<bool> degenerate;
  double multivariate = std::numeric_limits<double>::quiet_NaN();

  double max_univariate() const {
    double m = 0.0;
    for (std::size_t i = 0; i < univariate.size(); ++i) {
      if (!degenerate[i]) m = std::max(m, univariate[i]);
    }
    return m;
  }
};

/// Brooks-Gelman potential scale reduction. Univariate:
///   sqrt(((n-1)/n W + (1 + 1/m) B/n) / W)
/// multivariate: sqrt((n-1)/n + (1 + 1/m) lambda_max(W^-1 B/n)) over the
/// non-degenerate parameters.
inline PsrfResult psrf(const ChainSet& set, std::vector<std::size_t> params = {}) {
  const std::size_t m = set.chains.size();
  if (m < 2) throw sampler_error("PSRF needs at least two chains");
  Eigen::Index n = set.chains.front().rows();
  for (const auto& c : set.chains) n = std::min(n, c.rows());
  if (n < 2) throw sampler_error("PSRF needs at least two draws per chain");
  if (params.empty()) {
    params.resize(set.n_params());
    std::iota(params.begin(), params.end(), std::size_t{0});
  }
  const auto p = static_cast<Eigen::Index>(params.size());
  const double nd = static_cast<double>(n);
  const double md = static_cast<double>(m);

  Eigen::MatrixXd means(static_cast<Eigen::Index>(m), p);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t c = 0; c < m; ++c) {
    Eigen::MatrixXd block(n, p);
    for (Eigen::Index j = 0; j < p; ++j) {
      block.col(j) = set.chains[c].col(static_cast<Eigen::Index>(params[static_cast<std::size_t>(j)])).head(n);
    }
    const Eigen::RowVectorXd mu = block.colwise().mean();
    means.row(static_cast<Eigen::Index>(c)) = mu;
    const Eigen::MatrixXd centred = block.rowwise() - mu;
    w += centred.transpose() * centred / (nd - 1.0);
  }
  w /= md;
  const Eigen::RowVectorXd grand = means.colwise().mean();
  const Eigen::MatrixXd mc = means.rowwise() - grand;
  const Eigen::MatrixXd b_over_n = mc.transpose() * mc / (md - 1.0);

  PsrfResult out;
  out.params = params;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double wj = w(j, j);
    const double scale = std::max(1.0, std::abs(grand(j)));
    const bool degenerate = !(wj > 1e-24 * scale * scale);
    out.degenerate.push_back(degenerate);
    if (degenerate) {
      out.univariate.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    keep.push_back(j);
    const double v = (nd - 1.0) / nd * wj + (1.0 + 1.0 / md) * b_over_n(j, j);
    out.univariate.push_back(std::sqrt(v / wj));
  }
  if (!keep.empty()) {
    const auto q = static_cast<Eigen::Index>(keep.size());
    Eigen::MatrixXd wk(q, q), bk(q, q);
    for (Eigen::Index a = 0; a < q; ++a) {
      for (Eigen::Index c = 0; c < q; ++c) {
        wk(a, c) = w(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(c)]);
        bk(a, c) = b_over_n(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(c)]);
      }
    }
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(bk, wk, Eigen::EigenvaluesOnly);
    if (es.info() == Eigen::Success) {
      const double lmax = std::max(0.0, es.eigenvalues().maxCoeff());
      out.multivariate = std::sqrt((nd - 1.0) / nd + (1.0 + 1.0 / md) * lmax);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Effective sample size

/// Single-sequence ESS with Geyer's initial positive sequence truncation.
inline double effective_sample_size(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 4) return static_cast<double>(n);
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  auto autocov = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) s += (x[i] - mean) * (x[i + lag] - mean);
    return s / static_cast<double>(n);
  };
  const double c0 = autocov(0);
  if (!(c0 > 0.0)) return static_cast<double>(n);
  double tau = -1.0;  // tau = -1 + 2 * sum of pair sums
  for (std::size_t lag = 0; lag + 1 < n; lag += 2) {
    const double pair = (autocov(lag) + autocov(lag + 1)) / c0;
    if (pair <= 0.0) break;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / std::log10(static_cast<double>(n)));
  return static_cast<double>(n) / tau;
}

inline double effective_sample_size(const ChainSet& set, std::size_t col) {
  double total = 0.0;
  for (const auto& c : set.chains) {
    std::vector<double> v(static_cast<std::size_t>(c.rows()));
    for (Eigen::Index r = 0; r < c.rows(); ++r) v[static_cast<std::size_t>(r)] = c(r, static_cast<Eigen::Index>(col));
    total += effective_sample_size(v);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Kernel density and summaries

struct DensityGrid {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
  bool degenerate = false;

  double integral() const {
    double s = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) {
      s += 0.5 * (density[i] + density[i - 1]) * (x[i] - x[i - 1]);
    }
    return s;
  }
};

/// Empirical quantile with linear interpolation between order statistics
/// (sample must be sorted).
inline double sorted_quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double silverman_bandwidth(std::span<const double> sorted) {
  const double n = static_cast<double>(sorted.size());
  const double mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : sorted) ss += (v - mean) * (v - mean);
  const double sd = n > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  const double iqr = sorted_quantile(sorted, 0.75) - sorted_quantile(sorted, 0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  return 0.9 * spread * std::pow(n, -0.2);
}

/// Gaussian KDE with Silverman's bandwidth evaluated on `grid_size` points
/// spanning the sample +/- 5 bandwidths. Samples are linearly binned onto
/// the grid first; the result is normalised to unit trapezoid integral.
inline DensityGrid kernel_density(std::span<const double> sample, std::size_t grid_size = 512) {
  if (sample.empty()) throw std::invalid_argument("kernel density of empty sample");
  if (grid_size < 16) grid_size = 16;
  std::vector<double> sorted(sample.begin(), sample.end());
  std::sort(sorted.begin(), sorted.end());
  DensityGrid g;
  double h = silverman_bandwidth(sorted);
  if (!(h > 0.0)) {
    g.degenerate = true;
    h = 1e-3 * std::max(1.0, std::abs(sorted.front()));
  }
  g.bandwidth = h;
  const double lo = sorted.front() - 5.0 * h;
  const double hi = sorted.back() + 5.0 * h;
  const double dx = (hi - lo) / static_cast<double>(grid_size - 1);
  g.x.resize(grid_size);
  for (std::size_t i = 0; i < grid_size; ++i) g.x[i] = lo + dx * static_cast<double>(i);

  std::vector<double> weights(grid_size, 0.0);
  for (double v : sorted) {
    const double pos = (v - lo) / dx;
    auto i = static_cast<std::size_t>(std::floor(pos));
    if (i >= grid_size - 1) i = grid_size - 2;
    const double frac = pos - static_cast<double>(i);
    weights[i] += 1.0 - frac;
    weights[i + 1] += frac;
  }
  const auto reach = static_cast<long>(std::ceil(8.0 * h / dx));
  std::vector<double> kernel(static_cast<std::size_t>(reach) + 1);
  for (long d = 0; d <= reach; ++d) {
    const double u = static_cast<double>(d) * dx / h;
    kernel[static_cast<std::size_t>(d)] = std::exp(-0.5 * u * u);
  }
  g.density.assign(grid_size, 0.0);
  for (std::size_t j = 0; j < grid_size; ++j) {
    if (weights[j] == 0.0) continue;
    const long jl = static_cast<long>(j);
    const long from = std::max(0L, jl - reach);
    const long to = std::min(static_cast<long>(grid_size) - 1, jl + reach);
    for (long i = from; i <= to; ++i) {
      g.density[static_cast<std::size_t>(i)] +=
          weights[j] * kernel[static_cast<std::size_t>(std::abs(i - jl))];
    }
  }
  const double mass = g.integral();
  for (double& d : g.density) d /= mass;
  return g;
}

struct PosteriorSummary {
  double mean = 0.0;
  double median = 0.0;
  double q025 = 0.0, q05 = 0.0, q25 = 0.0, q75 = 0.0, q95 = 0.0, q975 = 0.0;
  double ess = 0.0;
  bool degenerate = false;
  DensityGrid density;

  std::pair<double, double> interval50() const { return {q25, q75}; }
  std::pair<double, double> interval90() const { return {q05, q95}; }
  std::pair<double, double> interval95() const { return {q025, q975}; }
};

inline PosteriorSummary summarize(std::span<const double> sample, double ess = 0.0) {
  if (sample.empty()) throw std::invalid_argument("summary of empty sample");
  std::vector<double> sorted(sample.begin(), sample.end());
  std::sort(sorted.begin(), sorted.end());
  PosteriorSummary s;
  // Sum in sorted order so relabelled chains give identical results.
  s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  s.median = sorted_quantile(sorted, 0.5);
  s.q025 = sorted_quantile(sorted, 0.025);
  s.q05 = sorted_quantile(sorted, 0.05);
  s.q25 = sorted_quantile(sorted, 0.25);
  s.q75 = sorted_quantile(sorted, 0.75);
  s.q95 = sorted_quantile(sorted, 0.95);
  s.q975 = sorted_quantile(sorted, 0.975);
  s.ess = ess > 0.0 ? ess : static_cast<double>(sorted.size());
  s.density = kernel_density(sorted);
  s.degenerate = s.density.degenerate;
  return s;
}

/// Summary of one parameter pooled across chains, optionally transformed to
/// its reporting scale (e.g. exp for log-coordinates).
inline PosteriorSummary summarize(const ChainSet& set, std::size_t col,
                                  const std::function<double(double)>& transform = {}) {
  std::vector<double> v = set.pooled(col);
  if (transform) {
    for (double& d : v) d = transform(d);
  }
  std::vector<double> per_chain;
  for (const auto& c : set.chains) {
    std::vector<double> cv(static_cast<std::size_t>(c.rows()));
    for (Eigen::Index r = 0; r < c.rows(); ++r) {
      const double d = c(r, static_cast<Eigen::Index>(col));
      cv[static_cast<std::size_t>(r)] = transform ? transform(d) : d;
    }
    per_chain.push_back(effective_sample_size(cv));
  }
  std::sort(per_chain.begin(), per_chain.end());
  return summarize(v, std::accumulate(per_chain.begin(), per_chain.end(), 0.0));
}

// ---------------------------------------------------------------------------
// Posterior predictive draws of a new study's (rate, overdispersion)

struct HyperDraw {
  double mu_lambda = 0.0;
  double sigma_lambda = 1.0;
  double mu_phi = 0.0;
  double sigma_phi = 1.0;
};

struct PredictiveDraw {
  double lambda = 0.0;
  double phi = 0.0;
};

namespace detail {

/// Minimal generator over splitmix64, used to key a stream on a value.
class SplitMixEngine {
 public:
  using result_type = std::uint64_t;
  explicit SplitMixEngine(std::uint64_t seed) : state_(seed) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return splitmix64(state_); }

 private:
  std::uint64_t state_;
};

inline std::uint64_t hash_bits(double v, std::uint64_t h) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof bits);
  std::uint64_t s = h ^ bits;
  return splitmix64(s);
}

}  // namespace detail

/// Draw j uses hyperparameter sample j mod H. Its noise is keyed on the
/// seed, the hyperparameter values and the replicate j / H, so reordering
/// the hyperparameter samples only reorders the output.
inline std::vector<PredictiveDraw> posterior_predictive(std::span<const HyperDraw> hyper,
                                                        std::size_t n_draws,
                                                        std::uint64_t seed) {
  if (hyper.empty()) throw std::invalid_argument("posterior_predictive: no hyperparameter draws");
  std::vector<PredictiveDraw> out;
  out.reserve(n_draws);
  for (std::size_t j = 0; j < n_draws; ++j) {
    const HyperDraw& h = hyper[j % hyper.size()];
    std::uint64_t key = seed;
    key = detail::hash_bits(h.mu_lambda, key);
    key = detail::hash_bits(h.sigma_lambda, key);
    key = detail::hash_bits(h.mu_phi, key);
    key = detail::hash_bits(h.sigma_phi, key);
    key = detail::hash_bits(static_cast<double>(j / hyper.size()), key);
    detail::SplitMixEngine eng(key);
    std::normal_distribution<double> z;
    const double zl = z(eng);
    const double zp = z(eng);
    out.push_back({std::exp(h.mu_lambda + h.sigma_lambda * zl),
                   std::exp(h.mu_phi + h.sigma_phi * zp)});
  }
  return out;
}

}  // namespace nbsynth
