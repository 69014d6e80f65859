#include "capsroute/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace capsroute {

namespace {

std::size_t clamp_images(const Dataset& ds, std::size_t max_images) {
  if (ds.size() == 0) {
    throw std::invalid_argument("analysis: empty dataset");
  }
  return max_images == 0 ? ds.size() : std::min(max_images, ds.size());
}

double vote_norm(const Tensor& votes, std::size_t i, std::size_t j) {
  const std::size_t d = votes.dim(2);
  const double* v = votes.data() + (i * votes.dim(1) + j) * d;
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += v[k] * v[k];
  return std::sqrt(s);
}

}  // namespace

double connection_strength(const CapsuleLayerState& state, std::size_t i,
                           std::size_t j) {
  if (i >= state.coefficients.dim(0) || j >= state.coefficients.dim(1)) {
    throw std::out_of_range("connection_strength: capsule index out of range");
  }
  return state.coefficients.at2(i, j) * vote_norm(state.votes, i, j);
}

double influence(const CapsuleLayerState& state, std::size_t i) {
  if (i >= state.coefficients.dim(0)) {
    throw std::out_of_range("influence: capsule index out of range");
  }
  const std::size_t n_out = state.coefficients.dim(1);
  double s = 0.0;
  for (std::size_t j = 0; j < n_out; ++j) {
    s += state.coefficients.at2(i, j) * vote_norm(state.votes, i, j);
  }
  return s;
}

InfluenceReport influence_report(const CapsuleNetwork& net, const Dataset& ds,
                                 std::size_t max_images) {
  const std::size_t n_images = clamp_images(ds, max_images);
  const std::size_t n_caps = net.config().num_primary();
  const std::size_t n_out = net.config().num_classes;

  InfluenceReport report;
  report.per_capsule_influence.assign(n_caps, 0.0);
  report.activation_norms.assign(n_caps, 0.0);

  std::vector<double> pooled_influence, pooled_norms;
  pooled_influence.reserve(n_images * n_caps);
  pooled_norms.reserve(n_images * n_caps);

  for (std::size_t img = 0; img < n_images; ++img) {
    const auto ev = net.evaluate(ds.image(img));
    const std::size_t dim = ev.primary.dim(1);
    for (std::size_t i = 0; i < n_caps; ++i) {
      const double inf = influence(ev.routing, i);
      double un = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double v = ev.primary.at2(i, k);
        un += v * v;
      }
      un = std::sqrt(un);
      report.per_capsule_influence[i] += inf;
      report.activation_norms[i] += un;
      pooled_influence.push_back(inf);
      pooled_norms.push_back(un);
    }
  }
  const double inv = 1.0 / static_cast<double>(n_images);
  for (double& v : report.per_capsule_influence) v *= inv;
  for (double& v : report.activation_norms) v *= inv;
  report.correlation = pearson_correlation(pooled_influence, pooled_norms);

  // Per-capsule spread of the transformation matrix norms over j.
  const Tensor& w = net.params().routing_w;
  const std::size_t block = w.dim(2) * w.dim(3);
  report.w_norm_mean.assign(n_caps, 0.0);
  report.w_norm_rel_stddev.assign(n_caps, 0.0);
  for (std::size_t i = 0; i < n_caps; ++i) {
    std::vector<double> norms(n_out);
    for (std::size_t j = 0; j < n_out; ++j) {
      const double* blk = w.data() + (i * n_out + j) * block;
      double s = 0.0;
      for (std::size_t k = 0; k < block; ++k) s += blk[k] * blk[k];
      norms[j] = std::sqrt(s);
    }
    double mean = 0.0;
    for (double v : norms) mean += v;
    mean /= static_cast<double>(n_out);
    double var = 0.0;
    for (double v : norms) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n_out);
    report.w_norm_mean[i] = mean;
    report.w_norm_rel_stddev[i] = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
  }
  return report;
}

std::vector<double> mean_ordered_descending(std::vector<std::vector<double>> rows) {
  if (rows.empty()) {
    throw std::invalid_argument("mean_ordered_descending: no rows");
  }
  const std::size_t n = rows.front().size();
  std::vector<double> mean(n, 0.0);
  for (auto& row : rows) {
    if (row.size() != n) {
      throw std::invalid_argument("mean_ordered_descending: ragged rows");
    }
    std::sort(row.begin(), row.end(), std::greater<double>());
    for (std::size_t i = 0; i < n; ++i) mean[i] += row[i];
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (double& v : mean) v *= inv;
  return mean;
}

OrderedActivationCurve ordered_activation_curve(const CapsuleNetwork& net,
                                                const Dataset& ds,
                                                std::size_t max_images) {
  const std::size_t n_images = clamp_images(ds, max_images);
  std::vector<std::vector<double>> rows;
  rows.reserve(n_images);
  for (std::size_t img = 0; img < n_images; ++img) {
    const auto ev = net.evaluate(ds.image(img));
    const std::size_t n_caps = ev.primary.dim(0);
    const std::size_t dim = ev.primary.dim(1);
    std::vector<double> norms(n_caps);
    for (std::size_t i = 0; i < n_caps; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double v = ev.primary.at2(i, k);
        s += v * v;
      }
      norms[i] = std::sqrt(s);
    }
    rows.push_back(std::move(norms));
  }
  return OrderedActivationCurve{mean_ordered_descending(std::move(rows))};
}

RoutingCoeffStat routing_coeff_stat(const CapsuleNetwork& net, const Dataset& ds,
                                    double threshold, std::size_t max_images) {
  const std::size_t n_images = clamp_images(ds, max_images);
  std::vector<std::vector<double>> rows;
  rows.reserve(n_images);
  double count_above = 0.0;
  for (std::size_t img = 0; img < n_images; ++img) {
    const auto ev = net.evaluate(ds.image(img));
    const Tensor& c = ev.routing.coefficients;
    const std::size_t n_in = c.dim(0), n_out = c.dim(1);
    std::vector<double> maxima(n_in);
    for (std::size_t i = 0; i < n_in; ++i) {
      double m = c.at2(i, 0);
      for (std::size_t j = 1; j < n_out; ++j) m = std::max(m, c.at2(i, j));
      maxima[i] = m;
      if (m > threshold) count_above += 1.0;
    }
    rows.push_back(std::move(maxima));
  }
  RoutingCoeffStat stat;
  stat.threshold = threshold;
  stat.mean_count_above = count_above / static_cast<double>(n_images);
  stat.mean_sorted_max_coeff = mean_ordered_descending(std::move(rows));
  return stat;
}

Tensor activation_map(const CapsuleNetwork& net, const Tensor& image,
                      bool mean_over_channels) {
  const auto ev = net.evaluate(image);
  const NetworkConfig& cfg = net.config();
  const std::size_t H = cfg.prim_grid_h(), W = cfg.prim_grid_w();
  const std::size_t channels = cfg.prim_channels;
  const std::size_t dim = cfg.prim_dim;
  Tensor map({H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double agg = 0.0;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t cap = (ch * H + y) * W + x;
        double s = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double v = ev.primary.at2(cap, k);
          s += v * v;
        }
        const double norm = std::sqrt(s);
        agg = mean_over_channels ? agg + norm : std::max(agg, norm);
      }
      map.at2(y, x) = mean_over_channels
                          ? agg / static_cast<double>(channels)
                          : agg;
    }
  }
  return map;
}

double pearson_correlation(const std::vector<double>& a,
                           const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("pearson: need equal-length nonempty series");
  }
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

namespace {

std::ofstream open_csv(const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("csv: cannot write " + file.string());
  }
  out.precision(17);
  return out;
}

}  // namespace

void write_curve_csv(const OrderedActivationCurve& curve,
                     const std::filesystem::path& file, std::size_t top) {
  auto out = open_csv(file);
  out << "position,mean_activation\n";
  const std::size_t n = top == 0 ? curve.mean_sorted.size()
                                 : std::min(top, curve.mean_sorted.size());
  for (std::size_t i = 0; i < n; ++i) {
    out << i << "," << curve.mean_sorted[i] << "\n";
  }
}

void write_coeff_csv(const RoutingCoeffStat& stat,
                     const std::filesystem::path& file, std::size_t top) {
  auto out = open_csv(file);
  out << "position,mean_max_coeff\n";
  const std::size_t n = top == 0 ? stat.mean_sorted_max_coeff.size()
                                 : std::min(top, stat.mean_sorted_max_coeff.size());
  for (std::size_t i = 0; i < n; ++i) {
    out << i << "," << stat.mean_sorted_max_coeff[i] << "\n";
  }
  out << "# threshold," << stat.threshold << "\n";
  out << "# mean_count_above," << stat.mean_count_above << "\n";
}

void write_actmap_csv(const Tensor& map, const std::filesystem::path& file) {
  auto out = open_csv(file);
  for (std::size_t y = 0; y < map.dim(0); ++y) {
    for (std::size_t x = 0; x < map.dim(1); ++x) {
      if (x) out << ",";
      out << map.at2(y, x);
    }
    out << "\n";
  }
}

void write_influence_csv(const InfluenceReport& report,
                         const std::filesystem::path& file) {
  auto out = open_csv(file);
  out << "capsule,influence,activation_norm,w_norm_mean,w_norm_rel_stddev\n";
  for (std::size_t i = 0; i < report.per_capsule_influence.size(); ++i) {
    out << i << "," << report.per_capsule_influence[i] << ","
        << report.activation_norms[i] << "," << report.w_norm_mean[i] << ","
        << report.w_norm_rel_stddev[i] << "\n";
  }
  out << "# correlation," << report.correlation << "\n";
}

}  // namespace capsroute
