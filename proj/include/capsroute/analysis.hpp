#pragma once

#include <filesystem>
#include <vector>

#include "capsroute/data.hpp"
#include "capsroute/network.hpp"

namespace capsroute {

/// Strength of the routed connection from input capsule i to output capsule
/// j: c_{j|i} * ||v_{j|i}||, using final-iteration coefficients.
double connection_strength(const CapsuleLayerState& state, std::size_t i,
                           std::size_t j);

/// Total downstream influence of input capsule i: sum_j c_{j|i}*||v_{j|i}||.
double influence(const CapsuleLayerState& state, std::size_t i);

struct InfluenceReport {
  std::vector<double> per_capsule_influence;  // averaged over images
  std::vector<double> activation_norms;       // mean ||u_i||
  std::vector<double> w_norm_mean;            // mean_j ||w_{j|i}||_F
  std::vector<double> w_norm_rel_stddev;      // stddev/mean of ||w_{j|i}|| over j
  double correlation = 0.0;  // Pearson(influence, ||u||) over all image-capsule pairs
};

InfluenceReport influence_report(const CapsuleNetwork& net, const Dataset& ds,
                                 std::size_t max_images = 0);

struct OrderedActivationCurve {
  std::vector<double> mean_sorted;  // descending, averaged positionwise
};

/// Positionwise mean of descending-sorted rows. The core of the ordered
/// activation curve; exposed so synthetic activation sets can be fed in
/// directly.
std::vector<double> mean_ordered_descending(std::vector<std::vector<double>> rows);

OrderedActivationCurve ordered_activation_curve(const CapsuleNetwork& net,
                                                const Dataset& ds,
                                                std::size_t max_images = 0);

struct RoutingCoeffStat {
  std::vector<double> mean_sorted_max_coeff;  // descending, averaged positionwise
  double threshold = 0.15;
  double mean_count_above = 0.0;  // capsules per image whose max coeff > threshold
};

RoutingCoeffStat routing_coeff_stat(const CapsuleNetwork& net, const Dataset& ds,
                                    double threshold = 0.15,
                                    std::size_t max_images = 0);

/// Primary-layer activation map: per spatial location, the max (or mean)
/// over capsule channels of the capsule norm. Shape [grid_h x grid_w].
Tensor activation_map(const CapsuleNetwork& net, const Tensor& image,
                      bool mean_over_channels = false);

double pearson_correlation(const std::vector<double>& a,
                           const std::vector<double>& b);

// CSV emitters; column layouts are documented in the README.
void write_curve_csv(const OrderedActivationCurve& curve,
                     const std::filesystem::path& file, std::size_t top = 0);
void write_coeff_csv(const RoutingCoeffStat& stat,
                     const std::filesystem::path& file, std::size_t top = 0);
void write_actmap_csv(const Tensor& map, const std::filesystem::path& file);
void write_influence_csv(const InfluenceReport& report,
                         const std::filesystem::path& file);

}  // namespace capsroute
