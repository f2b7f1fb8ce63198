#pragma once

// Analytic surface sampling of simple solids: a desk-scale stand-in for
// shape-classification and part-segmentation datasets.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "slnet/train.hpp"

namespace slnet {

struct SynthSpec {
  std::vector<std::string> classes{"sphere", "cube", "cylinder", "torus"};
  std::size_t n_points = 256;
  std::size_t per_class = 125;
  double noise = 0.01;  ///< Gaussian jitter sigma, applied before normalization
  std::uint64_t seed = 1;
  double test_fraction = 0.2;
};

struct SynthDataset {
  std::vector<std::string> class_names;
  std::vector<LabeledCloud> train;
  std::vector<LabeledCloud> test;
  /// Part labels of class c occupy [first, last); they are disjoint across classes.
  std::vector<std::pair<int, int>> part_ranges;
};

/// Known shapes, in their canonical order.
const std::vector<std::string>& synth_shape_names();
/// Parts per shape (caps, faces or halves).
std::size_t synth_part_count(const std::string& shape);

/// One surface sample of `shape` with per-point part labels starting at 0,
/// before jitter and normalization.
LabeledCloud synth_shape(const std::string& shape, std::size_t n_points, std::mt19937_64& rng);

/// Deterministic for a fixed spec; every cloud is jittered, then centered and
/// scaled into the unit sphere. Labels index `classes`; part labels are offset
/// by the class's part range.
SynthDataset synth_generate(const SynthSpec& spec);

}  // namespace slnet
