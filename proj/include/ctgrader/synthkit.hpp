#pragma once

#include "ctgrader/image.hpp"
#include "ctgrader/nn/tensor.hpp"

namespace ctg {

// Desk-scale synthetic stand-in for the access-gated CT data: two dark
// elliptical "lungs" on a bright background, with a fraction q of the lung
// interior brightened to mimic ground-glass involvement.
struct SynthSpec {
  int n_scans_per_class = 8;
  int min_slices = 10;
  int max_slices = 14;
  int image_side = 128;
  std::array<double, 3> involvement_thresholds{0.26, 0.50, 0.75};
  double noise_level = 0.0;
  uint64_t seed = 7;
  int jpeg_quality = 90;
  // q is kept this far away from every threshold so labels are unambiguous.
  double threshold_margin = 0.03;
  // Validation/test scans per class, as a fraction of n_scans_per_class.
  double val_fraction = 0.5;
  double test_fraction = 0.5;
};

SynthSpec tiny_synth_spec();  // 8 scans/class, 12 slices, 128 px

// Severity class from the involvement fraction. The protocol's uncovered
// (0.70, 0.75] band maps to severe.
int involvement_to_label(double q, const std::array<double, 3>& thresholds = {0.26, 0.50, 0.75});

struct SynthSlice {
  ImageU8 image;
  ImageU8 lung_interior;  // ground-truth lung pixels, values 0/1
  double q = 0.0;
};

// One slice with the planted geometry; exposed so tests can score mask
// recovery against the ground truth.
SynthSlice make_synth_slice(int side, double q, double noise_level, nn::Rng& rng);

struct SynthSummary {
  int train_scans = 0;
  int val_scans = 0;
  int test_scans = 0;
  fs::path labels_csv;
};

// Writes root/{train,unseen_val,test}/<scan_id>/slice_<k>.jpg plus labels.csv
// (train + unseen_val) and test_groundtruth.csv. Bit-deterministic in seed.
SynthSummary generate_dataset(const SynthSpec& spec, const fs::path& out_dir);

}  // namespace ctg
