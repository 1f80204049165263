#pragma once

#include <nlohmann/json.hpp>

#include "ctgrader/image.hpp"
#include "ctgrader/ingest.hpp"
#include "ctgrader/model_zoo.hpp"
#include "ctgrader/nn/tensor.hpp"

namespace ctg {

struct SliceSelector {
  double f = 0.25;
};

// Nearest integer under round-half-to-even, clamped into [0, n-1].
int64_t select_center_index(int64_t n, double f);

struct LungMask {
  ImageU8 mask;  // values 0/1, same size as the source slice
};

// clear border-connected components -> keep the two largest components ->
// binary closing (disk radius r) -> fill holes. Idempotent on its own output.
ImageU8 morphology_chain(const ImageU8& binary, int closing_radius = 2);

// Thresholds the slice (intensity < threshold) and runs the morphology chain.
LungMask build_lung_mask(const ImageU8& slice, int threshold = 100);

// Centered window of side floor(side * fraction) per axis; equal margins with
// the extra pixel on the trailing side. fraction 1 is the identity.
ImageU8 center_crop(const ImageU8& slice, double crop_fraction);

struct PreprocessOptions {
  SliceSelector selector;
  bool apply_mask = true;
  bool apply_crop = true;
  double crop_fraction = 0.9;
  int mask_threshold = 100;
};

nlohmann::json to_json(const PreprocessOptions& opts);
PreprocessOptions preprocess_options_from_json(const nlohmann::json& j);

struct PreprocessedInput {
  nn::Tensor pixels;  // [3, v, v], normalized
  std::string scan_id;
  int64_t z = 0;
  bool masked = false;
  bool cropped = false;
};

// Channels are the slices (z-1, z, z+1), indices clamped at the volume
// boundaries; each slice is masked, cropped, resized to v x v and normalized
// with the spec's constants. Pure function of its arguments.
PreprocessedInput assemble_input(const ScanVolume& volume, const SliceSelector& selector,
                                 const ModelSpec& spec, bool apply_mask, bool apply_crop,
                                 double crop_fraction = 0.9, int mask_threshold = 100);

PreprocessedInput assemble_input(const ScanVolume& volume, const ModelSpec& spec,
                                 const PreprocessOptions& opts);

// Debug dump of the three channels side by side, denormalized to 8-bit.
void write_triptych_png(const PreprocessedInput& input, const ModelSpec& spec,
                        const fs::path& path);

}  // namespace ctg
