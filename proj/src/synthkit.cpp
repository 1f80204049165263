#include "ctgrader/synthkit.hpp"

#include <cmath>

#include "ctgrader/common.hpp"

namespace ctg {

SynthSpec tiny_synth_spec() {
  SynthSpec spec;
  spec.n_scans_per_class = 8;
  spec.min_slices = 10;
  spec.max_slices = 14;
  spec.image_side = 128;
  return spec;
}

int involvement_to_label(double q, const std::array<double, 3>& thresholds) {
  if (q < 0.0 || q > 1.0)
    throw ArgumentError("involvement fraction must lie in [0,1], got " + std::to_string(q));
  if (q < thresholds[0]) return 0;
  if (q <= thresholds[1]) return 1;
  if (q <= thresholds[2]) return 2;  // includes the protocol's (0.70, 0.75] gap
  return 3;
}

namespace {

constexpr uint8_t kBackground = 220;
constexpr uint8_t kLung = 35;
constexpr uint8_t kGgo = 85;  // brighter than healthy lung, still below the mask threshold

struct LungGeometry {
  double cx1, cx2, cy;   // ellipse centers
  double rx, ry;         // base radii
  double tilt;           // slight vertical offset between the two lungs
};

LungGeometry sample_geometry(int side, nn::Rng& rng) {
  LungGeometry g;
  const double s = side;
  g.cx1 = s * rng.uniform(0.28, 0.32);
  g.cx2 = s * rng.uniform(0.68, 0.72);
  g.cy = s * rng.uniform(0.47, 0.53);
  g.rx = s * rng.uniform(0.13, 0.16);
  g.ry = s * rng.uniform(0.24, 0.30);
  g.tilt = s * rng.uniform(-0.02, 0.02);
  return g;
}

// Lungs taper toward the ends of the stack.
double axial_scale(int k, int n) {
  if (n <= 1) return 1.0;
  const double t = (2.0 * k - (n - 1)) / (n - 1);  // [-1, 1]
  return std::sqrt(std::max(0.30, 1.0 - 0.55 * t * t));
}

SynthSlice render_slice(int side, const LungGeometry& g, double scale, double q,
                        double noise_level, nn::Rng& rng) {
  SynthSlice out;
  out.q = q;
  out.image = ImageU8(side, side, kBackground);
  out.lung_interior = ImageU8(side, side, 0);

  const double rx = g.rx * scale, ry = g.ry * scale;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double d1 = std::pow((x - g.cx1) / rx, 2) + std::pow((y - g.cy - g.tilt) / ry, 2);
      const double d2 = std::pow((x - g.cx2) / rx, 2) + std::pow((y - g.cy + g.tilt) / ry, 2);
      if (d1 <= 1.0 || d2 <= 1.0) {
        out.lung_interior.at(y, x) = 1;
        out.image.at(y, x) = rng.uniform() < q ? kGgo : kLung;
      }
    }
  }
  if (noise_level > 0.0) {
    for (auto& px : out.image.px) {
      const double v = px + rng.normal() * noise_level * 255.0;
      px = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return out;
}

double sample_involvement(int label, const SynthSpec& spec, nn::Rng& rng) {
  const auto& t = spec.involvement_thresholds;
  const double m = spec.threshold_margin;
  switch (label) {
    case 0: return rng.uniform(m, t[0] - m);
    case 1: return rng.uniform(t[0] + m, t[1] - m);
    case 2: return rng.uniform(t[1] + m, 0.70 - m);  // stays out of the (0.70, 0.75] gap
    default: return rng.uniform(t[2] + m, 1.0 - m);
  }
}

}  // namespace

SynthSlice make_synth_slice(int side, double q, double noise_level, nn::Rng& rng) {
  const LungGeometry g = sample_geometry(side, rng);
  return render_slice(side, g, 1.0, q, noise_level, rng);
}

SynthSummary generate_dataset(const SynthSpec& spec, const fs::path& out_dir) {
  if (spec.image_side < 64) throw ArgumentError("synthetic image side must be at least 64");
  if (!(spec.involvement_thresholds[0] < spec.involvement_thresholds[1] &&
        spec.involvement_thresholds[1] < spec.involvement_thresholds[2]))
    throw ArgumentError("involvement thresholds must be strictly increasing");
  if (spec.involvement_thresholds[0] <= 0.0 || spec.involvement_thresholds[2] >= 1.0)
    throw ArgumentError("involvement thresholds must lie in (0,1)");
  if (spec.min_slices < 1 || spec.max_slices < spec.min_slices)
    throw ArgumentError("invalid slices_per_scan range");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create output directory: " + out_dir.string());

  nn::Rng rng(spec.seed);
  CsvTable labels, test_truth;
  labels.header = {"scan_id", "label"};
  test_truth.header = {"scan_id", "label"};

  const int per_class_val =
      std::max(1, static_cast<int>(std::lround(spec.n_scans_per_class * spec.val_fraction)));
  const int per_class_test =
      std::max(1, static_cast<int>(std::lround(spec.n_scans_per_class * spec.test_fraction)));

  SynthSummary summary;
  int next_id = 0;
  auto emit_scan = [&](Split split, int label) {
    const std::string scan_id = "ct_scan_" + std::to_string(next_id++);
    const fs::path dir = out_dir / to_string(split) / scan_id;
    fs::create_directories(dir);

    const int n = spec.min_slices +
                  static_cast<int>(rng.uniform_int(spec.max_slices - spec.min_slices + 1));
    const double q = sample_involvement(label, spec, rng);
    const LungGeometry g = sample_geometry(spec.image_side, rng);
    for (int k = 0; k < n; ++k) {
      const SynthSlice slice =
          render_slice(spec.image_side, g, axial_scale(k, n), q, spec.noise_level, rng);
      write_jpeg_gray(dir / ("slice_" + std::to_string(k) + ".jpg"), slice.image,
                      spec.jpeg_quality);
    }
    auto& table = split == Split::test ? test_truth : labels;
    table.rows.push_back({scan_id, to_string(static_cast<Severity>(label))});
  };

  for (int label = 0; label < kNumClasses; ++label)
    for (int i = 0; i < spec.n_scans_per_class; ++i) emit_scan(Split::train, label);
  summary.train_scans = kNumClasses * spec.n_scans_per_class;
  for (int label = 0; label < kNumClasses; ++label)
    for (int i = 0; i < per_class_val; ++i) emit_scan(Split::unseen_val, label);
  summary.val_scans = kNumClasses * per_class_val;
  for (int label = 0; label < kNumClasses; ++label)
    for (int i = 0; i < per_class_test; ++i) emit_scan(Split::test, label);
  summary.test_scans = kNumClasses * per_class_test;

  summary.labels_csv = out_dir / "labels.csv";
  write_csv(summary.labels_csv, labels);
  write_csv(out_dir / "test_groundtruth.csv", test_truth);
  return summary;
}

}  // namespace ctg
