#include "ctgrader/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>

namespace ctg {

int64_t select_center_index(int64_t n, double f) {
  if (n <= 0) throw ArgumentError("slice count must be positive, got " + std::to_string(n));
  if (!(f > 0.0 && f < 1.0)) throw ArgumentError("slice fraction must lie in (0,1)");
  const double x = static_cast<double>(n) * f;
  const double lo = std::floor(x);
  const double frac = x - lo;
  double z;
  if (frac > 0.5) {
    z = lo + 1.0;
  } else if (frac < 0.5) {
    z = lo;
  } else {
    // Exact tie: round to the even neighbour.
    z = std::fmod(lo, 2.0) == 0.0 ? lo : lo + 1.0;
  }
  return std::clamp(static_cast<int64_t>(z), int64_t{0}, n - 1);
}

namespace {

// 8-connected component labelling, BFS in raster order so labels and "largest"
// ties are deterministic.
std::vector<int32_t> label_components(const ImageU8& bin, std::vector<int64_t>& areas) {
  const int h = bin.h, w = bin.w;
  std::vector<int32_t> labels(size_t(h) * w, 0);
  areas.assign(1, 0);  // areas[0] unused
  std::deque<int> queue;
  int32_t next = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t idx = size_t(y) * w + x;
      if (!bin.px[idx] || labels[idx]) continue;
      ++next;
      areas.push_back(0);
      labels[idx] = next;
      queue.push_back(static_cast<int>(idx));
      while (!queue.empty()) {
        const int cur = queue.front();
        queue.pop_front();
        ++areas[next];
        const int cy = cur / w, cx = cur % w;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const size_t nidx = size_t(ny) * w + nx;
            if (bin.px[nidx] && !labels[nidx]) {
              labels[nidx] = next;
              queue.push_back(static_cast<int>(nidx));
            }
          }
        }
      }
    }
  }
  return labels;
}

ImageU8 clear_border(const ImageU8& bin) {
  std::vector<int64_t> areas;
  const auto labels = label_components(bin, areas);
  std::vector<char> touches(areas.size(), 0);
  const int h = bin.h, w = bin.w;
  for (int x = 0; x < w; ++x) {
    if (labels[x]) touches[labels[x]] = 1;
    if (labels[size_t(h - 1) * w + x]) touches[labels[size_t(h - 1) * w + x]] = 1;
  }
  for (int y = 0; y < h; ++y) {
    if (labels[size_t(y) * w]) touches[labels[size_t(y) * w]] = 1;
    if (labels[size_t(y) * w + w - 1]) touches[labels[size_t(y) * w + w - 1]] = 1;
  }
  ImageU8 out(h, w);
  for (size_t i = 0; i < out.px.size(); ++i)
    out.px[i] = bin.px[i] && !touches[labels[i]] ? 1 : 0;
  return out;
}

ImageU8 keep_two_largest(const ImageU8& bin) {
  std::vector<int64_t> areas;
  const auto labels = label_components(bin, areas);
  // Rank labels by (area desc, label asc); ties resolve to the earlier
  // raster-order component.
  std::vector<int32_t> order;
  for (int32_t l = 1; l < static_cast<int32_t>(areas.size()); ++l) order.push_back(l);
  std::sort(order.begin(), order.end(), [&areas](int32_t a, int32_t b) {
    return std::tie(areas[b], b) < std::tie(areas[a], a);
  });
  std::vector<char> keep(areas.size(), 0);
  for (size_t i = 0; i < order.size() && i < 2; ++i) keep[order[i]] = 1;
  ImageU8 out(bin.h, bin.w);
  for (size_t i = 0; i < out.px.size(); ++i) out.px[i] = bin.px[i] && keep[labels[i]] ? 1 : 0;
  return out;
}

std::vector<std::pair<int, int>> disk_offsets(int radius) {
  std::vector<std::pair<int, int>> offs;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy * dy + dx * dx <= radius * radius) offs.emplace_back(dy, dx);
  return offs;
}

ImageU8 dilate(const ImageU8& bin, const std::vector<std::pair<int, int>>& offs) {
  ImageU8 out(bin.h, bin.w);
  for (int y = 0; y < bin.h; ++y)
    for (int x = 0; x < bin.w; ++x) {
      if (!bin.at(y, x)) continue;
      for (const auto& [dy, dx] : offs) {
        const int ny = y + dy, nx = x + dx;
        if (ny >= 0 && ny < bin.h && nx >= 0 && nx < bin.w) out.at(ny, nx) = 1;
      }
    }
  return out;
}

ImageU8 erode(const ImageU8& bin, const std::vector<std::pair<int, int>>& offs) {
  ImageU8 out(bin.h, bin.w);
  for (int y = 0; y < bin.h; ++y)
    for (int x = 0; x < bin.w; ++x) {
      bool all = true;
      for (const auto& [dy, dx] : offs) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= bin.h || nx < 0 || nx >= bin.w || !bin.at(ny, nx)) {
          all = false;
          break;
        }
      }
      out.at(y, x) = all ? 1 : 0;
    }
  return out;
}

// Background flood fill from the border (4-connected); unreachable background
// pixels are holes.
ImageU8 fill_holes(const ImageU8& bin) {
  const int h = bin.h, w = bin.w;
  std::vector<char> outside(size_t(h) * w, 0);
  std::deque<int> queue;
  auto push = [&](int y, int x) {
    const size_t idx = size_t(y) * w + x;
    if (!bin.px[idx] && !outside[idx]) {
      outside[idx] = 1;
      queue.push_back(static_cast<int>(idx));
    }
  };
  for (int x = 0; x < w; ++x) {
    push(0, x);
    push(h - 1, x);
  }
  for (int y = 0; y < h; ++y) {
    push(y, 0);
    push(y, w - 1);
  }
  while (!queue.empty()) {
    const int cur = queue.front();
    queue.pop_front();
    const int cy = cur / w, cx = cur % w;
    if (cy > 0) push(cy - 1, cx);
    if (cy + 1 < h) push(cy + 1, cx);
    if (cx > 0) push(cy, cx - 1);
    if (cx + 1 < w) push(cy, cx + 1);
  }
  ImageU8 out(h, w);
  for (size_t i = 0; i < out.px.size(); ++i) out.px[i] = outside[i] ? 0 : 1;
  return out;
}

}  // namespace

ImageU8 morphology_chain(const ImageU8& binary, int closing_radius) {
  ImageU8 m = clear_border(binary);
  m = keep_two_largest(m);
  const auto offs = disk_offsets(closing_radius);
  m = erode(dilate(m, offs), offs);
  m = fill_holes(m);
  // Closing can push a component back onto the border; clear once more so the
  // mask invariant holds. A second chain application is then a no-op.
  return clear_border(m);
}

LungMask build_lung_mask(const ImageU8& slice, int threshold) {
  ImageU8 bin(slice.h, slice.w);
  for (size_t i = 0; i < bin.px.size(); ++i) bin.px[i] = slice.px[i] < threshold ? 1 : 0;
  return {morphology_chain(bin)};
}

ImageU8 center_crop(const ImageU8& slice, double crop_fraction) {
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0))
    throw ArgumentError("crop fraction must lie in (0,1]");
  if (crop_fraction == 1.0) return slice;
  const int oh = static_cast<int>(std::floor(slice.h * crop_fraction));
  const int ow = static_cast<int>(std::floor(slice.w * crop_fraction));
  if (oh < 1 || ow < 1) throw ArgumentError("crop fraction leaves no pixels");
  const int y0 = (slice.h - oh) / 2;
  const int x0 = (slice.w - ow) / 2;
  ImageU8 out(oh, ow);
  for (int y = 0; y < oh; ++y)
    std::copy_n(slice.px.data() + size_t(y0 + y) * slice.w + x0, ow,
                out.px.data() + size_t(y) * ow);
  return out;
}

PreprocessedInput assemble_input(const ScanVolume& volume, const SliceSelector& selector,
                                 const ModelSpec& spec, bool apply_mask, bool apply_crop,
                                 double crop_fraction, int mask_threshold) {
  if (volume.n < 1)
    throw ArgumentError("cannot preprocess empty scan '" + volume.scan_id + "'");
  const int64_t z = select_center_index(volume.n, selector.f);
  const int v = spec.input_side;

  PreprocessedInput out;
  out.pixels = nn::Tensor({3, v, v});
  out.scan_id = volume.scan_id;
  out.z = z;
  out.masked = apply_mask;
  out.cropped = apply_crop;

  std::map<int64_t, ImageF32> cache;  // clamped indices repeat on shallow volumes
  for (int c = 0; c < 3; ++c) {
    const int64_t idx = std::clamp(z - 1 + c, int64_t{0}, volume.n - 1);
    auto it = cache.find(idx);
    if (it == cache.end()) {
      ImageU8 slice = decode_image_gray(volume.slice_paths[idx]);
      if (apply_mask) {
        const LungMask lm = build_lung_mask(slice, mask_threshold);
        for (size_t i = 0; i < slice.px.size(); ++i)
          if (!lm.mask.px[i]) slice.px[i] = 0;
      }
      if (apply_crop) slice = center_crop(slice, crop_fraction);
      it = cache.emplace(idx, resize_bilinear_aa(to_float(slice), v, v)).first;
    }
    const ImageF32& resized = it->second;
    const float mean = spec.norm_mean[c], std = spec.norm_std[c];
    float* dst = out.pixels.data.data() + size_t(c) * v * v;
    for (size_t i = 0; i < resized.px.size(); ++i)
      dst[i] = (resized.px[i] / 255.0f - mean) / std;
  }
  return out;
}

PreprocessedInput assemble_input(const ScanVolume& volume, const ModelSpec& spec,
                                 const PreprocessOptions& opts) {
  return assemble_input(volume, opts.selector, spec, opts.apply_mask, opts.apply_crop,
                        opts.crop_fraction, opts.mask_threshold);
}

nlohmann::json to_json(const PreprocessOptions& opts) {
  return {{"slice_fraction", opts.selector.f},
          {"mask", opts.apply_mask},
          {"crop", opts.apply_crop},
          {"crop_fraction", opts.crop_fraction},
          {"mask_threshold", opts.mask_threshold}};
}

PreprocessOptions preprocess_options_from_json(const nlohmann::json& j) {
  PreprocessOptions opts;
  opts.selector.f = j.at("slice_fraction").get<double>();
  opts.apply_mask = j.at("mask").get<bool>();
  opts.apply_crop = j.at("crop").get<bool>();
  opts.crop_fraction = j.at("crop_fraction").get<double>();
  opts.mask_threshold = j.at("mask_threshold").get<int>();
  return opts;
}

void write_triptych_png(const PreprocessedInput& input, const ModelSpec& spec,
                        const fs::path& path) {
  const int v = static_cast<int>(input.pixels.shape[1]);
  const int gap = 2;
  ImageU8 canvas(v, 3 * v + 2 * gap, 255);
  for (int c = 0; c < 3; ++c) {
    const float* src = input.pixels.data.data() + size_t(c) * v * v;
    const int x0 = c * (v + gap);
    for (int y = 0; y < v; ++y)
      for (int x = 0; x < v; ++x) {
        const float denorm = (src[y * v + x] * spec.norm_std[c] + spec.norm_mean[c]) * 255.0f;
        canvas.at(y, x0 + x) = static_cast<uint8_t>(std::clamp(denorm, 0.0f, 255.0f));
      }
  }
  write_png_gray(path, canvas);
}

}  // namespace ctg
