#include "ctgrader/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cmath>

namespace ctg {

ImageU8 decode_image_gray(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw LoadError("cannot decode image: " + path.string());
  ImageU8 img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    std::copy_n(m.ptr<uint8_t>(y), m.cols, img.px.data() + size_t(y) * m.cols);
  return img;
}

namespace {
cv::Mat to_mat(const ImageU8& img) {
  cv::Mat m(img.h, img.w, CV_8UC1);
  for (int y = 0; y < img.h; ++y)
    std::copy_n(img.px.data() + size_t(y) * img.w, img.w, m.ptr<uint8_t>(y));
  return m;
}

void write_encoded(const fs::path& path, const std::vector<uchar>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text_file(path, std::string(bytes.begin(), bytes.end()));
}
}  // namespace

void write_jpeg_gray(const fs::path& path, const ImageU8& img, int quality) {
  std::vector<uchar> bytes;
  cv::imencode(".jpg", to_mat(img), bytes, {cv::IMWRITE_JPEG_QUALITY, quality});
  write_encoded(path, bytes);
}

void write_png_gray(const fs::path& path, const ImageU8& img) {
  std::vector<uchar> bytes;
  cv::imencode(".png", to_mat(img), bytes);
  write_encoded(path, bytes);
}

ImageF32 to_float(const ImageU8& img) {
  ImageF32 out(img.h, img.w);
  for (size_t i = 0; i < img.px.size(); ++i) out.px[i] = static_cast<float>(img.px[i]);
  return out;
}

namespace {

struct FilterBank {
  std::vector<int> start;
  std::vector<std::vector<float>> weights;
};

FilterBank triangle_filter(int in, int out) {
  FilterBank fb;
  fb.start.resize(out);
  fb.weights.resize(out);
  const double scale = double(in) / out;
  const double support = std::max(scale, 1.0);
  for (int i = 0; i < out; ++i) {
    const double center = (i + 0.5) * scale;
    int lo = std::max(0, int(std::floor(center - support)));
    int hi = std::min(in, int(std::ceil(center + support)));
    std::vector<double> w(hi - lo);
    double total = 0.0;
    for (int x = lo; x < hi; ++x) {
      const double t = std::abs((x + 0.5 - center) / support);
      w[x - lo] = t < 1.0 ? 1.0 - t : 0.0;
      total += w[x - lo];
    }
    fb.start[i] = lo;
    auto& wf = fb.weights[i];
    wf.resize(w.size());
    for (size_t k = 0; k < w.size(); ++k) wf[k] = static_cast<float>(w[k] / total);
  }
  return fb;
}

}  // namespace

ImageF32 resize_bilinear_aa(const ImageF32& src, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ArgumentError("resize target must be at least 1x1");
  const FilterBank fx = triangle_filter(src.w, out_w);
  const FilterBank fy = triangle_filter(src.h, out_h);

  // Horizontal pass, then vertical.
  ImageF32 tmp(src.h, out_w);
  for (int y = 0; y < src.h; ++y) {
    const float* row = src.px.data() + size_t(y) * src.w;
    for (int x = 0; x < out_w; ++x) {
      const auto& w = fx.weights[x];
      double acc = 0.0;
      for (size_t k = 0; k < w.size(); ++k) acc += double(w[k]) * row[fx.start[x] + k];
      tmp.at(y, x) = static_cast<float>(acc);
    }
  }
  ImageF32 out(out_h, out_w);
  for (int x = 0; x < out_w; ++x) {
    for (int y = 0; y < out_h; ++y) {
      const auto& w = fy.weights[y];
      double acc = 0.0;
      for (size_t k = 0; k < w.size(); ++k) acc += double(w[k]) * tmp.at(fy.start[y] + k, x);
      out.at(y, x) = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace ctg
