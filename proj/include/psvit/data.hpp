#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "psvit/tensor.hpp"

namespace psvit {

struct Dataset {
  std::vector<Tensor> images;  // 3 x H x W, channel-normalized to [-1, 1]
  std::vector<int> labels;
  int num_classes = 0;

  size_t size() const { return images.size(); }
};

namespace detail {

inline uint32_t read_u32_be(const std::string& buf, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(buf[off + i]);
  return v;
}

inline void put_u32_be(std::string& buf, uint32_t v) {
  for (int i = 3; i >= 0; --i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("idx: cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// Smallest replication factor making both dims divisible by 4.
inline int replication_factor(int h, int w) {
  for (int k : {1, 2, 4}) {
    if ((h * k) % 4 == 0 && (w * k) % 4 == 0) return k;
  }
  return 4;
}

}  // namespace detail

inline constexpr uint32_t kIdxImageMagic = 0x00000803;
inline constexpr uint32_t kIdxLabelMagic = 0x00000801;

// Parses an IDX image/label pair (big-endian headers, raw ubyte payload).
// Pixels are scaled to [0,1] then normalized with mean 0.5 / std 0.5,
// grayscale is replicated to 3 channels, and images are integer-replicated
// to the nearest size divisible by 4.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const std::string ibuf = detail::read_file(images_path);
  const std::string lbuf = detail::read_file(labels_path);
  if (ibuf.size() < 16) throw std::runtime_error("idx: image file too short: " + images_path);
  if (lbuf.size() < 8) throw std::runtime_error("idx: label file too short: " + labels_path);

  const uint32_t imagic = detail::read_u32_be(ibuf, 0);
  if (imagic != kIdxImageMagic) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%08x", imagic);
    throw std::runtime_error("idx: bad image magic " + std::string(buf) + " in " + images_path);
  }
  const uint32_t lmagic = detail::read_u32_be(lbuf, 0);
  if (lmagic != kIdxLabelMagic) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%08x", lmagic);
    throw std::runtime_error("idx: bad label magic " + std::string(buf) + " in " + labels_path);
  }

  const uint32_t count = detail::read_u32_be(ibuf, 4);
  const int rows = static_cast<int>(detail::read_u32_be(ibuf, 8));
  const int cols = static_cast<int>(detail::read_u32_be(ibuf, 12));
  const uint32_t label_count = detail::read_u32_be(lbuf, 4);
  if (count != label_count) {
    throw std::runtime_error("idx: image count " + std::to_string(count) + " does not match label count " +
                             std::to_string(label_count));
  }
  const size_t pixels = static_cast<size_t>(rows) * cols;
  if (ibuf.size() < 16 + count * pixels) throw std::runtime_error("idx: truncated image payload in " + images_path);
  if (lbuf.size() < 8 + count) throw std::runtime_error("idx: truncated label payload in " + labels_path);

  const int k = detail::replication_factor(rows, cols);
  const int out_h = rows * k, out_w = cols * k;

  Dataset ds;
  ds.images.reserve(count);
  ds.labels.reserve(count);
  int max_label = 0;
  for (uint32_t img = 0; img < count; ++img) {
    Tensor t = Tensor::zeros({3, out_h, out_w});
    const size_t base = 16 + static_cast<size_t>(img) * pixels;
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        const unsigned char byte = static_cast<unsigned char>(ibuf[base + static_cast<size_t>(y / k) * cols + x / k]);
        const float v = (static_cast<float>(byte) / 255.0f - 0.5f) / 0.5f;
        for (int c = 0; c < 3; ++c) t.at3(c, y, x) = v;
      }
    ds.images.push_back(std::move(t));
    const int label = static_cast<unsigned char>(lbuf[8 + img]);
    ds.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  ds.num_classes = max_label + 1;
  return ds;
}

// Images without labels, for trajectory visualization.
inline std::vector<Tensor> load_idx_images(const std::string& images_path) {
  const std::string ibuf = detail::read_file(images_path);
  if (ibuf.size() < 16) throw std::runtime_error("idx: image file too short: " + images_path);
  const uint32_t imagic = detail::read_u32_be(ibuf, 0);
  if (imagic != kIdxImageMagic) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%08x", imagic);
    throw std::runtime_error("idx: bad image magic " + std::string(buf) + " in " + images_path);
  }
  const uint32_t count = detail::read_u32_be(ibuf, 4);
  const int rows = static_cast<int>(detail::read_u32_be(ibuf, 8));
  const int cols = static_cast<int>(detail::read_u32_be(ibuf, 12));
  const size_t pixels = static_cast<size_t>(rows) * cols;
  if (ibuf.size() < 16 + count * pixels) throw std::runtime_error("idx: truncated image payload in " + images_path);
  const int k = detail::replication_factor(rows, cols);
  std::vector<Tensor> images;
  images.reserve(count);
  for (uint32_t img = 0; img < count; ++img) {
    Tensor t = Tensor::zeros({3, rows * k, cols * k});
    const size_t base = 16 + static_cast<size_t>(img) * pixels;
    for (int y = 0; y < rows * k; ++y)
      for (int x = 0; x < cols * k; ++x) {
        const unsigned char byte = static_cast<unsigned char>(ibuf[base + static_cast<size_t>(y / k) * cols + x / k]);
        const float v = (static_cast<float>(byte) / 255.0f - 0.5f) / 0.5f;
        for (int c = 0; c < 3; ++c) t.at3(c, y, x) = v;
      }
    images.push_back(std::move(t));
  }
  return images;
}

// IDX writers, used for fixtures and round-trip checks.
inline void write_idx_images(const std::string& path, const std::vector<std::vector<uint8_t>>& images,
                             int rows, int cols) {
  std::string out;
  detail::put_u32_be(out, kIdxImageMagic);
  detail::put_u32_be(out, static_cast<uint32_t>(images.size()));
  detail::put_u32_be(out, static_cast<uint32_t>(rows));
  detail::put_u32_be(out, static_cast<uint32_t>(cols));
  for (const auto& img : images) {
    if (img.size() != static_cast<size_t>(rows) * cols) throw std::invalid_argument("idx: wrong image size");
    out.append(reinterpret_cast<const char*>(img.data()), img.size());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("idx: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
  std::string out;
  detail::put_u32_be(out, kIdxLabelMagic);
  detail::put_u32_be(out, static_cast<uint32_t>(labels.size()));
  out.append(reinterpret_cast<const char*>(labels.data()), labels.size());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("idx: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

// Center crop for evaluation inputs larger than the model size.
inline Tensor center_crop(const Tensor& img, int size) {
  const int h = img.dim(1), w = img.dim(2);
  if (h < size || w < size) {
    throw std::invalid_argument("crop: image " + std::to_string(h) + "x" + std::to_string(w) +
                                " smaller than crop size " + std::to_string(size));
  }
  if (h == size && w == size) return img;
  const int y0 = (h - size) / 2, x0 = (w - size) / 2;
  Tensor out = Tensor::zeros({img.dim(0), size, size});
  for (int c = 0; c < img.dim(0); ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at3(c, y, x) = img.at3(c, y0 + y, x0 + x);
  return out;
}

// Synthetic two-class fixture: Gaussian intensity blobs rendered as 4x4
// pixel blocks, class identity encoded by blob position, with per-sample
// jitter and noise. Linearly separable enough to overfit quickly.
inline Dataset make_blob_dataset(int count, int num_classes, int size, uint64_t seed) {
  if (size % 4 != 0) throw std::invalid_argument("blobs: size must be divisible by 4");
  if (num_classes < 2 || num_classes > 4) throw std::invalid_argument("blobs: 2..4 classes supported");
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = num_classes;
  const int blocks = size / 4;
  const double centers[4][2] = {{0.25, 0.25}, {0.75, 0.75}, {0.25, 0.75}, {0.75, 0.25}};
  for (int i = 0; i < count; ++i) {
    const int label = i % num_classes;
    const double cy = centers[label][0] * blocks + rng.uniform(-0.5, 0.5);
    const double cx = centers[label][1] * blocks + rng.uniform(-0.5, 0.5);
    const double sigma = 0.22 * blocks;
    Tensor t = Tensor::zeros({3, size, size});
    for (int by = 0; by < blocks; ++by)
      for (int bx = 0; bx < blocks; ++bx) {
        const double dy = by + 0.5 - cy, dx = bx + 0.5 - cx;
        const double intensity = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
        for (int y = by * 4; y < by * 4 + 4; ++y)
          for (int x = bx * 4; x < bx * 4 + 4; ++x) {
            const double noise = rng.normal(0.0, 0.05);
            const double v = std::clamp(2.0 * intensity - 1.0 + noise, -1.0, 1.0);
            for (int c = 0; c < 3; ++c) t.at3(c, y, x) = static_cast<float>(v);
          }
      }
    ds.images.push_back(std::move(t));
    ds.labels.push_back(label);
  }
  return ds;
}

}  // namespace psvit
