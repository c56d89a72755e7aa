#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dks/tensor.hpp"

namespace dks {

/// An in-memory image classification split. Pixels are raw bytes; `mean` and
/// `std` are per-channel statistics of pixel/255 computed on the training
/// split (test splits carry the training statistics so both normalize the
/// same way).
struct Dataset {
  int64_t num_classes = 0;
  int64_t channels = 0, height = 0, width = 0;
  std::vector<uint8_t> images;  // N * C * H * W, row-major
  std::vector<int32_t> labels;  // N
  std::vector<double> mean, stdev;  // per channel
  std::string split = "train";

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t sample_numel() const { return channels * height * width; }
};

struct SyntheticSpec {
  int64_t classes = 4;
  int64_t per_class = 256;       // training samples per class
  int64_t test_per_class = 0;    // 0 means per_class / 4 (at least 1)
  int64_t channels = 3, height = 32, width = 32;
  double noise_std = 0.25;       // pixel noise on the [0,1] scale
};

/// Deterministic synthetic task: each class is a smooth random template
/// (coarse grid, bilinearly upsampled) plus per-sample Gaussian pixel noise.
/// Both splits share the templates and differ only in noise draws. Labels are
/// exactly balanced and samples are grouped by class.
std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec, uint64_t seed);

/// Reassigns round(ratio * N) distinct labels, chosen without replacement, to
/// a uniformly random *different* class. Returns how many labels changed.
int64_t corrupt_labels(std::vector<int32_t>& labels, int64_t num_classes, double ratio,
                       uint64_t seed);

/// Directory layout: meta.json + images.bin (raw u8) + labels.bin (u16 LE).
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

/// Converters from the two common public binary layouts into the directory
/// format above. Each returns {train, test} with train-split statistics.
std::pair<Dataset, Dataset> convert_cifar10(const std::string& src_dir);
std::pair<Dataset, Dataset> convert_mnist(const std::string& src_dir);

void compute_norm_stats(Dataset& ds);

/// Normalized float batch [B,C,H,W] for the given sample indices, plus the
/// matching labels. Optional augmentation is 4-pixel zero padding with a
/// random crop and horizontal flip.
template <typename T>
std::pair<Tensor<T>, std::vector<int32_t>> make_batch(const Dataset& ds,
                                                      const std::vector<int64_t>& indices,
                                                      bool augment = false,
                                                      std::mt19937_64* rng = nullptr) {
  if (ds.mean.size() != static_cast<size_t>(ds.channels) ||
      ds.stdev.size() != static_cast<size_t>(ds.channels))
    throw DataError("make_batch: dataset is missing per-channel statistics");
  int64_t b = static_cast<int64_t>(indices.size());
  int64_t c = ds.channels, h = ds.height, w = ds.width;
  Tensor<T> x({b, c, h, w});
  std::vector<int32_t> y(b);
  T* px = x.data_mut().data();
  for (int64_t i = 0; i < b; ++i) {
    int64_t idx = indices[i];
    if (idx < 0 || idx >= ds.size())
      throw UsageError("make_batch: index " + std::to_string(idx) + " out of range");
    y[i] = ds.labels[idx];
    const uint8_t* src = ds.images.data() + idx * ds.sample_numel();
    int64_t dy = 0, dx = 0;
    bool flip = false;
    if (augment) {
      if (!rng) throw UsageError("make_batch: augmentation requires an rng");
      std::uniform_int_distribution<int64_t> off(0, 8);  // pad 4 both sides
      dy = off(*rng) - 4;
      dx = off(*rng) - 4;
      flip = std::uniform_int_distribution<int>(0, 1)(*rng) != 0;
    }
    for (int64_t ch = 0; ch < c; ++ch) {
      T mu = static_cast<T>(ds.mean[ch]);
      T inv = static_cast<T>(1.0 / ds.stdev[ch]);
      const uint8_t* plane = src + ch * h * w;
      T* dst = px + ((i * c + ch) * h) * w;
      for (int64_t yy = 0; yy < h; ++yy)
        for (int64_t xx = 0; xx < w; ++xx) {
          int64_t sy = yy + dy;
          int64_t sx = (flip ? w - 1 - xx : xx) + dx;
          T v = T(0);  // zero padding reads as pixel value 0
          if (sy >= 0 && sy < h && sx >= 0 && sx < w)
            v = static_cast<T>(plane[sy * w + sx]) / T(255);
          dst[yy * w + xx] = (v - mu) * inv;
        }
    }
  }
  return {x, y};
}

}  // namespace dks
