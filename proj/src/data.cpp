#include "dks/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dks {

namespace {

/// Bilinear upsample of a coarse grid to h x w on the unit square.
void upsample_bilinear(const std::vector<double>& coarse, int64_t gh, int64_t gw, int64_t h,
                       int64_t w, std::vector<double>& out) {
  out.resize(h * w);
  for (int64_t y = 0; y < h; ++y) {
    double fy = (gh == 1) ? 0.0 : static_cast<double>(y) * (gh - 1) / (h - 1);
    int64_t y0 = static_cast<int64_t>(fy);
    int64_t y1 = std::min(y0 + 1, gh - 1);
    double wy = fy - y0;
    for (int64_t x = 0; x < w; ++x) {
      double fx = (gw == 1) ? 0.0 : static_cast<double>(x) * (gw - 1) / (w - 1);
      int64_t x0 = static_cast<int64_t>(fx);
      int64_t x1 = std::min(x0 + 1, gw - 1);
      double wx = fx - x0;
      double v = coarse[y0 * gw + x0] * (1 - wy) * (1 - wx) +
                 coarse[y0 * gw + x1] * (1 - wy) * wx +
                 coarse[y1 * gw + x0] * wy * (1 - wx) + coarse[y1 * gw + x1] * wy * wx;
      out[y * w + x] = v;
    }
  }
}

uint8_t quantize(double v) {
  double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<uint8_t>(q);
}

void fill_split(Dataset& ds, const std::vector<std::vector<double>>& templates,
                const SyntheticSpec& spec, int64_t per_class, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  int64_t sample = spec.channels * spec.height * spec.width;
  ds.num_classes = spec.classes;
  ds.channels = spec.channels;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.images.resize(spec.classes * per_class * sample);
  ds.labels.resize(spec.classes * per_class);
  int64_t n = 0;
  for (int64_t c = 0; c < spec.classes; ++c) {
    const auto& tmpl = templates[c];
    for (int64_t i = 0; i < per_class; ++i, ++n) {
      ds.labels[n] = static_cast<int32_t>(c);
      uint8_t* dst = ds.images.data() + n * sample;
      for (int64_t p = 0; p < sample; ++p) dst[p] = quantize(tmpl[p] + noise(rng));
    }
  }
}

void write_file(const fs::path& p, const void* data, size_t bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("dataset: cannot write '" + p.string() + "'");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw IoError("dataset: short write to '" + p.string() + "'");
}

std::vector<uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("dataset: cannot open '" + p.string() + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

uint32_t read_be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

}  // namespace

void compute_norm_stats(Dataset& ds) {
  int64_t plane = ds.height * ds.width;
  int64_t n = ds.size();
  ds.mean.assign(ds.channels, 0.0);
  ds.stdev.assign(ds.channels, 0.0);
  for (int64_t c = 0; c < ds.channels; ++c) {
    double sum = 0, sumsq = 0;
    for (int64_t i = 0; i < n; ++i) {
      const uint8_t* src = ds.images.data() + (i * ds.channels + c) * plane;
      for (int64_t p = 0; p < plane; ++p) {
        double v = src[p] / 255.0;
        sum += v;
        sumsq += v * v;
      }
    }
    double m = sum / (n * plane);
    double var = std::max(1e-12, sumsq / (n * plane) - m * m);
    ds.mean[c] = m;
    ds.stdev[c] = std::sqrt(var);
  }
}

std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec, uint64_t seed) {
  if (spec.classes < 2) throw ConfigError("synthetic: need at least 2 classes");
  if (spec.per_class < 1) throw ConfigError("synthetic: per_class must be >= 1");

  int64_t test_per_class = spec.test_per_class > 0 ? spec.test_per_class
                                                   : std::max<int64_t>(1, spec.per_class / 4);

  // one smooth template per class, shared by both splits
  std::mt19937_64 tmpl_rng(mix_seed(seed, seed_tag::synthetic));
  std::uniform_real_distribution<double> level(0.15, 0.85);
  const int64_t gh = 4, gw = 4;
  std::vector<std::vector<double>> templates(spec.classes);
  std::vector<double> coarse(gh * gw), plane;
  for (int64_t c = 0; c < spec.classes; ++c) {
    templates[c].reserve(spec.channels * spec.height * spec.width);
    for (int64_t ch = 0; ch < spec.channels; ++ch) {
      for (auto& v : coarse) v = level(tmpl_rng);
      upsample_bilinear(coarse, gh, gw, spec.height, spec.width, plane);
      templates[c].insert(templates[c].end(), plane.begin(), plane.end());
    }
  }

  Dataset train, test;
  train.split = "train";
  test.split = "test";
  std::mt19937_64 train_rng(mix_seed(seed, seed_tag::synthetic + 100));
  std::mt19937_64 test_rng(mix_seed(seed, seed_tag::synthetic + 200));
  fill_split(train, templates, spec, spec.per_class, train_rng);
  fill_split(test, templates, spec, test_per_class, test_rng);

  compute_norm_stats(train);
  test.mean = train.mean;  // test normalizes with training statistics
  test.stdev = train.stdev;
  return {train, test};
}

int64_t corrupt_labels(std::vector<int32_t>& labels, int64_t num_classes, double ratio,
                       uint64_t seed) {
  if (ratio < 0 || ratio > 1) throw ConfigError("corrupt_labels: ratio must be in [0,1]");
  if (ratio == 0) return 0;
  if (num_classes < 2)
    throw ConfigError("corrupt_labels: cannot pick a different label with fewer than 2 classes");
  int64_t n = static_cast<int64_t>(labels.size());
  int64_t m = static_cast<int64_t>(std::llround(ratio * static_cast<double>(n)));
  std::mt19937_64 rng(mix_seed(seed, seed_tag::corrupt));
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int64_t> pick(0, num_classes - 2);
  for (int64_t i = 0; i < m; ++i) {
    int64_t idx = order[i];
    int64_t shifted = pick(rng);  // uniform over the K-1 classes != original
    labels[idx] = static_cast<int32_t>(shifted >= labels[idx] ? shifted + 1 : shifted);
  }
  return m;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
  fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("dataset: cannot create directory '" + dir + "'");

  json meta;
  meta["version"] = 1;
  meta["K"] = ds.num_classes;
  meta["N"] = ds.size();
  meta["shape"] = {ds.channels, ds.height, ds.width};
  meta["mean"] = ds.mean;
  meta["std"] = ds.stdev;
  meta["split"] = ds.split;
  std::string text = meta.dump(2) + "\n";
  write_file(root / "meta.json", text.data(), text.size());

  write_file(root / "images.bin", ds.images.data(), ds.images.size());

  std::vector<uint8_t> lab(ds.labels.size() * 2);
  for (size_t i = 0; i < ds.labels.size(); ++i) {
    uint16_t v = static_cast<uint16_t>(ds.labels[i]);
    lab[2 * i] = static_cast<uint8_t>(v & 0xff);
    lab[2 * i + 1] = static_cast<uint8_t>(v >> 8);
  }
  write_file(root / "labels.bin", lab.data(), lab.size());
}

Dataset load_dataset(const std::string& dir) {
  fs::path root(dir);
  json meta;
  try {
    auto bytes = read_file(root / "meta.json");
    meta = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw IoError("dataset: corrupt meta.json in '" + dir + "': " + e.what());
  }

  Dataset ds;
  try {
    if (meta.at("version").get<int64_t>() != 1)
      throw IoError("dataset: unsupported version in '" + dir + "'");
    ds.num_classes = meta.at("K").get<int64_t>();
    auto shape = meta.at("shape").get<std::vector<int64_t>>();
    if (shape.size() != 3) throw IoError("dataset: shape must be [C,H,W] in '" + dir + "'");
    ds.channels = shape[0];
    ds.height = shape[1];
    ds.width = shape[2];
    ds.mean = meta.at("mean").get<std::vector<double>>();
    ds.stdev = meta.at("std").get<std::vector<double>>();
    ds.split = meta.at("split").get<std::string>();
    int64_t n = meta.at("N").get<int64_t>();

    ds.images = read_file(root / "images.bin");
    if (static_cast<int64_t>(ds.images.size()) != n * ds.sample_numel())
      throw IoError("dataset: images.bin holds " + std::to_string(ds.images.size()) +
                    " bytes, expected " + std::to_string(n * ds.sample_numel()) + " in '" + dir +
                    "'");
    auto lab = read_file(root / "labels.bin");
    if (static_cast<int64_t>(lab.size()) != n * 2)
      throw IoError("dataset: labels.bin holds " + std::to_string(lab.size()) +
                    " bytes, expected " + std::to_string(n * 2) + " in '" + dir + "'");
    ds.labels.resize(n);
    for (int64_t i = 0; i < n; ++i) {
      uint16_t v = static_cast<uint16_t>(lab[2 * i]) |
                   (static_cast<uint16_t>(lab[2 * i + 1]) << 8);
      if (v >= ds.num_classes)
        throw DataError("dataset: label " + std::to_string(v) + " at index " + std::to_string(i) +
                        " exceeds K=" + std::to_string(ds.num_classes) + " in '" + dir + "'");
      ds.labels[i] = static_cast<int32_t>(v);
    }
    if (ds.mean.size() != static_cast<size_t>(ds.channels) ||
        ds.stdev.size() != static_cast<size_t>(ds.channels))
      throw IoError("dataset: mean/std arity does not match channel count in '" + dir + "'");
  } catch (const json::exception& e) {
    throw IoError("dataset: corrupt meta.json in '" + dir + "': " + e.what());
  }
  return ds;
}

std::pair<Dataset, Dataset> convert_cifar10(const std::string& src_dir) {
  // raw batches: 10000 records of [1 label byte][3072 image bytes], 3x32x32
  auto read_batch = [](const fs::path& p, Dataset& ds) {
    auto bytes = read_file(p);
    constexpr size_t rec = 1 + 3 * 32 * 32;
    if (bytes.size() % rec != 0)
      throw IoError("cifar10: '" + p.string() + "' is not a whole number of records");
    size_t n = bytes.size() / rec;
    for (size_t i = 0; i < n; ++i) {
      const uint8_t* r = bytes.data() + i * rec;
      if (r[0] > 9) throw DataError("cifar10: label " + std::to_string(r[0]) + " out of range");
      ds.labels.push_back(r[0]);
      ds.images.insert(ds.images.end(), r + 1, r + rec);
    }
  };

  Dataset train, test;
  for (auto& ds : {&train, &test}) {
    ds->num_classes = 10;
    ds->channels = 3;
    ds->height = 32;
    ds->width = 32;
  }
  train.split = "train";
  test.split = "test";

  fs::path root(src_dir);
  for (int b = 1; b <= 5; ++b)
    read_batch(root / ("data_batch_" + std::to_string(b) + ".bin"), train);
  read_batch(root / "test_batch.bin", test);

  compute_norm_stats(train);
  test.mean = train.mean;
  test.stdev = train.stdev;
  return {train, test};
}

std::pair<Dataset, Dataset> convert_mnist(const std::string& src_dir) {
  auto read_idx_images = [](const fs::path& p, Dataset& ds) {
    auto b = read_file(p);
    if (b.size() < 16 || read_be32(b.data()) != 0x0803)
      throw IoError("mnist: '" + p.string() + "' is not an idx3 image file");
    uint32_t n = read_be32(b.data() + 4), h = read_be32(b.data() + 8), w = read_be32(b.data() + 12);
    if (b.size() != 16 + size_t(n) * h * w)
      throw IoError("mnist: '" + p.string() + "' truncated");
    ds.channels = 1;
    ds.height = h;
    ds.width = w;
    ds.images.assign(b.begin() + 16, b.end());
    return n;
  };
  auto read_idx_labels = [](const fs::path& p, Dataset& ds, uint32_t expect) {
    auto b = read_file(p);
    if (b.size() < 8 || read_be32(b.data()) != 0x0801)
      throw IoError("mnist: '" + p.string() + "' is not an idx1 label file");
    uint32_t n = read_be32(b.data() + 4);
    if (n != expect || b.size() != 8 + size_t(n))
      throw IoError("mnist: '" + p.string() + "' does not match its image file");
    for (uint32_t i = 0; i < n; ++i) {
      if (b[8 + i] > 9) throw DataError("mnist: label out of range at index " + std::to_string(i));
      ds.labels.push_back(b[8 + i]);
    }
  };

  Dataset train, test;
  train.split = "train";
  test.split = "test";
  train.num_classes = test.num_classes = 10;
  fs::path root(src_dir);
  uint32_t n = read_idx_images(root / "train-images-idx3-ubyte", train);
  read_idx_labels(root / "train-labels-idx1-ubyte", train, n);
  n = read_idx_images(root / "t10k-images-idx3-ubyte", test);
  read_idx_labels(root / "t10k-labels-idx1-ubyte", test, n);

  compute_norm_stats(train);
  test.mean = train.mean;
  test.stdev = train.stdev;
  return {train, test};
}

}  // namespace dks
