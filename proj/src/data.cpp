#include "capsroute/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "capsroute/rng.hpp"

namespace capsroute {

namespace {

std::uint32_t read_u32_be(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_u32_be(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_binary(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw DataError("cannot open " + file.string());
  }
  return in;
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;  // 2051
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;  // 2049
constexpr std::uint32_t kIdxPairLabelsMagic = 0x00000802;
constexpr std::size_t kCifarRecordBytes = 3073;  // 1 label byte + 3*32*32 pixels

}  // namespace

Tensor Dataset::image(std::size_t i) const {
  const std::size_t n = image_size();
  Tensor t({channels, height, width});
  std::memcpy(t.data(), pixels.data() + i * n, n * sizeof(double));
  return t;
}

void Dataset::append(const Tensor& image, LabelSet label) {
  if (image.rank() != 3 || image.dim(0) != channels || image.dim(1) != height ||
      image.dim(2) != width) {
    throw DataError("append: image shape " + shape_string(image.shape()) +
                    " does not match dataset geometry");
  }
  pixels.insert(pixels.end(), image.data(), image.data() + image.size());
  labels.push_back(label);
}

void Dataset::check_pixel_range() const {
  for (double p : pixels) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw DataError("pixel value " + std::to_string(p) + " outside [0,1]");
    }
  }
}

Dataset load_idx_pair(const std::filesystem::path& images_file,
                      const std::filesystem::path& labels_file,
                      const std::string& split) {
  std::ifstream imgs = open_binary(images_file);
  const std::uint32_t magic = read_u32_be(imgs);
  if (magic != kIdxImagesMagic) {
    throw DataError(images_file.string() + ": bad magic " + std::to_string(magic) +
                    ", expected 2051");
  }
  const std::uint32_t count = read_u32_be(imgs);
  const std::uint32_t rows = read_u32_be(imgs);
  const std::uint32_t cols = read_u32_be(imgs);

  std::ifstream lbls = open_binary(labels_file);
  const std::uint32_t lmagic = read_u32_be(lbls);
  if (lmagic != kIdxLabelsMagic) {
    throw DataError(labels_file.string() + ": bad magic " + std::to_string(lmagic) +
                    ", expected 2049");
  }
  const std::uint32_t lcount = read_u32_be(lbls);
  if (lcount != count) {
    throw DataError("image count " + std::to_string(count) +
                    " != label count " + std::to_string(lcount));
  }

  Dataset ds;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.split = split;
  ds.pixels.resize(std::size_t(count) * rows * cols);
  ds.labels.resize(count);

  std::vector<unsigned char> buf(std::size_t(rows) * cols);
  for (std::uint32_t i = 0; i < count; ++i) {
    imgs.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!imgs) {
      throw DataError(images_file.string() + ": truncated at image " +
                      std::to_string(i));
    }
    double* dst = ds.pixels.data() + std::size_t(i) * buf.size();
    for (std::size_t p = 0; p < buf.size(); ++p) dst[p] = buf[p] / 255.0;
    char lb;
    lbls.read(&lb, 1);
    if (!lbls) {
      throw DataError(labels_file.string() + ": truncated at label " +
                      std::to_string(i));
    }
    ds.labels[i] = LabelSet{static_cast<unsigned char>(lb), -1};
  }
  ds.check_pixel_range();
  return ds;
}

SplitPair load_mnist(const std::filesystem::path& dir) {
  SplitPair pair;
  pair.train = load_idx_pair(dir / "train-images-idx3-ubyte",
                             dir / "train-labels-idx1-ubyte", "train");
  pair.test = load_idx_pair(dir / "t10k-images-idx3-ubyte",
                            dir / "t10k-labels-idx1-ubyte", "test");
  return pair;
}

void write_idx_images(const Dataset& ds, const std::filesystem::path& file) {
  if (ds.channels != 1) {
    throw DataError("write_idx_images: only single-channel data fits IDX images");
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot open " + file.string() + " for writing");
  }
  write_u32_be(out, kIdxImagesMagic);
  write_u32_be(out, static_cast<std::uint32_t>(ds.size()));
  write_u32_be(out, static_cast<std::uint32_t>(ds.height));
  write_u32_be(out, static_cast<std::uint32_t>(ds.width));
  std::vector<unsigned char> buf(ds.height * ds.width);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double* src = ds.pixels.data() + i * buf.size();
    for (std::size_t p = 0; p < buf.size(); ++p) {
      buf[p] = static_cast<unsigned char>(std::lround(src[p] * 255.0));
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  }
}

void write_idx_labels(const Dataset& ds, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot open " + file.string() + " for writing");
  }
  const bool pairs = !ds.labels.empty() && !ds.labels.front().single();
  write_u32_be(out, pairs ? kIdxPairLabelsMagic : kIdxLabelsMagic);
  write_u32_be(out, static_cast<std::uint32_t>(ds.size()));
  if (pairs) write_u32_be(out, 2);
  for (const LabelSet& l : ds.labels) {
    const char a = static_cast<char>(l.first);
    out.write(&a, 1);
    if (pairs) {
      const char b = static_cast<char>(l.second);
      out.write(&b, 1);
    }
  }
}

namespace {

Dataset load_idx_images_only(const std::filesystem::path& images_file,
                             const std::string& split) {
  std::ifstream imgs = open_binary(images_file);
  const std::uint32_t magic = read_u32_be(imgs);
  if (magic != kIdxImagesMagic) {
    throw DataError(images_file.string() + ": bad magic " + std::to_string(magic) +
                    ", expected 2051");
  }
  const std::uint32_t count = read_u32_be(imgs);
  const std::uint32_t rows = read_u32_be(imgs);
  const std::uint32_t cols = read_u32_be(imgs);
  Dataset ds;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.split = split;
  ds.pixels.resize(std::size_t(count) * rows * cols);
  ds.labels.resize(count);
  std::vector<unsigned char> buf(std::size_t(rows) * cols);
  for (std::uint32_t i = 0; i < count; ++i) {
    imgs.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!imgs) {
      throw DataError(images_file.string() + ": truncated at image " +
                      std::to_string(i));
    }
    double* dst = ds.pixels.data() + std::size_t(i) * buf.size();
    for (std::size_t p = 0; p < buf.size(); ++p) dst[p] = buf[p] / 255.0;
  }
  return ds;
}

}  // namespace

Dataset load_idx_two_label_pair(const std::filesystem::path& images_file,
                                const std::filesystem::path& labels_file,
                                const std::string& split) {
  Dataset ds = load_idx_images_only(images_file, split);
  std::ifstream lbls = open_binary(labels_file);
  const std::uint32_t lmagic = read_u32_be(lbls);
  if (lmagic != kIdxPairLabelsMagic) {
    throw DataError(labels_file.string() + ": bad magic " + std::to_string(lmagic) +
                    ", expected a two-column ubyte label file");
  }
  const std::uint32_t lcount = read_u32_be(lbls);
  const std::uint32_t lwidth = read_u32_be(lbls);
  if (lcount != ds.size() || lwidth != 2) {
    throw DataError(labels_file.string() + ": label table " + std::to_string(lcount) +
                    "x" + std::to_string(lwidth) + " does not match " +
                    std::to_string(ds.size()) + " images");
  }
  for (std::uint32_t i = 0; i < lcount; ++i) {
    char ab[2];
    lbls.read(ab, 2);
    if (!lbls) {
      throw DataError(labels_file.string() + ": truncated at label " +
                      std::to_string(i));
    }
    ds.labels[i] = LabelSet{static_cast<unsigned char>(ab[0]),
                            static_cast<unsigned char>(ab[1])};
  }
  ds.check_pixel_range();
  return ds;
}

SplitPair load_cifar10(const std::filesystem::path& dir) {
  SplitPair pair;
  std::vector<std::filesystem::path> train_files;
  for (int i = 1; i <= 5; ++i) {
    train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  }
  pair.train = load_cifar_batches(train_files, "train");
  pair.test = load_cifar_batches({dir / "test_batch.bin"}, "test");
  return pair;
}

Dataset load_cifar_batches(const std::vector<std::filesystem::path>& files,
                           const std::string& split) {
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.split = split;
  for (const auto& file : files) {
    std::ifstream in = open_binary(file);
    in.seekg(0, std::ios::end);
    const std::uint64_t bytes = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    if (bytes % kCifarRecordBytes != 0) {
      throw DataError(file.string() + ": size " + std::to_string(bytes) +
                      " is not a multiple of the 3073-byte record");
    }
    const std::uint64_t count = bytes / kCifarRecordBytes;
    std::vector<unsigned char> rec(kCifarRecordBytes);
    for (std::uint64_t i = 0; i < count; ++i) {
      in.read(reinterpret_cast<char*>(rec.data()), kCifarRecordBytes);
      if (!in) {
        throw DataError(file.string() + ": truncated at record " +
                        std::to_string(i));
      }
      ds.labels.push_back(LabelSet{rec[0], -1});
      for (std::size_t p = 0; p + 1 < rec.size(); ++p) {
        ds.pixels.push_back(rec[p + 1] / 255.0);
      }
    }
  }
  ds.check_pixel_range();
  return ds;
}

void write_cifar_batch(const Dataset& ds, const std::filesystem::path& file) {
  if (ds.channels != 3 || ds.height != 32 || ds.width != 32) {
    throw DataError("write_cifar_batch: dataset is not 3x32x32");
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot open " + file.string() + " for writing");
  }
  const std::size_t n = ds.image_size();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const char label = static_cast<char>(ds.labels[i].first);
    out.write(&label, 1);
    const double* src = ds.pixels.data() + i * n;
    for (std::size_t p = 0; p < n; ++p) {
      const unsigned char b = static_cast<unsigned char>(std::lround(src[p] * 255.0));
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
}

Dataset synthesize_multimnist(const Dataset& base, int per_image,
                              std::uint64_t seed) {
  if (per_image < 1) {
    throw DataError("synthesize_multimnist: per_image must be >= 1");
  }
  if (base.size() < 2) {
    throw DataError("synthesize_multimnist: need at least two base images");
  }
  constexpr std::size_t kCanvas = 36;
  constexpr int kMaxShift = 4;
  Dataset out;
  out.channels = 1;
  out.height = kCanvas;
  out.width = kCanvas;
  out.split = base.split;
  out.pixels.reserve(base.size() * per_image * kCanvas * kCanvas);
  out.labels.reserve(base.size() * per_image);

  Rng rng(seed);
  const std::size_t img_n = base.height * base.width;
  std::vector<double> canvas(kCanvas * kCanvas);

  auto place = [&](std::size_t idx, int dx, int dy) {
    const double* src = base.pixels.data() + idx * img_n;
    const std::size_t x0 = static_cast<std::size_t>(kMaxShift + dx);
    const std::size_t y0 = static_cast<std::size_t>(kMaxShift + dy);
    for (std::size_t y = 0; y < base.height; ++y) {
      for (std::size_t x = 0; x < base.width; ++x) {
        double& dst = canvas[(y + y0) * kCanvas + (x + x0)];
        dst = std::max(dst, src[y * base.width + x]);
      }
    }
  };

  for (std::size_t i = 0; i < base.size(); ++i) {
    for (int k = 0; k < per_image; ++k) {
      std::size_t partner;
      do {
        partner = static_cast<std::size_t>(rng.below(base.size()));
      } while (base.labels[partner].first == base.labels[i].first);
      std::fill(canvas.begin(), canvas.end(), 0.0);
      place(i, static_cast<int>(rng.range(-kMaxShift, kMaxShift)),
            static_cast<int>(rng.range(-kMaxShift, kMaxShift)));
      place(partner, static_cast<int>(rng.range(-kMaxShift, kMaxShift)),
            static_cast<int>(rng.range(-kMaxShift, kMaxShift)));
      out.pixels.insert(out.pixels.end(), canvas.begin(), canvas.end());
      out.labels.push_back(LabelSet{base.labels[i].first, base.labels[partner].first});
    }
  }
  return out;
}

Dataset stratified_subset(const Dataset& ds, std::size_t per_class) {
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.split = ds.split;
  std::vector<std::size_t> taken(256, 0);
  const std::size_t n = ds.image_size();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int c = ds.labels[i].first;
    if (taken[static_cast<std::size_t>(c)] >= per_class) continue;
    ++taken[static_cast<std::size_t>(c)];
    out.pixels.insert(out.pixels.end(), ds.pixels.begin() + i * n,
                      ds.pixels.begin() + (i + 1) * n);
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

Tensor shifted_image(const Tensor& image, int dx, int dy) {
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  Tensor out({C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) - dy;
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
      for (std::size_t x = 0; x < W; ++x) {
        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) - dx;
        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
        out.at3(c, y, x) = image.at3(c, static_cast<std::size_t>(sy),
                                     static_cast<std::size_t>(sx));
      }
    }
  }
  return out;
}

namespace {

double quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return std::lround(v * 255.0) / 255.0;
}

// Stroke painters on a [H x W] single-channel grid.
struct Canvas {
  std::vector<double>& px;
  std::size_t H, W;
  void set(std::ptrdiff_t y, std::ptrdiff_t x, double v) {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(H) ||
        x >= static_cast<std::ptrdiff_t>(W))
      return;
    px[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] =
        std::max(px[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)], v);
  }
  void hline(int y, int x0, int x1, double v) {
    for (int x = x0; x <= x1; ++x) {
      set(y, x, v);
      set(y + 1, x, v);
    }
  }
  void vline(int x, int y0, int y1, double v) {
    for (int y = y0; y <= y1; ++y) {
      set(y, x, v);
      set(y, x + 1, v);
    }
  }
  void diag(int y0, int x0, int y1, int x1, double v) {
    const int steps = std::max(std::abs(y1 - y0), std::abs(x1 - x0));
    for (int s = 0; s <= steps; ++s) {
      const int y = y0 + (y1 - y0) * s / std::max(1, steps);
      const int x = x0 + (x1 - x0) * s / std::max(1, steps);
      set(y, x, v);
      set(y, x + 1, v);
    }
  }
  void ring(int cy, int cx, int r, double v) {
    for (int a = 0; a < 64; ++a) {
      const double th = 2.0 * 3.14159265358979 * a / 64.0;
      set(cy + static_cast<int>(std::lround(r * std::sin(th))),
          cx + static_cast<int>(std::lround(r * std::cos(th))), v);
      set(cy + static_cast<int>(std::lround((r - 1) * std::sin(th))),
          cx + static_cast<int>(std::lround((r - 1) * std::cos(th))), v);
    }
  }
  void disk(int cy, int cx, int r, double v) {
    for (int y = -r; y <= r; ++y)
      for (int x = -r; x <= r; ++x)
        if (y * y + x * x <= r * r) set(cy + y, cx + x, v);
  }
  void box(int y0, int x0, int y1, int x1, double v) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(y, x, v);
  }
};

// Ten distinct stroke glyphs, roughly digit-like, drawn around (cy, cx).
void paint_glyph(Canvas& c, int cls, int cy, int cx, double v) {
  switch (cls) {
    case 0:
      c.ring(cy, cx, 8, v);
      break;
    case 1:
      c.vline(cx, cy - 8, cy + 8, v);
      break;
    case 2:
      c.hline(cy - 8, cx - 6, cx + 6, v);
      c.diag(cy + 8, cx - 6, cy - 8, cx + 6, v);
      c.hline(cy + 8, cx - 6, cx + 6, v);
      break;
    case 3:
      c.hline(cy - 8, cx - 5, cx + 5, v);
      c.hline(cy, cx - 3, cx + 5, v);
      c.hline(cy + 8, cx - 5, cx + 5, v);
      c.vline(cx + 5, cy - 8, cy + 8, v);
      break;
    case 4:
      c.vline(cx + 4, cy - 8, cy + 8, v);
      c.vline(cx - 5, cy - 8, cy, v);
      c.hline(cy, cx - 5, cx + 4, v);
      break;
    case 5:
      c.hline(cy - 8, cx - 5, cx + 5, v);
      c.vline(cx - 5, cy - 8, cy, v);
      c.hline(cy, cx - 5, cx + 5, v);
      c.vline(cx + 5, cy, cy + 8, v);
      c.hline(cy + 8, cx - 5, cx + 5, v);
      break;
    case 6:
      c.vline(cx - 5, cy - 8, cy + 8, v);
      c.ring(cy + 4, cx, 4, v);
      break;
    case 7:
      c.hline(cy - 8, cx - 6, cx + 6, v);
      c.diag(cy - 8, cx + 6, cy + 8, cx - 2, v);
      break;
    case 8:
      c.ring(cy - 4, cx, 4, v);
      c.ring(cy + 4, cx, 4, v);
      break;
    case 9:
      c.ring(cy - 4, cx, 4, v);
      c.vline(cx + 4, cy - 4, cy + 8, v);
      break;
    default:
      break;
  }
}

}  // namespace

Dataset synthetic_digits(std::size_t count, std::uint64_t seed,
                         const std::string& split) {
  Dataset ds;
  ds.channels = 1;
  ds.height = 28;
  ds.width = 28;
  ds.split = split;
  ds.pixels.resize(count * 28 * 28, 0.0);
  ds.labels.resize(count);

  Rng rng(seed);
  std::vector<double> img(28 * 28);
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(i % 10);
    std::fill(img.begin(), img.end(), 0.0);
    Canvas canvas{img, 28, 28};
    const int cy = 13 + static_cast<int>(rng.range(-3, 3));
    const int cx = 13 + static_cast<int>(rng.range(-3, 3));
    const double v = rng.uniform(0.65, 1.0);
    paint_glyph(canvas, cls, cy, cx, v);
    double* dst = ds.pixels.data() + i * img.size();
    for (std::size_t p = 0; p < img.size(); ++p) {
      dst[p] = quantize(img[p] + rng.uniform(0.0, 0.08));
    }
    ds.labels[i] = LabelSet{cls, -1};
  }
  return ds;
}

Dataset synthetic_color_shapes(std::size_t count, std::uint64_t seed,
                               const std::string& split) {
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.split = split;
  ds.pixels.resize(count * 3 * 32 * 32, 0.0);
  ds.labels.resize(count);

  // (shape, dominant color channel) combinations per class.
  static const int kShape[10] = {0, 1, 2, 3, 4, 0, 1, 2, 3, 4};
  static const int kColor[10] = {0, 0, 1, 1, 2, 2, 0, 1, 2, 0};

  Rng rng(seed);
  std::vector<double> chan(32 * 32);
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(i % 10);
    const int cy = 16 + static_cast<int>(rng.range(-4, 4));
    const int cx = 16 + static_cast<int>(rng.range(-4, 4));
    const double v = rng.uniform(0.7, 1.0);

    std::fill(chan.begin(), chan.end(), 0.0);
    Canvas canvas{chan, 32, 32};
    switch (kShape[cls]) {
      case 0:
        canvas.disk(cy, cx, 7, v);
        break;
      case 1:
        canvas.box(cy - 6, cx - 6, cy + 6, cx + 6, v);
        break;
      case 2:
        canvas.hline(cy, cx - 8, cx + 8, v);
        canvas.vline(cx, cy - 8, cy + 8, v);
        break;
      case 3:
        canvas.ring(cy, cx, 8, v);
        canvas.ring(cy, cx, 7, v);
        break;
      case 4:
        for (int s = -8; s <= 8; s += 4) canvas.vline(cx + s, cy - 8, cy + 8, v);
        break;
      default:
        break;
    }

    double* dst = ds.pixels.data() + i * 3 * 32 * 32;
    for (int ch = 0; ch < 3; ++ch) {
      const double gain = ch == kColor[cls] ? 1.0 : 0.25;
      for (std::size_t p = 0; p < chan.size(); ++p) {
        dst[ch * 32 * 32 + p] = quantize(gain * chan[p] + rng.uniform(0.0, 0.1));
      }
    }
    ds.labels[i] = LabelSet{cls, -1};
  }
  return ds;
}

}  // namespace capsroute
