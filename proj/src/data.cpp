#include "dcs/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace dcs {

namespace fs = std::filesystem;

namespace {

constexpr int kSide = 32;
constexpr std::size_t kPixelBytes = 3 * kSide * kSide;

std::size_t record_size(CifarVariant v) {
  return v == CifarVariant::Cifar10 ? 1 + kPixelBytes : 2 + kPixelBytes;
}

std::vector<std::uint8_t> read_all(const std::string& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

}  // namespace

std::vector<LabeledImage> load_cifar_file(const std::string& file, CifarVariant variant) {
  const auto bytes = read_all(file);
  const std::size_t rec = record_size(variant);
  if (bytes.empty() || bytes.size() % rec != 0)
    throw FormatError(file + ": length " + std::to_string(bytes.size()) +
                          " is not a positive multiple of the record size " + std::to_string(rec),
                      bytes.size());
  std::vector<LabeledImage> out;
  out.reserve(bytes.size() / rec);
  for (std::size_t off = 0; off < bytes.size(); off += rec) {
    LabeledImage img;
    std::size_t px = off;
    if (variant == CifarVariant::Cifar10) {
      img.label = bytes[off];
      if (img.label > 9) throw FormatError(file + ": label out of range", off);
      px += 1;
    } else {
      img.coarse_label = bytes[off];
      img.label = bytes[off + 1];
      if (img.coarse_label > 19) throw FormatError(file + ": coarse label out of range", off);
      if (img.label > 99) throw FormatError(file + ": fine label out of range", off + 1);
      px += 2;
    }
    img.pixels = Tensor<float>({3, kSide, kSide});
    for (std::size_t i = 0; i < kPixelBytes; ++i)
      img.pixels.data()[i] = static_cast<float>(bytes[px + i]) / 255.0f;
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<LabeledImage> load_cifar(const std::string& dir, CifarVariant variant, Split split) {
  fs::path root(dir);
  const char* sub = variant == CifarVariant::Cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary";
  if (fs::exists(root / sub)) root /= sub;

  std::vector<std::string> files;
  if (variant == CifarVariant::Cifar10) {
    if (split == Split::Train)
      for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    else
      files.push_back("test_batch.bin");
  } else {
    files.push_back(split == Split::Train ? "train.bin" : "test.bin");
  }

  std::vector<LabeledImage> out;
  for (const auto& f : files) {
    auto part = load_cifar_file((root / f).string(), variant);
    out.insert(out.end(), std::make_move_iterator(part.begin()),
               std::make_move_iterator(part.end()));
  }
  return out;
}

std::vector<std::uint8_t> record_bytes(const LabeledImage& img, CifarVariant variant) {
  std::vector<std::uint8_t> out;
  out.reserve(record_size(variant));
  if (variant == CifarVariant::Cifar10) {
    out.push_back(static_cast<std::uint8_t>(img.label));
  } else {
    out.push_back(static_cast<std::uint8_t>(img.coarse_label < 0 ? 0 : img.coarse_label));
    out.push_back(static_cast<std::uint8_t>(img.label));
  }
  for (std::size_t i = 0; i < kPixelBytes; ++i) {
    const long v = std::lround(static_cast<double>(img.pixels.data()[i]) * 255.0);
    out.push_back(static_cast<std::uint8_t>(std::clamp(v, 0L, 255L)));
  }
  return out;
}

void save_cifar_file(const std::string& file, const std::vector<LabeledImage>& images,
                     CifarVariant variant) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file);
  for (const auto& img : images) {
    const auto rec = record_bytes(img, variant);
    out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw IoError("short write to " + file);
}

std::vector<LabeledImage> make_synthetic(int num_classes, int per_class, int side,
                                         std::uint64_t seed) {
  if (num_classes < 1 || per_class < 1 || side < 1)
    throw ConfigError("make_synthetic: all arguments must be positive");
  std::vector<LabeledImage> out;
  out.reserve(static_cast<std::size_t>(num_classes) * per_class);
  for (int c = 0; c < num_classes; ++c) {
    const double fx = 1.0 + c % 3;
    const double fy = 1.0 + (c / 3) % 3;
    const double phase = 2.0 * M_PI * c / num_classes;
    for (int i = 0; i < per_class; ++i) {
      auto rng = derive_rng(seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)});
      LabeledImage img;
      img.label = c;
      img.pixels = Tensor<float>({3, side, side});
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < side; ++y)
          for (int x = 0; x < side; ++x) {
            const double wave = std::sin(2.0 * M_PI * (fx * x + fy * y) / side + phase +
                                         ch * (M_PI / 3.0));
            const double v = 0.5 + 0.35 * wave + rng.uniform(-0.08, 0.08);
            img.pixels.data()[(ch * side + y) * side + x] =
                clamp01(static_cast<float>(v));
          }
      out.push_back(std::move(img));
    }
  }
  return out;
}

void AugmentationConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(jitter_p) || !prob(grayscale_p) || !prob(blur_p) || !prob(flip_p))
    throw ConfigError("augmentation: probabilities must lie in [0,1]");
  if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0))
    throw ConfigError("augmentation: crop scale range must satisfy 0 < lo <= hi <= 1");
  if (blur_sigma_lo <= 0.0 || blur_sigma_hi < blur_sigma_lo)
    throw ConfigError("augmentation: blur sigma range must be positive and ordered");
  if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0 || hue < 0.0 || hue > 0.5)
    throw ConfigError("augmentation: jitter strengths out of range");
}

namespace {

// Mutable [3,side,side] pixel buffer used by the augmentation steps.
struct PixelBuf {
  int side = 0;
  std::vector<float> v;

  float& at(int c, int y, int x) { return v[static_cast<std::size_t>((c * side + y) * side + x)]; }
  float at(int c, int y, int x) const {
    return v[static_cast<std::size_t>((c * side + y) * side + x)];
  }
};

// Crop-window selection: up to ten area/aspect proposals, then a centered
// fallback clamped to the feasible aspect range.
struct CropWindow {
  int i = 0, j = 0, h = 0, w = 0;
};

CropWindow pick_crop(int side, double scale_lo, double scale_hi, Rng& rng) {
  const double area = static_cast<double>(side) * side;
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale_lo, scale_hi);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= side && h <= side) {
      CropWindow c;
      c.h = h;
      c.w = w;
      c.i = static_cast<int>(rng.uniform_int(0, side - h));
      c.j = static_cast<int>(rng.uniform_int(0, side - w));
      return c;
    }
  }
  CropWindow c;  // square input: the fallback is the full frame
  c.h = c.w = side;
  return c;
}

PixelBuf resize_crop(const PixelBuf& src, const CropWindow& cw, int out_side) {
  PixelBuf out;
  out.side = out_side;
  out.v.assign(static_cast<std::size_t>(3) * out_side * out_side, 0.0f);
  const double sy = static_cast<double>(cw.h) / out_side;
  const double sx = static_cast<double>(cw.w) / out_side;
  for (int y = 0; y < out_side; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    const float wy = static_cast<float>(fy - y0);
    const int y1 = std::min(std::max(y0 + 1, 0), cw.h - 1);
    y0 = std::min(std::max(y0, 0), cw.h - 1);
    for (int x = 0; x < out_side; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      const float wx = static_cast<float>(fx - x0);
      const int x1 = std::min(std::max(x0 + 1, 0), cw.w - 1);
      x0 = std::min(std::max(x0, 0), cw.w - 1);
      for (int ch = 0; ch < 3; ++ch) {
        const float p00 = src.at(ch, cw.i + y0, cw.j + x0);
        const float p01 = src.at(ch, cw.i + y0, cw.j + x1);
        const float p10 = src.at(ch, cw.i + y1, cw.j + x0);
        const float p11 = src.at(ch, cw.i + y1, cw.j + x1);
        const float top = p00 * (1.0f - wx) + p01 * wx;
        const float bot = p10 * (1.0f - wx) + p11 * wx;
        out.at(ch, y, x) = top * (1.0f - wy) + bot * wy;
      }
    }
  }
  return out;
}

void apply_brightness(PixelBuf& img, float f) {
  for (auto& p : img.v) p = clamp01(p * f);
}

void apply_contrast(PixelBuf& img, float f) {
  double mean = 0.0;
  const int n = img.side * img.side;
  for (int y = 0; y < img.side; ++y)
    for (int x = 0; x < img.side; ++x)
      mean += luma(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
  const float m = static_cast<float>(mean / n);
  for (auto& p : img.v) p = clamp01(f * p + (1.0f - f) * m);
}

void apply_saturation(PixelBuf& img, float f) {
  for (int y = 0; y < img.side; ++y)
    for (int x = 0; x < img.side; ++x) {
      const float l = luma(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, y, x) = clamp01(f * img.at(ch, y, x) + (1.0f - f) * l);
    }
}

void apply_hue(PixelBuf& img, float shift) {
  for (int y = 0; y < img.side; ++y)
    for (int x = 0; x < img.side; ++x) {
      const float r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
      const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
      const float d = mx - mn;
      float h = 0.0f;
      if (d > 0.0f) {
        if (mx == r)
          h = (g - b) / d;
        else if (mx == g)
          h = (b - r) / d + 2.0f;
        else
          h = (r - g) / d + 4.0f;
        h /= 6.0f;
        if (h < 0.0f) h += 1.0f;
      }
      const float s = mx > 0.0f ? d / mx : 0.0f;
      h = h + shift;
      h -= std::floor(h);
      const float hp = h * 6.0f;
      const int sector = std::min(5, static_cast<int>(hp));
      const float frac = hp - sector;
      const float p = mx * (1.0f - s);
      const float q = mx * (1.0f - s * frac);
      const float t = mx * (1.0f - s * (1.0f - frac));
      float nr = 0, ng = 0, nb = 0;
      switch (sector) {
        case 0: nr = mx, ng = t, nb = p; break;
        case 1: nr = q, ng = mx, nb = p; break;
        case 2: nr = p, ng = mx, nb = t; break;
        case 3: nr = p, ng = q, nb = mx; break;
        case 4: nr = t, ng = p, nb = mx; break;
        default: nr = mx, ng = p, nb = q; break;
      }
      img.at(0, y, x) = clamp01(nr);
      img.at(1, y, x) = clamp01(ng);
      img.at(2, y, x) = clamp01(nb);
    }
}

void apply_jitter(PixelBuf& img, const AugmentationConfig& cfg, Rng& rng) {
  int order[4] = {0, 1, 2, 3};
  for (int i = 3; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(0, i)]);
  for (int step : order) {
    switch (step) {
      case 0:
        apply_brightness(img, static_cast<float>(rng.uniform(1.0 - cfg.brightness,
                                                             1.0 + cfg.brightness)));
        break;
      case 1:
        apply_contrast(img,
                       static_cast<float>(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)));
        break;
      case 2:
        apply_saturation(
            img, static_cast<float>(rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)));
        break;
      default:
        apply_hue(img, static_cast<float>(rng.uniform(-cfg.hue, cfg.hue)));
        break;
    }
  }
}

void apply_grayscale(PixelBuf& img) {
  for (int y = 0; y < img.side; ++y)
    for (int x = 0; x < img.side; ++x) {
      const float l = luma(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
      img.at(0, y, x) = img.at(1, y, x) = img.at(2, y, x) = l;
    }
}

int reflect(int idx, int n) {
  if (idx < 0) idx = -idx;
  if (idx >= n) idx = 2 * n - 2 - idx;
  return std::min(std::max(idx, 0), n - 1);
}

void apply_blur(PixelBuf& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(w);
    sum += w;
  }
  for (auto& k : kernel) k = static_cast<float>(k / sum);

  PixelBuf tmp = img;
  for (int ch = 0; ch < 3; ++ch)  // horizontal pass
    for (int y = 0; y < img.side; ++y)
      for (int x = 0; x < img.side; ++x) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 img.at(ch, y, reflect(x + i, img.side));
        tmp.at(ch, y, x) = acc;
      }
  for (int ch = 0; ch < 3; ++ch)  // vertical pass
    for (int y = 0; y < img.side; ++y)
      for (int x = 0; x < img.side; ++x) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 tmp.at(ch, reflect(y + i, img.side), x);
        img.at(ch, y, x) = clamp01(acc);
      }
}

void apply_flip(PixelBuf& img) {
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < img.side; ++y)
      for (int x = 0; x < img.side / 2; ++x)
        std::swap(img.at(ch, y, x), img.at(ch, y, img.side - 1 - x));
}

}  // namespace

Tensor<float> augment(const LabeledImage& img, const AugmentationConfig& cfg, Rng& rng) {
  cfg.validate();
  const int side = img.pixels.dim(1);
  PixelBuf buf;
  buf.side = side;
  buf.v = img.pixels.values();

  const CropWindow cw = pick_crop(side, cfg.crop_scale_lo, cfg.crop_scale_hi, rng);
  buf = resize_crop(buf, cw, side);
  if (rng.bernoulli(cfg.jitter_p)) apply_jitter(buf, cfg, rng);
  if (rng.bernoulli(cfg.grayscale_p)) apply_grayscale(buf);
  if (rng.bernoulli(cfg.blur_p)) apply_blur(buf, rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi));
  if (rng.bernoulli(cfg.flip_p)) apply_flip(buf);
  for (auto& p : buf.v) p = clamp01(p);
  return Tensor<float>::from_data({3, side, side}, std::move(buf.v));
}

std::pair<Tensor<float>, Tensor<float>> two_views(const LabeledImage& img,
                                                  const AugmentationConfig& cfg, Rng& rng) {
  Rng first(rng.next_u64());
  Rng second(rng.next_u64());
  return {augment(img, cfg, first), augment(img, cfg, second)};
}

}  // namespace dcs
