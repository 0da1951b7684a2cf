#include "metadrop/tasks.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace metadrop {

namespace fs = std::filesystem;

std::string to_string(Split s) {
  switch (s) {
    case Split::meta_train: return "train";
    case Split::meta_val: return "val";
    case Split::meta_test: return "test";
  }
  return "?";
}

namespace {

constexpr std::uint64_t kSplitStream[3] = {0x7261696eULL, 0x76616cULL, 0x74657374ULL};

struct DecodedImage {
  std::int64_t width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels;  // interleaved rows
};

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngReadCloser() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

bool decode_png(const std::string& path, DecodedImage& out) {
  PngReadCloser c;
  c.fp = std::fopen(path.c_str(), "rb");
  if (!c.fp) return false;
  unsigned char header[8];
  if (std::fread(header, 1, 8, c.fp) != 8 || png_sig_cmp(header, 0, 8)) return false;
  c.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!c.png) return false;
  c.info = png_create_info_struct(c.png);
  if (!c.info) return false;
  if (setjmp(png_jmpbuf(c.png))) return false;
  png_init_io(c.png, c.fp);
  png_set_sig_bytes(c.png, 8);
  png_read_info(c.png, c.info);

  png_set_strip_16(c.png);
  png_set_strip_alpha(c.png);
  if (png_get_color_type(c.png, c.info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(c.png);
  if (png_get_color_type(c.png, c.info) == PNG_COLOR_TYPE_GRAY &&
      png_get_bit_depth(c.png, c.info) < 8) {
    png_set_expand_gray_1_2_4_to_8(c.png);
  }
  png_read_update_info(c.png, c.info);

  out.width = png_get_image_width(c.png, c.info);
  out.height = png_get_image_height(c.png, c.info);
  out.channels = png_get_channels(c.png, c.info);
  if (out.channels != 1 && out.channels != 3) return false;
  const std::size_t rowbytes = png_get_rowbytes(c.png, c.info);
  out.pixels.resize(static_cast<std::size_t>(out.height) * rowbytes);
  std::vector<png_bytep> rows(static_cast<std::size_t>(out.height));
  for (std::int64_t r = 0; r < out.height; ++r) {
    rows[static_cast<std::size_t>(r)] = out.pixels.data() + static_cast<std::size_t>(r) * rowbytes;
  }
  png_read_image(c.png, rows.data());
  png_read_end(c.png, nullptr);
  return true;
}

// bilinear resize of an interleaved byte image into planar [c,h,w] doubles in [0,1]
std::vector<double> resize_to_unit(const DecodedImage& img, std::int64_t target) {
  std::vector<double> out(static_cast<std::size_t>(img.channels * target * target));
  const double sx = static_cast<double>(img.width) / static_cast<double>(target);
  const double sy = static_cast<double>(img.height) / static_cast<double>(target);
  for (std::int64_t y = 0; y < target; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const std::int64_t y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < target; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const std::int64_t x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t ch = 0; ch < img.channels; ++ch) {
        auto px = [&](std::int64_t yy, std::int64_t xx) {
          return static_cast<double>(
              img.pixels[static_cast<std::size_t>((yy * img.width + xx) * img.channels + ch)]);
        };
        const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                         wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
        out[static_cast<std::size_t>((ch * target + y) * target + x)] = v / 255.0;
      }
    }
  }
  return out;
}

}  // namespace

std::vector<double> rotate90(const std::vector<double>& img, std::int64_t c, std::int64_t h,
                             std::int64_t w, int quarter_turns) {
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return img;
  std::vector<double> out(img.size());
  const std::int64_t oh = (q % 2 == 0) ? h : w;
  const std::int64_t ow = (q % 2 == 0) ? w : h;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        std::int64_t sy = 0, sx = 0;
        switch (q) {
          case 1: sy = x; sx = w - 1 - y; break;          // 90 ccw
          case 2: sy = h - 1 - y; sx = w - 1 - x; break;  // 180
          case 3: sy = h - 1 - x; sx = y; break;          // 270 ccw
        }
        out[static_cast<std::size_t>((ch * oh + y) * ow + x)] =
            img[static_cast<std::size_t>((ch * h + sy) * w + sx)];
      }
    }
  }
  return out;
}

void write_png_gray8(const std::string& path, const std::vector<unsigned char>& pixels,
                     std::int64_t width, std::int64_t height) {
  if (static_cast<std::int64_t>(pixels.size()) != width * height) {
    throw std::invalid_argument("write_png_gray8: pixel count mismatch");
  }
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("png write failed for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::int64_t r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + r * width));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

TaskDistribution TaskDistribution::synthetic2d(Synthetic2dConfig cfg, std::uint64_t seed) {
  TaskDistribution d;
  d.kind_ = Kind::synthetic2d;
  d.seed_ = seed;
  d.syn_ = cfg;
  return d;
}

TaskDistribution TaskDistribution::ingest_image_dir(const std::string& root,
                                                    std::int64_t image_size, bool rotations,
                                                    std::uint64_t seed,
                                                    const std::string& split_file,
                                                    double train_ratio, double val_ratio,
                                                    std::int64_t min_per_class) {
  TaskDistribution d;
  d.kind_ = Kind::image_dir;
  d.seed_ = seed;
  d.image_size_ = image_size;

  std::vector<std::string> class_names;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_names.push_back(e.path().filename().string());
  }
  std::sort(class_names.begin(), class_names.end());
  if (class_names.empty()) throw std::runtime_error("no class directories under " + root);

  for (const auto& cname : class_names) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / cname)) {
      if (e.is_regular_file() && e.path().extension() == ".png") {
        files.push_back(e.path().string());
      }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("empty class directory: " + cname);
    std::vector<std::vector<double>> imgs;
    for (const auto& f : files) {
      DecodedImage img;
      if (!decode_png(f, img)) {
        d.warnings_.push_back("skipped unreadable image: " + f);
        continue;
      }
      if (d.channels_ == 0) d.channels_ = img.channels;
      if (img.channels != d.channels_) {
        d.warnings_.push_back("skipped image with mixed channel count: " + f);
        continue;
      }
      imgs.push_back(resize_to_unit(img, image_size));
    }
    if (static_cast<std::int64_t>(imgs.size()) < min_per_class) {
      throw std::runtime_error("class " + cname + " has only " + std::to_string(imgs.size()) +
                               " usable images (need " + std::to_string(min_per_class) + ")");
    }
    d.images_.push_back(std::move(imgs));
  }

  // split assignment on base classes; rotated copies inherit it
  std::vector<Split> base_split(class_names.size(), Split::meta_train);
  if (!split_file.empty()) {
    std::ifstream in(split_file);
    if (!in) throw std::runtime_error("cannot read split file " + split_file);
    std::unordered_map<std::string, Split> bySplit;
    std::string word, cname;
    while (in >> word >> cname) {
      Split s;
      if (word == "train") s = Split::meta_train;
      else if (word == "val") s = Split::meta_val;
      else if (word == "test") s = Split::meta_test;
      else throw std::runtime_error("bad split label '" + word + "' in " + split_file);
      bySplit[cname] = s;
    }
    for (std::size_t i = 0; i < class_names.size(); ++i) {
      auto it = bySplit.find(class_names[i]);
      if (it == bySplit.end()) {
        throw std::runtime_error("class " + class_names[i] + " missing from split file");
      }
      base_split[i] = it->second;
    }
  } else {
    std::vector<std::size_t> order(class_names.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed, 0x53504C49ULL);  // split shuffle stream
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_index(i)]);
    }
    const auto n = static_cast<double>(order.size());
    const auto n_train = static_cast<std::size_t>(std::llround(train_ratio * n));
    const auto n_val = static_cast<std::size_t>(std::llround(val_ratio * n));
    for (std::size_t i = 0; i < order.size(); ++i) {
      base_split[order[i]] = i < n_train                ? Split::meta_train
                             : (i < n_train + n_val)    ? Split::meta_val
                                                        : Split::meta_test;
    }
  }

  d.split_classes_.resize(3);
  const int turns = rotations ? 4 : 1;
  for (int q = 0; q < turns; ++q) {
    for (std::size_t i = 0; i < class_names.size(); ++i) {
      ImageClass c;
      c.name = q == 0 ? class_names[i] : class_names[i] + "_rot" + std::to_string(q * 90);
      c.rotation = q;
      c.base_index = i;
      c.split = base_split[i];
      d.split_classes_[static_cast<std::size_t>(c.split)].push_back(d.classes_.size());
      d.classes_.push_back(std::move(c));
    }
  }
  return d;
}

std::int64_t TaskDistribution::num_classes(Split split) const {
  if (kind_ == Kind::synthetic2d) return -1;  // unbounded task family
  return static_cast<std::int64_t>(split_classes_[static_cast<std::size_t>(split)].size());
}

std::int64_t TaskDistribution::total_classes() const {
  return static_cast<std::int64_t>(classes_.size());
}

std::int64_t TaskDistribution::input_dim() const {
  if (kind_ == Kind::synthetic2d) return 2;
  return channels_ * image_size_ * image_size_;
}

Episode TaskDistribution::sample(std::int64_t way, std::int64_t shot, std::int64_t m_per_class,
                                 Split split, std::uint64_t episode_index) const {
  if (way < 2) throw std::invalid_argument("way must be >= 2");
  if (shot < 1 || m_per_class < 1) throw std::invalid_argument("shot and m_per_class must be >= 1");
  Rng rng(seed_ ^ kSplitStream[static_cast<std::size_t>(split)], episode_index);
  const std::uint64_t episode_seed = rng.next_u64();
  if (kind_ == Kind::synthetic2d) return sample_synthetic(way, shot, m_per_class, rng, episode_seed);
  return sample_image(way, shot, m_per_class, split, rng, episode_seed);
}

Episode TaskDistribution::sample_synthetic(std::int64_t way, std::int64_t shot, std::int64_t m,
                                           Rng& rng, std::uint64_t episode_seed) const {
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.episode_seed = episode_seed;
  const double phi0 = rng.uniform(0.0, 2.0 * M_PI);
  const double radius = rng.uniform(syn_.radius_lo, syn_.radius_hi);
  const double jitter = rng.uniform(syn_.jitter_lo, syn_.jitter_hi);

  std::vector<double> protos(static_cast<std::size_t>(way * 2));
  for (std::int64_t c = 0; c < way; ++c) {
    const double ang = phi0 + 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(way);
    protos[static_cast<std::size_t>(2 * c)] = radius * std::cos(ang);
    protos[static_cast<std::size_t>(2 * c + 1)] = radius * std::sin(ang);
  }
  auto draw = [&](std::int64_t per_class, std::vector<double>& xs,
                  std::vector<std::int64_t>& ys) {
    for (std::int64_t c = 0; c < way; ++c) {
      for (std::int64_t i = 0; i < per_class; ++i) {
        xs.push_back(protos[static_cast<std::size_t>(2 * c)] + jitter * rng.normal());
        xs.push_back(protos[static_cast<std::size_t>(2 * c + 1)] + jitter * rng.normal());
        ys.push_back(c);
      }
    }
  };
  draw(shot, ep.train_x, ep.train_y);
  draw(m, ep.test_x, ep.test_y);
  ep.train_shape = {way * shot, 2};
  ep.test_shape = {way * m, 2};
  return ep;
}

Episode TaskDistribution::sample_image(std::int64_t way, std::int64_t shot, std::int64_t m,
                                       Split split, Rng& rng, std::uint64_t episode_seed) const {
  const auto& pool = split_classes_[static_cast<std::size_t>(split)];
  if (static_cast<std::int64_t>(pool.size()) < way) {
    throw std::runtime_error("split " + to_string(split) + " has " +
                             std::to_string(pool.size()) + " classes, need " +
                             std::to_string(way));
  }
  // way classes without replacement
  std::vector<std::size_t> chosen;
  std::vector<std::size_t> pool_copy(pool);
  for (std::int64_t c = 0; c < way; ++c) {
    const std::size_t j = rng.uniform_index(pool_copy.size());
    chosen.push_back(pool_copy[j]);
    pool_copy[j] = pool_copy.back();
    pool_copy.pop_back();
  }

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.episode_seed = episode_seed;
  const std::int64_t d = input_dim();
  for (std::int64_t c = 0; c < way; ++c) {
    const ImageClass& cls = classes_[chosen[static_cast<std::size_t>(c)]];
    const auto& imgs = images_[cls.base_index];
    if (static_cast<std::int64_t>(imgs.size()) < shot + m) {
      throw std::runtime_error("class " + cls.name + " has too few instances");
    }
    std::vector<std::size_t> ids(imgs.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::vector<std::size_t> picked;
    for (std::int64_t i = 0; i < shot + m; ++i) {
      const std::size_t j = rng.uniform_index(ids.size());
      picked.push_back(ids[j]);
      ids[j] = ids.back();
      ids.pop_back();
    }
    for (std::int64_t i = 0; i < shot + m; ++i) {
      std::vector<double> img = rotate90(imgs[picked[static_cast<std::size_t>(i)]], channels_,
                                         image_size_, image_size_, cls.rotation);
      auto& dst = i < shot ? ep.train_x : ep.test_x;
      auto& lbl = i < shot ? ep.train_y : ep.test_y;
      dst.insert(dst.end(), img.begin(), img.end());
      lbl.push_back(c);
    }
  }
  (void)d;
  ep.train_shape = {way * shot, channels_, image_size_, image_size_};
  ep.test_shape = {way * m, channels_, image_size_, image_size_};
  return ep;
}

}  // namespace metadrop
