#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadrop/rng.hpp"
#include "metadrop/tensor.hpp"

namespace metadrop {

/// One few-shot problem: way*shot training instances and m_per_class*way
/// test instances over the same relabeled class set, disjoint by
/// construction.
struct Episode {
  Shape train_shape;  // [n, d] or [n, c, h, w]
  Shape test_shape;
  std::vector<double> train_x;
  std::vector<double> test_x;
  std::vector<std::int64_t> train_y;
  std::vector<std::int64_t> test_y;
  std::int64_t way = 0;
  std::int64_t shot = 0;
  std::uint64_t episode_seed = 0;

  Tensor train_inputs() const { return Tensor::constant(train_shape, train_x); }
  Tensor test_inputs() const { return Tensor::constant(test_shape, test_x); }
  std::int64_t n_train() const { return train_shape.empty() ? 0 : train_shape[0]; }
  std::int64_t n_test() const { return test_shape.empty() ? 0 : test_shape[0]; }
};

enum class Split { meta_train, meta_val, meta_test };
std::string to_string(Split s);

struct Synthetic2dConfig {
  double radius_lo = 1.0;
  double radius_hi = 2.0;
  double jitter_lo = 0.1;
  double jitter_hi = 0.25;
};

/// Episodic task source. synthetic2d draws class prototypes on a randomly
/// rotated circle with gaussian jitter; image_dir serves N-way K-shot
/// episodes from a class-per-directory PNG tree with optional 90-degree
/// rotation classes.
class TaskDistribution {
 public:
  enum class Kind { synthetic2d, image_dir };

  static TaskDistribution synthetic2d(Synthetic2dConfig cfg, std::uint64_t seed);

  /// Decodes root/<class>/<image>.png, resizes to image_size, scales pixels
  /// to [0,1]. With rotations each class appears four times (0/90/180/270),
  /// rotated copies staying in their parent's split. Classes are split by
  /// `split_file` when given (lines "<train|val|test> <class>"), otherwise
  /// by a seeded shuffle with the given ratios. Unreadable files are
  /// skipped; a class left with fewer than min_per_class usable images is
  /// an error.
  static TaskDistribution ingest_image_dir(const std::string& root, std::int64_t image_size,
                                           bool rotations, std::uint64_t seed,
                                           const std::string& split_file = "",
                                           double train_ratio = 0.7, double val_ratio = 0.1,
                                           std::int64_t min_per_class = 16);

  Kind kind() const { return kind_; }
  std::uint64_t seed() const { return seed_; }

  /// Deterministic in (distribution seed, split, episode_index).
  Episode sample(std::int64_t way, std::int64_t shot, std::int64_t m_per_class, Split split,
                 std::uint64_t episode_index) const;

  std::int64_t num_classes(Split split) const;
  std::int64_t total_classes() const;
  std::int64_t input_dim() const;  // dense input width (synthetic2d: 2)
  std::int64_t image_size() const { return image_size_; }
  std::int64_t channels() const { return channels_; }

  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  Episode sample_synthetic(std::int64_t way, std::int64_t shot, std::int64_t m, Rng& rng,
                           std::uint64_t episode_seed) const;
  Episode sample_image(std::int64_t way, std::int64_t shot, std::int64_t m, Split split,
                       Rng& rng, std::uint64_t episode_seed) const;

  struct ImageClass {
    std::string name;
    int rotation = 0;        // quarter turns
    std::size_t base_index;  // into images_
    Split split = Split::meta_train;
  };

  Kind kind_ = Kind::synthetic2d;
  std::uint64_t seed_ = 0;
  Synthetic2dConfig syn_;
  // image data: one entry per base class, each image flattened c*h*w
  std::vector<std::vector<std::vector<double>>> images_;
  std::vector<ImageClass> classes_;
  std::vector<std::vector<std::size_t>> split_classes_;  // per Split index
  std::int64_t image_size_ = 0;
  std::int64_t channels_ = 0;
  std::vector<std::string> warnings_;
};

/// Writes an 8-bit grayscale PNG (used by tools and tests to fabricate
/// datasets).
void write_png_gray8(const std::string& path, const std::vector<unsigned char>& pixels,
                     std::int64_t width, std::int64_t height);

/// Rotates a [c,h,w] image by quarter turns counterclockwise.
std::vector<double> rotate90(const std::vector<double>& img, std::int64_t c, std::int64_t h,
                             std::int64_t w, int quarter_turns);

}  // namespace metadrop
