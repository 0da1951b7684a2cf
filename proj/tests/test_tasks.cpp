#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "metadrop/tasks.hpp"

using namespace metadrop;
namespace fs = std::filesystem;

namespace {

// tiny grayscale dataset: `classes` directories of `per_class` 12x12 images,
// each class a distinct diagonal stripe pattern
fs::path make_dataset(const std::string& name, int classes, int per_class) {
  fs::path root = fs::temp_directory_path() / name;
  fs::remove_all(root);
  for (int c = 0; c < classes; ++c) {
    fs::path dir = root / ("class_" + std::to_string(100 + c));
    fs::create_directories(dir);
    for (int i = 0; i < per_class; ++i) {
      std::vector<unsigned char> px(12 * 12);
      for (int yy = 0; yy < 12; ++yy) {
        for (int xx = 0; xx < 12; ++xx) {
          px[static_cast<std::size_t>(yy * 12 + xx)] =
              static_cast<unsigned char>((yy * (c + 2) + xx * (i + 1)) % 251);
        }
      }
      write_png_gray8((dir / ("img_" + std::to_string(10 + i) + ".png")).string(), px, 12, 12);
    }
  }
  return root;
}

}  // namespace

TEST_CASE("synthetic episodes are deterministic in (seed, index)") {
  TaskDistribution d = TaskDistribution::synthetic2d({}, 42);
  Episode a = d.sample(5, 1, 15, Split::meta_train, 7);
  Episode b = d.sample(5, 1, 15, Split::meta_train, 7);
  CHECK(a.episode_seed == b.episode_seed);
  CHECK(a.train_x == b.train_x);
  CHECK(a.test_x == b.test_x);
  CHECK(a.train_y == b.train_y);
  Episode c = d.sample(5, 1, 15, Split::meta_train, 8);
  CHECK(a.train_x != c.train_x);
  Episode e = d.sample(5, 1, 15, Split::meta_test, 7);  // split changes the stream
  CHECK(a.train_x != e.train_x);
}

TEST_CASE("synthetic episode labels are exactly 0..way-1, class major") {
  TaskDistribution d = TaskDistribution::synthetic2d({}, 1);
  Episode ep = d.sample(4, 3, 5, Split::meta_train, 0);
  CHECK(ep.n_train() == 12);
  CHECK(ep.n_test() == 20);
  std::set<std::int64_t> seen(ep.train_y.begin(), ep.train_y.end());
  CHECK(seen == std::set<std::int64_t>{0, 1, 2, 3});
  for (std::int64_t c = 0; c < 4; ++c) {
    for (std::int64_t i = 0; i < 3; ++i) CHECK(ep.train_y[static_cast<std::size_t>(c * 3 + i)] == c);
  }
}

TEST_CASE("adjacent prototypes sit a chord length apart") {
  Synthetic2dConfig cfg;
  cfg.radius_lo = cfg.radius_hi = 1.0;
  cfg.jitter_lo = 1e-9;
  cfg.jitter_hi = 2e-9;
  TaskDistribution d = TaskDistribution::synthetic2d(cfg, 3);
  Episode ep = d.sample(5, 1, 1, Split::meta_train, 0);
  const double expected = 1.1755705045849463;  // 2 sin(pi/5)
  for (int c = 0; c < 5; ++c) {
    const int n = (c + 1) % 5;
    const double dx = ep.train_x[static_cast<std::size_t>(2 * c)] - ep.train_x[static_cast<std::size_t>(2 * n)];
    const double dy = ep.train_x[static_cast<std::size_t>(2 * c + 1)] - ep.train_x[static_cast<std::size_t>(2 * n + 1)];
    CHECK(std::sqrt(dx * dx + dy * dy) == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("image ingestion, rotations and episode arithmetic") {
  fs::path root = make_dataset("mdtasks_a", 25, 20);
  TaskDistribution d = TaskDistribution::ingest_image_dir(root.string(), 12, true, 5, "", 0.8,
                                                          0.0, 16);
  CHECK(d.total_classes() == 25 * 4);
  CHECK(d.channels() == 1);

  Episode ep = d.sample(20, 1, 15, Split::meta_train, 0);
  CHECK(ep.n_train() == 20);
  CHECK(ep.n_test() == 300);
  CHECK(ep.train_shape == Shape{20, 1, 12, 12});
  for (double v : ep.test_x) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  Episode ep2 = d.sample(20, 1, 15, Split::meta_train, 0);
  CHECK(ep.train_x == ep2.train_x);
  fs::remove_all(root);
}

TEST_CASE("four quarter turns restore the image bitwise") {
  std::vector<double> img(3 * 7 * 7);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i) * 0.017;
  std::vector<double> r = img;
  for (int q = 0; q < 4; ++q) r = rotate90(r, 3, 7, 7, 1);
  CHECK(r == img);
  CHECK(rotate90(img, 3, 7, 7, 4) == img);
}

TEST_CASE("train and test splits never share an instance") {
  fs::path root = make_dataset("mdtasks_b", 6, 20);
  TaskDistribution d = TaskDistribution::ingest_image_dir(root.string(), 12, false, 9, "", 1.0,
                                                          0.0, 16);
  for (std::uint64_t idx = 0; idx < 300; ++idx) {
    Episode ep = d.sample(3, 2, 4, Split::meta_train, idx);
    const std::int64_t dim = 144;
    std::set<std::vector<double>> train_set;
    for (std::int64_t i = 0; i < ep.n_train(); ++i) {
      train_set.insert(std::vector<double>(ep.train_x.begin() + i * dim,
                                           ep.train_x.begin() + (i + 1) * dim));
    }
    for (std::int64_t i = 0; i < ep.n_test(); ++i) {
      std::vector<double> inst(ep.test_x.begin() + i * dim, ep.test_x.begin() + (i + 1) * dim);
      CHECK(train_set.count(inst) == 0);
    }
  }
  fs::remove_all(root);
}

TEST_CASE("class sampling is uniform within three sigma") {
  // constant-valued images make every instance identify its class
  fs::path root = fs::temp_directory_path() / "mdtasks_c";
  fs::remove_all(root);
  const int n_classes = 10;
  for (int c = 0; c < n_classes; ++c) {
    fs::path dir = root / ("class_" + std::to_string(100 + c));
    fs::create_directories(dir);
    for (int i = 0; i < 20; ++i) {
      std::vector<unsigned char> px(16, static_cast<unsigned char>(c * 20));
      write_png_gray8((dir / ("img_" + std::to_string(10 + i) + ".png")).string(), px, 4, 4);
    }
  }
  TaskDistribution d = TaskDistribution::ingest_image_dir(root.string(), 4, false, 4, "", 1.0,
                                                          0.0, 16);
  const int episodes = 20000;
  const int way = 5;
  std::vector<int> counts(n_classes, 0);
  for (int e = 0; e < episodes; ++e) {
    Episode ep = d.sample(way, 1, 1, Split::meta_train, static_cast<std::uint64_t>(e));
    for (std::int64_t i = 0; i < ep.n_train(); ++i) {
      const double v = ep.train_x[static_cast<std::size_t>(i * 16)];
      const int cls = static_cast<int>(std::lround(v * 255.0 / 20.0));
      counts[static_cast<std::size_t>(cls)]++;
    }
  }
  const double expected = episodes * way / static_cast<double>(n_classes);
  const double sd = std::sqrt(expected * (1.0 - way / static_cast<double>(n_classes)));
  for (int c = 0; c < n_classes; ++c) {
    CHECK(std::fabs(counts[static_cast<std::size_t>(c)] - expected) <= 3.0 * sd);
  }
  fs::remove_all(root);
}

TEST_CASE("split file assigns classes and rotations follow their parent") {
  fs::path root = make_dataset("mdtasks_d", 4, 20);
  fs::path split = fs::temp_directory_path() / "mdtasks_d_split.txt";
  {
    std::ofstream out(split);
    out << "train class_100\ntrain class_101\nval class_102\ntest class_103\n";
  }
  TaskDistribution d = TaskDistribution::ingest_image_dir(root.string(), 12, true, 1,
                                                          split.string());
  CHECK(d.num_classes(Split::meta_train) == 8);
  CHECK(d.num_classes(Split::meta_val) == 4);
  CHECK(d.num_classes(Split::meta_test) == 4);
  fs::remove_all(root);
  fs::remove(split);
}

TEST_CASE("ingestion failure modes") {
  fs::path root = make_dataset("mdtasks_e", 3, 20);
  // too few usable images
  CHECK_THROWS(TaskDistribution::ingest_image_dir(root.string(), 12, false, 1, "", 1.0, 0.0, 21));
  // unreadable file: skipped with a warning, ingestion still succeeds
  {
    std::ofstream bad(root / "class_100" / "zzz_broken.png");
    bad << "not a png";
  }
  TaskDistribution d = TaskDistribution::ingest_image_dir(root.string(), 12, false, 1, "", 1.0,
                                                          0.0, 16);
  CHECK(d.warnings().size() == 1);
  // empty class directory
  fs::create_directories(root / "class_999");
  CHECK_THROWS(TaskDistribution::ingest_image_dir(root.string(), 12, false, 1, "", 1.0, 0.0, 16));
  fs::remove_all(root);
}

TEST_CASE("insufficient classes for the requested way") {
  fs::path root = make_dataset("mdtasks_f", 3, 20);
  TaskDistribution d = TaskDistribution::ingest_image_dir(root.string(), 12, false, 1, "", 1.0,
                                                          0.0, 16);
  CHECK_THROWS(d.sample(5, 1, 15, Split::meta_train, 0));
  fs::remove_all(root);
}
