#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "voxmatch/core/rng.hpp"
#include "voxmatch/io/io.hpp"
#include "voxmatch/synth/synth.hpp"

using namespace voxmatch;
namespace fs = std::filesystem;

namespace {

// Per-test scratch directory, wiped up front so reruns start clean.
std::string scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "voxmatch_io" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  REQUIRE(bool(out));
}

}  // namespace

TEST_CASE("pfm round trip is bit exact") {
  std::string dir = scratch("pfm_roundtrip");
  core::Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    int h = 1 + int(rng.below(9));
    int w = 1 + int(rng.below(13));
    std::vector<float> img(std::size_t(h) * std::size_t(w));
    for (float& v : img) v = float(rng.normal()) * 100.0f;
    std::string path = dir + "/map" + std::to_string(trial) + ".pfm";
    io::write_pfm(path, img, h, w);
    io::PfmImage back = io::read_pfm(path);
    REQUIRE(back.height == h);
    REQUIRE(back.width == w);
    REQUIRE(std::memcmp(back.data.data(), img.data(),
                        img.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("pfm rows are stored bottom to top") {
  std::string dir = scratch("pfm_rows");
  // 2x1 image: top pixel 1, bottom pixel 2. The payload must start with the
  // bottom row.
  io::write_pfm(dir + "/t.pfm", {1.0f, 2.0f}, 2, 1);
  std::string raw = slurp(dir + "/t.pfm");
  std::size_t payload = raw.size() - 8;
  float first;
  std::memcpy(&first, raw.data() + payload, 4);
  CHECK(first == 2.0f);
}

TEST_CASE("pfm big endian payload is byte swapped on read") {
  std::string dir = scratch("pfm_endian");
  float v = 1234.5f;
  char be[4];
  std::memcpy(be, &v, 4);
  std::swap(be[0], be[3]);
  std::swap(be[1], be[2]);
  std::string file = "Pf\n1 1\n1.0\n";  // positive scale = big-endian
  file.append(be, 4);
  spit(dir + "/be.pfm", file);
  io::PfmImage img = io::read_pfm(dir + "/be.pfm");
  CHECK(img.data[0] == 1234.5f);
}

TEST_CASE("pfm rejects color maps and malformed files with byte offsets") {
  std::string dir = scratch("pfm_errors");
  spit(dir + "/color.pfm", "PF\n2 2\n-1.0\n" + std::string(48, '\0'));
  CHECK_THROWS_WITH_AS(io::read_pfm(dir + "/color.pfm"),
                       doctest::Contains("color PFM"), std::runtime_error);

  spit(dir + "/magic.pfm", "P5\n1 1\n-1.0\n....");
  CHECK_THROWS_WITH_AS(io::read_pfm(dir + "/magic.pfm"),
                       doctest::Contains("at byte 0"), std::runtime_error);

  // Header promises 3x3 floats (36 bytes) but only 8 arrive.
  spit(dir + "/short.pfm", "Pf\n3 3\n-1.0\n" + std::string(8, 'x'));
  CHECK_THROWS_WITH_AS(io::read_pfm(dir + "/short.pfm"),
                       doctest::Contains("truncated payload"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(io::read_pfm(dir + "/short.pfm"),
                       doctest::Contains("at byte 20"), std::runtime_error);

  spit(dir + "/scale.pfm", "Pf\n1 1\n0\n1234");
  CHECK_THROWS_WITH_AS(io::read_pfm(dir + "/scale.pfm"),
                       doctest::Contains("scale"), std::runtime_error);

  spit(dir + "/dims.pfm", "Pf\n0 4\n-1.0\n");
  CHECK_THROWS_AS(io::read_pfm(dir + "/dims.pfm"), std::runtime_error);

  CHECK_THROWS_WITH_AS(io::read_pfm(dir + "/absent.pfm"),
                       doctest::Contains("absent.pfm"), std::runtime_error);
}

TEST_CASE("pgm quantizes to 8 bits and reads back within half a step") {
  std::string dir = scratch("pgm");
  int h = 5, w = 7;
  std::vector<float> img(std::size_t(h) * std::size_t(w));
  core::Rng rng(3);
  for (float& v : img) v = float(rng.uniform());
  io::write_pgm(dir + "/g.pgm", img, h, w);
  io::PfmImage back = io::read_pgm(dir + "/g.pgm");
  REQUIRE(back.height == h);
  REQUIRE(back.width == w);
  for (std::size_t i = 0; i < img.size(); ++i)
    CHECK(std::fabs(back.data[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);

  // Comments in the header are whitespace.
  spit(dir + "/c.pgm", "P5 # binary\n# size\n2 1\n255\n\x10\x20");
  io::PfmImage c = io::read_pgm(dir + "/c.pgm");
  REQUIRE(c.width == 2);
  CHECK(c.data[0] == doctest::Approx(16.0 / 255.0));

  spit(dir + "/short.pgm", "P5\n4 4\n255\nab");
  CHECK_THROWS_WITH_AS(io::read_pgm(dir + "/short.pgm"),
                       doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("calib writer and parser recover focal and baseline exactly") {
  std::string dir = scratch("calib");
  core::Camera cam{200.0, 128.0, 64.0, 0.5};
  io::write_calib(dir + "/calib.txt", cam);
  io::CalibInfo info = io::read_calib(dir + "/calib.txt");
  CHECK(info.f == 200.0);
  CHECK(info.cu == 128.0);
  CHECK(info.cv == 64.0);
  CHECK(info.b == 0.5);
  CHECK(info.p3[3] == -100.0);
}

TEST_CASE("calib parser tolerates whitespace variants") {
  std::string dir = scratch("calib_ws");
  std::string tight =
      "P2: 200 0 128 0 0 200 64 0 0 0 1 0\n"
      "P3: 200 0 128 -100 0 200 64 0 0 0 1 0\n";
  std::string loose =
      "comment line to skip\n"
      "P3:\t200  0\t128  -100 0 200 64 0 0 0 1 0\r\n"
      "P2:   200 0   128 0 0\t200 64 0 0 0 1 0\n";
  spit(dir + "/a.txt", tight);
  spit(dir + "/b.txt", loose);
  io::CalibInfo a = io::read_calib(dir + "/a.txt");
  io::CalibInfo b = io::read_calib(dir + "/b.txt");
  CHECK(a.f == b.f);
  CHECK(a.b == b.b);
  CHECK(a.cu == b.cu);
  CHECK(a.cv == b.cv);
}

TEST_CASE("calib parser rejects bad files") {
  std::string dir = scratch("calib_bad");
  spit(dir + "/nop3.txt", "P2: 200 0 128 0 0 200 64 0 0 0 1 0\n");
  CHECK_THROWS_WITH_AS(io::read_calib(dir + "/nop3.txt"),
                       doctest::Contains("missing P3"), std::runtime_error);

  spit(dir + "/alpha.txt",
       "P2: 200 0 x 0 0 200 64 0 0 0 1 0\n"
       "P3: 200 0 128 -100 0 200 64 0 0 0 1 0\n");
  CHECK_THROWS_WITH_AS(io::read_calib(dir + "/alpha.txt"),
                       doctest::Contains("12 numbers"), std::runtime_error);

  // Right camera to the LEFT of the left camera: negative baseline.
  spit(dir + "/negb.txt",
       "P2: 200 0 128 0 0 200 64 0 0 0 1 0\n"
       "P3: 200 0 128 100 0 200 64 0 0 0 1 0\n");
  CHECK_THROWS_WITH_AS(io::read_calib(dir + "/negb.txt"),
                       doctest::Contains("baseline"), std::runtime_error);
}

TEST_CASE("label rows round trip boxes and difficulty bins") {
  std::string dir = scratch("labels");
  std::vector<detect::LabeledBox> labels(3);
  labels[0].box = {0.4, 0.1, 9.25, 1.8, 1.5, 4.2, 0.75, 1.0};
  labels[0].difficulty = detect::Difficulty::kEasy;
  labels[1].box = {-2.0, 0.3, 14.0, 1.6, 1.4, 3.5, -2.9, 1.0};
  labels[1].difficulty = detect::Difficulty::kModerate;
  labels[2].box = {1.0, -0.2, 6.5, 2.0, 1.7, 4.6, 3.141592, 1.0};
  labels[2].difficulty = detect::Difficulty::kHard;
  io::write_labels(dir + "/labels.txt", labels);

  auto back = io::read_labels(dir + "/labels.txt");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].difficulty == labels[i].difficulty);
    CHECK(back[i].box.x == doctest::Approx(labels[i].box.x).epsilon(1e-5));
    CHECK(back[i].box.y == doctest::Approx(labels[i].box.y).epsilon(1e-5));
    CHECK(back[i].box.z == doctest::Approx(labels[i].box.z).epsilon(1e-5));
    CHECK(back[i].box.w == doctest::Approx(labels[i].box.w).epsilon(1e-5));
    CHECK(back[i].box.h == doctest::Approx(labels[i].box.h).epsilon(1e-5));
    CHECK(back[i].box.l == doctest::Approx(labels[i].box.l).epsilon(1e-5));
    CHECK(back[i].box.yaw == doctest::Approx(labels[i].box.yaw).epsilon(1e-5));
    CHECK(back[i].box.conf == 1.0);
  }
}

TEST_CASE("detection rows carry the confidence score") {
  std::string dir = scratch("dets");
  std::vector<detect::ObjectBox> dets(2);
  dets[0] = {0.0, 0.0, 10.0, 1.8, 1.5, 4.0, 0.0, 0.875};
  dets[1] = {3.0, 0.5, 12.0, 1.7, 1.4, 3.8, 1.25, 0.125};
  io::write_detections(dir + "/det.txt", dets);
  auto back = io::read_detections(dir + "/det.txt");
  REQUIRE(back.size() == 2);
  CHECK(back[0].conf == doctest::Approx(0.875).epsilon(1e-9));
  CHECK(back[1].conf == doctest::Approx(0.125).epsilon(1e-9));
  CHECK(back[1].y == doctest::Approx(0.5).epsilon(1e-5));

  // A 15-field row (no score) is a valid object row too.
  spit(dir + "/gt.txt",
       "Object 0.00 1 -10.00 -1 -1 -1 -1 1.5 1.8 4.0 0.0 0.75 10.0 0.0\n");
  auto gt = io::read_detections(dir + "/gt.txt");
  REQUIRE(gt.size() == 1);
  CHECK(gt[0].conf == 1.0);
  CHECK(gt[0].h == 1.5);

  spit(dir + "/bad.txt", "Object 0.00 0 -10.00 -1 -1 -1 -1 1.5\n");
  CHECK_THROWS_WITH_AS(io::read_detections(dir + "/bad.txt"),
                       doctest::Contains("malformed object row"),
                       std::runtime_error);
}

TEST_CASE("scene directories round trip through the dataset layout") {
  std::string dir = scratch("scene");
  auto specs = synth::make_dataset_specs(1, 404, 0.0);
  synth::RenderedScene scene = synth::render(specs[0]);
  std::string sd = io::scene_dir(dir, 3);
  CHECK(sd == dir + "/scenes/0003");
  io::write_scene(sd, scene, specs[0].cam);

  for (const char* f : {"left.pgm", "right.pgm", "disp.pfm", "occ.pgm",
                        "calib.txt", "labels.txt"})
    CHECK(fs::exists(fs::path(sd) / f));

  io::LoadedScene back = io::read_scene(sd);
  CHECK(back.height == scene.height);
  CHECK(back.width == scene.width);
  CHECK(back.cam.f == specs[0].cam.f);
  CHECK(back.cam.b == specs[0].cam.b);
  REQUIRE(back.labels.size() == scene.labels.size());
  // Disparity goes through PFM: bit exact. Occlusion through PGM: exact 0/1.
  CHECK(std::memcmp(back.gt_disp.data(), scene.gt_disp.data(),
                    scene.gt_disp.size() * sizeof(float)) == 0);
  CHECK(back.occlusion == scene.occlusion);
  // Images are 8-bit quantized.
  double max_err = 0;
  for (std::size_t i = 0; i < scene.left.size(); ++i)
    max_err = std::max(max_err, double(std::fabs(back.left[i] - scene.left[i])));
  CHECK(max_err <= 0.5 / 255.0 + 1e-6);

  auto dirs = io::list_scene_dirs(dir);
  REQUIRE(dirs.size() == 1);
  CHECK(dirs[0] == sd);
  CHECK_THROWS_WITH_AS(io::list_scene_dirs(dir + "/nope"),
                       doctest::Contains("no scenes directory"),
                       std::runtime_error);
}

TEST_CASE("config round trips losslessly and rejects unknown keys") {
  io::PipelineConfig cfg;
  cfg.d_max = 64;
  cfg.refine_channels = 12;
  cfg.selective_margin = 2.25;
  cfg.anchor_extents = {{30.0, 22.0, 7.5}, {48.0, 30.0, 11.0}};
  cfg.w_header = 2.0;
  cfg.optimizer.lr = 3e-4;
  cfg.optimizer.steps = 123;
  cfg.optimizer.seed = 0xdeadbeefULL;
  cfg.ablation = io::method_flags(8);

  io::PipelineConfig back = io::parse_config(io::dump_config(cfg));
  CHECK(back == cfg);

  // Missing keys take the defaults.
  io::PipelineConfig sparse = io::parse_config("{\"d_max\": 32}");
  CHECK(sparse.d_max == 32);
  CHECK(sparse.refine_channels == io::PipelineConfig{}.refine_channels);
  CHECK(sparse.ablation == io::AblationFlags{});

  CHECK_THROWS_WITH_AS(io::parse_config("{\"dmax\": 32}"),
                       doctest::Contains("unknown config key 'dmax'"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      io::parse_config("{\"ablation\": {\"fusion\": \"4d\"}}"),
      doctest::Contains("fusion must be"), std::invalid_argument);
  CHECK_THROWS_AS(io::parse_config("not json"), std::invalid_argument);
  CHECK_THROWS_AS(io::parse_config("{\"d_max\": 1}"), std::invalid_argument);

  std::string dir = scratch("config");
  io::save_config(dir + "/cfg.json", cfg);
  CHECK(io::load_config(dir + "/cfg.json") == cfg);
}

TEST_CASE("method presets follow the ablation grid") {
  using io::Fusion;
  using io::InputVolume;

  auto m1 = io::method_flags(1);
  CHECK(m1 == io::AblationFlags{});

  auto m2 = io::method_flags(2);
  CHECK(m2.rpn_on);
  CHECK_FALSE(m2.header_on);

  auto m3 = io::method_flags(3);
  CHECK(m3.header_on);
  CHECK_FALSE(m3.deep_sample_on);
  CHECK(m3.fusion == Fusion::k3d);

  auto m4 = io::method_flags(4);
  CHECK(m4.deep_sample_on);
  CHECK_FALSE(m4.selective_on);

  // Method 5 is the full model: all four stages.
  auto m5 = io::method_flags(5);
  CHECK(m5.rpn_on);
  CHECK(m5.header_on);
  CHECK(m5.deep_sample_on);
  CHECK(m5.selective_on);
  CHECK(m5.fusion == Fusion::k3d);
  CHECK(m5.input_volume == InputVolume::kCostV);

  auto m6 = io::method_flags(6);
  CHECK(m6.fusion == Fusion::kNone);
  CHECK(m6.input_volume == InputVolume::kCostV);
  CHECK(m6.selective_on);

  auto m7 = io::method_flags(7);
  CHECK(m7.fusion == Fusion::kNone);
  CHECK(m7.input_volume == InputVolume::kCostA);

  auto m8 = io::method_flags(8);
  CHECK(m8.fusion == Fusion::k2d);
  CHECK(m8.input_volume == InputVolume::kCostV);

  CHECK(io::method_flags(9) == m5);

  CHECK_THROWS_AS(io::method_flags(0), std::invalid_argument);
  CHECK_THROWS_AS(io::method_flags(10), std::invalid_argument);
}

TEST_CASE("loss table appends rows under a single header") {
  std::string dir = scratch("loss");
  std::string path = dir + "/loss.txt";
  io::append_loss_row(path, 0, 1.5, 0.25, 0.125, 2.0);
  io::append_loss_row(path, 50, 0.75, 0.125, 0.0625, 1.0);
  std::string text = slurp(path);
  CHECK(text ==
        "# step l_disp l_rpn l_header total\n"
        "0 1.5 0.25 0.125 2\n"
        "50 0.75 0.125 0.0625 1\n");
}
