#include "voxmatch/io/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace voxmatch::io {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

// Header scanner for the binary image formats. Keeps the byte position so
// parse errors can point at the exact spot.
struct Cursor {
  const std::string& s;
  const std::string& path;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error(path + ": " + what + " at byte " +
                             std::to_string(pos));
  }

  static bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n';
  }

  void skip_space(bool comments) {
    for (;;) {
      while (pos < s.size() && is_space(s[pos])) ++pos;
      if (comments && pos < s.size() && s[pos] == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
        continue;
      }
      return;
    }
  }

  std::string token(bool comments) {
    skip_space(comments);
    if (pos >= s.size()) fail("unexpected end of header");
    std::size_t start = pos;
    while (pos < s.size() && !is_space(s[pos])) ++pos;
    return s.substr(start, pos - start);
  }

  int int_token(bool comments, const char* name) {
    std::size_t at = pos;
    std::string t = token(comments);
    try {
      std::size_t used = 0;
      int v = std::stoi(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      pos = at;
      fail(std::string("bad ") + name + " '" + t + "'");
    }
  }

  // Binary payload begins after exactly one whitespace byte.
  void one_space() {
    if (pos >= s.size() || !is_space(s[pos])) fail("missing payload separator");
    ++pos;
  }
};

float byte_swapped(float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  u = ((u & 0xffu) << 24) | ((u & 0xff00u) << 8) | ((u >> 8) & 0xff00u) |
      (u >> 24);
  std::memcpy(&v, &u, 4);
  return v;
}

constexpr bool kHostLittle = std::endian::native == std::endian::little;

void check_image_dims(int height, int width, std::size_t n,
                      const std::string& path) {
  if (height <= 0 || width <= 0)
    throw std::invalid_argument(path + ": non-positive image dimensions");
  if (n != std::size_t(height) * std::size_t(width))
    throw std::invalid_argument(path + ": data size does not match dimensions");
}

}  // namespace

// ---------------------------------------------------------------------------
// PFM

void write_pfm(const std::string& path, const std::vector<float>& data,
               int height, int width) {
  check_image_dims(height, width, data.size(), path);
  char head[64];
  std::snprintf(head, sizeof head, "Pf\n%d %d\n%s\n", width, height,
                kHostLittle ? "-1.0" : "1.0");
  std::string out(head);
  std::size_t row_bytes = std::size_t(width) * 4;
  std::size_t base = out.size();
  out.resize(base + row_bytes * std::size_t(height));
  for (int v = 0; v < height; ++v) {
    const float* src = data.data() + std::size_t(v) * std::size_t(width);
    // Bottom image row is stored first.
    char* dst = out.data() + base + row_bytes * std::size_t(height - 1 - v);
    std::memcpy(dst, src, row_bytes);
  }
  write_file(path, out);
}

PfmImage read_pfm(const std::string& path) {
  std::string s = read_file(path);
  Cursor c{s, path};
  std::string magic = c.token(false);
  if (magic == "PF") {
    c.pos = 0;
    c.fail("color PFM not supported, expected grayscale 'Pf'");
  }
  if (magic != "Pf") {
    c.pos = 0;
    c.fail("not a PFM file (magic '" + magic + "')");
  }
  PfmImage img;
  img.width = c.int_token(false, "width");
  img.height = c.int_token(false, "height");
  if (img.width <= 0 || img.height <= 0) c.fail("non-positive dimensions");
  std::size_t scale_at = c.pos;
  std::string scale_tok = c.token(false);
  double scale = 0;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    c.pos = scale_at;
    c.fail("bad scale '" + scale_tok + "'");
  }
  if (scale == 0) {
    c.pos = scale_at;
    c.fail("scale must be nonzero");
  }
  c.one_space();

  std::size_t row_bytes = std::size_t(img.width) * 4;
  std::size_t need = row_bytes * std::size_t(img.height);
  if (s.size() - c.pos < need) {
    std::string have = std::to_string(s.size() - c.pos);
    c.pos = s.size();
    c.fail("truncated payload, need " + std::to_string(need) +
           " bytes but only " + have + " remain");
  }
  bool file_little = scale < 0;
  img.data.resize(std::size_t(img.height) * std::size_t(img.width));
  for (int v = 0; v < img.height; ++v) {
    const char* src =
        s.data() + c.pos + row_bytes * std::size_t(img.height - 1 - v);
    float* dst = img.data.data() + std::size_t(v) * std::size_t(img.width);
    std::memcpy(dst, src, row_bytes);
    if (file_little != kHostLittle)
      for (int u = 0; u < img.width; ++u) dst[u] = byte_swapped(dst[u]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm(const std::string& path, const std::vector<float>& data,
               int height, int width) {
  check_image_dims(height, width, data.size(), path);
  char head[64];
  std::snprintf(head, sizeof head, "P5\n%d %d\n255\n", width, height);
  std::string out(head);
  out.reserve(out.size() + data.size());
  for (float v : data) {
    float clamped = std::min(1.0f, std::max(0.0f, v));
    out.push_back(char(static_cast<unsigned char>(std::lround(clamped * 255.0f))));
  }
  write_file(path, out);
}

PfmImage read_pgm(const std::string& path) {
  std::string s = read_file(path);
  Cursor c{s, path};
  std::string magic = c.token(true);
  if (magic != "P5") {
    c.pos = 0;
    c.fail("not a binary PGM (magic '" + magic + "')");
  }
  PfmImage img;
  img.width = c.int_token(true, "width");
  img.height = c.int_token(true, "height");
  int maxval = c.int_token(true, "maxval");
  if (img.width <= 0 || img.height <= 0) c.fail("non-positive dimensions");
  if (maxval < 1 || maxval > 255) c.fail("unsupported maxval");
  c.one_space();

  std::size_t need = std::size_t(img.width) * std::size_t(img.height);
  if (s.size() - c.pos < need) {
    c.pos = s.size();
    c.fail("truncated payload, need " + std::to_string(need) + " bytes");
  }
  img.data.resize(need);
  float inv = 1.0f / float(maxval);
  for (std::size_t i = 0; i < need; ++i)
    img.data[i] = float(static_cast<unsigned char>(s[c.pos + i])) * inv;
  return img;
}

// ---------------------------------------------------------------------------
// Calibration

namespace {

bool parse_projection_line(const std::string& line, const char* tag,
                           std::array<double, 12>& out) {
  std::istringstream ss(line);
  std::string head;
  if (!(ss >> head) || head != tag) return false;
  for (double& v : out)
    if (!(ss >> v))
      throw std::runtime_error(std::string("calib line ") + tag +
                               " needs 12 numbers");
  double extra;
  if (ss >> extra)
    throw std::runtime_error(std::string("calib line ") + tag +
                             " has trailing numbers");
  return true;
}

}  // namespace

CalibInfo read_calib(const std::string& path) {
  std::string s = read_file(path);
  std::istringstream in(s);
  CalibInfo info;
  bool have_p2 = false, have_p3 = false;
  std::string line;
  while (std::getline(in, line)) {
    try {
      if (!have_p2 && parse_projection_line(line, "P2:", info.p2))
        have_p2 = true;
      else if (!have_p3 && parse_projection_line(line, "P3:", info.p3))
        have_p3 = true;
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ": " + e.what());
    }
  }
  if (!have_p2) throw std::runtime_error(path + ": missing P2 line");
  if (!have_p3) throw std::runtime_error(path + ": missing P3 line");
  info.f = info.p2[0];
  info.cu = info.p2[2];
  info.cv = info.p2[6];
  if (!(info.f > 0)) throw std::runtime_error(path + ": focal must be positive");
  info.b = (info.p2[3] - info.p3[3]) / info.f;
  if (!(info.b > 0))
    throw std::runtime_error(path + ": baseline must be positive");
  return info;
}

void write_calib(const std::string& path, const core::Camera& cam) {
  cam.validate();
  auto row = [](std::array<double, 12> p) {
    std::string s;
    char buf[32];
    for (double v : p) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      s += buf;
    }
    return s;
  };
  std::array<double, 12> p2{cam.f, 0, cam.cu, 0, 0, cam.f,
                            cam.cv, 0, 0, 0, 1, 0};
  std::array<double, 12> p3 = p2;
  p3[3] = -(cam.f * cam.b);
  write_file(path, "P2:" + row(p2) + "\nP3:" + row(p3) + "\n");
}

// ---------------------------------------------------------------------------
// Labels and detections

namespace {

struct ObjectRow {
  detect::ObjectBox box;  // y already converted from bottom to center
  int occ = 0;
  bool has_score = false;
};

ObjectRow parse_object_row(const std::string& line, const std::string& path,
                           int line_no) {
  std::istringstream ss(line);
  std::string name;
  double trunc, occ, alpha, bb[4], h, w, l, x, y, z, yaw, score;
  if (!(ss >> name >> trunc >> occ >> alpha >> bb[0] >> bb[1] >> bb[2] >>
        bb[3] >> h >> w >> l >> x >> y >> z >> yaw))
    throw std::runtime_error(path + ":" + std::to_string(line_no) +
                             ": malformed object row");
  ObjectRow row;
  row.has_score = static_cast<bool>(ss >> score);
  row.occ = int(std::lround(occ));
  row.box.w = w;
  row.box.h = h;
  row.box.l = l;
  row.box.x = x;
  row.box.y = y - h / 2;
  row.box.z = z;
  row.box.yaw = yaw;
  row.box.conf = row.has_score ? score : 1.0;
  return row;
}

std::vector<ObjectRow> read_object_rows(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<ObjectRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    rows.push_back(parse_object_row(line, path, line_no));
  }
  return rows;
}

}  // namespace

void write_labels(const std::string& path,
                  const std::vector<detect::LabeledBox>& labels) {
  std::string out;
  char buf[256];
  for (const auto& lb : labels) {
    const auto& b = lb.box;
    std::snprintf(buf, sizeof buf,
                  "Object 0.00 %d -10.00 -1.00 -1.00 -1.00 -1.00 "
                  "%.6f %.6f %.6f %.6f %.6f %.6f %.6f\n",
                  int(lb.difficulty), b.h, b.w, b.l, b.x, b.y + b.h / 2, b.z,
                  b.yaw);
    out += buf;
  }
  write_file(path, out);
}

std::vector<detect::LabeledBox> read_labels(const std::string& path) {
  std::vector<detect::LabeledBox> labels;
  for (const auto& row : read_object_rows(path)) {
    detect::LabeledBox lb;
    lb.box = row.box;
    lb.box.conf = 1.0;
    int occ = std::clamp(row.occ, 0, 2);
    lb.difficulty = static_cast<detect::Difficulty>(occ);
    labels.push_back(lb);
  }
  return labels;
}

void write_detections(const std::string& path,
                      const std::vector<detect::ObjectBox>& dets) {
  std::string out;
  for (const auto& b : dets) out += detect::format_detection_row(b) + "\n";
  write_file(path, out);
}

std::vector<detect::ObjectBox> read_detections(const std::string& path) {
  std::vector<detect::ObjectBox> dets;
  for (const auto& row : read_object_rows(path)) dets.push_back(row.box);
  return dets;
}

// ---------------------------------------------------------------------------
// Scene directories

std::string scene_dir(const std::string& root, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return root + "/scenes/" + buf;
}

void write_scene(const std::string& dir, const synth::RenderedScene& scene,
                 const core::Camera& cam) {
  fs::create_directories(dir);
  write_pgm(dir + "/left.pgm", scene.left, scene.height, scene.width);
  write_pgm(dir + "/right.pgm", scene.right, scene.height, scene.width);
  write_pfm(dir + "/disp.pfm", scene.gt_disp, scene.height, scene.width);
  std::vector<float> occ(scene.occlusion.size());
  for (std::size_t i = 0; i < occ.size(); ++i)
    occ[i] = scene.occlusion[i] ? 1.0f : 0.0f;
  write_pgm(dir + "/occ.pgm", occ, scene.height, scene.width);
  write_calib(dir + "/calib.txt", cam);
  write_labels(dir + "/labels.txt", scene.labels);
}

LoadedScene read_scene(const std::string& dir) {
  LoadedScene s;
  PfmImage left = read_pgm(dir + "/left.pgm");
  PfmImage right = read_pgm(dir + "/right.pgm");
  PfmImage disp = read_pfm(dir + "/disp.pfm");
  PfmImage occ = read_pgm(dir + "/occ.pgm");
  s.height = left.height;
  s.width = left.width;
  for (const PfmImage* img : {&right, &disp, &occ})
    if (img->height != s.height || img->width != s.width)
      throw std::runtime_error(dir + ": image dimensions disagree");
  s.left = std::move(left.data);
  s.right = std::move(right.data);
  s.gt_disp = std::move(disp.data);
  s.occlusion.resize(occ.data.size());
  for (std::size_t i = 0; i < occ.data.size(); ++i)
    s.occlusion[i] = occ.data[i] > 0.5f ? 1 : 0;
  s.labels = read_labels(dir + "/labels.txt");
  s.cam = read_calib(dir + "/calib.txt").camera();
  return s;
}

std::vector<std::string> list_scene_dirs(const std::string& root) {
  fs::path scenes = fs::path(root) / "scenes";
  if (!fs::is_directory(scenes))
    throw std::runtime_error("no scenes directory under " + root);
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(scenes))
    if (e.is_directory()) dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

// ---------------------------------------------------------------------------
// Configuration

AblationFlags method_flags(int method) {
  if (method < 1 || method > 9)
    throw std::invalid_argument("method index must be in 1..9");
  AblationFlags f;
  if (method == 1) return f;  // disparity-only baseline
  f.rpn_on = true;
  if (method == 2) return f;  // proposals without the second stage
  f.header_on = true;
  f.fusion = Fusion::k3d;
  if (method == 3) return f;  // trilinear RoI sampling
  f.deep_sample_on = true;
  if (method == 4) return f;
  f.selective_on = true;  // 5 = full model
  switch (method) {
    case 6: f.fusion = Fusion::kNone; break;
    case 7:
      f.fusion = Fusion::kNone;
      f.input_volume = InputVolume::kCostA;
      break;
    case 8: f.fusion = Fusion::k2d; break;
    default: break;  // 9 names 5's fusion choice explicitly
  }
  return f;
}

namespace {

const char* fusion_name(Fusion f) {
  switch (f) {
    case Fusion::kNone: return "none";
    case Fusion::k2d: return "2d";
    case Fusion::k3d: return "3d";
  }
  throw std::logic_error("bad fusion enum");
}

Fusion fusion_from(const std::string& s) {
  if (s == "none") return Fusion::kNone;
  if (s == "2d") return Fusion::k2d;
  if (s == "3d") return Fusion::k3d;
  throw std::invalid_argument("fusion must be none|2d|3d, got '" + s + "'");
}

const char* input_volume_name(InputVolume v) {
  return v == InputVolume::kCostV ? "costV" : "costA";
}

InputVolume input_volume_from(const std::string& s) {
  if (s == "costV") return InputVolume::kCostV;
  if (s == "costA") return InputVolume::kCostA;
  throw std::invalid_argument("input_volume must be costV|costA, got '" + s +
                              "'");
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const char* where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || item.key() == k;
    if (!ok)
      throw std::invalid_argument("unknown config key '" + item.key() +
                                  "' in " + where);
  }
}

}  // namespace

void PipelineConfig::validate() const {
  if (d_max < 2) throw std::invalid_argument("d_max must be at least 2");
  if (feature_channels < 1 || refine_channels < 1)
    throw std::invalid_argument("channel counts must be positive");
  if (roi_grid < 2) throw std::invalid_argument("roi_grid must be at least 2");
  if (selective_margin < 0)
    throw std::invalid_argument("selective_margin must be non-negative");
  if (anchor_stride < 1)
    throw std::invalid_argument("anchor_stride must be positive");
  if (anchor_extents.empty())
    throw std::invalid_argument("need at least one anchor extent");
  for (const auto& e : anchor_extents)
    if (!(e[0] > 0) || !(e[1] > 0) || !(e[2] > 0))
      throw std::invalid_argument("anchor extents must be positive");
  for (double w : {w_disparity, w_rpn, w_header})
    if (!(w >= 0) || !std::isfinite(w))
      throw std::invalid_argument("loss weights must be finite and >= 0");
  if (!(optimizer.lr > 0)) throw std::invalid_argument("lr must be positive");
  if (optimizer.steps < 0)
    throw std::invalid_argument("steps must be non-negative");
  if (optimizer.crop_height < 1 || optimizer.crop_width < 1)
    throw std::invalid_argument("crop dimensions must be positive");
}

std::string dump_config(const PipelineConfig& cfg) {
  json j;
  j["d_max"] = cfg.d_max;
  j["feature_channels"] = cfg.feature_channels;
  j["refine_channels"] = cfg.refine_channels;
  j["roi_grid"] = cfg.roi_grid;
  j["selective_margin"] = cfg.selective_margin;
  j["anchor_stride"] = cfg.anchor_stride;
  j["anchor_extents"] = cfg.anchor_extents;
  j["loss_weights"] = {{"disparity", cfg.w_disparity},
                       {"rpn", cfg.w_rpn},
                       {"header", cfg.w_header}};
  j["optimizer"] = {{"lr", cfg.optimizer.lr},
                    {"beta1", cfg.optimizer.beta1},
                    {"beta2", cfg.optimizer.beta2},
                    {"eps", cfg.optimizer.eps},
                    {"steps", cfg.optimizer.steps},
                    {"crop_height", cfg.optimizer.crop_height},
                    {"crop_width", cfg.optimizer.crop_width},
                    {"seed", cfg.optimizer.seed}};
  j["ablation"] = {{"rpn_on", cfg.ablation.rpn_on},
                   {"header_on", cfg.ablation.header_on},
                   {"deep_sample_on", cfg.ablation.deep_sample_on},
                   {"selective_on", cfg.ablation.selective_on},
                   {"fusion", fusion_name(cfg.ablation.fusion)},
                   {"input_volume", input_volume_name(cfg.ablation.input_volume)}};
  return j.dump(2) + "\n";
}

PipelineConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") +
                                e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config must be an object");
  check_keys(j,
             {"d_max", "feature_channels", "refine_channels", "roi_grid",
              "selective_margin", "anchor_stride", "anchor_extents",
              "loss_weights", "optimizer", "ablation"},
             "config");
  PipelineConfig cfg;
  cfg.d_max = j.value("d_max", cfg.d_max);
  cfg.feature_channels = j.value("feature_channels", cfg.feature_channels);
  cfg.refine_channels = j.value("refine_channels", cfg.refine_channels);
  cfg.roi_grid = j.value("roi_grid", cfg.roi_grid);
  cfg.selective_margin = j.value("selective_margin", cfg.selective_margin);
  cfg.anchor_stride = j.value("anchor_stride", cfg.anchor_stride);
  if (j.contains("anchor_extents"))
    cfg.anchor_extents =
        j["anchor_extents"].get<std::vector<std::array<double, 3>>>();
  if (j.contains("loss_weights")) {
    const json& w = j["loss_weights"];
    check_keys(w, {"disparity", "rpn", "header"}, "loss_weights");
    cfg.w_disparity = w.value("disparity", cfg.w_disparity);
    cfg.w_rpn = w.value("rpn", cfg.w_rpn);
    cfg.w_header = w.value("header", cfg.w_header);
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    check_keys(o,
               {"lr", "beta1", "beta2", "eps", "steps", "crop_height",
                "crop_width", "seed"},
               "optimizer");
    cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
    cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
    cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
    cfg.optimizer.eps = o.value("eps", cfg.optimizer.eps);
    cfg.optimizer.steps = o.value("steps", cfg.optimizer.steps);
    cfg.optimizer.crop_height =
        o.value("crop_height", cfg.optimizer.crop_height);
    cfg.optimizer.crop_width = o.value("crop_width", cfg.optimizer.crop_width);
    cfg.optimizer.seed = o.value("seed", cfg.optimizer.seed);
  }
  if (j.contains("ablation")) {
    const json& a = j["ablation"];
    check_keys(a,
               {"rpn_on", "header_on", "deep_sample_on", "selective_on",
                "fusion", "input_volume"},
               "ablation");
    cfg.ablation.rpn_on = a.value("rpn_on", cfg.ablation.rpn_on);
    cfg.ablation.header_on = a.value("header_on", cfg.ablation.header_on);
    cfg.ablation.deep_sample_on =
        a.value("deep_sample_on", cfg.ablation.deep_sample_on);
    cfg.ablation.selective_on =
        a.value("selective_on", cfg.ablation.selective_on);
    if (a.contains("fusion"))
      cfg.ablation.fusion = fusion_from(a["fusion"].get<std::string>());
    if (a.contains("input_volume"))
      cfg.ablation.input_volume =
          input_volume_from(a["input_volume"].get<std::string>());
  }
  cfg.validate();
  return cfg;
}

void save_config(const std::string& path, const PipelineConfig& cfg) {
  write_file(path, dump_config(cfg));
}

PipelineConfig load_config(const std::string& path) {
  try {
    return parse_config(read_file(path));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Loss table

void append_loss_row(const std::string& path, int step, double l_disp,
                     double l_rpn, double l_header, double total) {
  bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path + " for append");
  if (fresh) out << "# step l_disp l_rpn l_header total\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d %.9g %.9g %.9g %.9g\n", step, l_disp,
                l_rpn, l_header, total);
  out << buf;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace voxmatch::io
