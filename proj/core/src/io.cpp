#include "evdet/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

namespace evdet {

using nlohmann::json;

namespace fsio {

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("rename failed: " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw DataError("read failed: " + path.string());
  return std::move(buf).str();
}

}  // namespace fsio

namespace {

json parse_json(const std::string& text, const std::string& path) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
}

const json& field(const json& j, const char* key, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end()) throw DataError(where + ": missing field '" + key + "'");
  return *it;
}

double as_double(const json& j, const std::string& where) {
  if (!j.is_number()) throw DataError(where + ": expected a number");
  return j.get<double>();
}

std::int64_t as_int(const json& j, const std::string& where) {
  if (!j.is_number_integer() && !j.is_number_unsigned())
    throw DataError(where + ": expected an integer");
  return j.get<std::int64_t>();
}

std::uint64_t as_uint(const json& j, const std::string& where) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0)
    return static_cast<std::uint64_t>(j.get<std::int64_t>());
  throw DataError(where + ": expected a non-negative integer");
}

bool as_bool(const json& j, const std::string& where) {
  if (!j.is_boolean()) throw DataError(where + ": expected a boolean");
  return j.get<bool>();
}

std::string as_string(const json& j, const std::string& where) {
  if (!j.is_string()) throw DataError(where + ": expected a string");
  return j.get<std::string>();
}

void check_header(const json& j, const char* format, int version, const std::string& path) {
  if (as_string(field(j, "format", path), path + ".format") != format)
    throw DataError(path + ": not a " + format + " file");
  if (as_int(field(j, "version", path), path + ".version") != version)
    throw DataError(path + ": unsupported version");
}

json box_to_json(const Box& b) {
  return json{{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}};
}

Box box_from_json(const json& j, const std::string& where) {
  Box b;
  b.x_min = as_double(field(j, "x_min", where), where + ".x_min");
  b.y_min = as_double(field(j, "y_min", where), where + ".y_min");
  b.x_max = as_double(field(j, "x_max", where), where + ".x_max");
  b.y_max = as_double(field(j, "y_max", where), where + ".y_max");
  if (!(b.x_min < b.x_max)) throw DataError(where + ".x_min: must be < x_max");
  if (!(b.y_min < b.y_max)) throw DataError(where + ".y_min: must be < y_max");
  return b;
}

json gt_to_json(const GroundTruthBox& g) {
  json j = box_to_json(g.box);
  j["class_id"] = g.class_id;
  j["track_id"] = g.track_id;
  return j;
}

GroundTruthBox gt_from_json(const json& j, const std::string& where) {
  GroundTruthBox g;
  g.box = box_from_json(j, where);
  g.class_id = static_cast<int>(as_int(field(j, "class_id", where), where + ".class_id"));
  g.track_id = static_cast<int>(as_int(field(j, "track_id", where), where + ".track_id"));
  if (g.class_id < 0) throw DataError(where + ".class_id: must be >= 0");
  if (g.track_id < 0) throw DataError(where + ".track_id: must be >= 0");
  return g;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void append_le64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_le64(const std::string& s, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i)
    v = (v << 8) | static_cast<std::uint8_t>(s[at + static_cast<std::size_t>(i)]);
  return v;
}

std::uint32_t read_le32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i)
    v = (v << 8) | static_cast<std::uint8_t>(s[at + static_cast<std::size_t>(i)]);
  return v;
}

// Fixed-format cell so identical runs emit identical bytes.
std::string csv_cell(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string csv_cell(const std::optional<double>& v) { return v ? csv_cell(*v) : std::string(); }

}  // namespace

void save_labels(const std::string& path, const LabelSets& labels) {
  json entries = json::array();
  for (const auto& [t, boxes] : labels) {
    json jboxes = json::array();
    for (const GroundTruthBox& g : boxes) jboxes.push_back(gt_to_json(g));
    entries.push_back({{"t", t}, {"boxes", std::move(jboxes)}});
  }
  const json doc{{"format", "evdet-labels"}, {"version", 1}, {"entries", std::move(entries)}};
  fsio::write_file_atomic(path, dump(doc));
}

LabelSets load_labels(const std::string& path) {
  const std::string text = fsio::read_file(path);
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return {};
  const json doc = parse_json(text, path);
  check_header(doc, "evdet-labels", 1, path);
  const json& entries = field(doc, "entries", path);
  if (!entries.is_array()) throw DataError(path + ".entries: expected an array");

  LabelSets out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string where = path + ".entries[" + std::to_string(i) + "]";
    const json& e = entries[i];
    const std::int64_t t = as_int(field(e, "t", where), where + ".t");
    if (out.count(t)) throw DataError(where + ".t: duplicate timestamp");
    const json& boxes = field(e, "boxes", where);
    if (!boxes.is_array()) throw DataError(where + ".boxes: expected an array");
    std::vector<GroundTruthBox> gts;
    for (std::size_t b = 0; b < boxes.size(); ++b)
      gts.push_back(gt_from_json(boxes[b], where + ".boxes[" + std::to_string(b) + "]"));
    out.emplace(t, std::move(gts));
  }
  return out;
}

void save_scene_config(const std::string& path, const SceneConfig& config) {
  json objects = json::array();
  for (const ObjectSpec& o : config.objects) {
    json knots = json::array();
    for (const TrajectoryKnot& k : o.trajectory)
      knots.push_back({{"t", k.t}, {"x", k.x}, {"y", k.y}});
    objects.push_back({{"class_id", o.class_id},
                       {"width", o.width},
                       {"height", o.height},
                       {"intensity", o.intensity},
                       {"spawn_t", o.spawn_t},
                       {"despawn_t", o.despawn_t},
                       {"trajectory", std::move(knots)}});
  }
  const json doc{{"format", "evdet-scene"},
                 {"version", 1},
                 {"name", config.name},
                 {"sensor_w", config.sensor_w},
                 {"sensor_h", config.sensor_h},
                 {"duration", config.duration},
                 {"frame_hz", config.frame_hz},
                 {"contrast_threshold", config.contrast_threshold},
                 {"background_intensity", config.background_intensity},
                 {"noise_rate", config.noise_rate},
                 {"seed", config.seed},
                 {"micro_step", config.micro_step},
                 {"objects", std::move(objects)}};
  fsio::write_file_atomic(path, dump(doc));
}

SceneConfig load_scene_config(const std::string& path) {
  const json doc = parse_json(fsio::read_file(path), path);
  check_header(doc, "evdet-scene", 1, path);
  SceneConfig c;
  c.name = as_string(field(doc, "name", path), path + ".name");
  c.sensor_w = static_cast<int>(as_int(field(doc, "sensor_w", path), path + ".sensor_w"));
  c.sensor_h = static_cast<int>(as_int(field(doc, "sensor_h", path), path + ".sensor_h"));
  c.duration = as_int(field(doc, "duration", path), path + ".duration");
  c.frame_hz = as_double(field(doc, "frame_hz", path), path + ".frame_hz");
  c.contrast_threshold =
      as_double(field(doc, "contrast_threshold", path), path + ".contrast_threshold");
  c.background_intensity =
      as_double(field(doc, "background_intensity", path), path + ".background_intensity");
  c.noise_rate = as_double(field(doc, "noise_rate", path), path + ".noise_rate");
  c.seed = as_uint(field(doc, "seed", path), path + ".seed");
  c.micro_step = as_int(field(doc, "micro_step", path), path + ".micro_step");

  const json& objects = field(doc, "objects", path);
  if (!objects.is_array()) throw DataError(path + ".objects: expected an array");
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const std::string where = path + ".objects[" + std::to_string(i) + "]";
    const json& jo = objects[i];
    ObjectSpec o;
    o.class_id = static_cast<int>(as_int(field(jo, "class_id", where), where + ".class_id"));
    o.width = as_double(field(jo, "width", where), where + ".width");
    o.height = as_double(field(jo, "height", where), where + ".height");
    o.intensity = as_double(field(jo, "intensity", where), where + ".intensity");
    o.spawn_t = as_int(field(jo, "spawn_t", where), where + ".spawn_t");
    o.despawn_t = as_int(field(jo, "despawn_t", where), where + ".despawn_t");
    const json& knots = field(jo, "trajectory", where);
    if (!knots.is_array()) throw DataError(where + ".trajectory: expected an array");
    for (std::size_t k = 0; k < knots.size(); ++k) {
      const std::string kw = where + ".trajectory[" + std::to_string(k) + "]";
      const json& jk = knots[k];
      TrajectoryKnot knot;
      knot.t = as_int(field(jk, "t", kw), kw + ".t");
      knot.x = as_double(field(jk, "x", kw), kw + ".x");
      knot.y = as_double(field(jk, "y", kw), kw + ".y");
      o.trajectory.push_back(knot);
    }
    c.objects.push_back(std::move(o));
  }
  try {
    validate(c);
  } catch (const std::invalid_argument& e) {
    throw DataError(path + ": " + e.what());
  }
  return c;
}

void save_experiment_config(const std::string& path, const ExperimentConfig& config) {
  const json doc{{"format", "evdet-experiment"},
                 {"version", 1},
                 {"scene_config", config.scene_config},
                 {"time_bins", config.time_bins},
                 {"base_hz", config.base_hz},
                 {"high_hz", config.high_hz},
                 {"lambda_reg", config.lambda_reg},
                 {"noise_per_map", config.noise_per_map},
                 {"tune",
                  {{"tau_class0", config.tune.tau_class0},
                   {"tau_class1", config.tune.tau_class1},
                   {"tau_iou", config.tune.tau_iou},
                   {"min_track_len", config.tune.min_track_len},
                   {"pseudo_weight", config.tune.pseudo_weight},
                   {"nms_iou", config.tune.nms_iou},
                   {"rounds", config.tune.rounds},
                   {"max_gap", config.tune.max_gap}}},
                 {"lr", config.lr},
                 {"epochs", config.epochs},
                 {"seed", config.seed},
                 {"output_dir", config.output_dir}};
  fsio::write_file_atomic(path, dump(doc));
}

ExperimentConfig load_experiment_config(const std::string& path) {
  const json doc = parse_json(fsio::read_file(path), path);
  check_header(doc, "evdet-experiment", 1, path);
  ExperimentConfig c;
  c.scene_config = as_string(field(doc, "scene_config", path), path + ".scene_config");
  c.time_bins = static_cast<int>(as_int(field(doc, "time_bins", path), path + ".time_bins"));
  c.base_hz = as_double(field(doc, "base_hz", path), path + ".base_hz");
  c.high_hz = as_double(field(doc, "high_hz", path), path + ".high_hz");
  c.lambda_reg = as_double(field(doc, "lambda_reg", path), path + ".lambda_reg");
  c.noise_per_map = as_bool(field(doc, "noise_per_map", path), path + ".noise_per_map");
  const json& jt = field(doc, "tune", path);
  const std::string tw = path + ".tune";
  c.tune.tau_class0 = as_double(field(jt, "tau_class0", tw), tw + ".tau_class0");
  c.tune.tau_class1 = as_double(field(jt, "tau_class1", tw), tw + ".tau_class1");
  c.tune.tau_iou = as_double(field(jt, "tau_iou", tw), tw + ".tau_iou");
  c.tune.min_track_len =
      static_cast<int>(as_int(field(jt, "min_track_len", tw), tw + ".min_track_len"));
  c.tune.pseudo_weight = as_double(field(jt, "pseudo_weight", tw), tw + ".pseudo_weight");
  c.tune.nms_iou = as_double(field(jt, "nms_iou", tw), tw + ".nms_iou");
  c.tune.rounds = static_cast<int>(as_int(field(jt, "rounds", tw), tw + ".rounds"));
  c.tune.max_gap = static_cast<int>(as_int(field(jt, "max_gap", tw), tw + ".max_gap"));
  c.lr = as_double(field(doc, "lr", path), path + ".lr");
  c.epochs = static_cast<int>(as_int(field(doc, "epochs", path), path + ".epochs"));
  c.seed = as_uint(field(doc, "seed", path), path + ".seed");
  c.output_dir = as_string(field(doc, "output_dir", path), path + ".output_dir");

  if (c.time_bins < 1) throw DataError(path + ".time_bins: must be >= 1");
  try {
    make_plan(c.base_hz, c.high_hz);
  } catch (const std::invalid_argument& e) {
    throw DataError(path + ".base_hz/high_hz: " + e.what());
  }
  if (!(c.lambda_reg >= 0.0)) throw DataError(path + ".lambda_reg: must be >= 0");
  for (const auto& [v, name] :
       {std::pair<double, const char*>{c.tune.tau_class0, "tau_class0"},
        {c.tune.tau_class1, "tau_class1"},
        {c.tune.tau_iou, "tau_iou"},
        {c.tune.nms_iou, "nms_iou"}})
    if (!(v >= 0.0 && v <= 1.0))
      throw DataError(path + ".tune." + name + ": must be in [0, 1]");
  if (c.tune.min_track_len < 1) throw DataError(path + ".tune.min_track_len: must be >= 1");
  if (!(c.tune.pseudo_weight >= 0.0))
    throw DataError(path + ".tune.pseudo_weight: must be >= 0");
  if (c.tune.rounds < 1) throw DataError(path + ".tune.rounds: must be >= 1");
  if (c.tune.max_gap < 0) throw DataError(path + ".tune.max_gap: must be >= 0");
  if (!(c.lr > 0.0)) throw DataError(path + ".lr: must be > 0");
  if (c.epochs < 1) throw DataError(path + ".epochs: must be >= 1");
  return c;
}

void save_checkpoint(const std::string& path, const ToyModel& model) {
  std::string bytes;
  bytes.reserve(16 + model.param_count() * 8);
  bytes += "EVCK";
  append_le32(bytes, 1);
  append_le64(bytes, model.param_count());
  for (const double v : model.params()) append_le64(bytes, std::bit_cast<std::uint64_t>(v));
  fsio::write_file_atomic(path, bytes);

  const ToyModelConfig& c = model.config();
  json tensors = json::array();
  for (const auto& info : model.layout())
    tensors.push_back({{"name", info.name},
                       {"shape", info.shape},
                       {"offset", info.offset},
                       {"count", info.count}});
  const json doc{{"format", "evdet-checkpoint"},
                 {"version", 1},
                 {"config",
                  {{"input_height", c.input_height},
                   {"input_width", c.input_width},
                   {"time_bins", c.time_bins},
                   {"num_classes", c.num_classes},
                   {"stage1_channels", c.stage1_channels},
                   {"stage2_channels", c.stage2_channels},
                   {"lambda_reg", c.lambda_reg},
                   {"noise_per_map", c.noise_per_map},
                   {"score_threshold", c.score_threshold}}},
                 {"param_count", model.param_count()},
                 {"tensors", std::move(tensors)}};
  fsio::write_file_atomic(path + ".json", dump(doc));
}

ToyModel load_checkpoint(const std::string& path) {
  const std::string side_path = path + ".json";
  const json doc = parse_json(fsio::read_file(side_path), side_path);
  check_header(doc, "evdet-checkpoint", 1, side_path);
  const json& jc = field(doc, "config", side_path);
  const std::string cw = side_path + ".config";
  ToyModelConfig c;
  c.input_height = static_cast<int>(as_int(field(jc, "input_height", cw), cw + ".input_height"));
  c.input_width = static_cast<int>(as_int(field(jc, "input_width", cw), cw + ".input_width"));
  c.time_bins = static_cast<int>(as_int(field(jc, "time_bins", cw), cw + ".time_bins"));
  c.num_classes = static_cast<int>(as_int(field(jc, "num_classes", cw), cw + ".num_classes"));
  c.stage1_channels =
      static_cast<int>(as_int(field(jc, "stage1_channels", cw), cw + ".stage1_channels"));
  c.stage2_channels =
      static_cast<int>(as_int(field(jc, "stage2_channels", cw), cw + ".stage2_channels"));
  c.lambda_reg = as_double(field(jc, "lambda_reg", cw), cw + ".lambda_reg");
  c.noise_per_map = as_bool(field(jc, "noise_per_map", cw), cw + ".noise_per_map");
  c.score_threshold = as_double(field(jc, "score_threshold", cw), cw + ".score_threshold");

  const std::string bytes = fsio::read_file(path);
  if (bytes.size() < 16 || bytes.compare(0, 4, "EVCK") != 0)
    throw DataError(path + ": not a checkpoint file");
  if (read_le32(bytes, 4) != 1) throw DataError(path + ": unsupported version");
  const std::uint64_t count = read_le64(bytes, 8);
  if (bytes.size() != 16 + count * 8) throw DataError(path + ": truncated parameter block");
  if (count != as_uint(field(doc, "param_count", side_path), side_path + ".param_count"))
    throw DataError(path + ": parameter count disagrees with the sidecar");

  std::vector<double> params(count);
  for (std::uint64_t i = 0; i < count; ++i)
    params[i] = std::bit_cast<double>(read_le64(bytes, 16 + i * 8));

  ToyModel model(c, std::move(params));

  const json& tensors = field(doc, "tensors", side_path);
  if (!tensors.is_array() || tensors.size() != model.layout().size())
    throw DataError(side_path + ".tensors: layout size mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::string where = side_path + ".tensors[" + std::to_string(i) + "]";
    const auto& info = model.layout()[i];
    if (as_string(field(tensors[i], "name", where), where + ".name") != info.name ||
        as_uint(field(tensors[i], "offset", where), where + ".offset") != info.offset ||
        as_uint(field(tensors[i], "count", where), where + ".count") != info.count)
      throw DataError(where + ": tensor layout mismatch for " + info.name);
  }
  return model;
}

void save_frame_pgm(const std::string& path, const Frame& frame, int width, int height) {
  if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != frame.pixels.size())
    throw std::invalid_argument("save_frame_pgm: dims do not match the pixel count");
  std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  bytes.reserve(bytes.size() + frame.pixels.size());
  for (const float v : frame.pixels) {
    const double mapped = std::round(128.0 + 64.0 * static_cast<double>(v));
    // Through unsigned char: a double above 127 cast straight to char is
    // implementation-defined and gcc saturates it.
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(mapped, 0.0, 255.0))));
  }
  fsio::write_file_atomic(path, bytes);
}

PgmImage load_pgm(const std::string& path) {
  const std::string bytes = fsio::read_file(path);
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw DataError(path + ": not a P5 PGM file");
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w < 1 || h < 1) throw DataError(path + ": bad PGM dimensions");
  if (maxval != 255) throw DataError(path + ": only maxval 255 is supported");
  in.get();  // single whitespace before the raster
  const std::size_t raster = static_cast<std::size_t>(in.tellg());
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - raster != need) throw DataError(path + ": raster size mismatch");
  PgmImage img;
  img.width = w;
  img.height = h;
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(raster), bytes.end());
  return img;
}

void save_tensor(const std::string& path, const EventTensor& tensor) {
  const json doc{{"format", "evdet-tensor"},
                 {"version", 1},
                 {"window", {{"t1", tensor.window.t1}, {"t2", tensor.window.t2}}},
                 {"time_bins", tensor.spec.time_bins},
                 {"height", tensor.spec.height},
                 {"width", tensor.spec.width},
                 {"counts", tensor.data}};
  fsio::write_file_atomic(path, dump(doc));
}

EventTensor load_tensor(const std::string& path) {
  const json doc = parse_json(fsio::read_file(path), path);
  check_header(doc, "evdet-tensor", 1, path);
  EventTensor t;
  const json& jw = field(doc, "window", path);
  t.window.t1 = as_int(field(jw, "t1", path + ".window"), path + ".window.t1");
  t.window.t2 = as_int(field(jw, "t2", path + ".window"), path + ".window.t2");
  if (t.window.t1 >= t.window.t2) throw DataError(path + ".window: t1 must be < t2");
  t.spec.time_bins = static_cast<int>(as_int(field(doc, "time_bins", path), path + ".time_bins"));
  t.spec.height = static_cast<int>(as_int(field(doc, "height", path), path + ".height"));
  t.spec.width = static_cast<int>(as_int(field(doc, "width", path), path + ".width"));
  if (t.spec.time_bins < 1 || t.spec.height < 1 || t.spec.width < 1)
    throw DataError(path + ": non-positive tensor dimensions");
  const json& counts = field(doc, "counts", path);
  if (!counts.is_array()) throw DataError(path + ".counts: expected an array");
  const std::size_t need = 2ull * static_cast<std::size_t>(t.spec.time_bins) *
                           static_cast<std::size_t>(t.spec.height) *
                           static_cast<std::size_t>(t.spec.width);
  if (counts.size() != need) throw DataError(path + ".counts: expected " + std::to_string(need) +
                                             " entries, got " + std::to_string(counts.size()));
  t.data.reserve(need);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const std::string where = path + ".counts[" + std::to_string(i) + "]";
    const std::int64_t v = as_int(counts[i], where);
    if (v < 0 || v > std::numeric_limits<std::uint32_t>::max())
      throw DataError(where + ": out of range");
    t.data.push_back(static_cast<std::uint32_t>(v));
  }
  return t;
}

void write_metrics_csv(const std::string& path, const FrequencySweep& sweep) {
  std::set<int> classes;
  for (const SweepPoint& p : sweep.points)
    for (const auto& [c, ap] : p.bundle.per_class) classes.insert(c);

  std::string out = "frequency_hz,offset,map,ap50,ap75,ap_s,ap_m,ap_l";
  for (const int c : classes) out += ",ap_class_" + std::to_string(c);
  out += "\n";
  for (const SweepPoint& p : sweep.points) {
    out += csv_cell(p.frequency_hz);
    out += "," + csv_cell(p.offset);
    out += "," + csv_cell(p.bundle.map);
    out += "," + csv_cell(p.bundle.ap50);
    out += "," + csv_cell(p.bundle.ap75);
    out += "," + csv_cell(p.bundle.ap_s);
    out += "," + csv_cell(p.bundle.ap_m);
    out += "," + csv_cell(p.bundle.ap_l);
    for (const int c : classes) {
      const auto it = p.bundle.per_class.find(c);
      out += ",";
      if (it != p.bundle.per_class.end()) out += csv_cell(it->second);
    }
    out += "\n";
  }
  fsio::write_file_atomic(path, out);
}

void write_plot_json(const std::string& path, const FrequencySweep& sweep) {
  const auto series_of = [&](auto pick) {
    json arr = json::array();
    for (const SweepPoint& p : sweep.points) {
      const std::optional<double> v = pick(p.bundle);
      if (v)
        arr.push_back(*v);
      else
        arr.push_back(nullptr);
    }
    return arr;
  };
  json x_freq = json::array(), x_off = json::array();
  for (const SweepPoint& p : sweep.points) {
    x_freq.push_back(p.frequency_hz);
    x_off.push_back(p.offset);
  }
  std::set<int> classes;
  for (const SweepPoint& p : sweep.points)
    for (const auto& [c, ap] : p.bundle.per_class) classes.insert(c);
  json series{
      {"map", series_of([](const EvalBundle& b) { return b.map; })},
      {"ap50", series_of([](const EvalBundle& b) { return b.ap50; })},
      {"ap75", series_of([](const EvalBundle& b) { return b.ap75; })},
      {"ap_s", series_of([](const EvalBundle& b) { return b.ap_s; })},
      {"ap_m", series_of([](const EvalBundle& b) { return b.ap_m; })},
      {"ap_l", series_of([](const EvalBundle& b) { return b.ap_l; })},
  };
  for (const int c : classes)
    series["class_" + std::to_string(c)] = series_of([c](const EvalBundle& b) {
      const auto it = b.per_class.find(c);
      return it == b.per_class.end() ? std::optional<double>() : std::optional<double>(it->second);
    });
  const json doc{{"format", "evdet-sweep"},
                 {"version", 1},
                 {"delta_t_us", sweep.delta_t_us},
                 {"gt_mode", sweep.gt_mode == GtMode::exact ? "exact" : "interpolated"},
                 {"frequency_hz", std::move(x_freq)},
                 {"offset", std::move(x_off)},
                 {"series", std::move(series)}};
  fsio::write_file_atomic(path, dump(doc));
}

void write_pseudo_labels_jsonl(const std::string& path,
                               std::span<const PseudoLabelSet> per_sample) {
  std::string out;
  for (std::size_t s = 0; s < per_sample.size(); ++s) {
    for (std::size_t w = 0; w < per_sample[s].per_window.size(); ++w) {
      json boxes = json::array();
      for (const GroundTruthBox& g : per_sample[s].per_window[w]) boxes.push_back(gt_to_json(g));
      const json line{{"sample", s}, {"window", w}, {"boxes", std::move(boxes)}};
      out += line.dump();
      out += "\n";
    }
  }
  fsio::write_file_atomic(path, out);
}

void write_round_stats_csv(const std::string& path, std::span<const RoundStats> stats) {
  std::string out = "round,label_count,mean_score\n";
  for (const RoundStats& s : stats) {
    out += std::to_string(s.round);
    out += "," + std::to_string(s.label_count);
    out += "," + csv_cell(s.mean_score);
    out += "\n";
  }
  fsio::write_file_atomic(path, out);
}

}  // namespace evdet
