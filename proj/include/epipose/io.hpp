#pragma once

#include "epipose/core.hpp"
#include "epipose/dist.hpp"
#include "epipose/geom.hpp"
#include "epipose/render.hpp"
#include "epipose/score.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace epipose {

static_assert(std::endian::native == std::endian::little,
              "bundle grids are little-endian; big-endian hosts need swaps");

enum class BundleErrorKind {
  MissingFile,
  BadMagic,
  BadLength,
  DimMismatch,
  NonFiniteData,
  SchemaError,
  IoError,
};

inline const char* bundle_error_name(BundleErrorKind k) {
  switch (k) {
    case BundleErrorKind::MissingFile: return "MissingFile";
    case BundleErrorKind::BadMagic: return "BadMagic";
    case BundleErrorKind::BadLength: return "BadLength";
    case BundleErrorKind::DimMismatch: return "DimMismatch";
    case BundleErrorKind::NonFiniteData: return "NonFiniteData";
    case BundleErrorKind::SchemaError: return "SchemaError";
    case BundleErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

class BundleError : public std::runtime_error {
 public:
  BundleError(BundleErrorKind kind, const std::filesystem::path& path,
              const std::string& detail)
      : std::runtime_error(std::string(bundle_error_name(kind)) + ": " +
                           path.string() + ": " + detail),
        kind_(kind),
        path_(path) {}

  BundleErrorKind kind() const { return kind_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  BundleErrorKind kind_;
  std::filesystem::path path_;
};

/// In-memory scene bundle: the object, its key set, and one camera plus
/// embedding field per view, with an optional ground-truth pose.
struct SceneData {
  ObjectModel model;
  KeySet keys;
  std::vector<Camera> cameras;
  std::vector<EmbeddingField> fields;
  std::optional<Pose> gt_pose;
};

struct GridData {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<float> values;  // row-major H x W x C
};

inline constexpr char kGridMagic[4] = {'E', 'P', 'I', 'S'};
inline constexpr std::uint32_t kGridVersion = 1;

inline void write_grid(const std::filesystem::path& path, std::uint32_t h,
                       std::uint32_t w, std::uint32_t c,
                       std::span<const float> values) {
  if (values.size() != std::size_t(h) * w * c)
    throw BundleError(BundleErrorKind::DimMismatch, path,
                      "value count does not match dims");
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw BundleError(BundleErrorKind::IoError, path, "cannot open for write");
  out.write(kGridMagic, 4);
  const std::uint32_t header[4] = {kGridVersion, h, w, c};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(values.data()),
            std::streamsize(values.size() * sizeof(float)));
  if (!out) throw BundleError(BundleErrorKind::IoError, path, "write failed");
}

inline GridData read_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw BundleError(BundleErrorKind::MissingFile, path, "cannot open");
  const std::streamsize size = in.tellg();
  in.seekg(0);
  if (size < 20)
    throw BundleError(BundleErrorKind::BadLength, path, "shorter than header");
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, kGridMagic, 4) != 0)
    throw BundleError(BundleErrorKind::BadMagic, path, "magic is not EPIS");
  std::uint32_t header[4];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (header[0] != kGridVersion)
    throw BundleError(BundleErrorKind::BadMagic, path,
                      "unsupported version " + std::to_string(header[0]));
  GridData g;
  g.height = header[1];
  g.width = header[2];
  g.channels = header[3];
  const std::size_t count = std::size_t(g.height) * g.width * g.channels;
  const std::streamsize expected = 20 + std::streamsize(count * sizeof(float));
  if (size != expected)
    throw BundleError(BundleErrorKind::BadLength, path,
                      "expected " + std::to_string(expected) + " bytes, found " +
                          std::to_string(size));
  g.values.resize(count);
  in.read(reinterpret_cast<char*>(g.values.data()),
          std::streamsize(count * sizeof(float)));
  if (!in) throw BundleError(BundleErrorKind::IoError, path, "read failed");
  return g;
}

namespace detail {

using json = nlohmann::json;

inline json mat3_to_json(const Mat3& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r)
    rows.push_back(json::array({m(r, 0), m(r, 1), m(r, 2)}));
  return rows;
}

inline json vec3_to_json(const Vec3& v) {
  return json::array({v.x(), v.y(), v.z()});
}

inline Mat3 mat3_from_json(const json& j, const std::filesystem::path& path,
                           const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw BundleError(BundleErrorKind::SchemaError, path,
                      where + ": expected 3 rows");
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    if (!j[r].is_array() || j[r].size() != 3)
      throw BundleError(BundleErrorKind::SchemaError, path,
                        where + ": row " + std::to_string(r) +
                            " is not a 3-vector");
    for (int c = 0; c < 3; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline Vec3 vec3_from_json(const json& j, const std::filesystem::path& path,
                           const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw BundleError(BundleErrorKind::SchemaError, path,
                      where + ": expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline void check_rotation(const Mat3& r, double tol,
                           const std::filesystem::path& path,
                           const std::string& where) {
  if (!r.allFinite() || !is_rotation(r, tol))
    throw BundleError(BundleErrorKind::SchemaError, path,
                      where + ": not a rotation within " + std::to_string(tol));
}

inline json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw BundleError(BundleErrorKind::MissingFile, path, "cannot open");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw BundleError(BundleErrorKind::SchemaError, path, e.what());
  }
  return j;
}

inline void store_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out)
    throw BundleError(BundleErrorKind::IoError, path, "cannot open for write");
  out << j.dump(2) << "\n";
  if (!out) throw BundleError(BundleErrorKind::IoError, path, "write failed");
}

}  // namespace detail

/// Writes the restricted OBJ subset: `v` and `f` lines, triangles only,
/// 1-based indices.
inline void write_mesh_obj(const std::filesystem::path& path,
                           const ObjectModel& model) {
  std::ofstream out(path);
  if (!out)
    throw BundleError(BundleErrorKind::IoError, path, "cannot open for write");
  char buf[128];
  for (const Vec3& v : model.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x(), v.y(),
                  v.z());
    out << buf;
  }
  for (const auto& t : model.triangles)
    out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  if (!out) throw BundleError(BundleErrorKind::IoError, path, "write failed");
}

inline ObjectModel read_mesh_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw BundleError(BundleErrorKind::MissingFile, path, "cannot open");
  ObjectModel model;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    const std::string where = "line " + std::to_string(line_no);
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x() >> v.y() >> v.z()))
        throw BundleError(BundleErrorKind::SchemaError, path,
                          where + ": malformed vertex");
      model.vertices.push_back(v);
    } else if (tag == "f") {
      std::array<int, 3> t;
      if (!(ss >> t[0] >> t[1] >> t[2]))
        throw BundleError(BundleErrorKind::SchemaError, path,
                          where + ": faces must be triangles");
      int extra;
      if (ss >> extra)
        throw BundleError(BundleErrorKind::SchemaError, path,
                          where + ": faces must be triangles");
      for (int& idx : t) {
        if (idx < 1 || idx > int(model.vertices.size()))
          throw BundleError(BundleErrorKind::SchemaError, path,
                            where + ": vertex index out of range");
        --idx;  // to 0-based
      }
      model.triangles.push_back(t);
    } else {
      throw BundleError(BundleErrorKind::SchemaError, path,
                        where + ": unsupported OBJ element '" + tag + "'");
    }
  }
  return model;
}

inline std::string view_dir_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "views/%02d", index);
  return buf;
}

/// Writes a scene bundle. The caller must have exclusive access to the
/// directory; files are created fresh each time.
inline void write_bundle(const std::filesystem::path& dir,
                         const SceneData& scene) {
  namespace fs = std::filesystem;
  using detail::json;
  std::error_code ec;
  fs::create_directories(dir / "object", ec);
  if (ec) throw BundleError(BundleErrorKind::IoError, dir, ec.message());

  write_mesh_obj(dir / "object" / "mesh.obj", scene.model);

  json obj;
  obj["diameter"] = scene.model.diameter;
  json syms = json::array();
  for (const auto& s : scene.model.symmetries) {
    json e;
    e["R"] = detail::mat3_to_json(s.R);
    e["t"] = detail::vec3_to_json(s.t);
    syms.push_back(e);
  }
  obj["symmetries"] = syms;
  detail::store_json(dir / "object" / "object.json", obj);

  {
    const int n = scene.keys.count();
    const int e = scene.keys.embed_dim();
    std::vector<float> rows(std::size_t(n) * (3 + e));
    for (int i = 0; i < n; ++i) {
      for (int d = 0; d < 3; ++d)
        rows[std::size_t(i) * (3 + e) + d] = scene.keys.raw_coords()[3 * i + d];
      for (int d = 0; d < e; ++d)
        rows[std::size_t(i) * (3 + e) + 3 + d] =
            scene.keys.raw_keys()[std::size_t(i) * e + d];
    }
    write_grid(dir / "object" / "keys.bin", n, 1, 3 + e, rows);
  }

  json scene_json;
  scene_json["format"] = "epipose-scene";
  scene_json["version"] = 1;
  scene_json["object"] = "object";
  if (scene.gt_pose) {
    json gt;
    gt["R"] = detail::mat3_to_json(scene.gt_pose->R);
    gt["t"] = detail::vec3_to_json(scene.gt_pose->t);
    scene_json["gt_pose"] = gt;
  }
  json views = json::array();
  for (std::size_t v = 0; v < scene.cameras.size(); ++v) {
    const Camera& cam = scene.cameras[v];
    const auto& field = scene.fields[v];
    const std::string vdir = view_dir_name(int(v));
    fs::create_directories(dir / vdir, ec);
    if (ec) throw BundleError(BundleErrorKind::IoError, dir / vdir, ec.message());
    write_grid(dir / vdir / "query.bin", cam.height, cam.width,
               field.embed_dim(), field.raw_queries());
    write_grid(dir / vdir / "mask.bin", cam.height, cam.width, 1,
               field.raw_mask());
    json jv;
    jv["dir"] = vdir;
    json jc;
    jc["K"] = detail::mat3_to_json(cam.K);
    jc["R"] = detail::mat3_to_json(cam.R_wc);
    jc["t"] = detail::vec3_to_json(cam.t_wc);
    jc["width"] = cam.width;
    jc["height"] = cam.height;
    jv["camera"] = jc;
    views.push_back(jv);
  }
  scene_json["views"] = views;
  detail::store_json(dir / "scene.json", scene_json);
}

/// Reads and fully validates a scene bundle. Every invariant is checked
/// eagerly; violations throw a BundleError naming the offending file.
inline SceneData read_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  using detail::json;
  const fs::path scene_path = dir / "scene.json";
  const json scene_json = detail::load_json(scene_path);
  if (!scene_json.contains("views") || !scene_json["views"].is_array())
    throw BundleError(BundleErrorKind::SchemaError, scene_path,
                      "/views: missing or not an array");

  SceneData scene;

  const fs::path obj_dir =
      dir / scene_json.value("object", std::string("object"));
  scene.model = read_mesh_obj(obj_dir / "mesh.obj");
  if (scene.model.vertices.empty())
    throw BundleError(BundleErrorKind::SchemaError, obj_dir / "mesh.obj",
                      "mesh has no vertices");

  const fs::path objjson_path = obj_dir / "object.json";
  const json obj = detail::load_json(objjson_path);
  if (!obj.contains("diameter") || !obj["diameter"].is_number())
    throw BundleError(BundleErrorKind::SchemaError, objjson_path,
                      "/diameter: missing");
  scene.model.diameter = obj["diameter"].get<double>();
  if (!(scene.model.diameter > 0))
    throw BundleError(BundleErrorKind::SchemaError, objjson_path,
                      "/diameter: must be positive");
  scene.model.symmetries.clear();
  if (!obj.contains("symmetries") || !obj["symmetries"].is_array())
    throw BundleError(BundleErrorKind::SchemaError, objjson_path,
                      "/symmetries: missing or not an array");
  bool has_identity = false;
  for (std::size_t i = 0; i < obj["symmetries"].size(); ++i) {
    const std::string where = "/symmetries/" + std::to_string(i);
    const json& e = obj["symmetries"][i];
    SymmetryTransform s;
    s.R = detail::mat3_from_json(e.at("R"), objjson_path, where + "/R");
    s.t = detail::vec3_from_json(e.at("t"), objjson_path, where + "/t");
    detail::check_rotation(s.R, 1e-6, objjson_path, where + "/R");
    if ((s.R - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9 &&
        s.t.norm() < 1e-9)
      has_identity = true;
    scene.model.symmetries.push_back(s);
  }
  if (!has_identity)
    throw BundleError(BundleErrorKind::SchemaError, objjson_path,
                      "/symmetries: identity transform missing");

  {
    const fs::path keys_path = obj_dir / "keys.bin";
    const GridData g = read_grid(keys_path);
    if (g.width != 1 || g.channels < 4)
      throw BundleError(BundleErrorKind::DimMismatch, keys_path,
                        "expected dims (count, 1, 3+E)");
    const int n = int(g.height);
    const int e = int(g.channels) - 3;
    if (n < 4)
      throw BundleError(BundleErrorKind::SchemaError, keys_path,
                        "need at least 4 key samples");
    std::vector<float> coords(std::size_t(n) * 3), keys(std::size_t(n) * e);
    for (int i = 0; i < n; ++i) {
      for (int d = 0; d < 3; ++d)
        coords[3 * i + d] = g.values[std::size_t(i) * g.channels + d];
      for (int d = 0; d < e; ++d)
        keys[std::size_t(i) * e + d] =
            g.values[std::size_t(i) * g.channels + 3 + d];
    }
    for (float v : g.values)
      if (!std::isfinite(v))
        throw BundleError(BundleErrorKind::NonFiniteData, keys_path,
                          "non-finite key data");
    scene.keys = KeySet(std::move(coords), std::move(keys), e,
                        scene.model.diameter);
    const double max_r = scene.keys.max_coord_radius();
    if (max_r > scene.model.diameter / 2 * (1 + 1e-6))
      throw BundleError(BundleErrorKind::SchemaError, keys_path,
                        "key coordinates outside the bounding sphere");
  }

  if (scene_json.contains("gt_pose")) {
    const json& gt = scene_json["gt_pose"];
    Pose p;
    p.R = detail::mat3_from_json(gt.at("R"), scene_path, "/gt_pose/R");
    p.t = detail::vec3_from_json(gt.at("t"), scene_path, "/gt_pose/t");
    detail::check_rotation(p.R, 1e-9, scene_path, "/gt_pose/R");
    scene.gt_pose = p;
  }

  const json& views = scene_json["views"];
  for (std::size_t v = 0; v < views.size(); ++v) {
    const std::string where = "/views/" + std::to_string(v);
    const json& jv = views[v];
    const std::string vdir = jv.value("dir", view_dir_name(int(v)));
    const json& jc = jv.at("camera");
    Camera cam;
    cam.K = detail::mat3_from_json(jc.at("K"), scene_path, where + "/camera/K");
    cam.R_wc =
        detail::mat3_from_json(jc.at("R"), scene_path, where + "/camera/R");
    cam.t_wc =
        detail::vec3_from_json(jc.at("t"), scene_path, where + "/camera/t");
    cam.width = jc.at("width").get<int>();
    cam.height = jc.at("height").get<int>();
    if (cam.width < 1 || cam.height < 1)
      throw BundleError(BundleErrorKind::SchemaError, scene_path,
                        where + ": width and height must be >= 1");
    if (cam.K(1, 0) != 0 || cam.K(2, 0) != 0 || cam.K(2, 1) != 0 ||
        cam.K(2, 2) != 1 || !(cam.K(0, 0) > 0) || !(cam.K(1, 1) > 0))
      throw BundleError(BundleErrorKind::SchemaError, scene_path,
                        where + "/camera/K: not upper-triangular calibrated");
    detail::check_rotation(cam.R_wc, 1e-9, scene_path, where + "/camera/R");

    const fs::path qpath = dir / vdir / "query.bin";
    const GridData q = read_grid(qpath);
    if (int(q.height) != cam.height || int(q.width) != cam.width)
      throw BundleError(BundleErrorKind::DimMismatch, qpath,
                        "grid dims do not match camera size");
    if (int(q.channels) != scene.keys.embed_dim())
      throw BundleError(BundleErrorKind::DimMismatch, qpath,
                        "embedding dim " + std::to_string(q.channels) +
                            " does not match keys.bin " +
                            std::to_string(scene.keys.embed_dim()));
    for (float x : q.values)
      if (!std::isfinite(x))
        throw BundleError(BundleErrorKind::NonFiniteData, qpath,
                          "non-finite query data");

    const fs::path mpath = dir / vdir / "mask.bin";
    const GridData m = read_grid(mpath);
    if (int(m.height) != cam.height || int(m.width) != cam.width ||
        m.channels != 1)
      throw BundleError(BundleErrorKind::DimMismatch, mpath,
                        "grid dims do not match camera size");
    for (float x : m.values)
      if (!(x >= 0.0f && x <= 1.0f))
        throw BundleError(BundleErrorKind::SchemaError, mpath,
                          "mask probability outside [0, 1]");

    scene.cameras.push_back(cam);
    scene.fields.emplace_back(int(v), cam.width, cam.height,
                              scene.keys.embed_dim(), std::move(q.values),
                              std::move(m.values));
  }
  return scene;
}

/// One estimate: pose, score parts, and the wall time that produced it.
struct PoseRecord {
  Pose pose;
  ScoreBreakdown score;
  double seconds = 0.0;
};

inline void write_poses(const std::filesystem::path& path,
                        std::span<const PoseRecord> records) {
  using detail::json;
  json arr = json::array();
  for (const auto& r : records) {
    json e;
    e["R"] = detail::mat3_to_json(r.pose.R);
    e["t"] = detail::vec3_to_json(r.pose.t);
    e["s_M"] = r.score.s_M;
    e["s_C"] = r.score.s_C;
    e["total"] = r.score.total;
    e["seconds"] = r.seconds;
    arr.push_back(e);
  }
  detail::store_json(path, arr);
}

inline std::vector<PoseRecord> read_poses(const std::filesystem::path& path) {
  using detail::json;
  const json arr = detail::load_json(path);
  if (!arr.is_array())
    throw BundleError(BundleErrorKind::SchemaError, path,
                      "expected a top-level array");
  std::vector<PoseRecord> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "/" + std::to_string(i);
    const json& e = arr[i];
    PoseRecord r;
    r.pose.R = detail::mat3_from_json(e.at("R"), path, where + "/R");
    r.pose.t = detail::vec3_from_json(e.at("t"), path, where + "/t");
    detail::check_rotation(r.pose.R, 1e-6, path, where + "/R");
    r.score.s_M = e.value("s_M", 0.0);
    r.score.s_C = e.value("s_C", 0.0);
    r.score.total = e.value("total", 0.0);
    r.seconds = e.value("seconds", 0.0);
    if (!r.pose.t.allFinite())
      throw BundleError(BundleErrorKind::NonFiniteData, path,
                        where + "/t: non-finite");
    out.push_back(r);
  }
  return out;
}

}  // namespace epipose
