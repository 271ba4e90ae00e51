#include "worldgen/world_volume.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace worldgen {

const std::array<SemanticClass, kNumClasses>& class_palette() {
  static const std::array<SemanticClass, kNumClasses> palette = {{
      {kEmpty, "empty", {0, 0, 0}},
      {kRoad, "road", {105, 105, 105}},
      {kSidewalk, "sidewalk", {244, 164, 96}},
      {kLaneMarking, "lane-marking", {255, 255, 255}},
      {kBuilding, "building", {70, 130, 180}},
      {kVehicle, "vehicle", {220, 20, 60}},
      {kPedestrian, "pedestrian", {255, 215, 0}},
      {kVegetation, "vegetation", {34, 139, 34}},
  }};
  return palette;
}

const SemanticClass& class_info(uint8_t id) { return class_palette()[id]; }

int class_id_by_name(const std::string& name) {
  for (const auto& c : class_palette())
    if (name == c.name) return c.id;
  return -1;
}

WorldVolume WorldVolume::empty() {
  WorldVolume v;
  v.occupancy.assign(static_cast<size_t>(kGridZ) * kGridH * kGridW, kEmpty);
  v.map_plane.assign(static_cast<size_t>(kGridH) * kGridW * 3, 0);
  return v;
}

Tensor compose_channel_view(const WorldVolume& v) {
  if (v.occupancy.size() != static_cast<size_t>(kGridZ) * kGridH * kGridW ||
      v.map_plane.size() != static_cast<size_t>(kGridH) * kGridW * 3)
    throw ShapeError("compose: volume extents do not match the configured grid");
  const int C = kNumClasses + 3;
  int64_t plane = static_cast<int64_t>(kGridZ) * kGridH * kGridW;
  std::vector<float> out(static_cast<size_t>(C) * plane, 0.0f);
  for (int64_t i = 0; i < plane; ++i) {
    uint8_t cls = v.occupancy[static_cast<size_t>(i)];
    if (cls >= kNumClasses) throw ShapeError("compose: occupancy id out of range");
    out[static_cast<size_t>(cls * plane + i)] = 1.0f;
  }
  // Map RGB only on the z=0 slab, zero-padded above.
  int64_t hw = static_cast<int64_t>(kGridH) * kGridW;
  for (int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      out[static_cast<size_t>((kNumClasses + c) * plane + i)] =
          static_cast<float>(v.map_plane[static_cast<size_t>(i * 3 + c)]) / 255.0f;
  return Tensor::from_data({C, kGridZ, kGridH, kGridW}, std::move(out));
}

// File formats ---------------------------------------------------------------

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

uint32_t get_u32(const uint8_t* d, size_t size, size_t& off) {
  if (off + 4 > size) throw VolumeIoError("truncated payload");
  uint32_t v = static_cast<uint32_t>(d[off]) | (static_cast<uint32_t>(d[off + 1]) << 8) |
               (static_cast<uint32_t>(d[off + 2]) << 16) | (static_cast<uint32_t>(d[off + 3]) << 24);
  off += 4;
  return v;
}

float get_f32(const uint8_t* d, size_t size, size_t& off) {
  uint32_t v = get_u32(d, size, off);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw VolumeIoError("cannot open file: " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw VolumeIoError("cannot open file for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw VolumeIoError("write failed: " + path);
}

}  // namespace

void append_wvol_bytes(const WorldVolume& v, std::vector<uint8_t>& out) {
  out.push_back('W');
  out.push_back('V');
  out.push_back('O');
  out.push_back('L');
  put_u32(out, 1);  // version
  put_u32(out, kGridZ);
  put_u32(out, kGridH);
  put_u32(out, kGridW);
  put_u32(out, kNumClasses);
  put_f32(out, v.voxel_size);
  put_f32(out, v.ego_pose.x);
  put_f32(out, v.ego_pose.y);
  put_f32(out, v.ego_pose.yaw);
  out.insert(out.end(), v.occupancy.begin(), v.occupancy.end());
  out.insert(out.end(), v.map_plane.begin(), v.map_plane.end());
}

WorldVolume parse_wvol_bytes(const uint8_t* d, size_t size, size_t& off) {
  if (off + 4 > size) throw VolumeIoError("truncated payload");
  if (std::memcmp(d + off, "WVOL", 4) != 0) throw VolumeIoError("bad magic");
  off += 4;
  uint32_t version = get_u32(d, size, off);
  if (version != 1) throw VolumeIoError("version mismatch: " + std::to_string(version));
  uint32_t z = get_u32(d, size, off), h = get_u32(d, size, off), w = get_u32(d, size, off),
           cocc = get_u32(d, size, off);
  if (z != kGridZ || h != kGridH || w != kGridW || cocc != kNumClasses)
    throw VolumeIoError("grid extents do not match the configured grid");
  WorldVolume v;
  v.voxel_size = get_f32(d, size, off);
  v.ego_pose.x = get_f32(d, size, off);
  v.ego_pose.y = get_f32(d, size, off);
  v.ego_pose.yaw = get_f32(d, size, off);
  size_t occ_n = static_cast<size_t>(z) * h * w;
  size_t map_n = static_cast<size_t>(h) * w * 3;
  if (off + occ_n + map_n > size) throw VolumeIoError("truncated payload");
  v.occupancy.assign(d + off, d + off + occ_n);
  off += occ_n;
  v.map_plane.assign(d + off, d + off + map_n);
  off += map_n;
  for (uint8_t c : v.occupancy)
    if (c >= kNumClasses) throw VolumeIoError("occupancy id out of range");
  return v;
}

void save_wvol(const WorldVolume& v, const std::string& path) {
  std::vector<uint8_t> bytes;
  append_wvol_bytes(v, bytes);
  write_file(path, bytes);
}

WorldVolume load_wvol(const std::string& path) {
  auto bytes = read_file(path);
  size_t off = 0;
  WorldVolume v = parse_wvol_bytes(bytes.data(), bytes.size(), off);
  if (off != bytes.size()) throw VolumeIoError("trailing bytes after payload");
  return v;
}

void save_wseq(const WorldVolumeSequence& s, const std::string& path) {
  if (s.frames.size() != s.actions.size())
    throw VolumeIoError("sequence has " + std::to_string(s.frames.size()) + " frames but " +
                        std::to_string(s.actions.size()) + " actions");
  std::vector<uint8_t> bytes;
  bytes.push_back('W');
  bytes.push_back('S');
  bytes.push_back('E');
  bytes.push_back('Q');
  put_u32(bytes, static_cast<uint32_t>(s.frames.size()));
  put_f32(bytes, s.dt);
  for (size_t i = 0; i < s.frames.size(); ++i) {
    put_f32(bytes, s.actions[i].first);
    put_f32(bytes, s.actions[i].second);
    append_wvol_bytes(s.frames[i], bytes);
  }
  write_file(path, bytes);
}

WorldVolumeSequence load_wseq(const std::string& path) {
  auto bytes = read_file(path);
  size_t off = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "WSEQ", 4) != 0) throw VolumeIoError("bad magic");
  off += 4;
  uint32_t count = get_u32(bytes.data(), bytes.size(), off);
  WorldVolumeSequence s;
  s.dt = get_f32(bytes.data(), bytes.size(), off);
  for (uint32_t i = 0; i < count; ++i) {
    float vel = get_f32(bytes.data(), bytes.size(), off);
    float steer = get_f32(bytes.data(), bytes.size(), off);
    s.actions.push_back({vel, steer});
    s.frames.push_back(parse_wvol_bytes(bytes.data(), bytes.size(), off));
  }
  if (off != bytes.size()) throw VolumeIoError("trailing bytes after payload");
  return s;
}

// Editing ---------------------------------------------------------------------

ObjectTemplate ObjectTemplate::box(uint8_t cls, int sz, int sy, int sx) {
  ObjectTemplate t;
  t.sz = sz;
  t.sy = sy;
  t.sx = sx;
  t.occupancy.assign(static_cast<size_t>(sz) * sy * sx, cls);
  return t;
}

WorldVolume edit_insert_object(const WorldVolume& v, const ObjectTemplate& tpl,
                               int ox, int oy, int quarter_turns) {
  int q = ((quarter_turns % 4) + 4) % 4;
  // Rotated footprint extents
  int ry = (q % 2 == 0) ? tpl.sy : tpl.sx;
  int rx = (q % 2 == 0) ? tpl.sx : tpl.sy;
  if (ox < 0 || oy < 0 || ox + rx > kGridW || oy + ry > kGridH || tpl.sz > kGridZ)
    throw EditError("placement out of bounds");

  WorldVolume out = v;
  std::vector<std::array<int, 3>> collisions;
  for (int z = 0; z < tpl.sz; ++z)
    for (int y = 0; y < tpl.sy; ++y)
      for (int x = 0; x < tpl.sx; ++x) {
        uint8_t cls = tpl.occupancy[static_cast<size_t>((z * tpl.sy + y) * tpl.sx + x)];
        if (cls == kEmpty) continue;
        int ty, tx;
        switch (q) {
          case 0: ty = y; tx = x; break;
          case 1: ty = x; tx = tpl.sy - 1 - y; break;
          case 2: ty = tpl.sy - 1 - y; tx = tpl.sx - 1 - x; break;
          default: ty = tpl.sx - 1 - x; tx = y; break;
        }
        int gy = oy + ty, gx = ox + tx;
        if (v.at(z, gy, gx) != kEmpty) {
          collisions.push_back({z, gy, gx});
          continue;
        }
        out.at(z, gy, gx) = cls;
      }
  if (!collisions.empty())
    throw EditError("insert collides with " + std::to_string(collisions.size()) + " occupied voxel(s)",
                    std::move(collisions));
  return out;
}

WorldVolume edit_remove_object(const WorldVolume& v, const VoxelBox& r, int class_filter) {
  if (r.z0 < 0 || r.y0 < 0 || r.x0 < 0 || r.z1 >= kGridZ || r.y1 >= kGridH || r.x1 >= kGridW ||
      r.z0 > r.z1 || r.y0 > r.y1 || r.x0 > r.x1)
    throw EditError("region out of bounds");
  WorldVolume out = v;
  for (int z = r.z0; z <= r.z1; ++z)
    for (int y = r.y0; y <= r.y1; ++y)
      for (int x = r.x0; x <= r.x1; ++x) {
        uint8_t c = out.at(z, y, x);
        if (class_filter < 0 || c == static_cast<uint8_t>(class_filter)) out.at(z, y, x) = kEmpty;
      }
  return out;
}

double voxel_iou(const WorldVolume& a, const WorldVolume& b, uint8_t cls) {
  return voxel_iou_classes(a, b, {cls});
}

double voxel_iou_classes(const WorldVolume& a, const WorldVolume& b, const std::vector<uint8_t>& classes) {
  if (a.occupancy.size() != b.occupancy.size()) throw ShapeError("voxel_iou: dim mismatch");
  auto in_set = [&classes](uint8_t c) {
    for (uint8_t k : classes)
      if (c == k) return true;
    return false;
  };
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.occupancy.size(); ++i) {
    bool ia = in_set(a.occupancy[i]);
    bool ib = in_set(b.occupancy[i]);
    inter += (ia && ib) ? 1 : 0;
    uni += (ia || ib) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Camera rig ------------------------------------------------------------------

const CameraView& CameraRig::by_name(const std::string& name) const {
  for (const auto& c : cameras)
    if (c.name == name) return c;
  throw std::runtime_error("no such camera: " + name);
}

CameraRig default_rig() {
  const double deg = 3.14159265358979323846 / 180.0;
  struct Entry {
    const char* name;
    double yaw_deg;
  };
  const Entry entries[6] = {{"front", 0.0},       {"front-left", 55.0},  {"front-right", -55.0},
                            {"back", 180.0},      {"back-left", 125.0},  {"back-right", -125.0}};
  const int W = 56, H = 32;
  const double fov = 64.0 * deg;
  const double fx = (W / 2.0) / std::tan(fov / 2.0);
  const double cam_height = 1.5;

  CameraRig rig;
  for (const auto& e : entries) {
    CameraView cv;
    cv.name = e.name;
    cv.image_w = W;
    cv.image_h = H;
    cv.K = Eigen::Matrix3d::Identity();
    cv.K(0, 0) = fx;
    cv.K(1, 1) = fx;
    cv.K(0, 2) = W / 2.0;
    cv.K(1, 2) = H / 2.0;
    double psi = e.yaw_deg * deg;
    // Ego frame: x forward, y left, z up. Camera frame: x right, y down, z forward.
    Eigen::Matrix3d R;
    R << std::sin(psi), -std::cos(psi), 0.0,
         0.0, 0.0, -1.0,
         std::cos(psi), std::sin(psi), 0.0;
    Eigen::Vector3d center(0.0, 0.0, cam_height);
    cv.T = Eigen::Matrix4d::Identity();
    cv.T.block<3, 3>(0, 0) = R;
    cv.T.block<3, 1>(0, 3) = -R * center;
    rig.cameras.push_back(cv);
  }
  return rig;
}

void validate_rig(const CameraRig& rig) {
  for (const auto& c : rig.cameras) {
    if (c.K(1, 0) != 0.0 || c.K(2, 0) != 0.0 || c.K(2, 1) != 0.0 || c.K(0, 0) <= 0.0 || c.K(1, 1) <= 0.0)
      throw std::runtime_error("camera " + c.name + ": K must be upper-triangular with positive focal lengths");
    Eigen::Matrix3d R = c.T.block<3, 3>(0, 0);
    if ((R * R.transpose() - Eigen::Matrix3d::Identity()).norm() > 1e-9 || std::abs(R.determinant() - 1.0) > 1e-9)
      throw std::runtime_error("camera " + c.name + ": extrinsic rotation is not a proper rotation");
  }
}

}  // namespace worldgen
