#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "worldgen/tensor.hpp"

namespace worldgen {

// Fixed desk-scale grid: 32m x 32m x 8m around the ego vehicle.
inline constexpr int kGridZ = 16;
inline constexpr int kGridH = 64;
inline constexpr int kGridW = 64;
inline constexpr float kVoxelSize = 0.5f;
inline constexpr int kNumClasses = 8;

enum ClassId : uint8_t {
  kEmpty = 0,
  kRoad = 1,
  kSidewalk = 2,
  kLaneMarking = 3,
  kBuilding = 4,
  kVehicle = 5,
  kPedestrian = 6,
  kVegetation = 7,
};

struct SemanticClass {
  uint8_t id;
  const char* name;
  std::array<uint8_t, 3> display_rgb;
};

const std::array<SemanticClass, kNumClasses>& class_palette();
const SemanticClass& class_info(uint8_t id);
int class_id_by_name(const std::string& name);  // -1 when unknown

// Map raster colors (road elements encoded in RGB).
inline constexpr std::array<uint8_t, 3> kMapRoadGray = {128, 128, 128};
inline constexpr std::array<uint8_t, 3> kMapLaneWhite = {255, 255, 255};
inline constexpr std::array<uint8_t, 3> kMapCrosswalkYellow = {255, 255, 0};

struct PlanarPose {
  float x = 0.0f, y = 0.0f, yaw = 0.0f;
  bool operator==(const PlanarPose&) const = default;
};

// Dense semantic occupancy plus the HD-map plane at zero height.
// Immutable by convention: edits return new volumes.
struct WorldVolume {
  std::vector<uint8_t> occupancy;  // Z*H*W, z outer, row-major
  std::vector<uint8_t> map_plane;  // H*W*3 RGB
  float voxel_size = kVoxelSize;
  PlanarPose ego_pose;

  static WorldVolume empty();
  uint8_t at(int z, int y, int x) const { return occupancy[static_cast<size_t>((z * kGridH + y) * kGridW + x)]; }
  uint8_t& at(int z, int y, int x) { return occupancy[static_cast<size_t>((z * kGridH + y) * kGridW + x)]; }
  const uint8_t* map_at(int y, int x) const { return &map_plane[static_cast<size_t>((y * kGridW + x) * 3)]; }

  bool operator==(const WorldVolume&) const = default;
};

struct WorldVolumeSequence {
  std::vector<WorldVolume> frames;
  std::vector<std::pair<float, float>> actions;  // (velocity m/s, steering rad), one per frame
  float dt = 0.5f;
};

// Dense channel view for featurization: one-hot over C_occ classes, then the
// map RGB (scaled to [0,1]) on the z=0 slab only. [C_occ+3, Z, H, W].
Tensor compose_channel_view(const WorldVolume& v);

struct VolumeIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_wvol(const WorldVolume& v, const std::string& path);
WorldVolume load_wvol(const std::string& path);
// In-memory codecs shared by .wvol and the .wseq container.
void append_wvol_bytes(const WorldVolume& v, std::vector<uint8_t>& out);
WorldVolume parse_wvol_bytes(const uint8_t* data, size_t size, size_t& offset);

void save_wseq(const WorldVolumeSequence& s, const std::string& path);
WorldVolumeSequence load_wseq(const std::string& path);

// Editing -------------------------------------------------------------------

struct EditError : std::runtime_error {
  std::vector<std::array<int, 3>> collisions;  // (z,y,x) of clashing voxels
  explicit EditError(const std::string& msg, std::vector<std::array<int, 3>> c = {})
      : std::runtime_error(msg), collisions(std::move(c)) {}
};

// Small occupancy block stamped into a volume.
struct ObjectTemplate {
  int sz = 0, sy = 0, sx = 0;      // extents (z, y, x)
  std::vector<uint8_t> occupancy;  // sz*sy*sx ids
  static ObjectTemplate box(uint8_t cls, int sz, int sy, int sx);
};

// Pose: voxel offset of the template's (0,0,0) corner, yaw snapped to 90 deg
// (0..3 quarter turns). Template voxels land only on empty voxels; any
// collision aborts with the clashing voxel list.
WorldVolume edit_insert_object(const WorldVolume& v, const ObjectTemplate& tpl,
                               int ox, int oy, int quarter_turns);

struct VoxelBox {
  int z0 = 0, y0 = 0, x0 = 0, z1 = 0, y1 = 0, x1 = 0;  // inclusive
};

// class_filter < 0 clears every class in the region.
WorldVolume edit_remove_object(const WorldVolume& v, const VoxelBox& region, int class_filter);

// |a==cls & b==cls| / |a==cls | b==cls|; 1.0 when both sets empty.
double voxel_iou(const WorldVolume& a, const WorldVolume& b, uint8_t cls);
// IoU over the union of the given class set (dynamic-object metric).
double voxel_iou_classes(const WorldVolume& a, const WorldVolume& b, const std::vector<uint8_t>& classes);

// Camera rig ----------------------------------------------------------------

struct CameraView {
  std::string name;
  Eigen::Matrix3d K;      // intrinsics
  Eigen::Matrix4d T;      // ego-to-camera rigid transform
  int image_w = 56, image_h = 32;
};

struct CameraRig {
  std::vector<CameraView> cameras;
  const CameraView& by_name(const std::string& name) const;
};

// Six pinhole cameras at yaws {0, +-55, 180, +-125} deg, 64 deg horizontal
// FOV, 56x32 images, mounted 1.5 m above ground at the ego origin.
CameraRig default_rig();
void validate_rig(const CameraRig& rig);  // K upper-triangular, R orthonormal det +1

}  // namespace worldgen
