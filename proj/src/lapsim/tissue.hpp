#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "lapsim/core.hpp"

namespace lapsim {

enum class BreathState { Moving, Stationary };
const char* to_string(BreathState s);

// Breathing waveform: a flat rest plateau of stationary_fraction * period at
// phase [0, f*T), followed by a raised-cosine excursion of `amplitude` along
// `axis`. Optional micro-motion (cardiac-like sinusoid) rides on top everywhere
// and does not change the ground-truth breath state.
struct BreathingProfile {
  double period_s = 60.0 / 14.0;
  double amplitude_mm = 3.0;
  double stationary_fraction = 0.30;
  Point3 axis{0.0, 1.0, 0.0};
  double micro_amplitude_mm = 0.0;
  double micro_frequency_hz = 1.2;
  double micro_phase_rad = 0.0;

  void validate() const;  // throws InvalidArgument

  double plateau_s() const { return stationary_fraction * period_s; }
  double motion_s() const { return (1.0 - stationary_fraction) * period_s; }
  // Scalar displacement along the axis at a given phase in [0, period).
  double waveform(double phase_s) const;
  BreathState state_at_phase(double phase_s) const;
};

// Rest geometry of the two bowel ends: marker corners plus a ribbon of tissue
// on the inward side of each wall's marker polyline.
struct TissueGeometry {
  MarkerSet rest_markers;
  Point3 back_inside_hint{-5.0, 3.0, 0.0};
  Point3 front_inside_hint{0.0, -10.0, 0.0};
  double ribbon_width_mm = 8.0;
  double sample_spacing_mm = 0.5;
  double sag_mm = 0.5;        // surface bows down by this much at |x| = sag_half_span
  double sag_half_span_mm = 15.0;
  double thickness_mm = 3.0;  // informational

  static TissueGeometry standard();

  double surface_z(double x) const;
  // Unit in-plane normal of marker segment i of a wall, pointing into the tissue.
  Point3 inward_normal(Wall w, std::size_t segment) const;
  std::vector<Point3> marker_polyline(Wall w) const;
};

struct SurfaceSample {
  Point3 rest;
  Wall wall;
};

struct TissueState {
  TissueGeometry geometry;
  BreathingProfile breathing;
  double time_s = 0.0;
  std::array<Point3, 2> wall_offset{};  // deformation offset per wall (shared by its markers)
  std::vector<SurfaceSample> surface;    // rest samples

  double breath_phase() const;
  BreathState breath_state() const;
  Point3 breathing_displacement() const;
  Point3 deformation_offset(MarkerId id) const { return wall_offset[static_cast<int>(wall_of(id))]; }
  Point3 displacement(Wall w) const { return breathing_displacement() + wall_offset[static_cast<int>(w)]; }

  MarkerSet markers() const;                // current world positions
  std::vector<Point3> edge_polyline(Wall w) const;  // current marker polyline
  // Current edge curve sampled along the surface (step 0.25 mm).
  std::vector<Point3> edge_curve(Wall w) const;
  // Rest-frame edge curve (what the tissue looks like with no motion).
  std::vector<Point3> rest_edge_curve(Wall w) const;
  PointCloud surface_cloud() const;

  // Signed in-plane distance from p to the current edge of wall w, positive on
  // the tissue side; `dz` receives the height error against the surface.
  double signed_edge_depth(const Point3& p, Wall w, double* dz = nullptr) const;
};

TissueState make_tissue(const TissueGeometry& geometry, const BreathingProfile& breathing, double start_time_s = 0.0);

// Pure time advance. Requires dt > 0.
TissueState step(const TissueState& state, double dt);

struct DeformationEvent {
  std::array<Point3, 2> wall_delta{};  // displacement added to each wall
  double max_magnitude_mm() const;
};

struct MagnitudeRange {
  double min_mm = 0.0;
  double max_mm = 0.0;
};

// Adds a uniformly oriented displacement with magnitude in `range` to every
// marker of each wall (one draw per wall).
TissueState inject_deformation(const TissueState& state, std::uint64_t rng_seed, MagnitudeRange range,
                               DeformationEvent* event = nullptr);

struct CameraModel {
  int width = 640;
  int height = 480;
  double focal_px = 560.0;
  double marker_radius_mm = 1.0;
  double base_intensity = 0.45;
  double reference_distance_mm = 65.0;
  double falloff_exponent = 1.0;
  double gain = 1.0;             // marker fluorescence gain (e.g. marker tilt)
  double noise_sigma = 0.0;      // additive per-pixel intensity noise
  double min_distance_mm = 30.0;
  double max_distance_mm = 100.0;
};

struct NirFrame {
  int width = 0;
  int height = 0;
  double timestamp_s = 0.0;
  double distance_mm = 0.0;
  std::vector<float> pixels;  // row-major, [0,1]

  float at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
};

// Projects p through a pinhole camera looking along pose.direction().
// Returns false when p is behind the camera or outside the frame.
bool project(const Point3& p, const Pose& camera, const CameraModel& model, PixelCoord* uv, double* depth);

// Camera basis: right and down vectors for a viewing direction.
void camera_basis(const Point3& forward, Point3* right, Point3* down);

// Renders every marker of `markers` as a Gaussian blob. The camera-to-marker
// centroid distance along the axis must lie within the model's range.
// Throws MarkerOutOfView or InvalidArgument.
NirFrame render_markers(const MarkerSet& markers, double timestamp_s, const Pose& camera, const CameraModel& model,
                        std::mt19937_64* noise_rng = nullptr);
NirFrame render_nir(const TissueState& state, const Pose& camera, const CameraModel& model,
                    std::mt19937_64* noise_rng = nullptr);

struct BlobCentroid {
  PixelCoord uv;
  double mass = 0.0;
  int pixel_count = 0;
};
// 8-connected components above threshold, intensity-weighted centroids,
// sorted by descending mass.
std::vector<BlobCentroid> extract_blobs(const NirFrame& frame, double threshold);

// Surface samples plus isotropic Gaussian noise. Throws TissueMoving unless the
// ground-truth breath state is Stationary.
PointCloud capture_cloud(const TissueState& state, double noise_sigma_mm, std::mt19937_64& rng,
                         std::uint64_t frame_id = 0);

}  // namespace lapsim
