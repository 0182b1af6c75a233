// Pixel-based optical model of the tactile RGB image: indentation height maps
// with pyramid Gaussian smoothing, and a positionally encoded MLP mapping
// (view direction, surface gradient) to a per-pixel color change.
#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dt/math.hpp"

namespace dt {

struct OpticalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// z = f(x,y) in mm over a regular pixel grid; background plane at z = 0,
// positive z = indentation into the gel.
struct HeightMap {
  int width = 0, height = 0;
  real pitch = 0.05;  // mm per pixel
  std::vector<real> z;

  real& at(int x, int y) { return z[(size_t)y * width + x]; }
  real at(int x, int y) const { return z[(size_t)y * width + x]; }
};

// Row-major H x W x 3 image, values in [0, 255] (stored as real for math).
struct Image {
  int width = 0, height = 0;
  std::vector<real> rgb;

  static Image filled(int w, int h, const std::array<real, 3>& color);
  real& at(int x, int y, int c) { return rgb[((size_t)y * width + x) * 3 + c]; }
  real at(int x, int y, int c) const { return rgb[((size_t)y * width + x) * 3 + c]; }
};

// sin/cos ladder: per scalar p, (sin 2^0 pi p, cos 2^0 pi p, ..., cos 2^{L-1} pi p).
std::vector<real> positional_encoding(const std::vector<real>& p, int L);

// Pyramid Gaussian smoothing (5x5, sigma 2, `levels` octaves): the deep contact
// region keeps the raw depth, sharp indentation boundaries relax to the
// smoothed cascade.
HeightMap smooth_heightmap(const HeightMap& raw, int levels = 3);

// Virtual camera above the gel center used to form per-pixel view directions.
struct OpticalCamera {
  real camera_height = 50.0;  // mm above the gel plane
};

// 4 hidden layers x 128 units, ReLU, the encoded input re-enters at layer 3,
// final layer squashed to [-1,1]^3. Input = gamma(theta, phi) ++ gamma(fx, fy).
struct ReflectanceNet {
  static constexpr int kHidden = 128;
  int L = 6;
  // dense layers stored row-major [out x in]; final layer starts at zero so an
  // untrained net renders the background exactly
  std::vector<real> w1, b1, w2, b2, w3, b3, w4, b4, w5, b5;

  int input_dim() const { return 8 * L; }
  static ReflectanceNet init(int L = 6, uint64_t seed = 0);
  std::array<real, 3> forward(const real* x) const;  // x: input_dim() values

  void save(const std::string& path) const;
  static ReflectanceNet load(const std::string& path);
};

struct IndentationExample {
  HeightMap height;
  Image reference;
  Image background;
};

// Per pixel: surface gradient by central differences, view direction from the
// camera, delta = net(encoding) scaled by 255, output = clamp(bg + delta).
Image render(const ReflectanceNet& net, const HeightMap& height, const OpticalCamera& camera,
             const Image& background);

struct TrainOptions {
  int epochs = 500;
  real lr = 1e-5;
  OpticalCamera camera;
};

// Adam over per-image batches; pixel MSE on the color change in [-1,1] units.
// Returns the per-epoch loss curve; aborts early if the loss exceeds 10x the
// initial value.
std::vector<real> train(ReflectanceNet& net, const std::vector<IndentationExample>& dataset,
                        const TrainOptions& options = {});

struct ImageMetrics {
  real l1 = 0, mse = 0, ssim = 0, psnr = 0;  // psnr capped at 100 dB
};
ImageMetrics image_metrics(const Image& pred, const Image& ref);

// --- synthetic data -------------------------------------------------------

struct IndenterSpec {
  enum class Kind { Sphere, Cylinder, Cube };
  Kind kind = Kind::Sphere;
  real radius = 2.0;  // mm (half-edge for Cube)
  real depth = 1.0;   // mm of indentation
  real cx = 0, cy = 0;  // center, mm from image center
};

HeightMap indent_heightmap(int width, int height, real pitch, const IndenterSpec& spec);

// Analytic three-light Phong shading of the height field, relative to the flat
// plane so undeformed pixels match the background exactly.
Image phong_reference(const HeightMap& height, const OpticalCamera& camera, const Image& background);

std::vector<IndentationExample> synthetic_sphere_dataset(int count, int width, int height,
                                                         real pitch, uint64_t seed,
                                                         const OpticalCamera& camera = {});

// --- I/O ------------------------------------------------------------------

void save_png(const Image& image, const std::string& path);
Image load_png(const std::string& path);

void save_heightmap(const HeightMap& map, const std::string& path);
HeightMap load_heightmap(const std::string& path);

}  // namespace dt
