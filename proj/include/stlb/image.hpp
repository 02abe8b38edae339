#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <span>
#include <vector>

#include "stlb/tensor.hpp"

namespace stlb {

/// Single-channel image with values nominally in [0, 1]. Rows are image rows.
using Image = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// (1, 1, h, w) tensor view of an image, and back.
Tensor4d to_tensor(const Image& img);
Image to_image(const Tensor4d& t, Index item = 0, Index channel = 0);

/// Catmull-Rom bicubic resampling (a = -0.5) with align-corners mapping:
/// output pixel j samples source coordinate j * (in - 1) / (out - 1).
/// Beyond the border the signal is continued by cubic extrapolation,
/// p[-1] = 3 p[0] - 3 p[1] + p[2], which keeps polynomials up to degree
/// two exact all the way to the edges. No clamping of values.
Image bicubic_resize_unclamped(const Image& img, Index out_h, Index out_w);

/// bicubic_resize_unclamped followed by clamping to [0, 1]. Identity size
/// returns the input unchanged.
Image bicubic_resize(const Image& img, Index out_h, Index out_w);

/// 8-bit binary PGM (P5). Values are scaled by 255 and rounded on save,
/// divided by 255 on load. Header comments are accepted.
Image load_pgm(const std::filesystem::path& path);
Image decode_pgm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pgm(const Image& img);
void save_pgm(const Image& img, const std::filesystem::path& path);

/// Mean magnitude of the forward-difference gradient.
double mean_gradient_magnitude(const Image& img);

}  // namespace stlb
