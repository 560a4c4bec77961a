// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "gmnet/tensor.hpp"

namespace gmnet::cli {

/// Exit codes: 0 success, 1 runtime failure, 2 usage error or missing checkpoint.
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command; `args` excludes the program name. Failures print a single
/// `error: ...` line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Min-max scaled to [0,255]; a constant map becomes 128 everywhere.
std::vector<std::uint8_t> normalize_map(const float* values, std::size_t count);

/// Binary (P5) PGM.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels);

/// Fraction of activations whose magnitude is at most 1% of the largest
/// magnitude in the tensor; 1 for an all-zero tensor.
double sparsity(const Tensor<float>& activations);

}  // namespace gmnet::cli
