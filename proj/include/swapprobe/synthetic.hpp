#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "swapprobe/bench.hpp"
#include "swapprobe/image.hpp"

namespace swapprobe::synthetic {

/// Draws a structured test figure whose layout depends on `scene_seed` and
/// whose answer-critical detail depends on `label`; the label itself is
/// pixel-encoded in row 0 so a mock model can "read" the image.
Image make_label_image(const std::string& label, std::uint64_t scene_seed, int width = 96, int height = 72);

/// Label stored by make_label_image, if the magic header is present.
std::optional<std::string> read_label(const Image& image);

/// A figure from an unrelated domain (no label, different statistics).
Image make_unrelated_image(std::uint64_t seed, int width = 96, int height = 72);

struct ManifestOptions {
    int instances = 40;
    int width = 96;
    int height = 72;
    std::uint64_t seed = 7;
};

/// Writes images/ and manifest.jsonl under dir, cycling through the four
/// benchmark sources; answers are distinct integers per pair.
Manifest write_manifest(const std::filesystem::path& dir, const ManifestOptions& opts = {});

/// Writes `count` unrelated images into dir; returns their paths.
std::vector<std::string> write_unrelated_pool(const std::filesystem::path& dir, int count,
                                              std::uint64_t seed = 99);

}  // namespace swapprobe::synthetic
