#pragma once

// File formats: float rasters, camera lists, the checkpoint container, flat key = value
// configs, synthetic corpora and content hashes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gcut3r/array.hpp"
#include "gcut3r/geometry.hpp"
#include "gcut3r/synthdata.hpp"

namespace gcut3r::io {

namespace fs = std::filesystem;

// ---- rasters ----
// 16-byte header: u32 H, u32 W, f32 scale, 4 pad bytes; then little-endian f32 values,
// channel-major. The channel count follows from the file length.

struct Raster {
    Array data;  // c x H x W
    double scale = 1.0;
};

void write_raster(const fs::path& path, const Array& data, double scale = 1.0);
Raster read_raster(const fs::path& path);

/// Depth rasters are single-channel; invalid pixels are stored as 0.
void write_depth(const fs::path& path, const DepthRaster& depth);
DepthRaster read_depth(const fs::path& path);

// ---- cameras ----

struct Camera {
    Intrinsics k;
    Pose pose;
};

/// One line per frame: "fx fy cx cy qw qx qy qz tx ty tz". Lines starting with '#' are skipped.
void write_cameras(const fs::path& path, const std::vector<Camera>& cameras);
std::vector<Camera> read_cameras(const fs::path& path);

// ---- checkpoint container ----
// magic, then per record: u64 name length, name, u64 rank, u64 extents, f64 values;
// then a u32 CRC-32 of every preceding byte.

inline constexpr char kMagic[] = "GCUT3R01";

struct Record {
    std::string name;
    Array value;
};

std::vector<std::uint8_t> encode_container(const std::vector<Record>& records);
std::vector<Record> decode_container(const std::vector<std::uint8_t>& bytes);
void write_container(const fs::path& path, const std::vector<Record>& records);
/// Throws corrupt-checkpoint on a bad magic, truncation or CRC mismatch.
std::vector<Record> read_container(const fs::path& path);

std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const fs::path& path, const std::string& text);

// ---- key = value config ----

struct ConfigEntry {
    std::string value;
    std::size_t line = 0;
};

/// '#' starts a comment; blank lines are ignored; duplicate keys are errors.
std::map<std::string, ConfigEntry> parse_config(const std::string& text, const std::string& origin = "<config>");
std::map<std::string, ConfigEntry> read_config(const fs::path& path);

// ---- corpus ----
// DIR/manifest: "# gcut3r corpus image_size=<n>" then "seed noise-profile split" lines.
// DIR/<id>/: image_<k>.bin, depth_<k>.bin, guidance_depth_<k>.bin, pointmap_<k>.bin,
// cameras.txt (ground truth), guidance_cameras.txt.

struct CorpusEntry {
    std::uint64_t seed = 0;
    std::string profile;
    std::string split;  // train | holdout

    std::string id() const;
};

struct Corpus {
    fs::path root;
    std::size_t image_size = 32;
    std::vector<CorpusEntry> entries;

    std::vector<CorpusEntry> split(const std::string& name) const;
    /// Regenerates the sample from its manifest entry.
    SceneSample sample(const CorpusEntry& entry) const;
};

/// Sample i uses seed derive_seed(seed, "sample", i); the last round(count * split_frac)
/// samples form the holdout split.
Corpus generate_corpus(const fs::path& root, std::size_t count, std::uint64_t seed, const std::string& profile,
                       double split_frac, std::size_t image_size = 32);
Corpus load_corpus(const fs::path& root);
void write_sample(const fs::path& dir, const SceneSample& sample);

// ---- hashing ----

/// Hex SHA-1 of "blob <size>\0" + content, as git computes object ids.
std::string git_blob_hash(const std::vector<std::uint8_t>& content);

}  // namespace gcut3r::io
