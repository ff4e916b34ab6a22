#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctflow/common.hpp"

/// Artifact-store primitives: one directory per artifact holding a JSON
/// metadata document and raw little-endian arrays.
namespace ctflow::store {

using json = nlohmann::json;
namespace fs = std::filesystem;

void write_json(fs::path const& path, json const& doc);
json read_json(fs::path const& path);

void write_f32(fs::path const& path, std::vector<float> const& values);
void write_f64(fs::path const& path, std::vector<double> const& values);
void write_u8(fs::path const& path, std::vector<std::uint8_t> const& values);

/// Reads exactly `count` values; throws FormatError on size mismatch.
std::vector<float> read_f32(fs::path const& path, std::size_t count);
std::vector<double> read_f64(fs::path const& path, std::size_t count);
std::vector<std::uint8_t> read_u8(fs::path const& path, std::size_t count);

json grid_to_json(GridSpec const& grid);
GridSpec grid_from_json(json const& j);
json nondim_to_json(Nondim const& n);
Nondim nondim_from_json(json const& j);

/// Fetches a required key or throws FormatError naming it.
json const& require(json const& j, char const* key);

/// Hex SHA-256 of a string.
std::string sha256_hex(std::string const& text);

} // namespace ctflow::store
