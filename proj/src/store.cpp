#include "ctflow/store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/core.h>
#include <openssl/evp.h>

namespace ctflow::store {
namespace {

template <typename T>
void swap_bytes(std::vector<T>& values)
{
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1)
    {
        for (T& v : values)
        {
            auto* bytes = reinterpret_cast<unsigned char*>(&v);
            std::reverse(bytes, bytes + sizeof(T));
        }
    }
}

template <typename T>
void write_raw(fs::path const& path, std::vector<T> values)
{
    swap_bytes(values);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(fmt::format("cannot open '{}' for writing", path.string()));
    out.write(reinterpret_cast<char const*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
    if (!out)
        throw Error(fmt::format("write failed for '{}'", path.string()));
}

template <typename T>
std::vector<T> read_raw(fs::path const& path, std::size_t count)
{
    std::error_code ec;
    auto const size = fs::file_size(path, ec);
    if (ec)
        throw FormatError(fmt::format("missing array file '{}'", path.string()));
    if (size != count * sizeof(T))
        throw FormatError(fmt::format("array '{}' holds {} bytes, expected {}",
                                      path.string(), size, count * sizeof(T)));
    std::vector<T> values(count);
    std::ifstream in(path, std::ios::binary);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(size));
    if (!in)
        throw FormatError(fmt::format("short read on '{}'", path.string()));
    swap_bytes(values);
    return values;
}

} // namespace

void write_json(fs::path const& path, json const& doc)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw Error(fmt::format("cannot open '{}' for writing", path.string()));
    out << doc.dump(2) << '\n';
}

json read_json(fs::path const& path)
{
    std::ifstream in(path);
    if (!in)
        throw FormatError(fmt::format("missing metadata '{}'", path.string()));
    try
    {
        return json::parse(in);
    }
    catch (json::exception const& e)
    {
        throw FormatError(fmt::format("malformed metadata '{}': {}", path.string(), e.what()));
    }
}

void write_f32(fs::path const& path, std::vector<float> const& values)
{
    write_raw(path, values);
}

void write_f64(fs::path const& path, std::vector<double> const& values)
{
    write_raw(path, values);
}

void write_u8(fs::path const& path, std::vector<std::uint8_t> const& values)
{
    write_raw(path, values);
}

std::vector<float> read_f32(fs::path const& path, std::size_t count)
{
    return read_raw<float>(path, count);
}

std::vector<double> read_f64(fs::path const& path, std::size_t count)
{
    return read_raw<double>(path, count);
}

std::vector<std::uint8_t> read_u8(fs::path const& path, std::size_t count)
{
    return read_raw<std::uint8_t>(path, count);
}

json const& require(json const& j, char const* key)
{
    if (!j.is_object() || !j.contains(key))
        throw FormatError(fmt::format("missing metadata field '{}'", key));
    return j.at(key);
}

json grid_to_json(GridSpec const& grid)
{
    return {{"nx", grid.nx},
            {"ny", grid.ny},
            {"pixel", grid.pixel},
            {"x_min", grid.x_min},
            {"y_min", grid.y_min}};
}

GridSpec grid_from_json(json const& j)
{
    try
    {
        GridSpec g;
        g.nx = require(j, "nx").get<int>();
        g.ny = require(j, "ny").get<int>();
        g.pixel = require(j, "pixel").get<double>();
        g.x_min = require(j, "x_min").get<double>();
        g.y_min = require(j, "y_min").get<double>();
        if (g.nx <= 0 || g.ny <= 0 || !(g.pixel > 0))
            throw FormatError("grid dimensions must be positive");
        return g;
    }
    catch (json::exception const& e)
    {
        throw FormatError(fmt::format("malformed grid: {}", e.what()));
    }
}

json nondim_to_json(Nondim const& n)
{
    return {{"u_c", n.u_c}, {"H", n.H}, {"x_origin", n.x_origin}, {"y_origin", n.y_origin}};
}

Nondim nondim_from_json(json const& j)
{
    try
    {
        Nondim n;
        n.u_c = require(j, "u_c").get<double>();
        n.H = require(j, "H").get<double>();
        n.x_origin = j.value("x_origin", 0.0);
        n.y_origin = j.value("y_origin", 0.0);
        if (!(n.u_c > 0) || !(n.H > 0))
            throw FormatError("nondimensionalisation constants must be positive");
        return n;
    }
    catch (json::exception const& e)
    {
        throw FormatError(fmt::format("malformed constants: {}", e.what()));
    }
}

std::string sha256_hex(std::string const& text)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr);
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i)
        out += fmt::format("{:02x}", digest[i]);
    return out;
}

} // namespace ctflow::store
