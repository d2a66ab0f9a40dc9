#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "posediff/tensor.hpp"

namespace posediff {

enum class DType { f32, f64 };

std::size_t dtype_size(DType dtype) noexcept;
std::string to_string(DType dtype);

template <typename Scalar>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
    return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

struct TensorEntry {
    DType dtype = DType::f64;
    std::vector<std::int64_t> shape;
    std::vector<unsigned char> bytes;

    std::int64_t element_count() const;
};

/// `.ptc` file: 8-byte magic, u64 little-endian manifest length, JSON
/// manifest, then one contiguous blob of little-endian row-major floats.
/// Tensors are kept sorted by name so identical content serializes to
/// identical bytes. Entries the reader does not know are carried through.
class TensorContainer {
public:
    static constexpr int format_version = 1;

    nlohmann::json& meta() noexcept { return meta_; }
    const nlohmann::json& meta() const noexcept { return meta_; }

    template <typename Scalar>
    void put(const std::string& name, std::vector<std::int64_t> shape, std::span<const Scalar> values);

    template <typename Scalar>
    void put_matrix(const std::string& name, const Matrix<Scalar>& m) {
        put<Scalar>(name, {m.rows(), m.cols()}, std::span<const Scalar>(m.data(), static_cast<std::size_t>(m.size())));
    }

    void put_entry(const std::string& name, TensorEntry entry);

    bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
    const TensorEntry& entry(const std::string& name) const;
    std::vector<std::string> names() const;
    std::size_t size() const noexcept { return tensors_.size(); }

    /// Values converted to Scalar.
    template <typename Scalar>
    std::vector<Scalar> values(const std::string& name) const;

    /// Leading dimension as rows, remaining dimensions flattened into columns.
    template <typename Scalar>
    Matrix<Scalar> matrix(const std::string& name) const;

    std::vector<unsigned char> serialize() const;
    static TensorContainer deserialize(std::span<const unsigned char> bytes);

    /// Writes to a temporary sibling then renames over `path`.
    void write(const std::filesystem::path& path) const;
    static TensorContainer read(const std::filesystem::path& path);

private:
    nlohmann::json meta_ = nlohmann::json::object();
    std::map<std::string, TensorEntry> tensors_;
};

/// Writes `content` to `path` through a temporary file and rename.
void atomic_write(const std::filesystem::path& path, std::span<const unsigned char> content);
void atomic_write(const std::filesystem::path& path, const std::string& content);

} // namespace posediff
