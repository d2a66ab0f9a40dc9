#include "posediff/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace posediff {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'O', 'S', 'E', 'P', 'T', 'C', '\n'};

DType parse_dtype(const std::string& s) {
    if (s == "f32") {
        return DType::f32;
    }
    if (s == "f64") {
        return DType::f64;
    }
    throw LoadError("unknown tensor dtype '" + s + "'");
}

} // namespace

std::size_t dtype_size(DType dtype) noexcept { return dtype == DType::f32 ? 4 : 8; }

std::string to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

std::int64_t TensorEntry::element_count() const {
    std::int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

template <typename Scalar>
void TensorContainer::put(const std::string& name, std::vector<std::int64_t> shape, std::span<const Scalar> values) {
    TensorEntry entry;
    entry.dtype = dtype_of<Scalar>();
    entry.shape = std::move(shape);
    if (entry.element_count() != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("tensor '" + name + "': shape holds " + std::to_string(entry.element_count()) +
                         " values but " + std::to_string(values.size()) + " were given");
    }
    entry.bytes.resize(values.size() * sizeof(Scalar));
    if (!values.empty()) {
        std::memcpy(entry.bytes.data(), values.data(), entry.bytes.size());
    }
    tensors_[name] = std::move(entry);
}

template void TensorContainer::put<float>(const std::string&, std::vector<std::int64_t>, std::span<const float>);
template void TensorContainer::put<double>(const std::string&, std::vector<std::int64_t>, std::span<const double>);

void TensorContainer::put_entry(const std::string& name, TensorEntry entry) { tensors_[name] = std::move(entry); }

const TensorEntry& TensorContainer::entry(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw LookupError("tensor '" + name + "' not found in container");
    }
    return it->second;
}

std::vector<std::string> TensorContainer::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [name, _] : tensors_) {
        out.push_back(name);
    }
    return out;
}

template <typename Scalar>
std::vector<Scalar> TensorContainer::values(const std::string& name) const {
    const auto& e = entry(name);
    const auto n = static_cast<std::size_t>(e.element_count());
    std::vector<Scalar> out(n);
    if (e.dtype == DType::f32) {
        std::vector<float> raw(n);
        std::memcpy(raw.data(), e.bytes.data(), n * sizeof(float));
        std::copy(raw.begin(), raw.end(), out.begin());
    } else {
        std::vector<double> raw(n);
        std::memcpy(raw.data(), e.bytes.data(), n * sizeof(double));
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = static_cast<Scalar>(raw[i]);
        }
    }
    return out;
}

template std::vector<float> TensorContainer::values<float>(const std::string&) const;
template std::vector<double> TensorContainer::values<double>(const std::string&) const;

template <typename Scalar>
Matrix<Scalar> TensorContainer::matrix(const std::string& name) const {
    const auto& e = entry(name);
    const auto vals = values<Scalar>(name);
    const Index rows = e.shape.empty() ? 1 : e.shape.front();
    const Index cols = rows == 0 ? 0 : static_cast<Index>(vals.size()) / rows;
    Matrix<Scalar> m(rows, cols);
    std::copy(vals.begin(), vals.end(), m.data());
    return m;
}

template Matrix<float> TensorContainer::matrix<float>(const std::string&) const;
template Matrix<double> TensorContainer::matrix<double>(const std::string&) const;

std::vector<unsigned char> TensorContainer::serialize() const {
    nlohmann::json manifest;
    manifest["format"] = "posediff-ptc";
    manifest["version"] = format_version;
    manifest["endianness"] = "little";
    manifest["layout"] = "row-major";
    manifest["meta"] = meta_;
    auto list = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, e] : tensors_) {
        list.push_back({{"name", name},
                        {"dtype", to_string(e.dtype)},
                        {"shape", e.shape},
                        {"offset", offset},
                        {"nbytes", e.bytes.size()}});
        offset += e.bytes.size();
    }
    manifest["tensors"] = std::move(list);
    const std::string text = manifest.dump();

    std::vector<unsigned char> out(16 + text.size() + offset);
    std::memcpy(out.data(), kMagic, 8);
    const auto len = static_cast<std::uint64_t>(text.size());
    for (std::size_t i = 0; i < 8; ++i) {
        out[8 + i] = static_cast<unsigned char>((len >> (8 * i)) & 0xffU);
    }
    std::memcpy(out.data() + 16, text.data(), text.size());
    std::size_t at = 16 + text.size();
    for (const auto& [_, e] : tensors_) {
        if (!e.bytes.empty()) {
            std::memcpy(out.data() + at, e.bytes.data(), e.bytes.size());
        }
        at += e.bytes.size();
    }
    return out;
}

TensorContainer TensorContainer::deserialize(std::span<const unsigned char> bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw LoadError("not a .ptc container (bad magic)");
    }
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) {
        len |= static_cast<std::uint64_t>(bytes[8 + static_cast<std::size_t>(i)]) << (8 * i);
    }
    if (len > bytes.size() - 16) {
        throw LoadError("manifest length exceeds file size");
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (manifest.value("format", "") != "posediff-ptc") {
        throw LoadError("manifest format tag missing");
    }
    if (manifest.value("version", -1) != format_version) {
        throw LoadError("unsupported container version " + manifest.value("version", nlohmann::json()).dump());
    }
    if (manifest.value("endianness", "") != "little" || manifest.value("layout", "") != "row-major") {
        throw LoadError("container must be little-endian row-major");
    }
    const auto blob = bytes.subspan(16 + len);
    TensorContainer out;
    out.meta_ = manifest.value("meta", nlohmann::json::object());
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        TensorEntry e;
        e.dtype = parse_dtype(t.at("dtype").get<std::string>());
        e.shape = t.at("shape").get<std::vector<std::int64_t>>();
        for (auto d : e.shape) {
            if (d < 0) {
                throw LoadError("tensor '" + name + "' has a negative dimension");
            }
        }
        const auto offset = t.at("offset").get<std::uint64_t>();
        const auto nbytes = t.at("nbytes").get<std::uint64_t>();
        if (nbytes != static_cast<std::uint64_t>(e.element_count()) * dtype_size(e.dtype)) {
            throw LoadError("tensor '" + name + "': byte count does not match shape and dtype");
        }
        if (offset > blob.size() || nbytes > blob.size() - offset) {
            throw LoadError("tensor '" + name + "': byte range lies outside the data blob");
        }
        e.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                       blob.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
        out.tensors_[name] = std::move(e);
    }
    return out;
}

void atomic_write(const std::filesystem::path& path, std::span<const unsigned char> content) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(reinterpret_cast<const char*>(content.data()), static_cast<std::streamsize>(content.size()));
        if (!out) {
            throw Error("write to '" + tmp.string() + "' failed");
        }
    }
    std::filesystem::rename(tmp, path);
}

void atomic_write(const std::filesystem::path& path, const std::string& content) {
    atomic_write(path, std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(content.data()),
                                                      content.size()));
}

void TensorContainer::write(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    atomic_write(path, bytes);
}

TensorContainer TensorContainer::read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open '" + path.string() + "'");
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

} // namespace posediff
