// SPDX-License-Identifier: Apache-2.0

#include "ddit/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "ddit/errors.hpp"

namespace ddit {

namespace {

template <class T>
T byteswap_if_big(T value) {
    if constexpr (std::endian::native == std::endian::little) {
        return value;
    } else {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &value, sizeof(T));
        std::reverse(b, b + sizeof(T));
        std::memcpy(&value, b, sizeof(T));
        return value;
    }
}

} // namespace

template <class T>
void write_le(std::ostream& os, T value) {
    value = byteswap_if_big(value);
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
bool read_le(std::istream& is, T& value) {
    if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) return false;
    value = byteswap_if_big(value);
    return true;
}

template void write_le<uint32_t>(std::ostream&, uint32_t);
template void write_le<uint64_t>(std::ostream&, uint64_t);
template void write_le<int32_t>(std::ostream&, int32_t);
template void write_le<int64_t>(std::ostream&, int64_t);
template void write_le<float>(std::ostream&, float);
template void write_le<double>(std::ostream&, double);
template bool read_le<uint32_t>(std::istream&, uint32_t&);
template bool read_le<uint64_t>(std::istream&, uint64_t&);
template bool read_le<int32_t>(std::istream&, int32_t&);
template bool read_le<int64_t>(std::istream&, int64_t&);
template bool read_le<float>(std::istream&, float&);
template bool read_le<double>(std::istream&, double&);

bool TensorBundle::contains(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
}

const Tensor& TensorBundle::get(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t.tensor;
    throw FormatError("tensor '" + name + "' not found in bundle");
}

void save_tensors(const std::filesystem::path& manifest, const std::vector<NamedTensor>& tensors,
                  const nlohmann::json& meta) {
    std::filesystem::path data_path = manifest;
    data_path += ".bin";
    std::ofstream data(data_path, std::ios::binary);
    if (!data) throw MissingFileError("cannot write " + data_path.string());

    nlohmann::json entries = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        entries.push_back({{"name", name}, {"dtype", dtype_name(t.dtype())}, {"shape", t.shape()}, {"offset", offset}});
        visit_dtype(t.dtype(), [&](auto tag) {
            using T = decltype(tag);
            for (T v : t.data<T>()) write_le(data, v);
            offset += sizeof(T) * static_cast<uint64_t>(t.numel());
        });
    }
    data.close();
    if (!data) throw FormatError("failed writing " + data_path.string());

    nlohmann::json doc = {{"format", "ddit-tensors"},
                          {"version", 1},
                          {"data", data_path.filename().string()},
                          {"bytes", offset},
                          {"tensors", entries},
                          {"meta", meta}};
    std::ofstream out(manifest);
    if (!out) throw MissingFileError("cannot write " + manifest.string());
    out << doc.dump(1) << '\n';
}

TensorBundle load_tensors(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw MissingFileError("cannot open " + manifest.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest.string() + ": " + e.what());
    }
    if (doc.value("format", "") != "ddit-tensors") throw FormatError(manifest.string() + ": not a tensor manifest");

    const std::filesystem::path data_path = manifest.parent_path() / doc.at("data").get<std::string>();
    std::ifstream data(data_path, std::ios::binary);
    if (!data) throw MissingFileError("cannot open " + data_path.string());
    data.seekg(0, std::ios::end);
    const auto size = static_cast<uint64_t>(data.tellg());
    if (size != doc.at("bytes").get<uint64_t>())
        throw FormatError(data_path.string() + ": expected " + std::to_string(doc.at("bytes").get<uint64_t>()) +
                          " bytes, found " + std::to_string(size));

    TensorBundle bundle;
    bundle.meta = doc.value("meta", nlohmann::json::object());
    for (const auto& e : doc.at("tensors")) {
        const std::string name = e.at("name");
        const std::string dt = e.at("dtype");
        const Shape shape = e.at("shape").get<Shape>();
        const uint64_t offset = e.at("offset");
        DType dtype;
        if (dt == "f32")
            dtype = DType::f32;
        else if (dt == "f64")
            dtype = DType::f64;
        else
            throw FormatError("tensor '" + name + "': unknown dtype " + dt);
        Tensor t = Tensor::zeros(shape, dtype);
        data.clear();
        data.seekg(static_cast<std::streamoff>(offset));
        visit_dtype(dtype, [&](auto tag) {
            using T = decltype(tag);
            for (T& v : t.mutable_data<T>())
                if (!read_le(data, v)) throw FormatError("tensor '" + name + "': truncated data at offset " +
                                                         std::to_string(offset));
        });
        bundle.tensors.push_back({name, t});
    }
    return bundle;
}

} // namespace ddit
