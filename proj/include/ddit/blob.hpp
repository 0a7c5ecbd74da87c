// SPDX-License-Identifier: Apache-2.0
//
// Tensor blobs: a JSON manifest listing {name, dtype, shape, offset} per
// tensor, next to a raw little-endian data file.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddit/tensor.hpp"

namespace ddit {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct TensorBundle {
    std::vector<NamedTensor> tensors;
    nlohmann::json meta;

    bool contains(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
};

// Writes `<path>` (manifest) and `<path>.bin` (data).
void save_tensors(const std::filesystem::path& manifest, const std::vector<NamedTensor>& tensors,
                  const nlohmann::json& meta = nlohmann::json::object());
TensorBundle load_tensors(const std::filesystem::path& manifest);

// Little-endian helpers shared with the shard format.
template <class T>
void write_le(std::ostream& os, T value);
template <class T>
bool read_le(std::istream& is, T& value);

} // namespace ddit
