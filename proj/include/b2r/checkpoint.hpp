#pragma once

// Policy checkpointing: a binary tensor file plus a human-readable JSON
// sidecar (`<path>.json`) carrying the model config, normalization stats, and
// io dims. The binary layout is:
//
//   "b2r-ckpt-1\n"
//   u64 tensor_count
//   repeated: u32 name_len, name bytes, u32 rank, u64 dims..., f64 data...
//
// All integers and doubles are little-endian host order (this project targets
// a single x86-64 platform).

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "b2r/model.hpp"
#include "b2r/util.hpp"

namespace b2r {

inline constexpr const char* kCheckpointFormatVersion = "b2r-ckpt-1";

inline std::string checkpoint_sidecar_path(const std::string& path) { return path + ".json"; }

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(static_cast<bool>(is), "checkpoint: truncated while reading ", what);
    return v;
}

inline void write_tensor(std::ostream& os, const nn::Tensor& t) {
    const std::string& name = t.name();
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) {
        write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    }
    os.write(reinterpret_cast<const char*>(t.value().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
}

struct RawTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> value;
};

inline RawTensor read_tensor(std::istream& is, std::size_t index) {
    RawTensor t;
    const auto name_len = read_pod<std::uint32_t>(is, str("tensor ", index, " name length"));
    t.name.resize(name_len);
    is.read(t.name.data(), name_len);
    require(static_cast<bool>(is), "checkpoint: truncated while reading tensor ", index,
            " name");
    const auto rank = read_pod<std::uint32_t>(is, str("tensor '", t.name, "' rank"));
    require(rank >= 1 && rank <= 4, "checkpoint: tensor '", t.name, "' has implausible rank ",
            rank);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
        const auto dim = read_pod<std::uint64_t>(is, str("tensor '", t.name, "' dim ", r));
        require(dim > 0 && dim < (1ull << 32), "checkpoint: tensor '", t.name,
                "' has implausible dim ", dim);
        t.shape.push_back(static_cast<std::size_t>(dim));
        n *= static_cast<std::size_t>(dim);
    }
    t.value.resize(n);
    is.read(reinterpret_cast<char*>(t.value.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    require(static_cast<bool>(is), "checkpoint: truncated while reading tensor '", t.name,
            "' data");
    return t;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const PolicyParams& params,
                            const std::string& env_id = "") {
    const std::vector<nn::Tensor> tensors = params.all();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "checkpoint: cannot open '", path, "' for writing");
    os << kCheckpointFormatVersion << '\n';
    detail::write_pod<std::uint64_t>(os, tensors.size());
    for (const nn::Tensor& t : tensors) {
        detail::write_tensor(os, t);
    }
    os.flush();
    require(static_cast<bool>(os), "checkpoint: write to '", path, "' failed");

    nlohmann::json side = {{"format_version", kCheckpointFormatVersion},
                           {"model", params.config.to_json()},
                           {"norm", params.norm.to_json()},
                           {"state_dim", params.state_dim},
                           {"action_dim", params.action_dim},
                           {"parameter_count", params.parameter_count()},
                           {"env_id", env_id}};
    std::ofstream js(checkpoint_sidecar_path(path), std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(js), "checkpoint: cannot open sidecar '",
            checkpoint_sidecar_path(path), "' for writing");
    js << side.dump(2) << '\n';
    js.flush();
    require(static_cast<bool>(js), "checkpoint: sidecar write failed");
}

struct LoadedCheckpoint {
    PolicyParams params;
    std::string env_id;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream js(checkpoint_sidecar_path(path), std::ios::binary);
    require(static_cast<bool>(js), "checkpoint: missing sidecar '",
            checkpoint_sidecar_path(path), "'");
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        fail("checkpoint: malformed sidecar JSON: ", e.what());
    }
    require(side.value("format_version", "") == kCheckpointFormatVersion,
            "checkpoint: sidecar format version '", side.value("format_version", ""),
            "' does not match '", kCheckpointFormatVersion, "'");

    const ModelConfig cfg = ModelConfig::from_json(side.at("model"));
    const auto state_dim = side.at("state_dim").get<std::size_t>();
    const auto action_dim = side.at("action_dim").get<std::size_t>();

    LoadedCheckpoint out{PolicyParams::init(cfg, state_dim, action_dim, 0),
                         side.value("env_id", "")};
    out.params.norm = NormStats::from_json(side.at("norm"));

    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "checkpoint: cannot open '", path, "'");
    std::string header;
    std::getline(is, header);
    require(header == kCheckpointFormatVersion, "checkpoint: header '", header,
            "' does not match '", kCheckpointFormatVersion, "'");
    const auto count = detail::read_pod<std::uint64_t>(is, "tensor count");

    std::vector<nn::Tensor> slots = out.params.all();
    require(count == slots.size(), "checkpoint: holds ", count, " tensors, model expects ",
            slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
        detail::RawTensor raw = detail::read_tensor(is, i);
        require(raw.name == slots[i].name(), "checkpoint: tensor ", i, " is '", raw.name,
                "', expected '", slots[i].name(), "'");
        require(raw.shape == slots[i].shape(), "checkpoint: tensor '", raw.name, "' has shape ",
                nn::shape_str(raw.shape), ", expected ", nn::shape_str(slots[i].shape()));
        slots[i].value() = std::move(raw.value);
    }
    char extra;
    require(!is.read(&extra, 1), "checkpoint: trailing bytes after last tensor");
    return out;
}

} // namespace b2r
