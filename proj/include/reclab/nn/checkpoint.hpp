#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reclab/nn/params.hpp"

namespace reclab::nn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// Checkpoint archive: 8-byte magic, u64 manifest length, JSON manifest
// (names, shapes, dtype, step counter), then raw little-endian float32
// values per tensor concatenated in manifest order.
inline constexpr char kCheckpointMagic[8] = {'R', 'L', 'C', 'K', 'P', 'T', '0', '1'};

template <typename Scalar>
void save_checkpoint(const ParamStore<Scalar>& store, const std::string& path) {
  nlohmann::json manifest;
  manifest["step"] = store.step();
  manifest["dtype"] = "f32";
  auto& tensors = manifest["tensors"] = nlohmann::json::array();
  for (const auto& e : store.entries())
    tensors.push_back({{"name", e.name}, {"rows", e.value.rows()}, {"cols", e.value.cols()}});
  std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  require_data(out.good(), "save_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  std::uint64_t mlen = mtext.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  std::vector<float> buf;
  for (const auto& e : store.entries()) {
    buf.resize(static_cast<std::size_t>(e.value.size()));
    for (Index r = 0; r < e.value.rows(); ++r)
      for (Index c = 0; c < e.value.cols(); ++c)
        buf[static_cast<std::size_t>(r * e.value.cols() + c)] =
            static_cast<float>(e.value(r, c));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  require_data(out.good(), "save_checkpoint: write failed for " + path);
}

template <typename Scalar>
ParamStore<Scalar> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require_data(in.good(), "load_checkpoint: cannot open " + path);
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  require_data(in.good() && std::equal(magic, magic + sizeof(magic), kCheckpointMagic),
               "load_checkpoint: bad magic in " + path);
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mlen));
  require_data(in.good(), "load_checkpoint: truncated manifest in " + path);
  nlohmann::json manifest = nlohmann::json::parse(mtext);
  require_data(manifest.at("dtype") == "f32", "load_checkpoint: unsupported dtype");

  ParamStore<Scalar> store;
  store.set_step(manifest.at("step").template get<long>());
  std::vector<float> buf;
  for (const auto& t : manifest.at("tensors")) {
    Index rows = t.at("rows").template get<Index>();
    Index cols = t.at("cols").template get<Index>();
    buf.resize(static_cast<std::size_t>(rows * cols));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    require_data(in.good(), "load_checkpoint: truncated tensor data in " + path);
    Mat<Scalar> m(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c)
        m(r, c) = static_cast<Scalar>(buf[static_cast<std::size_t>(r * cols + c)]);
    store.add(t.at("name").template get<std::string>(), std::move(m));
  }
  return store;
}

}  // namespace reclab::nn
