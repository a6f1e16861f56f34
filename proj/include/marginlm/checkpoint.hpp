#pragma once

// Binary checkpoint layout:
//   8 bytes   magic "MLMCKPT\0"
//   uint32    format version (little endian)
//   uint64    header length in bytes (little endian)
//   header    UTF-8 JSON: dims, vocab hash, vocabulary, head config,
//             array list [{name, rows, cols}] in LmModel::named_parameters order
//   payload   each array row-major as little-endian IEEE-754 doubles

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marginlm/corpus.hpp"
#include "marginlm/error.hpp"
#include "marginlm/margin_head.hpp"
#include "marginlm/model.hpp"

namespace marginlm {

inline constexpr char kCheckpointMagic[8] = {'M', 'L', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw DataError(std::string("checkpoint truncated in ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

template <typename T>
struct Checkpoint {
  LmModel<T> model;
  Vocabulary vocab;
  HeadConfig head;
  nlohmann::json extra;  // free-form metadata, e.g. the training config
};

template <typename T>
void save_checkpoint(std::ostream& os, const LmModel<T>& model, const Vocabulary& vocab, const HeadConfig& head,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  if (model.dims.vocab != vocab.size()) {
    throw UsageError("save_checkpoint: model vocabulary " + std::to_string(model.dims.vocab) + " != " +
                     std::to_string(vocab.size()));
  }
  LmModel<T> view = model;
  nlohmann::json h;
  h["format"] = "marginlm-checkpoint";
  h["version"] = kCheckpointVersion;
  h["dims"] = {{"vocab", model.dims.vocab},
               {"d_emb", model.dims.d_emb},
               {"d_h", model.dims.d_h},
               {"layers", model.dims.layers}};
  h["vocab_hash"] = detail::hex64(vocab.hash());
  h["vocab_words"] = std::vector<std::string>(vocab.words().begin(), vocab.words().end());
  h["vocab_counts"] = std::vector<std::uint64_t>(vocab.counts().begin(), vocab.counts().end());
  h["head_config"] = head;
  h["extra"] = extra;
  auto params = view.named_parameters();
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [name, v] : params) arrays.push_back({{"name", name}, {"rows", v->rows()}, {"cols", v->cols()}});
  h["arrays"] = arrays;
  const std::string header = h.dump();

  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, v] : params) {
    const auto& m = v->value();
    for (Index i = 0; i < m.size(); ++i) detail::write_le<double>(os, static_cast<double>(m.data()[i]));
  }
  if (!os) throw DataError("save_checkpoint: write failed");
}

template <typename T>
void save_checkpoint(const std::string& path, const LmModel<T>& model, const Vocabulary& vocab, const HeadConfig& head,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  save_checkpoint(os, model, vocab, head, extra);
}

// expected_vocab, when given, must hash equal to the stored vocabulary.
template <typename T>
Checkpoint<T> load_checkpoint(std::istream& is, const Vocabulary* expected_vocab = nullptr) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw DataError("not a marginlm checkpoint (bad magic bytes)");
  }
  const auto version = detail::read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = detail::read_le<std::uint64_t>(is, "header length");
  if (header_len > (1ull << 32)) throw DataError("checkpoint header length " + std::to_string(header_len) + " is implausible");
  std::string header(header_len, '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(header_len))) throw DataError("checkpoint truncated in header");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint<T> ck;
  try {
    ck.vocab = Vocabulary(h.at("vocab_words").get<std::vector<std::string>>(),
                          h.at("vocab_counts").get<std::vector<std::uint64_t>>());
    if (detail::hex64(ck.vocab.hash()) != h.at("vocab_hash").get<std::string>()) {
      throw DataError("checkpoint vocabulary does not match its recorded hash");
    }
    ck.head = h.at("head_config").get<HeadConfig>();
    ck.extra = h.value("extra", nlohmann::json::object());
    const auto& d = h.at("dims");
    ModelDims dims{d.at("vocab").get<std::size_t>(), d.at("d_emb").get<std::size_t>(), d.at("d_h").get<std::size_t>(),
                   d.at("layers").get<std::size_t>()};
    if (dims.vocab != ck.vocab.size()) throw DataError("checkpoint dims disagree with its vocabulary size");
    ck.model = init_model<T>(dims, 0);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header malformed: ") + e.what());
  }
  if (expected_vocab != nullptr && expected_vocab->hash() != ck.vocab.hash()) {
    throw DataError("checkpoint vocabulary hash " + detail::hex64(ck.vocab.hash()) +
                    " does not match the supplied vocabulary " + detail::hex64(expected_vocab->hash()));
  }

  auto params = ck.model.named_parameters();
  const auto& arrays = h.at("arrays");
  if (arrays.size() != params.size()) throw DataError("checkpoint array count does not match the model layout");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, v] = params[k];
    const auto& a = arrays[k];
    if (a.at("name").get<std::string>() != name || a.at("rows").get<Index>() != v->rows() ||
        a.at("cols").get<Index>() != v->cols()) {
      throw DataError("checkpoint array " + std::to_string(k) + " does not match expected '" + name + "' " +
                      shape_str(v->shape()));
    }
    auto& m = v->mutable_value();
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(detail::read_le<double>(is, name.c_str()));
  }
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path, const Vocabulary* expected_vocab = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path + "'");
  return load_checkpoint<T>(is, expected_vocab);
}

}  // namespace marginlm
