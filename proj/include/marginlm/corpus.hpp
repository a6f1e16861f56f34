#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "marginlm/error.hpp"

namespace marginlm {

using WordId = std::uint32_t;

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBoundaryToken = "<sb>";

// Word <-> id map ordered by descending unigram count (ties broken
// lexicographically), so an id doubles as the frequency rank of the word.
// Immutable once constructed.
class Vocabulary {
 public:
  Vocabulary() = default;

  Vocabulary(std::vector<std::string> words, std::vector<std::uint64_t> counts)
      : words_(std::move(words)), counts_(std::move(counts)) {
    if (words_.size() != counts_.size()) {
      throw DataError("vocabulary: " + std::to_string(words_.size()) + " words but " +
                      std::to_string(counts_.size()) + " counts");
    }
    index_.reserve(words_.size());
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (i > 0 && counts_[i] > counts_[i - 1]) {
        throw DataError("vocabulary: counts not sorted non-increasing at id " + std::to_string(i));
      }
      if (!index_.emplace(words_[i], static_cast<WordId>(i)).second) {
        throw DataError("vocabulary: duplicate word '" + words_[i] + "'");
      }
    }
    auto unk = find(kUnkToken);
    auto sb = find(kBoundaryToken);
    if (!unk || !sb) throw DataError("vocabulary: missing special tokens <unk>/<sb>");
    unk_id_ = *unk;
    boundary_id_ = *sb;
  }

  std::size_t size() const { return words_.size(); }
  bool empty() const { return words_.empty(); }

  const std::string& word(WordId id) const { return words_.at(id); }
  std::uint64_t count(WordId id) const { return counts_.at(id); }
  std::span<const std::string> words() const { return words_; }
  std::span<const std::uint64_t> counts() const { return counts_; }

  WordId unk_id() const { return unk_id_; }
  WordId boundary_id() const { return boundary_id_; }

  std::uint64_t max_count() const { return counts_.empty() ? 0 : counts_.front(); }

  std::optional<WordId> find(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  WordId id_or_unk(std::string_view word) const { return find(word).value_or(unk_id_); }

  // FNV-1a over words and counts; identifies the vocabulary inside checkpoints.
  std::uint64_t hash() const {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&h](unsigned char c) {
      h ^= c;
      h *= 1099511628211ull;
    };
    for (std::size_t i = 0; i < words_.size(); ++i) {
      for (char c : words_[i]) mix(static_cast<unsigned char>(c));
      mix('\t');
      for (char c : std::to_string(counts_[i])) mix(static_cast<unsigned char>(c));
      mix('\n');
    }
    return h;
  }

  // TSV: word<TAB>count, one per line, line number = id.
  void save_tsv(std::ostream& out) const {
    for (std::size_t i = 0; i < words_.size(); ++i) out << words_[i] << '\t' << counts_[i] << '\n';
  }

  static Vocabulary load_tsv(std::istream& in) {
    std::vector<std::string> words;
    std::vector<std::uint64_t> counts;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0) {
        throw DataError("vocabulary TSV line " + std::to_string(line_no) + ": expected word<TAB>count");
      }
      std::uint64_t c = 0;
      try {
        std::size_t used = 0;
        c = std::stoull(line.substr(tab + 1), &used);
        if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw DataError("vocabulary TSV line " + std::to_string(line_no) + ": bad count");
      }
      words.push_back(line.substr(0, tab));
      counts.push_back(c);
    }
    return Vocabulary(std::move(words), std::move(counts));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.words_ == b.words_ && a.counts_ == b.counts_;
  }

 private:
  std::vector<std::string> words_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, WordId> index_;
  WordId unk_id_ = 0;
  WordId boundary_id_ = 0;
};

struct VocabOptions {
  std::uint64_t min_count = 1;
  std::size_t max_size = 10000;  // regular words, specials excluded
  bool lowercase = false;
};

namespace detail {

// Returns the byte offset of the first invalid UTF-8 sequence, if any.
inline std::optional<std::size_t> find_invalid_utf8(std::string_view text) {
  const auto* s = reinterpret_cast<const unsigned char*>(text.data());
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    const unsigned char c = s[i];
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return i;
    }
    if (i + len > n) return i;
    for (std::size_t k = 1; k < len; ++k) {
      if ((s[i + k] & 0xC0) != 0x80) return i;
      cp = (cp << 6) | (s[i + k] & 0x3F);
    }
    // overlong forms, surrogates, out of range
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
        (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
      return i;
    }
    i += len;
  }
  return std::nullopt;
}

inline void require_utf8(std::string_view text) {
  if (auto bad = find_invalid_utf8(text)) {
    throw DataError("corpus is not valid UTF-8 at byte offset " + std::to_string(*bad));
  }
}

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f'; }

// Calls on_token(token) for every whitespace token and on_line_end() after
// each line. A final newline does not open an extra empty line.
template <typename OnToken, typename OnLineEnd>
void scan_lines(std::string_view text, OnToken&& on_token, OnLineEnd&& on_line_end) {
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && is_space(line[i])) ++i;
      std::size_t j = i;
      while (j < line.size() && !is_space(line[j])) ++j;
      if (j > i) on_token(line.substr(i, j - i));
      i = j;
    }
    on_line_end();
    pos = eol + 1;
  }
}

}  // namespace detail

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Vocabulary build_vocab(std::string_view text, const VocabOptions& opts = {}) {
  detail::require_utf8(text);
  if (opts.min_count < 1) throw UsageError("min_count must be at least 1");

  std::unordered_map<std::string, std::uint64_t> counts;
  std::uint64_t lines = 0;
  std::uint64_t tokens = 0;
  detail::scan_lines(
      text,
      [&](std::string_view tok) {
        ++tokens;
        ++counts[opts.lowercase ? detail::ascii_lower(tok) : std::string(tok)];
      },
      [&] { ++lines; });
  if (tokens == 0) throw DataError("empty corpus: no tokens found");

  // literal special tokens in the text are treated as out-of-vocabulary
  std::uint64_t unk = 0;
  for (std::string_view special : {kUnkToken, kBoundaryToken}) {
    auto it = counts.find(std::string(special));
    if (it != counts.end()) {
      unk += it->second;
      counts.erase(it);
    }
  }

  std::vector<std::pair<std::string, std::uint64_t>> entries;
  entries.reserve(counts.size());
  for (auto& [w, c] : counts) {
    if (c >= opts.min_count) {
      entries.emplace_back(w, c);
    } else {
      unk += c;
    }
  }
  auto by_rank = [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  std::sort(entries.begin(), entries.end(), by_rank);
  if (entries.size() > opts.max_size) {
    for (std::size_t i = opts.max_size; i < entries.size(); ++i) unk += entries[i].second;
    entries.resize(opts.max_size);
  }
  entries.emplace_back(std::string(kUnkToken), unk);
  entries.emplace_back(std::string(kBoundaryToken), lines);
  std::sort(entries.begin(), entries.end(), by_rank);

  std::vector<std::string> words;
  std::vector<std::uint64_t> cs;
  words.reserve(entries.size());
  cs.reserve(entries.size());
  for (auto& [w, c] : entries) {
    words.push_back(std::move(w));
    cs.push_back(c);
  }
  return Vocabulary(std::move(words), std::move(cs));
}

// Maps every token to its id (OOV -> <unk>) and terminates each line with <sb>.
inline std::vector<WordId> encode(const Vocabulary& vocab, std::string_view text, bool lowercase = false) {
  detail::require_utf8(text);
  std::vector<WordId> ids;
  detail::scan_lines(
      text,
      [&](std::string_view tok) {
        ids.push_back(lowercase ? vocab.id_or_unk(detail::ascii_lower(tok)) : vocab.id_or_unk(tok));
      },
      [&] { ids.push_back(vocab.boundary_id()); });
  return ids;
}

// Inverse of encode for in-vocabulary text: <sb> becomes a newline.
inline std::string decode(const Vocabulary& vocab, std::span<const WordId> ids) {
  std::string out;
  bool line_start = true;
  for (WordId id : ids) {
    if (id >= vocab.size()) throw UsageError("decode: id " + std::to_string(id) + " out of range");
    if (id == vocab.boundary_id()) {
      out += '\n';
      line_start = true;
      continue;
    }
    if (!line_start) out += ' ';
    out += vocab.word(id);
    line_start = false;
  }
  return out;
}

// One BPTT segment for all streams. inputs/targets are row-major
// [num_streams x length]; targets are inputs shifted one position ahead.
struct Batch {
  std::size_t num_streams = 0;
  std::size_t length = 0;
  std::vector<WordId> inputs;
  std::vector<WordId> targets;
  bool carry_state = false;

  WordId input(std::size_t stream, std::size_t t) const { return inputs[stream * length + t]; }
  WordId target(std::size_t stream, std::size_t t) const { return targets[stream * length + t]; }
};

// Splits ids into num_streams contiguous streams and cuts each into
// bptt_len segments. Tokens that do not fill a complete segment are
// dropped unless keep_partial is set, in which case a final shorter batch
// is emitted.
inline std::vector<Batch> make_batches(std::span<const WordId> ids, std::size_t num_streams, std::size_t bptt_len,
                                       bool keep_partial = false) {
  if (num_streams == 0 || bptt_len == 0) throw UsageError("batches: num_streams and bptt_len must be positive");
  if (ids.empty()) throw UsageError("batches: empty id sequence");
  if (ids.size() < num_streams * (bptt_len + 1)) {
    throw UsageError("batches: " + std::to_string(ids.size()) + " ids cannot fill " + std::to_string(num_streams) +
                     " streams of bptt " + std::to_string(bptt_len) + " (need at least " +
                     std::to_string(num_streams * (bptt_len + 1)) + ")");
  }
  const std::size_t stream_len = ids.size() / num_streams;
  const std::size_t predictable = stream_len - 1;
  std::size_t full = predictable / bptt_len;
  std::size_t rest = predictable % bptt_len;

  std::vector<Batch> out;
  auto emit = [&](std::size_t start, std::size_t len) {
    Batch b;
    b.num_streams = num_streams;
    b.length = len;
    b.carry_state = !out.empty();
    b.inputs.resize(num_streams * len);
    b.targets.resize(num_streams * len);
    for (std::size_t s = 0; s < num_streams; ++s) {
      const std::size_t base = s * stream_len + start;
      for (std::size_t t = 0; t < len; ++t) {
        b.inputs[s * len + t] = ids[base + t];
        b.targets[s * len + t] = ids[base + t + 1];
      }
    }
    out.push_back(std::move(b));
  };
  for (std::size_t k = 0; k < full; ++k) emit(k * bptt_len, bptt_len);
  if (keep_partial && rest > 0) emit(full * bptt_len, rest);
  return out;
}

}  // namespace marginlm
