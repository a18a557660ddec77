#pragma once

// On-disk formats. Text formats are UTF-8 with LF or CRLF line endings;
// binary formats are little-endian regardless of host.
//
//   word vectors   "<count> <dim>" header, then "<word> <f1> ... <fdim>" lines
//   features       "PVF1", u32 count, u32 dim, then per record
//                  u16 id length, id bytes, dim x f32
//                  (or TSV "<id>\t<f1>,<f2>,...", detected by missing magic)
//   pairs          "<image_id>\t<text>"
//   labels         "<id>\t<label>"
//   stop words     one token per line
//   checkpoint     "PATR", u32 version, see save_checkpoint()

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <utility>
#include <vector>

#include "patr/diffcore.hpp"
#include "patr/error.hpp"
#include "patr/textenc.hpp"

namespace patr {

// ---------------------------------------------------------------------------
// helpers

namespace io {

inline std::string at_line(const std::string& source, std::size_t line, const std::string& msg) {
  return source + ":" + std::to_string(line) + ": " + msg;
}

inline std::string at_offset(const std::string& source, std::size_t offset, const std::string& msg) {
  return source + ": offset " + std::to_string(offset) + ": " + msg;
}

/// getline that strips a trailing '\r'.
inline bool read_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

inline bool is_blank(std::string_view s) {
  return s.find_first_not_of(" \t") == std::string_view::npos;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Splits on runs of spaces/tabs, dropping empty fields.
inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < s.size() && s[i] != ' ' && s[i] != '\t') ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

/// Parses a finite float occupying the whole token.
inline bool parse_float(std::string_view tok, float& out) {
  if (tok.empty()) return false;
  const char* first = tok.data();
  if (*first == '+') ++first;  // from_chars rejects a leading '+'
  const char* last = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

inline bool parse_u64(std::string_view tok, std::uint64_t& out) {
  if (tok.empty()) return false;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return ec == std::errc() && ptr == tok.data() + tok.size();
}

/// Shortest text that parses back to the same float.
inline void append_float(std::string& out, float v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, ptr);
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }
  void str16(std::string_view s, const char* what) {
    if (s.size() > 0xFFFF) throw DataError(std::string(what) + " longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s);
  }
  void str32(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  const std::string& buffer() const noexcept { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string source) : data_(data), source_(std::move(source)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1, "u8")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2, "u16")); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4, "u32")); }
  std::uint64_t u64() { return le(8, "u64"); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16(const char* what) { return std::string(bytes(u16(), what)); }
  std::string str32(const char* what) { return std::string(bytes(u32(), what)); }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

  [[noreturn]] void fail(const std::string& msg) const {
    throw DataError(at_offset(source_, pos_, msg));
  }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      fail(std::string("truncated: need ") + std::to_string(n) + " bytes for " + what + ", " +
           std::to_string(remaining()) + " left");
  }

 private:
  std::uint64_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string_view data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::ifstream open_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return in;
}

/// Writes via a temporary sibling and renames, so readers never see a
/// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

}  // namespace io

// ---------------------------------------------------------------------------
// word vectors

inline WordVectorTable<float> load_word_vectors(std::istream& in, const std::string& source = "<word vectors>",
                                                std::ostream* warnings = &std::cerr) {
  std::string line;
  std::size_t lineno = 1;
  if (!io::read_line(in, line)) throw DataError(io::at_line(source, 1, "missing header"));
  const auto head = io::split_ws(line);
  std::uint64_t count = 0, dim = 0;
  if (head.size() != 2 || !io::parse_u64(head[0], count) || !io::parse_u64(head[1], dim) || dim == 0)
    throw DataError(io::at_line(source, 1, "malformed header, expected '<count> <dim>'"));

  WordVectorTable<float> table(dim);
  std::vector<float> vec(dim);
  std::uint64_t entries = 0;
  while (io::read_line(in, line)) {
    ++lineno;
    if (io::is_blank(line)) continue;
    if (entries == count)
      throw DataError(io::at_line(source, lineno, "more entries than the header count " + std::to_string(count)));
    const auto fields = io::split_ws(line);
    if (fields.size() != dim + 1)
      throw DataError(io::at_line(source, lineno,
                                  "expected word and " + std::to_string(dim) + " components, found " +
                                      std::to_string(fields.size() == 0 ? 0 : fields.size() - 1)));
    for (std::size_t k = 0; k < dim; ++k)
      if (!io::parse_float(fields[k + 1], vec[k]))
        throw DataError(io::at_line(source, lineno, "bad number '" + std::string(fields[k + 1]) + "'"));
    const std::string word(fields[0]);
    if (!table.add(word, vec) && warnings)
      *warnings << "warning: " << io::at_line(source, lineno, "duplicate word '" + word + "' ignored") << "\n";
    ++entries;
  }
  if (entries != count)
    throw DataError(io::at_line(source, lineno, "header declares " + std::to_string(count) +
                                                    " entries, found " + std::to_string(entries)));
  return table;
}

inline WordVectorTable<float> load_word_vectors(const std::filesystem::path& path,
                                                std::ostream* warnings = &std::cerr) {
  auto in = io::open_text(path);
  return load_word_vectors(in, path.string(), warnings);
}

inline std::string format_word_vectors(const WordVectorTable<float>& table) {
  std::string out = std::to_string(table.size()) + " " + std::to_string(table.dim()) + "\n";
  for (std::size_t r = 0; r < table.size(); ++r) {
    out += table.words()[r];
    for (float v : table.row(r)) {
      out += ' ';
      io::append_float(out, v);
    }
    out += '\n';
  }
  return out;
}

inline void save_word_vectors(const WordVectorTable<float>& table, const std::filesystem::path& path) {
  io::write_file_atomic(path, format_word_vectors(table));
}

// ---------------------------------------------------------------------------
// feature store

/// image_id -> fixed-dimension embedding, in insertion order.
class FeatureStore {
 public:
  FeatureStore() = default;
  explicit FeatureStore(std::size_t dim) : dim_(dim) {}

  void add(const std::string& id, std::span<const float> vec) {
    if (id.empty()) throw DataError("empty feature id");
    if (vec.size() != dim_)
      throw DataError("feature '" + id + "' has dimension " + std::to_string(vec.size()) +
                      ", store dimension is " + std::to_string(dim_));
    for (float v : vec)
      if (!std::isfinite(v)) throw DataError("feature '" + id + "' has a non-finite component");
    if (!index_.emplace(id, ids_.size()).second) throw DataError("duplicate feature id '" + id + "'");
    ids_.push_back(id);
    data_.insert(data_.end(), vec.begin(), vec.end());
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::span<const float> row(std::size_t r) const { return {data_.data() + r * dim_, dim_}; }
  std::span<const float> at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("unknown image id '" + id + "'");
    return row(it->second);
  }
  std::size_t row_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("unknown image id '" + id + "'");
    return it->second;
  }

  friend bool operator==(const FeatureStore& a, const FeatureStore& b) {
    return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.data_ == b.data_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<float> data_;
};

inline constexpr std::string_view kFeatureMagic = "PVF1";

inline std::string encode_features_binary(const FeatureStore& store) {
  io::ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u32(static_cast<std::uint32_t>(store.size()));
  w.u32(static_cast<std::uint32_t>(store.dim()));
  for (std::size_t r = 0; r < store.size(); ++r) {
    w.str16(store.ids()[r], "feature id");
    for (float v : store.row(r)) w.f32(v);
  }
  return w.buffer();
}

inline std::string encode_features_tsv(const FeatureStore& store) {
  std::string out;
  for (std::size_t r = 0; r < store.size(); ++r) {
    out += store.ids()[r];
    out += '\t';
    bool first = true;
    for (float v : store.row(r)) {
      if (!first) out += ',';
      first = false;
      io::append_float(out, v);
    }
    out += '\n';
  }
  return out;
}

inline FeatureStore decode_features_binary(std::string_view bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  r.bytes(4, "magic");
  const auto count = r.u32();
  const auto dim = r.u32();
  if (dim == 0 && count > 0) r.fail("dimension 0 with non-empty store");
  FeatureStore store(dim);
  std::vector<float> vec(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t rec = r.offset();
    const auto id = r.str16("feature id");
    if (id.empty()) r.fail("record " + std::to_string(i) + " has an empty id");
    for (auto& v : vec) v = r.f32();
    try {
      store.add(id, vec);
    } catch (const DataError& e) {
      throw DataError(io::at_offset(source, rec, e.what()));
    }
  }
  if (!r.at_end()) r.fail(std::to_string(r.remaining()) + " trailing bytes after " + std::to_string(count) + " records");
  return store;
}

inline FeatureStore decode_features_tsv(std::string_view text, const std::string& source) {
  FeatureStore store;
  bool have_dim = false;
  std::size_t lineno = 0;
  std::vector<float> vec;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == text.npos ? text.npos : nl - pos);
    pos = nl == text.npos ? text.size() : nl + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (io::is_blank(line)) continue;
    const auto cols = io::split(line, '\t');
    if (cols.size() != 2 || cols[0].empty())
      throw DataError(io::at_line(source, lineno, "not a feature file: expected 'PVF1' magic or '<id>\\t<f1>,<f2>,...'"));
    const auto comps = io::split(cols[1], ',');
    vec.resize(comps.size());
    for (std::size_t k = 0; k < comps.size(); ++k)
      if (!io::parse_float(io::trim(comps[k]), vec[k]))
        throw DataError(io::at_line(source, lineno, "bad number '" + std::string(comps[k]) + "'"));
    if (!have_dim) {
      store = FeatureStore(vec.size());
      have_dim = true;
    }
    try {
      store.add(std::string(cols[0]), vec);
    } catch (const DataError& e) {
      throw DataError(io::at_line(source, lineno, e.what()));
    }
  }
  return store;
}

inline FeatureStore decode_features(std::string_view bytes, const std::string& source) {
  if (bytes.substr(0, 4) == kFeatureMagic) return decode_features_binary(bytes, source);
  return decode_features_tsv(bytes, source);
}

inline FeatureStore load_features(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_features(bytes, path.string());
}

inline void write_features(const FeatureStore& store, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_features_binary(store));
}

inline void write_features_tsv(const FeatureStore& store, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_features_tsv(store));
}

// ---------------------------------------------------------------------------
// pairs, labels, stop words

enum class Source { Caption, Click };

inline const char* to_string(Source s) { return s == Source::Caption ? "caption" : "click"; }

struct PairSample {
  std::string text;
  std::string image_id;

  friend bool operator==(const PairSample&, const PairSample&) = default;
};

struct PairDataset {
  Source source = Source::Caption;
  std::vector<PairSample> samples;
};

inline PairDataset load_pairs(std::istream& in, Source source, const std::string& name = "<pairs>") {
  PairDataset ds{source, {}};
  std::string line;
  std::size_t lineno = 0;
  while (io::read_line(in, line)) {
    ++lineno;
    if (io::is_blank(line)) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(io::at_line(name, lineno, "expected '<image_id>\\t<text>', no tab found"));
    if (line.find('\t', tab + 1) != std::string::npos)
      throw DataError(io::at_line(name, lineno, "text must not contain a tab"));
    if (tab == 0) throw DataError(io::at_line(name, lineno, "empty image id"));
    ds.samples.push_back({line.substr(tab + 1), line.substr(0, tab)});
  }
  return ds;
}

inline PairDataset load_pairs(const std::filesystem::path& path, Source source) {
  auto in = io::open_text(path);
  return load_pairs(in, source, path.string());
}

using LabelMap = std::unordered_map<std::string, std::string>;

inline LabelMap load_labels(std::istream& in, const std::string& name = "<labels>") {
  LabelMap labels;
  std::string line;
  std::size_t lineno = 0;
  while (io::read_line(in, line)) {
    ++lineno;
    if (io::is_blank(line)) continue;
    const auto cols = io::split(line, '\t');
    if (cols.size() != 2 || cols[0].empty() || cols[1].empty())
      throw DataError(io::at_line(name, lineno, "expected '<id>\\t<label>'"));
    auto [it, fresh] = labels.emplace(std::string(cols[0]), std::string(cols[1]));
    if (!fresh && it->second != cols[1])
      throw DataError(io::at_line(name, lineno, "conflicting label for '" + it->first + "'"));
  }
  return labels;
}

inline LabelMap load_labels(const std::filesystem::path& path) {
  auto in = io::open_text(path);
  return load_labels(in, path.string());
}

inline StopWords load_stopwords(std::istream& in) {
  StopWords words;
  std::string line;
  while (io::read_line(in, line)) {
    auto w = std::string(io::trim(line));
    if (w.empty()) continue;
    for (auto& ch : w)
      if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
    words.insert(std::move(w));
  }
  return words;
}

inline StopWords load_stopwords(const std::filesystem::path& path) {
  auto in = io::open_text(path);
  return load_stopwords(in);
}

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr std::string_view kCheckpointMagic = "PATR";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to encode text and to resume training exactly.
struct Checkpoint {
  EncoderConfig encoder;
  AdamConfig adam;
  WordVectorTable<float> words;
  ParamSet<float> params;  // values and Adam moments
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t seed = 0;
  std::string rng_state;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);

  const auto& e = ck.encoder;
  w.u64(e.word_dim);
  w.u64(e.hidden_size);
  w.u64(e.num_layers);
  w.u64(e.max_seq_len);
  w.u64(e.max_query_len);
  w.u64(e.output_dim);
  w.f64(e.dropout_rate);

  w.f64(ck.adam.learning_rate);
  w.f64(ck.adam.beta1);
  w.f64(ck.adam.beta2);
  w.f64(ck.adam.epsilon);
  w.f64(ck.adam.clip_norm);
  w.u64(ck.adam.step_count);

  w.u64(ck.epoch);
  w.u64(ck.seed);
  w.str32(ck.rng_state);

  w.u64(ck.words.size());
  w.u64(ck.words.dim());
  for (const auto& word : ck.words.words()) w.str16(word, "word");
  for (float v : ck.words.data()) w.f32(v);

  w.u32(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& s : ck.params.slots()) {
    w.str16(s.name, "tensor name");
    w.u8(s.trainable ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(s.value.rank()));
    for (auto d : s.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : s.value.data()) w.f32(v);
    for (float v : s.adam_m.data()) w.f32(v);
    for (float v : s.adam_v.data()) w.f32(v);
  }
  return w.buffer();
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  if (r.bytes(4, "magic") != kCheckpointMagic) throw DataError(source + ": not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError(source + ": unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  auto& e = ck.encoder;
  e.word_dim = r.u64();
  e.hidden_size = r.u64();
  e.num_layers = r.u64();
  e.max_seq_len = r.u64();
  e.max_query_len = r.u64();
  e.output_dim = r.u64();
  e.dropout_rate = r.f64();
  try {
    e.validate();
  } catch (const ConfigError& err) {
    r.fail(std::string("bad encoder config: ") + err.what());
  }

  ck.adam.learning_rate = r.f64();
  ck.adam.beta1 = r.f64();
  ck.adam.beta2 = r.f64();
  ck.adam.epsilon = r.f64();
  ck.adam.clip_norm = r.f64();
  ck.adam.step_count = r.u64();
  try {
    ck.adam.validate();
  } catch (const ConfigError& err) {
    r.fail(std::string("bad optimizer state: ") + err.what());
  }

  ck.epoch = r.u64();
  ck.seed = r.u64();
  ck.rng_state = r.str32("random state");
  try {
    Rng probe;
    probe.set_state(ck.rng_state);
  } catch (const DataError&) {
    r.fail("corrupt random stream state");
  }

  const auto n_words = r.u64();
  const auto dim = r.u64();
  if (dim != e.word_dim) r.fail("word table dimension does not match encoder.word_dim");
  if (n_words > r.remaining() / 2) r.fail("word count exceeds file size");
  std::vector<std::string> words;
  words.reserve(n_words);
  for (std::uint64_t i = 0; i < n_words; ++i) words.push_back(r.str16("word"));
  if (n_words * dim > r.remaining() / 4) r.fail("truncated word vectors");
  ck.words = WordVectorTable<float>(dim);
  std::vector<float> vec(dim);
  for (std::uint64_t i = 0; i < n_words; ++i) {
    for (auto& v : vec) {
      v = r.f32();
      if (!std::isfinite(v)) r.fail("non-finite word vector component");
    }
    if (!ck.words.add(words[i], vec)) r.fail("duplicate word '" + words[i] + "'");
  }

  const auto n_tensors = r.u32();
  for (std::uint32_t t = 0; t < n_tensors; ++t) {
    auto name = r.str16("tensor name");
    const auto trainable = r.u8();
    if (trainable > 1) r.fail("bad trainable flag for '" + name + "'");
    const auto rank = r.u32();
    if (rank == 0 || rank > 2) r.fail("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.u32();
      if (d == 0) r.fail("tensor '" + name + "' has a zero dimension");
      shape.push_back(d);
      count *= d;
      if (count > r.remaining()) r.fail("tensor '" + name + "' exceeds file size");
    }
    if (count * 12 > r.remaining()) r.fail("truncated tensor '" + name + "'");
    auto read_tensor = [&] {
      std::vector<float> data(count);
      for (auto& v : data) {
        v = r.f32();
        if (!std::isfinite(v)) r.fail("non-finite value in tensor '" + name + "'");
      }
      return Tensor<float>(shape, std::move(data));
    };
    Tensor<float> value = read_tensor();
    Tensor<float> m = read_tensor();
    Tensor<float> v = read_tensor();
    if (ck.params.contains(name)) r.fail("duplicate tensor '" + name + "'");
    auto& slot = ck.params.add(name, std::move(value), trainable == 1);
    slot.adam_m = std::move(m);
    slot.adam_v = std::move(v);
  }
  if (!r.at_end()) r.fail("trailing bytes after last tensor");
  try {
    check_encoder_params(ck.params, ck.encoder);
  } catch (const ConfigError& err) {
    throw DataError(source + ": tensors do not match the embedded encoder config: " + err.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_checkpoint(bytes, path.string());
}

// ---------------------------------------------------------------------------
// key = value config files

/// Ordered key/value pairs with the line each came from.
struct KeyValues {
  std::vector<std::pair<std::string, std::string>> entries;
  std::vector<std::size_t> lines;
};

inline KeyValues read_key_values(std::istream& in, const std::string& name = "<config>") {
  KeyValues kv;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (io::read_line(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    std::string_view body = io::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(io::at_line(name, lineno, "expected 'key = value'"));
    auto key = std::string(io::trim(body.substr(0, eq)));
    auto value = std::string(io::trim(body.substr(eq + 1)));
    if (key.empty() || value.empty())
      throw ConfigError(io::at_line(name, lineno, "expected 'key = value'"));
    if (auto [it, fresh] = seen.emplace(key, lineno); !fresh)
      throw ConfigError(io::at_line(name, lineno, "key '" + key + "' already set on line " + std::to_string(it->second)));
    kv.entries.emplace_back(std::move(key), std::move(value));
    kv.lines.push_back(lineno);
  }
  return kv;
}

}  // namespace patr
