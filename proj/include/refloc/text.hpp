#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "refloc/error.hpp"
#include "refloc/geometry.hpp"
#include "refloc/scene.hpp"

namespace refloc {

enum class TaskKind : std::uint8_t { det_caption, reg, rec };

inline std::string_view name(TaskKind k) {
  switch (k) {
    case TaskKind::det_caption: return "det_caption";
    case TaskKind::reg: return "reg";
    case TaskKind::rec: return "rec";
  }
  return "?";
}

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::string_view kNewlineToken = "<nl>";

/// Closed word-level vocabulary. Every integer 0..1000 is a single token.
class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      if (!inserted) throw ValidationError("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
    const std::array<std::string_view, 4> reserved{"<pad>", "<bos>", "<eos>", "<unk>"};
    for (std::size_t i = 0; i < reserved.size(); ++i) {
      if (tokens_.size() <= i || tokens_[i] != reserved[i]) {
        throw ValidationError("vocabulary: reserved token missing at id " + std::to_string(i));
      }
    }
  }

  /// The built-in vocabulary covering all templates, the expression grammar
  /// and every quantized coordinate.
  static Vocabulary standard() {
    std::vector<std::string> t{"<pad>", "<bos>", "<eos>", "<unk>", std::string(kNewlineToken),
                               "[",     "]",     ",",     ".",     "?"};
    for (const char* w : {"find", "the", "in", "region", "of", "what", "is", "where", "image", "a"}) {
      t.emplace_back(w);
    }
    for (auto s : kShapes) t.emplace_back(name(s));
    for (auto c : kColors) t.emplace_back(name(c));
    for (auto z : kSizes) t.emplace_back(name(z));
    for (auto q : kQualifiers) t.emplace_back(name(q));
    for (int i = 0; i <= kCoordScale; ++i) t.push_back(std::to_string(i));
    return Vocabulary(std::move(t));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view tok) const { return find(tok).value_or(kUnk); }

  /// One token per line; line number is the id.
  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  static Vocabulary deserialize(std::string_view text) {
    std::vector<std::string> t;
    std::string cur;
    for (char ch : text) {
      if (ch == '\n') {
        t.push_back(std::move(cur));
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    if (!cur.empty()) t.push_back(std::move(cur));
    return Vocabulary(std::move(t));
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(path, "cannot open for writing");
    f << serialize();
    if (!f) throw IoError(path, "write failed");
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(path, "cannot open vocabulary");
    std::stringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct Tokenized {
  std::vector<TokenId> ids;
  std::size_t unknown = 0;
};

inline bool is_punct_token(char ch) {
  return ch == '[' || ch == ']' || ch == ',' || ch == '.' || ch == '?';
}

/// Lowercases, splits punctuation into separate tokens and maps newlines to
/// the newline token. Unknown words become <unk> and are counted.
inline std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    if (ch == '\n') {
      flush();
      out.emplace_back(kNewlineToken);
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else if (is_punct_token(ch)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return out;
}

inline Tokenized tokenize(const Vocabulary& vocab, std::string_view text) {
  Tokenized t;
  for (const auto& word : split_tokens(text)) {
    auto id = vocab.find(word);
    if (!id || *id < 4) {
      t.ids.push_back(kUnk);
      ++t.unknown;
    } else {
      t.ids.push_back(*id);
    }
  }
  return t;
}

/// Inverse of tokenize up to normalization: lowercase, canonical spacing
/// (no space after '[' or before ']' ',' '.' '?'). Reserved ids other than
/// <unk> are skipped.
inline std::string detokenize(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::string out;
  bool at_line_start = true;
  bool after_open = false;
  for (TokenId id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    const std::string& tok = vocab.token(id);
    if (tok == kNewlineToken) {
      out += '\n';
      at_line_start = true;
      after_open = false;
      continue;
    }
    const bool closes = tok == "]" || tok == "," || tok == "." || tok == "?";
    if (!at_line_start && !after_open && !closes) out += ' ';
    out += tok;
    at_line_start = false;
    after_open = tok == "[";
  }
  return out;
}

inline std::string detokenize(const Vocabulary& vocab, const std::vector<TokenId>& ids) {
  return detokenize(vocab, std::span<const TokenId>(ids));
}

/// Canonical form of a string under the tokenizer's normalization.
inline std::string normalize_text(const Vocabulary& vocab, std::string_view text) {
  return detokenize(vocab, tokenize(vocab, text).ids);
}

// ---------------------------------------------------------------------------
// Coordinates as text

inline std::string serialize_box(const QuantizedBox& q) {
  return "[" + std::to_string(q.x1) + ", " + std::to_string(q.y1) + ", " + std::to_string(q.x2) +
         ", " + std::to_string(q.y2) + "]";
}

struct ParsedBox {
  QuantizedBox box;
  bool clamped = false;
  bool swapped = false;

  bool repaired() const { return clamped || swapped; }
};

namespace detail {

inline void skip_spaces(std::string_view s, std::size_t& i) {
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
}

// Reads an optionally signed integer; magnitudes beyond int range saturate.
inline std::optional<long long> read_int(std::string_view s, std::size_t& i) {
  std::size_t j = i;
  bool neg = false;
  if (j < s.size() && (s[j] == '-' || s[j] == '+')) {
    neg = s[j] == '-';
    ++j;
  }
  const std::size_t digits_begin = j;
  long long v = 0;
  while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) {
    if (v < 1'000'000'000LL) v = v * 10 + (s[j] - '0');
    ++j;
  }
  if (j == digits_begin) return std::nullopt;
  i = j;
  return neg ? -v : v;
}

// Attempts "[ int , int , int , int ]" starting at s[i] == '['.
inline std::optional<std::array<long long, 4>> read_group(std::string_view s, std::size_t i) {
  std::array<long long, 4> v{};
  ++i;
  for (int k = 0; k < 4; ++k) {
    skip_spaces(s, i);
    auto x = read_int(s, i);
    if (!x) return std::nullopt;
    v[k] = *x;
    skip_spaces(s, i);
    const char want = k < 3 ? ',' : ']';
    if (i >= s.size() || s[i] != want) return std::nullopt;
    ++i;
  }
  return v;
}

}  // namespace detail

/// Extracts the first bracketed group of four integers. Values outside
/// [0, 1000] are clamped and reversed corners are swapped; both repairs are
/// flagged. Returns nullopt when no such group exists.
inline std::optional<ParsedBox> parse_box(std::string_view text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '[') continue;
    auto g = detail::read_group(text, i);
    if (!g) continue;
    ParsedBox p;
    std::array<int, 4> c{};
    for (int k = 0; k < 4; ++k) {
      long long v = (*g)[k];
      if (v < 0 || v > kCoordScale) {
        v = std::clamp<long long>(v, 0, kCoordScale);
        p.clamped = true;
      }
      c[k] = static_cast<int>(v);
    }
    if (c[0] > c[2]) {
      std::swap(c[0], c[2]);
      p.swapped = true;
    }
    if (c[1] > c[3]) {
      std::swap(c[1], c[3]);
      p.swapped = true;
    }
    p.box = {c[0], c[1], c[2], c[3]};
    return p;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Prompt and answer templates

inline constexpr std::string_view kRegionPhrase = " in the region of ";

inline std::string build_det_caption(std::string_view class_name, const QuantizedBox& q) {
  if (class_name.empty()) throw ValidationError("build_det_caption: empty class name");
  return "find the " + std::string(class_name) + " in the region of " + serialize_box(q) + ".";
}

struct CaptionEntry {
  std::string class_name;
  QuantizedBox box;
};

/// One caption line per object, newline-joined.
inline std::string build_det_caption(const std::vector<CaptionEntry>& entries) {
  std::string out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (i) out += '\n';
    out += build_det_caption(entries[i].class_name, entries[i].box);
  }
  return out;
}

struct QaPair {
  std::string question;
  std::string answer;
};

/// Referring expression generation: box in the question, expression in the answer.
inline QaPair build_reg_pair(const QuantizedBox& q, std::string_view expression = {}) {
  return {"What is in the region of " + serialize_box(q) + " ?",
          std::string(expression) + " in the region of " + serialize_box(q) + "."};
}

/// Referring expression comprehension: expression in the question, box in the answer.
inline QaPair build_rec_pair(std::string_view expression, const QuantizedBox& q = {}) {
  return {"where is " + std::string(expression) + " in the image?",
          "In the region of " + serialize_box(q) + "."};
}

/// Expression part of a REG answer: the text before " in the region of ".
inline std::optional<std::string> extract_reg_expression(std::string_view answer) {
  const auto pos = answer.find(kRegionPhrase);
  if (pos == std::string_view::npos || pos == 0) return std::nullopt;
  std::string expr(answer.substr(0, pos));
  while (!expr.empty() && std::isspace(static_cast<unsigned char>(expr.back()))) expr.pop_back();
  if (expr.empty()) return std::nullopt;
  return expr;
}

/// Expression slot of a REC question "where is <expression> in the image?".
inline std::optional<std::string> extract_rec_expression(std::string_view question) {
  std::string q = std::string(question);
  for (auto& ch : q) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  const std::string_view prefix = "where is ";
  const std::string_view suffix = " in the image";
  if (q.rfind(prefix, 0) != 0) return std::nullopt;
  const auto end = q.rfind(suffix);
  if (end == std::string::npos || end <= prefix.size()) return std::nullopt;
  return q.substr(prefix.size(), end - prefix.size());
}

}  // namespace refloc
