#include "evakit/corpus.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "evakit/errors.hpp"

namespace evakit {

namespace {

constexpr std::string_view kLetters = "abcdefghijklmnopqrstuvwxyz";
constexpr std::size_t kLexicon = 48;
constexpr std::size_t kSuccessors = 4;

std::string random_word(CounterRng& rng, std::size_t min_len, std::size_t max_len) {
  const std::size_t len = min_len + rng.below(max_len - min_len + 1);
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w.push_back(kLetters[rng.below(kLetters.size())]);
  return w;
}

struct Pending {
  std::string key;
  std::size_t due;  // word count at which "@key" is emitted
};

}  // namespace

std::string generate_synthetic_corpus(std::size_t n_chars, std::uint64_t seed) {
  CounterRng rng(seed, 0x636f72707573ull);
  std::vector<std::string> lexicon;
  for (std::size_t i = 0; i < kLexicon; ++i) lexicon.push_back(random_word(rng, 2, 7));
  // Sparse bigram chain: every word has a few successors with skewed weights.
  std::vector<std::array<std::size_t, kSuccessors>> next(kLexicon);
  for (auto& row : next)
    for (auto& s : row) s = rng.below(kLexicon);
  constexpr std::array<double, kSuccessors> kCumulative{0.55, 0.8, 0.93, 1.0};

  std::string out;
  out.reserve(n_chars + 64);
  std::vector<Pending> pending;
  std::size_t word = rng.below(kLexicon);
  std::size_t words = 0;
  std::size_t sentence_len = 0;
  while (out.size() < n_chars) {
    if (!pending.empty() && pending.front().due <= words) {
      out += '@' + pending.front().key + ' ';
      pending.erase(pending.begin());
    } else if (pending.size() < 3 && rng.uniform() < 0.04) {
      const std::string key = random_word(rng, 3, 3);
      out += '#' + key + ' ';
      pending.push_back({key, words + 8 + rng.below(40)});
    }
    out += lexicon[word];
    ++words;
    ++sentence_len;
    const double u = rng.uniform();
    std::size_t pick = 0;
    while (u > kCumulative[pick]) ++pick;
    word = next[word][pick];
    if (sentence_len >= 4 && rng.uniform() < 0.15) {
      out += rng.uniform() < 0.2 ? ".\n" : ". ";
      sentence_len = 0;
    } else {
      out += ' ';
    }
  }
  out.resize(n_chars);
  return out;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char ch : text) {
    const auto pos = kAlphabet.find(ch);
    if (pos == std::string_view::npos)
      throw ConfigError("tokenize: character outside the corpus alphabet (code " +
                        std::to_string(static_cast<unsigned char>(ch)) + ")");
    ids.push_back(static_cast<int>(pos));
  }
  return ids;
}

std::string detokenize(const std::vector<int>& tokens) {
  std::string s;
  s.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= kAlphabet.size()) throw ShapeError("detokenize: id out of range");
    s.push_back(kAlphabet[static_cast<std::size_t>(t)]);
  }
  return s;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CorpusSplit split_corpus(const std::vector<int>& tokens, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0, 1)");
  const auto n_val = static_cast<std::size_t>(static_cast<double>(tokens.size()) * val_fraction);
  CorpusSplit s;
  s.train.assign(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(n_val));
  s.val.assign(tokens.end() - static_cast<std::ptrdiff_t>(n_val), tokens.end());
  return s;
}

std::vector<int> sample_window(const std::vector<int>& tokens, std::size_t length, CounterRng& rng) {
  if (tokens.size() < length) throw ConfigError("corpus shorter than the requested window");
  const std::size_t start = rng.below(tokens.size() - length + 1);
  return {tokens.begin() + static_cast<std::ptrdiff_t>(start),
          tokens.begin() + static_cast<std::ptrdiff_t>(start + length)};
}

std::vector<std::vector<int>> strided_windows(const std::vector<int>& tokens, std::size_t length,
                                              std::size_t count) {
  if (tokens.size() < length) throw ConfigError("corpus shorter than the requested window");
  if (count == 0) return {};
  const std::size_t span = tokens.size() - length;
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t start = count == 1 ? 0 : span * i / (count - 1);
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                     tokens.begin() + static_cast<std::ptrdiff_t>(start + length));
  }
  return out;
}

}  // namespace evakit
