#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "evakit/rng.hpp"

namespace evakit {

// Character inventory of the synthetic corpus; token id = index.
inline constexpr std::string_view kAlphabet = "abcdefghijklmnopqrstuvwxyz .#@\n";
inline constexpr std::size_t kVocabSize = 32;  // alphabet plus one unused id

// Deterministic Markov word text. Sentences are drawn from a sparse bigram
// chain over a generated lexicon; "#key" markers are later repeated as "@key",
// which gives the text dependencies beyond any short window.
std::string generate_synthetic_corpus(std::size_t n_chars, std::uint64_t seed);

// Parameters of the checked-in data/synthetic_corpus.txt.
inline constexpr std::size_t kBundledCorpusChars = 400000;
inline constexpr std::uint64_t kBundledCorpusSeed = 7;
inline std::string bundled_corpus() { return generate_synthetic_corpus(kBundledCorpusChars, kBundledCorpusSeed); }

std::vector<int> tokenize(std::string_view text);
std::string detokenize(const std::vector<int>& tokens);

std::string read_text_file(const std::string& path);

struct CorpusSplit {
  std::vector<int> train;
  std::vector<int> val;
};

// Last `val_fraction` of the stream is held out.
CorpusSplit split_corpus(const std::vector<int>& tokens, double val_fraction);

// Random contiguous window of `length` tokens.
std::vector<int> sample_window(const std::vector<int>& tokens, std::size_t length, CounterRng& rng);

// `count` windows at evenly spaced offsets; used for deterministic evaluation.
std::vector<std::vector<int>> strided_windows(const std::vector<int>& tokens, std::size_t length, std::size_t count);

}  // namespace evakit
