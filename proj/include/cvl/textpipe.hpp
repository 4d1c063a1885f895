#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cvl/rng.hpp"
#include "cvl/synthdata.hpp"

namespace cvl::textpipe {

// Word-level vocabulary over the closed synthetic grammar. Ids 0..4 are the
// specials; word ids follow in sorted token order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumSpecials = 5;

  static Vocabulary build(const std::vector<synthdata::Study>& corpus);
  static Vocabulary from_tokens(const std::vector<std::string>& words);

  // UNK for anything unseen.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  int num_words() const { return size() - kNumSpecials; }
  // Sentinel for "no MLM target here"; deliberately outside the id range.
  int ignore_id() const { return size(); }
  bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

struct TokenizedText {
  std::vector<int> ids;             // padded to max_len
  std::vector<bool> attention_mask; // true through [SEP], false on padding
  int length = 0;                   // real tokens including [CLS] and [SEP]
};

inline constexpr int kDefaultMaxLen = 120;

std::vector<std::string> split_sentences(const std::string& text);
std::vector<std::string> split_sentences(const std::vector<std::string>& report);

TokenizedText tokenize(const Vocabulary& vocab, const std::vector<std::string>& report,
                       int max_len = kDefaultMaxLen);
TokenizedText tokenize(const Vocabulary& vocab, const std::string& text,
                       int max_len = kDefaultMaxLen);

// Joins word tokens back into lowercased text; drops specials and padding.
std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids);

struct MaskedBatch {
  std::vector<int> ids;        // corrupted copy of the input ids
  std::vector<int> targets;    // original id at corrupted positions, ignore_id elsewhere
  std::vector<int> positions;  // corrupted positions, ascending
};

inline constexpr double kDefaultMaskRate = 0.15;

// 15% of word positions are selected; a selected token becomes [MASK] with
// probability 0.8, a random word with 0.1, or stays itself with 0.1.
// force_mask collapses the corruption mix to [MASK] only (test hook).
MaskedBatch mask_tokens(const Vocabulary& vocab, const TokenizedText& tokens,
                        double rate, Rng& rng, bool force_mask = false);

}  // namespace cvl::textpipe
