#include "cvl/textpipe.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "cvl/errors.hpp"

namespace cvl::textpipe {

namespace {

const std::vector<std::string> kSpecialNames = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<std::string> words_of(const std::string& s) {
  std::istringstream is(lower(s));
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

Vocabulary Vocabulary::build(const std::vector<synthdata::Study>& corpus) {
  if (corpus.empty()) throw DataError("textpipe: cannot build a vocabulary from an empty corpus");
  std::set<std::string> words;
  for (const auto& study : corpus)
    for (const auto& sentence : study.report)
      for (const auto& w : words_of(sentence)) words.insert(w);
  return from_tokens({words.begin(), words.end()});
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& words) {
  Vocabulary v;
  v.tokens_ = kSpecialNames;
  std::set<std::string> sorted(words.begin(), words.end());
  for (const auto& w : sorted) {
    if (w.empty()) throw DataError("textpipe: empty vocabulary token");
    v.tokens_.push_back(w);
  }
  for (size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = static_cast<int>(i);
  if (v.ids_.size() != v.tokens_.size())
    throw DataError("textpipe: vocabulary tokens collide with the special names");
  return v;
}

int Vocabulary::id(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw DataError("textpipe: token id out of range");
  return tokens_[static_cast<size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("textpipe: cannot open for writing: " + path);
  for (const auto& t : tokens_) os << t << "\n";
  if (!os) throw DataError("textpipe: write failed: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("textpipe: cannot open: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) lines.push_back(line);
  if (lines.size() < kSpecialNames.size())
    throw DataError("textpipe: vocabulary file too short: " + path);
  for (size_t i = 0; i < kSpecialNames.size(); ++i)
    if (lines[i] != kSpecialNames[i])
      throw DataError("textpipe: vocabulary specials malformed in " + path);
  std::vector<std::string> words(lines.begin() + kSpecialNames.size(), lines.end());
  if (!std::is_sorted(words.begin(), words.end()) ||
      std::adjacent_find(words.begin(), words.end()) != words.end())
    throw DataError("textpipe: vocabulary words must be sorted and unique in " + path);
  return from_tokens(words);
}

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (current.empty() && std::isspace(static_cast<unsigned char>(c))) continue;
    current.push_back(c);
    if (c == '.') {
      out.push_back(current);
      current.clear();
    }
  }
  // trailing fragment without a closing period still counts as a sentence
  while (!current.empty() && std::isspace(static_cast<unsigned char>(current.back())))
    current.pop_back();
  if (!current.empty()) out.push_back(current);
  return out;
}

std::vector<std::string> split_sentences(const std::vector<std::string>& report) {
  std::vector<std::string> out;
  for (const auto& chunk : report)
    for (auto& s : split_sentences(chunk)) out.push_back(std::move(s));
  return out;
}

TokenizedText tokenize(const Vocabulary& vocab, const std::vector<std::string>& report,
                       int max_len) {
  if (max_len < 2) throw DataError("textpipe: max_len must fit [CLS] and [SEP]");
  std::vector<int> word_ids;
  for (const auto& sentence : report)
    for (const auto& w : words_of(sentence)) word_ids.push_back(vocab.id(w));
  const int keep = std::min<int>(static_cast<int>(word_ids.size()), max_len - 2);

  TokenizedText t;
  t.ids.reserve(static_cast<size_t>(max_len));
  t.ids.push_back(Vocabulary::kCls);
  t.ids.insert(t.ids.end(), word_ids.begin(), word_ids.begin() + keep);
  t.ids.push_back(Vocabulary::kSep);
  t.length = keep + 2;
  t.ids.resize(static_cast<size_t>(max_len), Vocabulary::kPad);
  t.attention_mask.assign(static_cast<size_t>(max_len), false);
  for (int i = 0; i < t.length; ++i) t.attention_mask[static_cast<size_t>(i)] = true;
  return t;
}

TokenizedText tokenize(const Vocabulary& vocab, const std::string& text, int max_len) {
  return tokenize(vocab, std::vector<std::string>{text}, max_len);
}

std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (vocab.is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

MaskedBatch mask_tokens(const Vocabulary& vocab, const TokenizedText& tokens, double rate,
                        Rng& rng, bool force_mask) {
  MaskedBatch b;
  b.ids = tokens.ids;
  b.targets.assign(tokens.ids.size(), vocab.ignore_id());
  for (size_t i = 0; i < tokens.ids.size(); ++i) {
    const int id = tokens.ids[i];
    if (!tokens.attention_mask[i] || id == Vocabulary::kCls || id == Vocabulary::kSep) continue;
    if (rng.uniform() >= rate) continue;
    b.targets[i] = id;
    b.positions.push_back(static_cast<int>(i));
    if (force_mask) {
      b.ids[i] = Vocabulary::kMask;
      continue;
    }
    const double u = rng.uniform();
    if (u < 0.8) {
      b.ids[i] = Vocabulary::kMask;
    } else if (u < 0.9) {
      if (vocab.num_words() > 0)
        b.ids[i] = Vocabulary::kNumSpecials + rng.uniform_int(vocab.num_words());
    }  // else: keep the original token
  }
  return b;
}

}  // namespace cvl::textpipe
