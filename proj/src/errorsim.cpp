#include "cvl/errorsim.hpp"

#include <array>
#include <fstream>
#include <map>
#include <sstream>

#include "cvl/errors.hpp"
#include "json.hpp"

namespace cvl::errorsim {

namespace {

const std::array<std::pair<std::string, std::string>, 4> kLocationPairs = {{
    {"left", "right"},
    {"upper", "lower"},
    {"apical", "basal"},
    {"central", "peripheral"},
}};

const std::array<std::pair<std::string, std::string>, 3> kExtentPairs = {{
    {"mild", "severe"},
    {"small", "large"},
    {"minimal", "extensive"},
}};

template <std::size_t N>
std::optional<std::string> table_lookup(
    const std::array<std::pair<std::string, std::string>, N>& table, const std::string& token) {
  for (const auto& [a, b] : table) {
    if (token == a) return b;
    if (token == b) return a;
  }
  return std::nullopt;
}

std::vector<std::string> sentence_tokens(const std::string& sentence) {
  std::vector<std::string> out;
  std::istringstream is(sentence);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (k > 0) out += ' ';
    out += tokens[k];
  }
  return out;
}

using AntonymFn = std::optional<std::string> (*)(const std::string&);

// Flips one uniformly chosen token that has an antonym under `fn`.
std::optional<TextSwap> flip_one_token(const std::vector<std::string>& report, AntonymFn fn,
                                       Rng& rng) {
  struct Candidate {
    std::size_t sentence;
    std::size_t token;
    int joined_index;
    std::string replacement;
  };
  std::vector<std::vector<std::string>> tokens;
  std::vector<Candidate> candidates;
  int joined = 0;
  for (std::size_t s = 0; s < report.size(); ++s) {
    tokens.push_back(sentence_tokens(report[s]));
    for (std::size_t t = 0; t < tokens.back().size(); ++t) {
      if (auto rep = fn(tokens.back()[t])) {
        candidates.push_back({s, t, joined, std::move(*rep)});
      }
      ++joined;
    }
  }
  if (candidates.empty()) return std::nullopt;
  const Candidate& pick =
      candidates[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(candidates.size())))];
  tokens[pick.sentence][pick.token] = pick.replacement;
  TextSwap out;
  for (const auto& ts : tokens) out.report.push_back(join_tokens(ts));
  out.positions = {pick.joined_index};
  return out;
}

bool is_abnormal(const synthdata::Study& s) { return !synthdata::label_set(s).empty(); }

}  // namespace

const std::string& error_type_name(ErrorType t) {
  static const std::array<std::string, 6> names = {
      "none", "mismatch", "location", "extent", "false_negative", "false_positive"};
  return names[static_cast<std::size_t>(t)];
}

std::optional<ErrorType> error_type_from_name(const std::string& name) {
  for (int k = 0; k <= kNumErrorTypes; ++k) {
    const auto t = static_cast<ErrorType>(k);
    if (error_type_name(t) == name) return t;
  }
  return std::nullopt;
}

std::optional<std::string> location_antonym(const std::string& token) {
  return table_lookup(kLocationPairs, token);
}

std::optional<std::string> extent_antonym(const std::string& token) {
  return table_lookup(kExtentPairs, token);
}

std::optional<TextSwap> inject_location_error(const std::vector<std::string>& report, Rng& rng) {
  return flip_one_token(report, &location_antonym, rng);
}

std::optional<TextSwap> inject_extent_error(const std::vector<std::string>& report, Rng& rng) {
  return flip_one_token(report, &extent_antonym, rng);
}

std::optional<ReportSwap> inject_mismatch(const synthdata::Study& study,
                                          const std::vector<synthdata::Study>& corpus, Rng& rng) {
  const auto own = synthdata::label_set(study);
  std::vector<const synthdata::Study*> eligible;
  for (const auto& other : corpus) {
    if (synthdata::label_set(other) != own) eligible.push_back(&other);
  }
  if (eligible.empty()) return std::nullopt;
  const synthdata::Study* pick =
      eligible[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(eligible.size())))];
  return ReportSwap{pick->report, pick->study_id};
}

std::optional<ReportSwap> inject_false_positive(const synthdata::Study& study,
                                                const std::vector<synthdata::Study>& corpus,
                                                Rng& rng) {
  if (is_abnormal(study)) return std::nullopt;
  // Class first, study second, so every abnormal class is equally likely no
  // matter how the corpus is balanced.
  std::map<synthdata::ClassId, std::vector<const synthdata::Study*>> by_class;
  for (const auto& other : corpus) {
    for (synthdata::ClassId c : synthdata::label_set(other)) {
      by_class[c].push_back(&other);
    }
  }
  if (by_class.empty()) return std::nullopt;
  auto it = by_class.begin();
  std::advance(it, rng.uniform_int(static_cast<int>(by_class.size())));
  const auto& bucket = it->second;
  const synthdata::Study* pick =
      bucket[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(bucket.size())))];
  return ReportSwap{pick->report, pick->study_id};
}

std::optional<ReportSwap> inject_false_negative(const synthdata::Study& study,
                                                const std::vector<synthdata::Study>& corpus,
                                                Rng& rng) {
  if (!is_abnormal(study)) return std::nullopt;
  std::vector<const synthdata::Study*> healthy;
  for (const auto& other : corpus) {
    if (!is_abnormal(other)) healthy.push_back(&other);
  }
  if (healthy.empty()) return std::nullopt;
  const synthdata::Study* pick =
      healthy[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(healthy.size())))];
  return ReportSwap{pick->report, pick->study_id};
}

ErrorRecord corrupt(const synthdata::Study& study, const std::vector<synthdata::Study>& corpus,
                    double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw DataError("corrupt: probability outside [0, 1]");
  ErrorRecord rec;
  rec.original = study.report;
  rec.corrupted = study.report;
  if (rng.uniform() >= p) return rec;

  // Applicability is decided before drawing the type so the choice stays
  // uniform over what can actually be injected.
  const bool abnormal = is_abnormal(study);
  const auto own = synthdata::label_set(study);
  bool any_other_class = false, any_healthy = false, any_abnormal = false;
  for (const auto& other : corpus) {
    const auto ls = synthdata::label_set(other);
    if (ls != own) any_other_class = true;
    if (ls.empty()) any_healthy = true;
    if (!ls.empty()) any_abnormal = true;
    if (any_other_class && any_healthy && any_abnormal) break;
  }
  bool has_location = false, has_extent = false;
  for (const auto& sentence : study.report) {
    for (const auto& tok : sentence_tokens(sentence)) {
      if (location_antonym(tok)) has_location = true;
      if (extent_antonym(tok)) has_extent = true;
    }
  }

  std::vector<ErrorType> applicable;
  if (any_other_class) applicable.push_back(ErrorType::mismatch);
  if (abnormal) {
    if (has_location) applicable.push_back(ErrorType::location);
    if (has_extent) applicable.push_back(ErrorType::extent);
    if (any_healthy) applicable.push_back(ErrorType::false_negative);
  } else if (any_abnormal) {
    applicable.push_back(ErrorType::false_positive);
  }
  if (applicable.empty()) {
    rec.inapplicable = true;
    return rec;
  }

  const ErrorType chosen =
      applicable[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(applicable.size())))];
  rec.type = chosen;
  switch (chosen) {
    case ErrorType::mismatch: {
      auto swap = inject_mismatch(study, corpus, rng);
      rec.corrupted = swap->report;
      rec.source_study_id = swap->source_study_id;
      break;
    }
    case ErrorType::location: {
      auto swap = inject_location_error(study.report, rng);
      rec.corrupted = swap->report;
      rec.edited_positions = swap->positions;
      break;
    }
    case ErrorType::extent: {
      auto swap = inject_extent_error(study.report, rng);
      rec.corrupted = swap->report;
      rec.edited_positions = swap->positions;
      break;
    }
    case ErrorType::false_negative: {
      auto swap = inject_false_negative(study, corpus, rng);
      rec.corrupted = swap->report;
      rec.source_study_id = swap->source_study_id;
      break;
    }
    case ErrorType::false_positive: {
      auto swap = inject_false_positive(study, corpus, rng);
      rec.corrupted = swap->report;
      rec.source_study_id = swap->source_study_id;
      break;
    }
    case ErrorType::none:
      break;
  }
  return rec;
}

std::vector<CorruptedStudy> corrupt_corpus(const std::vector<synthdata::Study>& corpus, double p,
                                           std::uint64_t seed) {
  std::vector<CorruptedStudy> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    CorruptedStudy cs;
    cs.record = corrupt(corpus[i], corpus, p, rng);
    cs.study = corpus[i];
    cs.study.report = cs.record.corrupted;
    out.push_back(std::move(cs));
  }
  return out;
}

void save_corrupted(const std::string& path, const std::vector<CorruptedStudy>& set) {
  std::ofstream os(path);
  if (!os) throw DataError("errorsim: cannot open for writing: " + path);
  os << synthdata::kCorpusSchema << "\n";
  for (const CorruptedStudy& cs : set) {
    nlohmann::json j = nlohmann::json::parse(synthdata::study_to_json_line(cs.study));
    nlohmann::json e;
    e["type"] = error_type_name(cs.record.type);
    e["original"] = cs.record.original;
    e["edited_positions"] = cs.record.edited_positions;
    e["source_study_id"] = cs.record.source_study_id;
    e["inapplicable"] = cs.record.inapplicable;
    j["error"] = e;
    os << j.dump() << "\n";
  }
  if (!os) throw DataError("errorsim: write failed: " + path);
}

std::vector<CorruptedStudy> load_corrupted(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("errorsim: cannot open: " + path);
  std::string line;
  if (!std::getline(is, line) || line != synthdata::kCorpusSchema) {
    throw DataError("errorsim: bad or missing schema header in " + path);
  }
  std::vector<CorruptedStudy> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      CorruptedStudy cs;
      cs.study = synthdata::study_from_json_line(line);
      const nlohmann::json j = nlohmann::json::parse(line);
      const nlohmann::json& e = j.at("error");
      const auto type = error_type_from_name(e.at("type").get<std::string>());
      if (!type) throw DataError("unknown error type");
      cs.record.type = *type;
      cs.record.original = e.at("original").get<std::vector<std::string>>();
      cs.record.corrupted = cs.study.report;
      cs.record.edited_positions = e.at("edited_positions").get<std::vector<int>>();
      cs.record.source_study_id = e.at("source_study_id").get<std::string>();
      cs.record.inapplicable = e.at("inapplicable").get<bool>();
      out.push_back(std::move(cs));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("errorsim: " + path + " line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("errorsim: " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cvl::errorsim
