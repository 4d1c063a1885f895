#include "cvl/synthdata.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cvl/errors.hpp"
#include "cvl/rng.hpp"
#include "json.hpp"

namespace cvl::synthdata {

namespace {

const std::vector<std::string> kClassNames = {"no finding", "alphora", "betuna",
                                              "gamron",     "deltex",  "epsidia"};
const std::vector<std::string> kExtentNames = {"small", "large"};
const std::vector<std::string> kHorizNames = {"left", "right"};
const std::vector<std::string> kVertNames = {"upper", "lower"};
const std::string kNegation = "No evidence of abnormal findings.";

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

// Marker silhouettes, one per positive class, centered at the origin.
bool in_shape(ClassId cls, double di, double dj, double r, double unit) {
  const double ai = std::abs(di), aj = std::abs(dj);
  const double th = std::max(1.0, unit);  // arm / band half width
  switch (cls) {
    case ClassId::alphora:  // filled square
      return ai <= r && aj <= r;
    case ClassId::betuna:  // filled disc
      return di * di + dj * dj <= r * r + 0.5;
    case ClassId::gamron:  // upright cross
      return (ai <= th && aj <= r) || (aj <= th && ai <= r);
    case ClassId::deltex:  // diagonal cross
      return std::abs(ai - aj) <= th && std::max(ai, aj) <= r;
    case ClassId::epsidia: {  // ring
      const double d = std::sqrt(di * di + dj * dj);
      return d >= r - 1.5 * th && d <= r + 0.5 * th;
    }
    case ClassId::no_finding:
      return false;
  }
  return false;
}

// Accepts either an empty list, a lone explicit no-finding entry, or a set of
// present abnormal findings with pairwise distinct quadrants.
std::vector<FindingSpec> normalize_specs(const std::vector<FindingSpec>& specs) {
  if (specs.empty()) return {};
  if (specs.size() == 1 && specs[0].cls == ClassId::no_finding) {
    if (specs[0].present) throw DataError("synthdata: a no-finding spec cannot be present");
    return {};
  }
  std::set<int> quadrants;
  for (const FindingSpec& f : specs) {
    if (!f.present || f.cls == ClassId::no_finding)
      throw DataError("synthdata: mixed or absent findings in spec list");
    if (!quadrants.insert(quadrant_index(f.zone)).second)
      throw DataError("synthdata: two findings assigned to one quadrant");
  }
  return specs;
}

}  // namespace

int quadrant_index(const Zone& z) {
  return (z.vert == Vert::upper ? 0 : 2) + (z.horiz == Horiz::left ? 0 : 1);
}

int quadrant_of_pixel(Eigen::Index i, Eigen::Index j, Eigen::Index rows, Eigen::Index cols) {
  return (i < rows / 2 ? 0 : 2) + (j < cols / 2 ? 0 : 1);
}

const std::string& class_name(ClassId c) { return kClassNames.at(static_cast<size_t>(c)); }
const std::string& extent_name(Extent e) { return kExtentNames.at(static_cast<size_t>(e)); }
const std::string& horiz_name(Horiz h) { return kHorizNames.at(static_cast<size_t>(h)); }
const std::string& vert_name(Vert v) { return kVertNames.at(static_cast<size_t>(v)); }

std::optional<ClassId> class_from_name(const std::string& name) {
  for (size_t i = 0; i < kClassNames.size(); ++i)
    if (kClassNames[i] == name) return static_cast<ClassId>(i);
  return std::nullopt;
}

std::string finding_sentence(const FindingSpec& f) {
  return "There is " + extent_name(f.extent) + " " + class_name(f.cls) + " in the " +
         horiz_name(f.zone.horiz) + " " + vert_name(f.zone.vert) + " zone.";
}

const std::string& negation_sentence() { return kNegation; }

std::vector<std::string> make_report(const std::vector<FindingSpec>& findings) {
  if (findings.empty()) return {kNegation};
  std::vector<std::string> out;
  out.reserve(findings.size());
  for (const FindingSpec& f : findings) out.push_back(finding_sentence(f));
  return out;
}

std::optional<std::vector<FindingSpec>> parse_report(const std::vector<std::string>& report) {
  if (report.empty()) return std::nullopt;
  std::vector<FindingSpec> out;
  bool saw_negation = false;
  for (const std::string& sentence : report) {
    if (lower(sentence) == lower(kNegation)) {
      saw_negation = true;
      continue;
    }
    const std::vector<std::string> w = split_ws(lower(sentence));
    // there is EXTENT CLASS in the HORIZ VERT zone.
    if (w.size() != 9 || w[0] != "there" || w[1] != "is" || w[4] != "in" || w[5] != "the" ||
        w[8] != "zone.")
      return std::nullopt;
    FindingSpec f;
    f.present = true;
    if (w[2] == "small")
      f.extent = Extent::small;
    else if (w[2] == "large")
      f.extent = Extent::large;
    else
      return std::nullopt;
    const auto cls = class_from_name(w[3]);
    if (!cls || *cls == ClassId::no_finding) return std::nullopt;
    f.cls = *cls;
    if (w[6] == "left")
      f.zone.horiz = Horiz::left;
    else if (w[6] == "right")
      f.zone.horiz = Horiz::right;
    else
      return std::nullopt;
    if (w[7] == "upper")
      f.zone.vert = Vert::upper;
    else if (w[7] == "lower")
      f.zone.vert = Vert::lower;
    else
      return std::nullopt;
    out.push_back(f);
  }
  if (saw_negation && (report.size() != 1 || !out.empty())) return std::nullopt;
  return out;
}

Eigen::MatrixXd render_image(const std::vector<FindingSpec>& findings, uint64_t rng_seed,
                             const RenderConfig& cfg) {
  const Eigen::Index h = cfg.height, w = cfg.width;
  const double unit = std::min(h, w) / 32.0;
  Rng rng(rng_seed);
  Eigen::MatrixXd img(h, w);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) img(i, j) = rng.uniform(0.0, kNoiseCeiling);

  for (const FindingSpec& f : findings) {
    if (!f.present) continue;
    const double r = (f.extent == Extent::large ? 5.0 : 3.0) * unit;
    const Eigen::Index ci0 = (f.zone.vert == Vert::upper ? h / 4 : 3 * h / 4);
    const Eigen::Index cj0 = (f.zone.horiz == Horiz::left ? w / 4 : 3 * w / 4);
    const int ju = std::max(1, static_cast<int>(std::lround(unit)));
    const Eigen::Index ci = ci0 + rng.uniform_int(2 * ju + 1) - ju;
    const Eigen::Index cj = cj0 + rng.uniform_int(2 * ju + 1) - ju;
    const Eigen::Index rr = static_cast<Eigen::Index>(std::ceil(r + unit));
    for (Eigen::Index i = std::max<Eigen::Index>(0, ci - rr);
         i <= std::min(h - 1, ci + rr); ++i) {
      for (Eigen::Index j = std::max<Eigen::Index>(0, cj - rr);
           j <= std::min(w - 1, cj + rr); ++j) {
        if (in_shape(f.cls, static_cast<double>(i - ci), static_cast<double>(j - cj), r, unit))
          img(i, j) = rng.uniform(kMarkerFloor, 1.0);
      }
    }
  }
  return img;
}

Study generate_study(uint64_t rng_seed, const std::vector<FindingSpec>& findings,
                     const RenderConfig& cfg, std::string study_id) {
  const std::vector<FindingSpec> norm = normalize_specs(findings);
  Study s;
  s.study_id = study_id.empty() ? "study-seed-" + std::to_string(rng_seed) : std::move(study_id);
  s.image = render_image(norm, rng_seed, cfg);
  s.report = make_report(norm);
  s.findings = norm;
  return s;
}

std::map<ClassId, double> uniform_class_mix() {
  std::map<ClassId, double> mix;
  for (int c = 0; c < kNumClasses; ++c) mix[static_cast<ClassId>(c)] = 1.0 / kNumClasses;
  return mix;
}

std::vector<Study> generate_corpus(int n, const std::map<ClassId, double>& class_mix,
                                   uint64_t rng_seed, const RenderConfig& cfg) {
  if (n < 0) throw DataError("synthdata: corpus size must be nonnegative");
  double total = 0.0;
  for (const auto& [cls, p] : class_mix) {
    if (p < 0.0) throw DataError("synthdata: negative class probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw DataError("synthdata: class probabilities must sum to 1");

  std::vector<Study> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng attrs(mix_seed(rng_seed, static_cast<uint64_t>(2 * i)));
    const double u = attrs.uniform();
    ClassId cls = ClassId::no_finding;
    double acc = 0.0;
    for (const auto& [c, p] : class_mix) {
      acc += p;
      cls = c;
      if (u < acc) break;
    }
    std::vector<FindingSpec> specs;
    if (cls != ClassId::no_finding) {
      FindingSpec f;
      f.cls = cls;
      f.present = true;
      f.extent = static_cast<Extent>(attrs.uniform_int(2));
      f.zone.horiz = static_cast<Horiz>(attrs.uniform_int(2));
      f.zone.vert = static_cast<Vert>(attrs.uniform_int(2));
      specs.push_back(f);
    }
    std::ostringstream id;
    id << "study-" << std::setw(6) << std::setfill('0') << i;
    out.push_back(generate_study(mix_seed(rng_seed, static_cast<uint64_t>(2 * i + 1)), specs, cfg,
                                 id.str()));
  }
  return out;
}

std::set<ClassId> label_set(const Study& s) {
  std::set<ClassId> out;
  for (const FindingSpec& f : s.findings)
    if (f.present) out.insert(f.cls);
  return out;
}

std::string study_to_json_line(const Study& s) {
  nlohmann::json j;
  j["study_id"] = s.study_id;
  j["image"]["rows"] = s.image.rows();
  j["image"]["cols"] = s.image.cols();
  std::vector<double> data;
  data.reserve(static_cast<size_t>(s.image.size()));
  for (Eigen::Index i = 0; i < s.image.rows(); ++i)
    for (Eigen::Index jj = 0; jj < s.image.cols(); ++jj) data.push_back(s.image(i, jj));
  j["image"]["data"] = data;
  j["report"] = s.report;
  nlohmann::json fs = nlohmann::json::array();
  for (const FindingSpec& f : s.findings) {
    nlohmann::json fj;
    fj["class"] = class_name(f.cls);
    fj["present"] = f.present;
    if (f.present) {
      fj["extent"] = extent_name(f.extent);
      fj["zone"] = horiz_name(f.zone.horiz) + " " + vert_name(f.zone.vert);
    }
    fs.push_back(fj);
  }
  j["findings"] = fs;
  return j.dump();
}

void save_corpus(const std::string& path, const std::vector<Study>& studies) {
  std::ofstream os(path);
  if (!os) throw DataError("synthdata: cannot open for writing: " + path);
  os << kCorpusSchema << "\n";
  for (const Study& s : studies) {
    os << study_to_json_line(s) << "\n";
  }
  if (!os) throw DataError("synthdata: write failed: " + path);
}

std::vector<Study> load_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("synthdata: cannot open: " + path);
  std::string line;
  if (!std::getline(is, line) || line != kCorpusSchema)
    throw DataError("synthdata: bad or missing schema header in " + path);
  std::vector<Study> out;
  size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(study_from_json_line(line));
    } catch (const DataError& e) {
      throw DataError("synthdata: " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

Study study_from_json_line(const std::string& line) {
  try {
    const nlohmann::json j = nlohmann::json::parse(line);
    {
      Study s;
      s.study_id = j.at("study_id").get<std::string>();
      const auto rows = j.at("image").at("rows").get<Eigen::Index>();
      const auto cols = j.at("image").at("cols").get<Eigen::Index>();
      const auto data = j.at("image").at("data").get<std::vector<double>>();
      if (rows <= 0 || cols <= 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw DataError("image dims disagree with data length");
      s.image.resize(rows, cols);
      size_t k = 0;
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index jj = 0; jj < cols; ++jj) {
          const double v = data[k++];
          if (!(v >= 0.0 && v <= 1.0)) throw DataError("pixel outside [0,1]");
          s.image(i, jj) = v;
        }
      s.report = j.at("report").get<std::vector<std::string>>();
      for (const auto& fj : j.at("findings")) {
        FindingSpec f;
        const auto cls = class_from_name(fj.at("class").get<std::string>());
        if (!cls) throw DataError("unknown finding class");
        f.cls = *cls;
        f.present = fj.at("present").get<bool>();
        if (f.present) {
          const std::string ext = fj.at("extent").get<std::string>();
          if (ext == "small")
            f.extent = Extent::small;
          else if (ext == "large")
            f.extent = Extent::large;
          else
            throw DataError("unknown extent");
          const std::vector<std::string> z = split_ws(fj.at("zone").get<std::string>());
          if (z.size() != 2) throw DataError("bad zone");
          if (z[0] == "left")
            f.zone.horiz = Horiz::left;
          else if (z[0] == "right")
            f.zone.horiz = Horiz::right;
          else
            throw DataError("bad zone");
          if (z[1] == "upper")
            f.zone.vert = Vert::upper;
          else if (z[1] == "lower")
            f.zone.vert = Vert::lower;
          else
            throw DataError("bad zone");
        }
        s.findings.push_back(f);
      }
      return s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(e.what());
  }
}

}  // namespace cvl::synthdata
