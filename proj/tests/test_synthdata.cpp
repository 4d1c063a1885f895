#include "cvl/synthdata.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "cvl/errors.hpp"
#include "doctest.h"

using namespace cvl::synthdata;

namespace {

FindingSpec spec(ClassId c, Extent e, Horiz h, Vert v) {
  FindingSpec f;
  f.cls = c;
  f.present = true;
  f.extent = e;
  f.zone = {h, v};
  return f;
}

int count_above(const Eigen::MatrixXd& img, double thr) {
  int n = 0;
  for (Eigen::Index i = 0; i < img.rows(); ++i)
    for (Eigen::Index j = 0; j < img.cols(); ++j) n += img(i, j) > thr;
  return n;
}

// Independent 4-connected component count over the thresholded image.
int component_count(const Eigen::MatrixXd& img, double thr) {
  const Eigen::Index h = img.rows(), w = img.cols();
  std::vector<int> label(static_cast<size_t>(h * w), -1);
  int components = 0;
  for (Eigen::Index si = 0; si < h; ++si) {
    for (Eigen::Index sj = 0; sj < w; ++sj) {
      if (img(si, sj) <= thr || label[static_cast<size_t>(si * w + sj)] >= 0) continue;
      ++components;
      std::vector<std::pair<Eigen::Index, Eigen::Index>> stack{{si, sj}};
      label[static_cast<size_t>(si * w + sj)] = components;
      while (!stack.empty()) {
        auto [i, j] = stack.back();
        stack.pop_back();
        const Eigen::Index di[4] = {1, -1, 0, 0};
        const Eigen::Index dj[4] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          const Eigen::Index ni = i + di[k], nj = j + dj[k];
          if (ni < 0 || nj < 0 || ni >= h || nj >= w) continue;
          if (img(ni, nj) <= thr || label[static_cast<size_t>(ni * w + nj)] >= 0) continue;
          label[static_cast<size_t>(ni * w + nj)] = components;
          stack.push_back({ni, nj});
        }
      }
    }
  }
  return components;
}

}  // namespace

TEST_CASE("empty spec gives noise floor only and a single negation sentence") {
  Study s = generate_study(0, {});
  CHECK(s.image.maxCoeff() < kMarkerThreshold);
  CHECK(s.image.minCoeff() >= 0.0);
  REQUIRE(s.report.size() == 1);
  CHECK(s.report[0] == "No evidence of abnormal findings.");
  CHECK(s.findings.empty());
}

TEST_CASE("same seed and spec give bit-identical studies") {
  const auto specs = std::vector<FindingSpec>{
      spec(ClassId::gamron, Extent::large, Horiz::right, Vert::lower)};
  Study a = generate_study(7, specs);
  Study b = generate_study(7, specs);
  CHECK(a.image == b.image);
  CHECK(a.report == b.report);
  CHECK(a.findings == b.findings);
}

TEST_CASE("marker centroid lands in the named quadrant") {
  Study s = generate_study(
      0, {spec(ClassId::alphora, Extent::large, Horiz::left, Vert::upper)});
  // independent pixel scan
  double si = 0.0, sj = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < s.image.rows(); ++i)
    for (Eigen::Index j = 0; j < s.image.cols(); ++j)
      if (s.image(i, j) > kMarkerThreshold) {
        si += static_cast<double>(i);
        sj += static_cast<double>(j);
        ++n;
      }
  REQUIRE(n > 0);
  CHECK(si / n < s.image.rows() / 2.0);
  CHECK(sj / n < s.image.cols() / 2.0);
}

TEST_CASE("all pixels stay inside [0,1]") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Study s = generate_study(
        seed, {spec(static_cast<ClassId>(1 + seed % 5), Extent::large, Horiz::right, Vert::upper)});
    CHECK(s.image.minCoeff() >= 0.0);
    CHECK(s.image.maxCoeff() <= 1.0);
  }
}

TEST_CASE("large markers cover strictly more pixels than small ones") {
  for (int c = 1; c < kNumClasses; ++c) {
    const ClassId cls = static_cast<ClassId>(c);
    Eigen::MatrixXd small_img =
        render_image({spec(cls, Extent::small, Horiz::left, Vert::lower)}, 3);
    Eigen::MatrixXd large_img =
        render_image({spec(cls, Extent::large, Horiz::left, Vert::lower)}, 3);
    CHECK(count_above(large_img, kMarkerThreshold) > count_above(small_img, kMarkerThreshold));
  }
}

TEST_CASE("two findings in distinct quadrants give two components") {
  Eigen::MatrixXd img = render_image(
      {spec(ClassId::betuna, Extent::large, Horiz::left, Vert::upper),
       spec(ClassId::deltex, Extent::large, Horiz::right, Vert::lower)},
      11);
  CHECK(component_count(img, kMarkerThreshold) == 2);
}

TEST_CASE("every marker silhouette is one connected component") {
  for (int c = 1; c < kNumClasses; ++c) {
    for (Extent e : {Extent::small, Extent::large}) {
      Eigen::MatrixXd img =
          render_image({spec(static_cast<ClassId>(c), e, Horiz::right, Vert::upper)}, 5);
      CHECK(component_count(img, kMarkerThreshold) == 1);
    }
  }
}

TEST_CASE("conflicting quadrant assignment is rejected") {
  CHECK_THROWS_AS(
      generate_study(0, {spec(ClassId::alphora, Extent::small, Horiz::left, Vert::upper),
                         spec(ClassId::betuna, Extent::large, Horiz::left, Vert::upper)}),
      cvl::DataError);
}

TEST_CASE("reports follow the grammar") {
  Study s = generate_study(
      1, {spec(ClassId::epsidia, Extent::small, Horiz::right, Vert::lower)});
  REQUIRE(s.report.size() == 1);
  CHECK(s.report[0] == "There is small epsidia in the right lower zone.");
}

TEST_CASE("parse_report inverts make_report for every finding combination") {
  for (int c = 1; c < kNumClasses; ++c)
    for (Extent e : {Extent::small, Extent::large})
      for (Horiz h : {Horiz::left, Horiz::right})
        for (Vert v : {Vert::upper, Vert::lower}) {
          const std::vector<FindingSpec> fs = {spec(static_cast<ClassId>(c), e, h, v)};
          auto parsed = parse_report(make_report(fs));
          REQUIRE(parsed.has_value());
          CHECK(*parsed == fs);
        }
  auto neg = parse_report(make_report({}));
  REQUIRE(neg.has_value());
  CHECK(neg->empty());
}

TEST_CASE("parse_report rejects off-grammar text") {
  CHECK_FALSE(parse_report({"There is tiny alphora in the left upper zone."}).has_value());
  CHECK_FALSE(parse_report({"There is small nothing in the left upper zone."}).has_value());
  CHECK_FALSE(parse_report({"Completely unrelated sentence."}).has_value());
  CHECK_FALSE(parse_report({"No evidence of abnormal findings.",
                            "There is small alphora in the left upper zone."})
                  .has_value());
}

TEST_CASE("empty corpus is valid") { CHECK(generate_corpus(0, uniform_class_mix(), 0).empty()); }

TEST_CASE("class frequencies track the mix") {
  const int n = 10000;
  auto studies = generate_corpus(n, uniform_class_mix(), 1);
  REQUIRE(studies.size() == static_cast<size_t>(n));
  // independent counting pass over parsed labels
  std::vector<int> counts(kNumClasses, 0);
  std::set<std::string> ids;
  for (const Study& s : studies) {
    ids.insert(s.study_id);
    auto parsed = parse_report(s.report);
    REQUIRE(parsed.has_value());
    if (parsed->empty())
      ++counts[0];
    else
      ++counts[static_cast<int>((*parsed)[0].cls)];
  }
  CHECK(ids.size() == static_cast<size_t>(n));  // unique study ids
  for (int c = 0; c < kNumClasses; ++c) {
    const double freq = static_cast<double>(counts[c]) / n;
    CHECK(freq > 1.0 / 6.0 - 0.02);
    CHECK(freq < 1.0 / 6.0 + 0.02);
  }
}

TEST_CASE("corpus generation is deterministic") {
  auto a = generate_corpus(2, uniform_class_mix(), 42);
  auto b = generate_corpus(2, uniform_class_mix(), 42);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].study_id == b[i].study_id);
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].report == b[i].report);
  }
}

TEST_CASE("bad class mixes are rejected") {
  std::map<ClassId, double> neg_mix = uniform_class_mix();
  neg_mix[ClassId::alphora] = -1.0 / 6.0;
  neg_mix[ClassId::betuna] = 3.0 / 6.0;
  CHECK_THROWS_AS(generate_corpus(10, neg_mix, 0), cvl::DataError);
  std::map<ClassId, double> short_mix = {{ClassId::no_finding, 0.5}};
  CHECK_THROWS_AS(generate_corpus(10, short_mix, 0), cvl::DataError);
}

TEST_CASE("brightest pixel sits in the labeled quadrant for every generated study") {
  auto studies = generate_corpus(300, uniform_class_mix(), 9);
  for (const Study& s : studies) {
    if (s.findings.empty()) {
      CHECK(s.image.maxCoeff() < kMarkerThreshold);
      continue;
    }
    Eigen::Index bi = 0, bj = 0;
    s.image.maxCoeff(&bi, &bj);
    CHECK(quadrant_of_pixel(bi, bj, s.image.rows(), s.image.cols()) ==
          quadrant_index(s.findings[0].zone));
  }
}

TEST_CASE("label_set reflects present findings") {
  Study abn = generate_study(3, {spec(ClassId::deltex, Extent::small, Horiz::left, Vert::lower)});
  CHECK(label_set(abn) == std::set<ClassId>{ClassId::deltex});
  Study none = generate_study(4, {});
  CHECK(label_set(none).empty());
}

TEST_CASE("save and load round-trip byte for byte") {
  auto studies = generate_corpus(5, uniform_class_mix(), 13);
  const std::string p1 = "corpus_rt_1.jsonl", p2 = "corpus_rt_2.jsonl";
  save_corpus(p1, studies);
  auto loaded = load_corpus(p1);
  REQUIRE(loaded.size() == studies.size());
  for (size_t i = 0; i < studies.size(); ++i) {
    CHECK(loaded[i].study_id == studies[i].study_id);
    CHECK(loaded[i].image == studies[i].image);
    CHECK(loaded[i].report == studies[i].report);
    CHECK(loaded[i].findings == studies[i].findings);
  }
  save_corpus(p2, loaded);
  std::ifstream f1(p1), f2(p2);
  std::stringstream b1, b2;
  b1 << f1.rdbuf();
  b2 << f2.rdbuf();
  CHECK(b1.str() == b2.str());
  CHECK(b1.str().rfind(kCorpusSchema, 0) == 0);
}

TEST_CASE("load rejects a missing or wrong header") {
  const std::string p = "corpus_bad_header.jsonl";
  {
    std::ofstream os(p);
    os << "{\"study_id\":\"x\"}\n";
  }
  CHECK_THROWS_AS(load_corpus(p), cvl::DataError);
  CHECK_THROWS_AS(load_corpus("no_such_file_here.jsonl"), cvl::DataError);
}

TEST_CASE("load rejects malformed records") {
  const std::string p = "corpus_bad_record.jsonl";
  {
    std::ofstream os(p);
    os << kCorpusSchema << "\n";
    os << "{\"study_id\":\"x\",\"image\":{\"rows\":2,\"cols\":2,\"data\":[0.1,0.2,0.3]},"
          "\"report\":[],\"findings\":[]}\n";
  }
  CHECK_THROWS_AS(load_corpus(p), cvl::DataError);
}
