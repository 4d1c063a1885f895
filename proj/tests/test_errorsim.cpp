#include "cvl/errorsim.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "cvl/errors.hpp"
#include "doctest.h"

using cvl::Rng;
using namespace cvl::errorsim;
namespace sd = cvl::synthdata;

namespace {

// Ground-truth studies without the rendering cost: a 1x1 image is enough for
// every corruption rule, which only reads findings and reports.
sd::Study fake_abnormal(sd::ClassId cls, sd::Extent ext, sd::Horiz h, sd::Vert v,
                        const std::string& id) {
  sd::FindingSpec f;
  f.cls = cls;
  f.present = true;
  f.extent = ext;
  f.zone = {h, v};
  sd::Study s;
  s.study_id = id;
  s.image = Eigen::MatrixXd::Zero(1, 1);
  s.findings = {f};
  s.report = sd::make_report(s.findings);
  return s;
}

sd::Study fake_healthy(const std::string& id) {
  sd::Study s;
  s.study_id = id;
  s.image = Eigen::MatrixXd::Zero(1, 1);
  s.report = sd::make_report({});
  return s;
}

std::vector<std::string> joined_tokens(const std::vector<std::string>& report) {
  std::vector<std::string> out;
  for (const auto& sentence : report) {
    std::istringstream is(sentence);
    std::string tok;
    while (is >> tok) out.push_back(tok);
  }
  return out;
}

int token_diff_count(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const auto ta = joined_tokens(a), tb = joined_tokens(b);
  if (ta.size() != tb.size()) return -1;
  int diff = 0;
  for (std::size_t k = 0; k < ta.size(); ++k) {
    if (ta[k] != tb[k]) ++diff;
  }
  return diff;
}

std::set<sd::ClassId> parsed_classes(const std::vector<std::string>& report) {
  const auto parsed = sd::parse_report(report);
  REQUIRE(parsed.has_value());
  std::set<sd::ClassId> out;
  for (const auto& f : *parsed) {
    if (f.present) out.insert(f.cls);
  }
  return out;
}

}  // namespace

TEST_CASE("antonym tables are involutions and reject everything else") {
  const std::vector<std::pair<std::string, std::string>> loc = {
      {"left", "right"}, {"upper", "lower"}, {"apical", "basal"}, {"central", "peripheral"}};
  for (const auto& [a, b] : loc) {
    CHECK(location_antonym(a) == b);
    CHECK(location_antonym(b) == a);
    CHECK(location_antonym(*location_antonym(a)) == a);
  }
  const std::vector<std::pair<std::string, std::string>> ext = {
      {"mild", "severe"}, {"small", "large"}, {"minimal", "extensive"}};
  for (const auto& [a, b] : ext) {
    CHECK(extent_antonym(a) == b);
    CHECK(extent_antonym(b) == a);
    CHECK(extent_antonym(*extent_antonym(a)) == a);
  }
  CHECK_FALSE(location_antonym("zone.").has_value());
  CHECK_FALSE(location_antonym("small").has_value());
  CHECK_FALSE(extent_antonym("left").has_value());
  CHECK_FALSE(extent_antonym("").has_value());
}

TEST_CASE("location flip edits exactly one token, reversibly") {
  const sd::Study s = fake_abnormal(sd::ClassId::alphora, sd::Extent::small, sd::Horiz::left,
                                    sd::Vert::upper, "a");
  Rng rng(3);
  std::map<int, int> edited_position_counts;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto swap = inject_location_error(s.report, rng);
    REQUIRE(swap.has_value());
    REQUIRE(swap->positions.size() == 1);
    CHECK(token_diff_count(s.report, swap->report) == 1);
    const auto before = joined_tokens(s.report);
    const auto after = joined_tokens(swap->report);
    const int pos = swap->positions[0];
    CHECK(before[static_cast<std::size_t>(pos)] !=
          after[static_cast<std::size_t>(pos)]);
    CHECK(location_antonym(after[static_cast<std::size_t>(pos)]) ==
          before[static_cast<std::size_t>(pos)]);
    ++edited_position_counts[pos];
  }
  // "left" and "upper" are the two candidates; the draw is uniform.
  REQUIRE(edited_position_counts.size() == 2);
  for (const auto& [pos, count] : edited_position_counts) {
    (void)pos;
    CHECK(std::abs(count / 1000.0 - 0.5) < 0.05);
  }
  // The negation report has no location words.
  CHECK_FALSE(inject_location_error(fake_healthy("h").report, rng).has_value());
}

TEST_CASE("extent flip swaps the single extent word") {
  const sd::Study s = fake_abnormal(sd::ClassId::betuna, sd::Extent::small, sd::Horiz::right,
                                    sd::Vert::lower, "b");
  Rng rng(4);
  const auto swap = inject_extent_error(s.report, rng);
  REQUIRE(swap.has_value());
  CHECK(token_diff_count(s.report, swap->report) == 1);
  const auto after = joined_tokens(swap->report);
  CHECK(after[static_cast<std::size_t>(swap->positions[0])] == "large");
  // Flipping the corrupted report restores the original.
  const auto back = inject_extent_error(swap->report, rng);
  REQUIRE(back.has_value());
  CHECK(back->report == s.report);
  CHECK_FALSE(inject_extent_error(fake_healthy("h").report, rng).has_value());
}

TEST_CASE("mismatch takes a verbatim report from a different label class") {
  std::vector<sd::Study> corpus;
  corpus.push_back(fake_abnormal(sd::ClassId::alphora, sd::Extent::small, sd::Horiz::left,
                                 sd::Vert::upper, "anchor"));
  corpus.push_back(fake_abnormal(sd::ClassId::betuna, sd::Extent::large, sd::Horiz::right,
                                 sd::Vert::lower, "other"));
  Rng rng(5);
  const auto swap = inject_mismatch(corpus[0], corpus, rng);
  REQUIRE(swap.has_value());
  CHECK(swap->report == corpus[1].report);  // only possible choice
  CHECK(swap->source_study_id == "other");

  // Same-class studies are never eligible.
  for (int k = 0; k < 3; ++k) {
    corpus.push_back(fake_abnormal(sd::ClassId::alphora, sd::Extent::large, sd::Horiz::right,
                                   sd::Vert::upper, "same" + std::to_string(k)));
  }
  for (int rep = 0; rep < 1000; ++rep) {
    const auto sw = inject_mismatch(corpus[0], corpus, rng);
    REQUIRE(sw.has_value());
    CHECK(parsed_classes(sw->report) != parsed_classes(corpus[0].report));
  }

  // Degenerate corpus: everything shares the anchor's label class.
  std::vector<sd::Study> mono = {corpus[0], corpus[2], corpus[3], corpus[4]};
  CHECK_FALSE(inject_mismatch(mono[0], mono, rng).has_value());
}

TEST_CASE("mismatch draws uniformly over the eligible studies") {
  std::vector<sd::Study> corpus;
  corpus.push_back(fake_abnormal(sd::ClassId::alphora, sd::Extent::small, sd::Horiz::left,
                                 sd::Vert::upper, "anchor"));
  for (int k = 0; k < 10; ++k) {
    corpus.push_back(fake_abnormal(sd::ClassId::betuna,
                                   k % 2 == 0 ? sd::Extent::small : sd::Extent::large,
                                   k % 2 == 0 ? sd::Horiz::left : sd::Horiz::right,
                                   k < 5 ? sd::Vert::upper : sd::Vert::lower,
                                   "eligible" + std::to_string(k)));
  }
  Rng rng(6);
  std::map<std::string, int> counts;
  const int n = 10000;
  for (int rep = 0; rep < n; ++rep) {
    const auto swap = inject_mismatch(corpus[0], corpus, rng);
    ++counts[swap->source_study_id];
  }
  CHECK(counts.size() == 10);
  for (const auto& [id, count] : counts) {
    (void)id;
    CHECK(std::abs(count / static_cast<double>(n) - 0.1) < 0.03);
  }
}

TEST_CASE("false positive picks abnormal classes uniformly regardless of counts") {
  std::vector<sd::Study> corpus;
  corpus.push_back(fake_healthy("anchor"));
  // Deliberately unbalanced class populations: 5, 10, 15 studies.
  const std::vector<std::pair<sd::ClassId, int>> pops = {
      {sd::ClassId::alphora, 5}, {sd::ClassId::betuna, 10}, {sd::ClassId::gamron, 15}};
  for (const auto& [cls, n] : pops) {
    for (int k = 0; k < n; ++k) {
      corpus.push_back(fake_abnormal(cls, sd::Extent::small, sd::Horiz::left, sd::Vert::upper,
                                     sd::class_name(cls) + std::to_string(k)));
    }
  }
  Rng rng(7);
  std::map<sd::ClassId, int> class_counts;
  const int n = 10000;
  for (int rep = 0; rep < n; ++rep) {
    const auto swap = inject_false_positive(corpus[0], corpus, rng);
    REQUIRE(swap.has_value());
    const auto classes = parsed_classes(swap->report);
    REQUIRE(classes.size() == 1);
    ++class_counts[*classes.begin()];
  }
  CHECK(class_counts.size() == 3);
  for (const auto& [cls, count] : class_counts) {
    (void)cls;
    CHECK(std::abs(count / static_cast<double>(n) - 1.0 / 3.0) < 0.03);
  }
  // Inapplicable on abnormal studies.
  CHECK_FALSE(inject_false_positive(corpus[1], corpus, rng).has_value());
}

TEST_CASE("false negative swaps in a no-finding report") {
  std::vector<sd::Study> corpus;
  corpus.push_back(fake_abnormal(sd::ClassId::deltex, sd::Extent::large, sd::Horiz::right,
                                 sd::Vert::upper, "anchor"));
  corpus.push_back(fake_healthy("h0"));
  corpus.push_back(fake_healthy("h1"));
  Rng rng(8);
  for (int rep = 0; rep < 200; ++rep) {
    const auto swap = inject_false_negative(corpus[0], corpus, rng);
    REQUIRE(swap.has_value());
    CHECK(parsed_classes(swap->report).empty());
  }
  CHECK_FALSE(inject_false_negative(corpus[1], corpus, rng).has_value());
  // No healthy study available.
  std::vector<sd::Study> all_abnormal = {corpus[0]};
  CHECK_FALSE(inject_false_negative(corpus[0], all_abnormal, rng).has_value());
}

TEST_CASE("corrupt never fires at p=0 and always fires at p=1") {
  std::vector<sd::Study> corpus;
  for (int k = 0; k < 20; ++k) {
    corpus.push_back(k % 2 == 0 ? fake_abnormal(sd::ClassId::alphora, sd::Extent::small,
                                                sd::Horiz::left, sd::Vert::upper,
                                                "a" + std::to_string(k))
                                : fake_healthy("h" + std::to_string(k)));
  }
  Rng rng(9);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto rec = corrupt(corpus[rep % corpus.size()], corpus, 0.0, rng);
    CHECK(rec.type == ErrorType::none);
    CHECK(rec.corrupted == rec.original);
    CHECK_FALSE(rec.inapplicable);
  }
  for (int rep = 0; rep < 1000; ++rep) {
    const auto rec = corrupt(corpus[rep % corpus.size()], corpus, 1.0, rng);
    CHECK(rec.type != ErrorType::none);
    CHECK(rec.corrupted != rec.original);
  }
  CHECK_THROWS_AS(corrupt(corpus[0], corpus, 1.5, rng), cvl::DataError);
}

TEST_CASE("corrupt type mix is uniform over the applicable types at p=1") {
  std::vector<sd::Study> corpus;
  const std::vector<sd::ClassId> classes = {sd::ClassId::alphora, sd::ClassId::betuna,
                                            sd::ClassId::gamron};
  for (int k = 0; k < 6000; ++k) {
    const auto cls = classes[static_cast<std::size_t>(k % 3)];
    corpus.push_back(fake_abnormal(cls, k % 2 == 0 ? sd::Extent::small : sd::Extent::large,
                                   k % 4 < 2 ? sd::Horiz::left : sd::Horiz::right,
                                   k % 8 < 4 ? sd::Vert::upper : sd::Vert::lower,
                                   "a" + std::to_string(k)));
  }
  for (int k = 0; k < 4000; ++k) corpus.push_back(fake_healthy("h" + std::to_string(k)));

  const auto corrupted = corrupt_corpus(corpus, 1.0, 42);
  std::map<ErrorType, int> abnormal_counts, healthy_counts;
  int abnormal_total = 0, healthy_total = 0;
  for (std::size_t k = 0; k < corrupted.size(); ++k) {
    const bool abnormal = !sd::label_set(corpus[k]).empty();
    if (abnormal) {
      ++abnormal_counts[corrupted[k].record.type];
      ++abnormal_total;
    } else {
      ++healthy_counts[corrupted[k].record.type];
      ++healthy_total;
    }
  }
  // Abnormal studies admit 4 types; healthy admit 2.
  REQUIRE(abnormal_counts.size() == 4);
  for (const auto& [t, c] : abnormal_counts) {
    (void)t;
    CHECK(std::abs(c / static_cast<double>(abnormal_total) - 0.25) < 0.02);
  }
  REQUIRE(healthy_counts.size() == 2);
  for (const auto& [t, c] : healthy_counts) {
    (void)t;
    CHECK(std::abs(c / static_cast<double>(healthy_total) - 0.5) < 0.02);
  }
}

TEST_CASE("corrupt fires at the configured probability") {
  std::vector<sd::Study> corpus;
  for (int k = 0; k < 10000; ++k) {
    corpus.push_back(k % 2 == 0 ? fake_abnormal(sd::ClassId::epsidia, sd::Extent::small,
                                                sd::Horiz::left, sd::Vert::lower,
                                                "a" + std::to_string(k))
                                : fake_healthy("h" + std::to_string(k)));
  }
  const auto corrupted = corrupt_corpus(corpus, 0.05, 11);
  int fired = 0;
  for (const auto& cs : corrupted) {
    if (cs.record.type != ErrorType::none) ++fired;
  }
  CHECK(std::abs(fired / 10000.0 - 0.05) < 0.01);
}

TEST_CASE("each error type disturbs the ground truth in exactly its own way") {
  auto mix = sd::uniform_class_mix();
  sd::RenderConfig rc;
  rc.height = 8;
  rc.width = 8;
  const auto corpus = sd::generate_corpus(400, mix, 77, rc);
  const auto corrupted = corrupt_corpus(corpus, 1.0, 78);

  int checked = 0;
  for (std::size_t k = 0; k < corrupted.size(); ++k) {
    const auto& rec = corrupted[k].record;
    if (rec.type == ErrorType::none) continue;
    ++checked;
    const auto truth = sd::parse_report(corpus[k].report);
    const auto seen = sd::parse_report(rec.corrupted);
    REQUIRE(truth.has_value());
    REQUIRE(seen.has_value());  // every corruption stays inside the grammar
    switch (rec.type) {
      case ErrorType::location: {
        REQUIRE(truth->size() == seen->size());
        const auto& a = (*truth)[0];
        const auto& b = (*seen)[0];
        CHECK(a.cls == b.cls);
        CHECK(a.extent == b.extent);
        CHECK(a.zone != b.zone);  // only the zone moved
        break;
      }
      case ErrorType::extent: {
        const auto& a = (*truth)[0];
        const auto& b = (*seen)[0];
        CHECK(a.cls == b.cls);
        CHECK(a.zone == b.zone);
        CHECK(a.extent != b.extent);
        break;
      }
      case ErrorType::mismatch:
        CHECK(parsed_classes(corpus[k].report) != parsed_classes(rec.corrupted));
        break;
      case ErrorType::false_negative:
        CHECK_FALSE(parsed_classes(corpus[k].report).empty());
        CHECK(parsed_classes(rec.corrupted).empty());
        break;
      case ErrorType::false_positive:
        CHECK(parsed_classes(corpus[k].report).empty());
        CHECK_FALSE(parsed_classes(rec.corrupted).empty());
        break;
      case ErrorType::none:
        break;
    }
  }
  CHECK(checked == 400);  // p=1 with a rich corpus: every study corrupted
}

TEST_CASE("corruption preserves ids, images, and findings, and is deterministic") {
  auto mix = sd::uniform_class_mix();
  sd::RenderConfig rc;
  rc.height = 8;
  rc.width = 8;
  const auto corpus = sd::generate_corpus(60, mix, 5, rc);
  const auto a = corrupt_corpus(corpus, 0.7, 123);
  const auto b = corrupt_corpus(corpus, 0.7, 123);
  REQUIRE(a.size() == corpus.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].study.study_id == corpus[k].study_id);
    CHECK(a[k].study.image == corpus[k].image);
    CHECK(a[k].study.findings == corpus[k].findings);
    CHECK(a[k].study.report == a[k].record.corrupted);
    CHECK(a[k].record == b[k].record);
  }
}

TEST_CASE("corrupted sets round-trip through the line format") {
  auto mix = sd::uniform_class_mix();
  sd::RenderConfig rc;
  rc.height = 8;
  rc.width = 8;
  const auto corpus = sd::generate_corpus(20, mix, 9, rc);
  const auto set = corrupt_corpus(corpus, 0.7, 10);

  const std::string path = "errorsim_test_tmp.jsonl";
  save_corrupted(path, set);
  const auto back = load_corrupted(path);
  REQUIRE(back.size() == set.size());
  for (std::size_t k = 0; k < set.size(); ++k) {
    CHECK(back[k].study.study_id == set[k].study.study_id);
    CHECK(back[k].study.image == set[k].study.image);
    CHECK(back[k].study.report == set[k].study.report);
    CHECK(back[k].study.findings == set[k].study.findings);
    CHECK(back[k].record == set[k].record);
  }

  // Second save is byte-identical; the file still loads as a plain corpus.
  std::ifstream f1(path, std::ios::binary);
  std::stringstream s1;
  s1 << f1.rdbuf();
  const std::string path2 = "errorsim_test_tmp2.jsonl";
  save_corrupted(path2, back);
  std::ifstream f2(path2, std::ios::binary);
  std::stringstream s2;
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());

  const auto plain = sd::load_corpus(path);
  REQUIRE(plain.size() == set.size());
  CHECK(plain[0].report == set[0].study.report);

  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("corrupt flags studies with no applicable type") {
  // A corpus of identical healthy studies: no mismatch donor, no abnormal
  // report to borrow.
  std::vector<sd::Study> corpus = {fake_healthy("h0"), fake_healthy("h1")};
  Rng rng(12);
  const auto rec = corrupt(corpus[0], corpus, 1.0, rng);
  CHECK(rec.type == ErrorType::none);
  CHECK(rec.inapplicable);
  CHECK(rec.corrupted == rec.original);
}
