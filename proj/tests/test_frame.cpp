#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "sae/errors.hpp"
#include "sae/frame.hpp"

using namespace sae;

namespace {

struct TempCsv {
  std::string path;
  explicit TempCsv(const std::string& content) {
    static int counter = 0;
    path = "test_frame_tmp_" + std::to_string(counter++) + ".csv";
    std::ofstream out(path, std::ios::binary);
    out << content;
  }
  ~TempCsv() { std::remove(path.c_str()); }
};

const char* kToy6 =
    "domain,unit,period,in_sample,y,x1\n"
    "A,u1,1,1,1.5,10\n"
    "A,u1,2,1,1.7,11\n"
    "A,u1,3,1,1.9,12\n"
    "B,u2,1,0,,20\n"
    "B,u2,2,0,,21\n"
    "B,u2,3,0,,22\n";

}  // namespace

TEST_CASE("load_frame counts rows, domains, periods") {
  TempCsv csv(kToy6);
  const LongFrame f = load_frame(csv.path);
  CHECK(f.n_rows() == 6);
  CHECK(f.n_periods() == 3);
  CHECK(f.n_sampled() == 3);
  CHECK(f.domains().size() == 2);
  CHECK(f.aux_names() == std::vector<std::string>{"x1"});
}

TEST_CASE("load_frame rejects duplicate (domain,unit,period)") {
  TempCsv csv(
      "domain,unit,period,in_sample,y,x1\n"
      "A,u1,1,1,1.5,10\n"
      "A,u1,1,1,1.6,10\n");
  CHECK_THROWS_WITH_AS(load_frame(csv.path),
                       doctest::Contains("(A,u1,1)"), IntegrityError);
}

TEST_CASE("load_frame rejects blank y on in_sample row") {
  TempCsv csv(
      "domain,unit,period,in_sample,y,x1\n"
      "A,u1,1,1,,10\n"
      "A,u2,1,0,,11\n");
  CHECK_THROWS_AS(load_frame(csv.path), IntegrityError);
}

TEST_CASE("load_frame reports missing column and bad numbers") {
  TempCsv no_col("domain,unit,period,y,x1\nA,u1,1,1.5,10\n");
  CHECK_THROWS_AS(load_frame(no_col.path), SchemaError);
  TempCsv bad_aux(
      "domain,unit,period,in_sample,y,x1\n"
      "A,u1,1,1,1.5,oops\n");
  CHECK_THROWS_AS(load_frame(bad_aux.path), ParseError);
}

TEST_CASE("write_frame round trip is byte identical") {
  TempCsv csv(kToy6);
  const LongFrame f = load_frame(csv.path);
  TempCsv out1(""), out2("");
  write_frame(f, out1.path);
  write_frame(load_frame(out1.path), out2.path);
  std::ifstream a(out1.path, std::ios::binary), b(out2.path, std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
  CHECK(!sa.str().empty());
}

namespace {

LongFrame balanced_frame(int n_domains, int units_per_domain, int n_periods) {
  std::vector<UnitRecord> rows;
  for (int d = 0; d < n_domains; ++d) {
    for (int u = 0; u < units_per_domain; ++u) {
      for (int t = 1; t <= n_periods; ++t) {
        UnitRecord r;
        r.domain_id = "D" + std::to_string(d);
        r.unit_id = "u" + std::to_string(d) + "_" + std::to_string(u);
        r.period = t;
        r.x = {static_cast<double>(d + u + t)};
        r.y = static_cast<double>(d * 10 + u + t);
        rows.push_back(r);
      }
    }
  }
  return LongFrame::from_rows(std::move(rows), {"x1"});
}

}  // namespace

TEST_CASE("draw_panel_sample: fraction 1 samples everything") {
  const LongFrame f = balanced_frame(2, 3, 2);
  const LongFrame s = draw_panel_sample(f, 1.0, 42);
  CHECK(s.n_sampled() == s.n_rows());
}

TEST_CASE("draw_panel_sample: floor(fraction*N) units per period") {
  const LongFrame f = balanced_frame(19, 20, 3);  // N = 380 units
  const LongFrame s = draw_panel_sample(f, 0.2, 7);
  // n = 0.2 * 380 = 76 units per period
  for (int t = 1; t <= 3; ++t) {
    int count = 0;
    for (const auto& r : s.rows()) {
      if (r.period == t && r.in_sample) ++count;
    }
    CHECK(count == 76);
  }
}

TEST_CASE("draw_panel_sample: same seed, same flags; panel property") {
  const LongFrame f = balanced_frame(4, 5, 3);
  const LongFrame s1 = draw_panel_sample(f, 0.4, 99);
  const LongFrame s2 = draw_panel_sample(f, 0.4, 99);
  std::set<std::string> first_period_units;
  for (std::size_t i = 0; i < s1.n_rows(); ++i) {
    CHECK(s1.row(i).in_sample == s2.row(i).in_sample);
    if (s1.row(i).period == 1 && s1.row(i).in_sample) {
      first_period_units.insert(s1.row(i).unit_id);
    }
  }
  // the same units are in the sample in every period
  for (int t = 2; t <= 3; ++t) {
    std::set<std::string> units_t;
    for (const auto& r : s1.rows()) {
      if (r.period == t && r.in_sample) units_t.insert(r.unit_id);
    }
    CHECK(units_t == first_period_units);
  }
}

TEST_CASE("draw_panel_sample rejects unbalanced panels and empty samples") {
  std::vector<UnitRecord> rows;
  UnitRecord a{.domain_id = "A", .unit_id = "u1", .period = 1, .y = 1.0, .x = {1.0}};
  UnitRecord b{.domain_id = "A", .unit_id = "u2", .period = 2, .y = 1.0, .x = {1.0}};
  rows.push_back(a);
  rows.push_back(b);
  const LongFrame unbalanced = LongFrame::from_rows(rows, {"x1"});
  CHECK_THROWS_AS(draw_panel_sample(unbalanced, 0.5, 1), DesignError);

  const LongFrame f = balanced_frame(2, 2, 1);  // 4 units
  CHECK_THROWS_AS(draw_panel_sample(f, 0.1, 1), DesignError);  // floor = 0
}

TEST_CASE("subset_mask: counts, wildcard, and lookup errors") {
  const LongFrame f = balanced_frame(3, 5, 2);
  CHECK(subset_mask(f, "D1", 2).size() == 5);
  CHECK(subset_mask(f, kAllDomains, 2).size() == 15);
  CHECK_THROWS_AS(subset_mask(f, "nope", 2), LookupError);
  CHECK_THROWS_AS(subset_mask(f, "D1", 9), LookupError);
}
