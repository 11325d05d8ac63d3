#include "sae/frame.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>
#include <unordered_set>

#include "sae/errors.hpp"
#include "sae/rng.hpp"

namespace sae {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

double parse_double(const std::string& s, const std::string& what,
                    std::size_t line_no) {
  double v{};
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || !std::isfinite(v)) {
    throw ParseError("non-numeric " + what + " value '" + s + "' at data row " +
                     std::to_string(line_no));
  }
  return v;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

LongFrame LongFrame::from_rows(std::vector<UnitRecord> rows,
                               std::vector<std::string> aux_names) {
  LongFrame f;
  f.rows_ = std::move(rows);
  f.aux_names_ = std::move(aux_names);

  std::set<std::tuple<std::string, std::string, int>> seen;
  std::unordered_set<std::string> seen_domain;
  int max_period = 0;
  for (std::size_t i = 0; i < f.rows_.size(); ++i) {
    const UnitRecord& r = f.rows_[i];
    if (r.period < 1) {
      throw IntegrityError("period " + std::to_string(r.period) +
                           " out of range at row " + std::to_string(i));
    }
    if (r.x.size() != f.aux_names_.size()) {
      throw IntegrityError("row " + std::to_string(i) + " has " +
                           std::to_string(r.x.size()) + " auxiliaries, expected " +
                           std::to_string(f.aux_names_.size()));
    }
    for (double v : r.x) {
      if (!std::isfinite(v)) {
        throw IntegrityError("non-finite auxiliary at row " + std::to_string(i));
      }
    }
    if (r.in_sample && (!r.y || !std::isfinite(*r.y))) {
      throw IntegrityError("in_sample row (" + r.domain_id + "," + r.unit_id +
                           "," + std::to_string(r.period) +
                           ") has no finite response");
    }
    if (!seen.insert({r.domain_id, r.unit_id, r.period}).second) {
      throw IntegrityError("duplicate (domain,unit,period) = (" + r.domain_id +
                           "," + r.unit_id + "," + std::to_string(r.period) +
                           ")");
    }
    if (seen_domain.insert(r.domain_id).second) {
      f.domains_.push_back(r.domain_id);
    }
    if (r.in_sample) ++f.n_sampled_;
    max_period = std::max(max_period, r.period);
  }
  f.n_periods_ = max_period;
  return f;
}

std::size_t LongFrame::aux_index(const std::string& name) const {
  auto it = std::find(aux_names_.begin(), aux_names_.end(), name);
  if (it == aux_names_.end()) {
    throw LookupError("unknown auxiliary column '" + name + "'");
  }
  return static_cast<std::size_t>(it - aux_names_.begin());
}

std::vector<std::size_t> LongFrame::sampled_indices() const {
  std::vector<std::size_t> idx;
  idx.reserve(n_sampled_);
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (rows_[i].in_sample) idx.push_back(i);
  }
  return idx;
}

std::vector<std::size_t> LongFrame::unsampled_indices() const {
  std::vector<std::size_t> idx;
  idx.reserve(rows_.size() - n_sampled_);
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (!rows_[i].in_sample) idx.push_back(i);
  }
  return idx;
}

bool LongFrame::is_balanced_panel() const {
  std::map<int, std::set<std::pair<std::string, std::string>>> by_period;
  for (const UnitRecord& r : rows_) {
    by_period[r.period].insert({r.domain_id, r.unit_id});
  }
  if (by_period.empty()) return true;
  if (static_cast<int>(by_period.size()) != n_periods_) return false;
  const auto& first = by_period.begin()->second;
  for (const auto& [t, units] : by_period) {
    if (units != first) return false;
  }
  return true;
}

LongFrame LongFrame::with_sample_flags(const std::vector<bool>& flags) const {
  if (flags.size() != rows_.size()) {
    throw ShapeError("sample flag vector length mismatch");
  }
  std::vector<UnitRecord> rows = rows_;
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].in_sample = flags[i];
  return from_rows(std::move(rows), aux_names_);
}

LongFrame LongFrame::with_response(const std::vector<double>& y_full) const {
  if (y_full.size() != rows_.size()) {
    throw ShapeError("response vector length mismatch");
  }
  std::vector<UnitRecord> rows = rows_;
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].y = y_full[i];
  return from_rows(std::move(rows), aux_names_);
}

LongFrame load_frame(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file '" + path + "'");
  const std::vector<std::string> header = split_csv_line(line);

  auto col_of = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw SchemaError("missing column '" + name + "' in '" + path + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };

  const std::size_t c_domain = col_of(schema.domain);
  const std::size_t c_unit = col_of(schema.unit);
  const std::size_t c_period = col_of(schema.period);
  const std::size_t c_sample = col_of(schema.in_sample);
  const std::size_t c_y = col_of(schema.y);

  std::vector<std::string> aux_names = schema.aux;
  if (aux_names.empty()) {
    const std::set<std::size_t> claimed{c_domain, c_unit, c_period, c_sample,
                                        c_y};
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (!claimed.count(i)) aux_names.push_back(header[i]);
    }
  }
  std::vector<std::size_t> c_aux;
  for (const std::string& name : aux_names) c_aux.push_back(col_of(name));

  std::vector<UnitRecord> rows;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++line_no;
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw ParseError("row " + std::to_string(line_no) + " has " +
                       std::to_string(f.size()) + " fields, expected " +
                       std::to_string(header.size()));
    }
    UnitRecord r;
    r.domain_id = f[c_domain];
    r.unit_id = f[c_unit];
    r.period = static_cast<int>(parse_double(f[c_period], "period", line_no));
    const std::string& s = f[c_sample];
    if (s != "0" && s != "1") {
      throw ParseError("in_sample must be 0 or 1, got '" + s +
                       "' at data row " + std::to_string(line_no));
    }
    r.in_sample = (s == "1");
    if (!f[c_y].empty()) r.y = parse_double(f[c_y], "response", line_no);
    r.x.reserve(c_aux.size());
    for (std::size_t a = 0; a < c_aux.size(); ++a) {
      r.x.push_back(
          parse_double(f[c_aux[a]], "auxiliary " + aux_names[a], line_no));
    }
    rows.push_back(std::move(r));
  }
  return LongFrame::from_rows(std::move(rows), std::move(aux_names));
}

void write_frame(const LongFrame& frame, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open file '" + path + "' for writing");
  out << "domain,unit,period,in_sample,y";
  for (const std::string& name : frame.aux_names()) out << "," << name;
  out << "\n";
  for (const UnitRecord& r : frame.rows()) {
    out << r.domain_id << "," << r.unit_id << "," << r.period << ","
        << (r.in_sample ? "1" : "0") << ",";
    if (r.y) out << format_double(*r.y);
    for (double v : r.x) out << "," << format_double(v);
    out << "\n";
  }
}

LongFrame draw_panel_sample(const LongFrame& frame, double fraction,
                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw DesignError("sample fraction must lie in (0,1]");
  }
  if (!frame.is_balanced_panel()) {
    throw DesignError("panel sampling requires a balanced panel");
  }

  // distinct units, in order of first appearance
  std::vector<std::pair<std::string, std::string>> units;
  std::set<std::pair<std::string, std::string>> seen;
  for (const UnitRecord& r : frame.rows()) {
    std::pair<std::string, std::string> key{r.domain_id, r.unit_id};
    if (seen.insert(key).second) units.push_back(std::move(key));
  }
  const std::size_t n_units = units.size();
  const std::size_t n_sample =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n_units)));
  if (n_sample == 0) {
    throw DesignError("fraction " + std::to_string(fraction) +
                      " yields an empty sample from " +
                      std::to_string(n_units) + " units");
  }

  rng::Stream stream = rng::derive(seed, "panel");
  const std::vector<std::size_t> perm = stream.permutation(n_units);
  std::set<std::pair<std::string, std::string>> chosen;
  for (std::size_t k = 0; k < n_sample; ++k) chosen.insert(units[perm[k]]);

  std::vector<bool> flags(frame.n_rows());
  for (std::size_t i = 0; i < frame.n_rows(); ++i) {
    const UnitRecord& r = frame.row(i);
    flags[i] = chosen.count({r.domain_id, r.unit_id}) > 0;
  }
  return frame.with_sample_flags(flags);
}

std::vector<std::size_t> subset_mask(const LongFrame& frame,
                                     const std::string& domain, int period) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < frame.n_rows(); ++i) {
    const UnitRecord& r = frame.row(i);
    if (r.period == period && (domain == kAllDomains || r.domain_id == domain)) {
      idx.push_back(i);
    }
  }
  if (idx.empty()) {
    throw LookupError("no rows for domain '" + domain + "' in period " +
                      std::to_string(period));
  }
  return idx;
}

}  // namespace sae
