#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace sae {

/// One unit x period observation. `y` is absent for units whose response
/// was never observed (never a sentinel value).
struct UnitRecord {
  std::string domain_id;
  std::string unit_id;
  int period = 1;  // 1-based, <= M
  std::optional<double> y;
  std::vector<double> x;
  bool in_sample = false;
};

/// Column-name mapping for CSV ingestion. An empty `aux` list means
/// "every column not otherwise claimed is an auxiliary".
struct Schema {
  std::string domain = "domain";
  std::string unit = "unit";
  std::string period = "period";
  std::string in_sample = "in_sample";
  std::string y = "y";
  std::vector<std::string> aux;
};

/// Wildcard accepted by subset_mask in place of a domain id.
inline constexpr const char* kAllDomains = "*";

/// Longitudinal population frame: N_(L) unit x period rows with p
/// auxiliaries each. Immutable after construction; safe to share across
/// concurrent readers.
class LongFrame {
 public:
  /// Validates all invariants (unique (domain,unit,period), finite
  /// auxiliaries of equal length, y present on in_sample rows).
  static LongFrame from_rows(std::vector<UnitRecord> rows,
                             std::vector<std::string> aux_names);

  const std::vector<UnitRecord>& rows() const { return rows_; }
  const UnitRecord& row(std::size_t i) const { return rows_[i]; }
  const std::vector<std::string>& aux_names() const { return aux_names_; }
  std::size_t n_aux() const { return aux_names_.size(); }

  std::size_t n_rows() const { return rows_.size(); }      // N_(L)
  std::size_t n_sampled() const { return n_sampled_; }     // n_(L)
  int n_periods() const { return n_periods_; }             // M
  const std::vector<std::string>& domains() const { return domains_; }

  /// Index of a named auxiliary column; throws LookupError if absent.
  std::size_t aux_index(const std::string& name) const;

  /// Row indices of in_sample rows, in frame order.
  std::vector<std::size_t> sampled_indices() const;
  /// Row indices of non-sampled rows, in frame order.
  std::vector<std::size_t> unsampled_indices() const;

  /// Same unit set in every period?
  bool is_balanced_panel() const;

  /// Copy with the in_sample flags replaced (y values untouched).
  LongFrame with_sample_flags(const std::vector<bool>& flags) const;
  /// Copy with every row's y set from a full-length response vector; the
  /// sample flags are kept. Used by bootstrap and simulation.
  LongFrame with_response(const std::vector<double>& y_full) const;

 private:
  LongFrame() = default;
  std::vector<UnitRecord> rows_;
  std::vector<std::string> aux_names_;
  std::vector<std::string> domains_;  // order of first appearance
  std::size_t n_sampled_ = 0;
  int n_periods_ = 0;
};

/// Reads a CSV file (header row, UTF-8, '.' decimal separator) into a
/// LongFrame. Row order is preserved.
LongFrame load_frame(const std::string& path, const Schema& schema = {});

/// Writes the frame back with a fixed header order
/// (domain,unit,period,in_sample,y,aux...); load_frame o write_frame is
/// a byte-identical round trip on the data section.
void write_frame(const LongFrame& frame, const std::string& path);

/// Panel sampling design: floor(fraction * N) units drawn by simple
/// random sampling without replacement in period 1; the same units are
/// flagged in_sample in every period. Requires a balanced panel.
LongFrame draw_panel_sample(const LongFrame& frame, double fraction,
                            std::uint64_t seed);

/// All row indices (sampled and unsampled) of a domain x period subset;
/// domain may be kAllDomains. Empty intersections are a LookupError.
std::vector<std::size_t> subset_mask(const LongFrame& frame,
                                     const std::string& domain, int period);

}  // namespace sae
