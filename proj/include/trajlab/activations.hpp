#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace trajlab {

enum class Marker { reasoning_step, code_step, code_token, image_pooled, code_pooled };

std::string_view to_string(Marker m);
std::optional<Marker> marker_from_string(std::string_view name);

struct RecordHeader {
  std::string sample_id;
  int layer = 0;
  Marker marker = Marker::reasoning_step;
  int step = 0;         // 0 when not applicable
  int token_index = 0;  // 0 when not applicable
  std::size_t row = 0;

  auto key() const { return std::tie(sample_id, layer, marker, step, token_index); }

  friend bool operator==(const RecordHeader&, const RecordHeader&) = default;
};

/// A header together with a view of its row in the owning set's buffer.
struct ActivationRecord {
  const RecordHeader* header = nullptr;
  std::span<const float> vector;
};

/// Hidden-state dump: one float32 row of `dim` values per manifest entry,
/// rows stored in manifest order.
class ActivationSet {
 public:
  ActivationSet() = default;
  explicit ActivationSet(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return manifest_.size(); }
  bool empty() const noexcept { return manifest_.empty(); }

  const std::vector<RecordHeader>& manifest() const noexcept { return manifest_; }
  const std::vector<float>& storage() const noexcept { return storage_; }

  ActivationRecord record(std::size_t i) const;
  std::span<const float> row(std::size_t i) const;

  /// Appends a record; its row index is assigned. Throws FormatError on a
  /// dimension mismatch, non-finite value, or duplicate key.
  const RecordHeader& add(std::string sample_id, int layer, Marker marker, int step, int token_index,
                          std::span<const float> vector);

  /// Validates all invariants; throws FormatError.
  void validate() const;

  /// Free-form JSON object carried in the manifest (e.g. extraction settings).
  std::string metadata_json;

  friend bool operator==(const ActivationSet&, const ActivationSet&) = default;

 private:
  friend ActivationSet read_dump(const std::filesystem::path& dir);

  std::size_t dim_ = 0;
  std::vector<RecordHeader> manifest_;
  std::vector<float> storage_;
  std::set<std::tuple<std::string, int, Marker, int, int>> keys_;
};

inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kVectorsFile = "vectors.f32";

/// Reads manifest.json + vectors.f32 from `dir`. Throws FormatError, IoError.
ActivationSet read_dump(const std::filesystem::path& dir);

/// Writes the two dump files into `dir` (created if needed). Throws IoError.
void write_dump(const ActivationSet& set, const std::filesystem::path& dir);

struct RecordFilter {
  std::optional<std::set<int>> layers;
  std::optional<std::set<Marker>> markers;
  std::optional<std::set<int>> steps;
  std::optional<std::set<std::string>> sample_ids;

  bool matches(const RecordHeader& h) const;
};

/// Records matching every provided filter, in manifest order.
std::vector<ActivationRecord> select(const ActivationSet& set, const RecordFilter& filter);

}  // namespace trajlab
