#include "trajlab/activations.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "trajlab/error.hpp"

namespace trajlab {
namespace {

constexpr std::array<std::pair<Marker, std::string_view>, 5> kMarkerNames{{
    {Marker::reasoning_step, "reasoning_step"},
    {Marker::code_step, "code_step"},
    {Marker::code_token, "code_token"},
    {Marker::image_pooled, "image_pooled"},
    {Marker::code_pooled, "code_pooled"},
}};

std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

void check_finite(std::span<const float> v, std::string_view who) {
  for (float x : v) {
    if (!std::isfinite(x)) throw FormatError(std::string(who) + ": vector contains NaN or Inf");
  }
}

}  // namespace

std::string_view to_string(Marker m) {
  for (const auto& [marker, name] : kMarkerNames) {
    if (marker == m) return name;
  }
  return "unknown";
}

std::optional<Marker> marker_from_string(std::string_view name) {
  for (const auto& [marker, n] : kMarkerNames) {
    if (n == name) return marker;
  }
  return std::nullopt;
}

ActivationRecord ActivationSet::record(std::size_t i) const { return {&manifest_.at(i), row(i)}; }

std::span<const float> ActivationSet::row(std::size_t i) const {
  return std::span<const float>(storage_).subspan(i * dim_, dim_);
}

const RecordHeader& ActivationSet::add(std::string sample_id, int layer, Marker marker, int step, int token_index,
                                       std::span<const float> vector) {
  if (dim_ == 0) throw FormatError("activation set has dimension 0");
  if (vector.size() != dim_) {
    throw FormatError("vector of length " + std::to_string(vector.size()) + " in a dump of dim " +
                      std::to_string(dim_));
  }
  if (layer < 0 || step < 0 || token_index < 0) throw FormatError("negative layer/step/token index");
  check_finite(vector, sample_id);
  auto [it, inserted] = keys_.emplace(sample_id, layer, marker, step, token_index);
  if (!inserted) throw FormatError("duplicate record key for sample " + sample_id);
  RecordHeader h{std::move(sample_id), layer, marker, step, token_index, manifest_.size()};
  manifest_.push_back(std::move(h));
  storage_.insert(storage_.end(), vector.begin(), vector.end());
  return manifest_.back();
}

void ActivationSet::validate() const {
  if (manifest_.size() * dim_ != storage_.size()) {
    throw FormatError("manifest has " + std::to_string(manifest_.size()) + " records of dim " +
                      std::to_string(dim_) + " but buffer holds " + std::to_string(storage_.size()) + " floats");
  }
  if (!manifest_.empty() && dim_ == 0) throw FormatError("dimension 0 with non-empty manifest");
  std::set<std::tuple<std::string, int, Marker, int, int>> seen;
  for (std::size_t i = 0; i < manifest_.size(); ++i) {
    const auto& h = manifest_[i];
    if (h.row != i) throw FormatError("record " + std::to_string(i) + " has row " + std::to_string(h.row));
    if (!seen.emplace(h.sample_id, h.layer, h.marker, h.step, h.token_index).second) {
      throw FormatError("duplicate record key for sample " + h.sample_id);
    }
  }
  check_finite(storage_, "vectors.f32");
}

ActivationSet read_dump(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestFile;
  const auto vectors_path = dir / kVectorsFile;

  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) throw IoError("cannot open " + manifest_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
  }

  ActivationSet set;
  try {
    const auto& dim = j.at("dim");
    if (!dim.is_number_unsigned()) throw FormatError("manifest dim must be a non-negative integer");
    set.dim_ = dim.get<std::size_t>();
    if (j.contains("metadata")) set.metadata_json = j["metadata"].dump();
    const auto& records = j.at("records");
    if (!records.is_array()) throw FormatError("manifest records must be an array");
    set.manifest_.reserve(records.size());
    for (const auto& r : records) {
      RecordHeader h;
      h.sample_id = r.at("sample_id").get<std::string>();
      h.layer = r.at("layer").get<int>();
      const auto marker_name = r.at("marker").get<std::string>();
      auto marker = marker_from_string(marker_name);
      if (!marker) throw FormatError("unknown marker '" + marker_name + "'");
      h.marker = *marker;
      h.step = r.at("step").get<int>();
      h.token_index = r.at("token_index").get<int>();
      h.row = r.at("row").get<std::size_t>();
      if (h.layer < 0 || h.step < 0 || h.token_index < 0) throw FormatError("negative index in manifest");
      set.manifest_.push_back(std::move(h));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest schema: " + std::string(e.what()));
  }

  std::ifstream vf(vectors_path, std::ios::binary | std::ios::ate);
  if (!vf) throw IoError("cannot open " + vectors_path.string());
  const auto bytes = static_cast<std::size_t>(vf.tellg());
  if (bytes % sizeof(float) != 0) {
    throw FormatError("vectors.f32 size " + std::to_string(bytes) + " is not a multiple of 4");
  }
  const std::size_t expected = set.manifest_.size() * set.dim_;
  if (bytes / sizeof(float) != expected) {
    throw FormatError("vectors.f32 holds " + std::to_string(bytes / sizeof(float)) + " floats, manifest needs " +
                      std::to_string(expected));
  }
  set.storage_.resize(expected);
  vf.seekg(0);
  if (expected > 0 && !vf.read(reinterpret_cast<char*>(set.storage_.data()), static_cast<std::streamsize>(bytes))) {
    throw IoError("short read on " + vectors_path.string());
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : set.storage_) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = byteswap32(u);
      std::memcpy(&f, &u, 4);
    }
  }

  set.validate();
  for (const auto& h : set.manifest_) set.keys_.emplace(h.sample_id, h.layer, h.marker, h.step, h.token_index);
  return set;
}

void write_dump(const ActivationSet& set, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  nlohmann::ordered_json j;
  j["dim"] = set.dim();
  if (!set.metadata_json.empty()) j["metadata"] = nlohmann::json::parse(set.metadata_json);
  auto records = nlohmann::ordered_json::array();
  for (const auto& h : set.manifest()) {
    nlohmann::ordered_json r;
    r["sample_id"] = h.sample_id;
    r["layer"] = h.layer;
    r["marker"] = std::string(to_string(h.marker));
    r["step"] = h.step;
    r["token_index"] = h.token_index;
    r["row"] = h.row;
    records.push_back(std::move(r));
  }
  j["records"] = std::move(records);

  {
    std::ofstream mf(dir / kManifestFile, std::ios::binary | std::ios::trunc);
    if (!mf) throw IoError("cannot write " + (dir / kManifestFile).string());
    mf << j.dump() << '\n';
    if (!mf) throw IoError("write failed for manifest");
  }

  std::ofstream vf(dir / kVectorsFile, std::ios::binary | std::ios::trunc);
  if (!vf) throw IoError("cannot write " + (dir / kVectorsFile).string());
  const auto& data = set.storage();
  if constexpr (std::endian::native == std::endian::little) {
    vf.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  } else {
    for (float f : data) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = byteswap32(u);
      vf.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  if (!vf) throw IoError("write failed for vectors.f32");
}

bool RecordFilter::matches(const RecordHeader& h) const {
  if (layers && !layers->contains(h.layer)) return false;
  if (markers && !markers->contains(h.marker)) return false;
  if (steps && !steps->contains(h.step)) return false;
  if (sample_ids && !sample_ids->contains(h.sample_id)) return false;
  return true;
}

std::vector<ActivationRecord> select(const ActivationSet& set, const RecordFilter& filter) {
  std::vector<ActivationRecord> out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (filter.matches(set.manifest()[i])) out.push_back(set.record(i));
  }
  return out;
}

}  // namespace trajlab
