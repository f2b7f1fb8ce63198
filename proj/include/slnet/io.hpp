#pragma once

// Point files, checkpoints and dataset directories. All binary data is
// little-endian regardless of the host.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "slnet/train.hpp"

namespace slnet {

/// Malformed or truncated input. `offset` is the byte position where reading
/// failed (for CSV, the start of the offending line).
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset(offset) {}
  std::uint64_t offset;
};

struct PointCloud {
  std::size_t dims = 3;        ///< 3 (xyz) or 6 (xyz + normal)
  std::vector<float> values;   ///< N x dims, row-major
  std::vector<std::int32_t> labels;  ///< empty or one per point

  std::size_t size() const { return dims ? values.size() / dims : 0; }
  bool has_labels() const { return !labels.empty(); }
  /// The xyz columns.
  std::vector<float> xyz() const;
};

/// Binary layout: "SLPC", u32 version = 1, u64 N, u32 dims, u32 has_labels,
/// N*dims f32, then N i32 labels when present.
void write_points(std::ostream& out, const PointCloud& cloud);
PointCloud read_points(std::istream& in);

/// CSV rows `x,y,z[,nx,ny,nz][,label]` with an optional header line.
void write_points_csv(std::ostream& out, const PointCloud& cloud);
PointCloud read_points_csv(std::istream& in);

/// Chooses CSV for a `.csv` extension and the binary format otherwise.
void save_points(const std::filesystem::path& path, const PointCloud& cloud);
/// Detects the format from the leading bytes.
PointCloud load_points(const std::filesystem::path& path);

/// Binary layout: "SLCK", u32 version = 1, u32 length + config text, u32 count
/// of named blobs (parameters, then buffers), u32 has_ema, and when set:
/// u64 steps, f64 rho, and one blob per parameter and buffer in the same order.
/// A blob is u32 name length, name bytes, u32 rank, u64 dims, f32 values.
void write_checkpoint(std::ostream& out, const SLNet<float>& model, const Ema<float>* ema = nullptr);

struct LoadedCheckpoint {
  std::unique_ptr<SLNet<float>> model;
  std::unique_ptr<Ema<float>> ema;  ///< null when the checkpoint has no averaged weights
};

LoadedCheckpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const SLNet<float>& model, const Ema<float>* ema = nullptr);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// A directory of point files with `<split>.lst` indexes (`relative/path label`
/// per line), `classes.txt` (one name per line) and `parts.txt` (`first last`
/// part-label range per class).
struct DatasetInfo {
  std::vector<std::string> class_names;
  std::vector<std::pair<int, int>> part_ranges;
};

void write_dataset(const std::filesystem::path& dir, const std::vector<std::string>& class_names,
                   const std::vector<std::pair<int, int>>& part_ranges, const std::vector<LabeledCloud>& train,
                   const std::vector<LabeledCloud>& test);
DatasetInfo read_dataset_info(const std::filesystem::path& dir);
/// Loads one split. Clouds are centered and scaled into the unit sphere unless
/// `normalize` is false; per-point labels become part labels.
std::vector<LabeledCloud> read_split(const std::filesystem::path& dir, const std::string& split, bool normalize = true);

}  // namespace slnet
