#pragma once

#include "fec/denoiser.hpp"
#include "fec/mask.hpp"
#include "fec/sampling.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>

namespace fec {

inline constexpr std::uint32_t kFormatVersion = 1;

/// Payload precision of the binary files. In-memory arithmetic is always 64-bit.
enum class FloatWidth : std::uint32_t { f32 = 4, f64 = 8 };

FloatWidth parse_precision(int bits);

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_trajectory(std::ostream& out, const Trajectory& traj, FloatWidth width = FloatWidth::f64);
Trajectory read_trajectory(std::istream& in);
void save_trajectory(const std::filesystem::path& path, const Trajectory& traj, FloatWidth width = FloatWidth::f64);
Trajectory load_trajectory(const std::filesystem::path& path);

/// Each entry carries a presence byte (bit b set when branch b is stored) followed by
/// K[branch][token][dim] and V[branch][token][dim] for the present branches.
void write_kv_cache(std::ostream& out, const KVCache& cache, FloatWidth width = FloatWidth::f64);
KVCache read_kv_cache(std::istream& in);
void save_kv_cache(const std::filesystem::path& path, const KVCache& cache, FloatWidth width = FloatWidth::f64);
KVCache load_kv_cache(const std::filesystem::path& path);

/// Masks share the trajectory layout with one channel. A file with zero steps holds a single mask at t = 0
/// that applies at every step; otherwise the t = 0 record is the fallback for unlisted timesteps.
struct MaskFile {
    std::map<Timestep, EditMask, std::greater<>> scheduled;
    EditMask fallback;

    std::unique_ptr<MaskProvider> provider() const;
};

void write_mask_file(std::ostream& out, const MaskFile& masks, FloatWidth width = FloatWidth::f64);
MaskFile read_mask_file(std::istream& in);
void save_mask(const std::filesystem::path& path, const EditMask& mask, FloatWidth width = FloatWidth::f64);
void save_mask_file(const std::filesystem::path& path, const MaskFile& masks, FloatWidth width = FloatWidth::f64);
MaskFile load_mask_file(const std::filesystem::path& path);

}  // namespace fec
