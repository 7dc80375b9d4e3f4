#include "fec/io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <limits>
#include <ostream>

namespace fec {

namespace {

using Magic = std::array<char, 8>;

constexpr Magic kTrajMagic{'F', 'E', 'C', 'T', 'R', 'A', 'J', '1'};
constexpr Magic kKvMagic{'F', 'E', 'C', 'K', 'V', '1', '\0', '\0'};
constexpr Magic kMaskMagic{'F', 'E', 'C', 'M', 'A', 'S', 'K', '1'};

template <typename U>
void put_le(std::ostream& out, U v)
{
    static_assert(std::is_unsigned_v<U>);
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    out.write(buf, sizeof buf);
}

template <typename U>
U get_le(std::istream& in)
{
    unsigned char buf[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof buf)) {
        throw FormatError("unexpected end of file");
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(buf[i]) << (8 * i);
    }
    return v;
}

void put_u32(std::ostream& out, std::size_t v)
{
    if (v > std::numeric_limits<std::uint32_t>::max()) {
        throw FormatError("value does not fit a 32-bit header field");
    }
    put_le(out, static_cast<std::uint32_t>(v));
}

void put_i32(std::ostream& out, int v) { put_le(out, static_cast<std::uint32_t>(v)); }
int get_i32(std::istream& in) { return static_cast<std::int32_t>(get_le<std::uint32_t>(in)); }
void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

void put_value(std::ostream& out, double v, FloatWidth width)
{
    if (width == FloatWidth::f32) {
        put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
        put_f64(out, v);
    }
}

double get_value(std::istream& in, FloatWidth width)
{
    if (width == FloatWidth::f32) {
        return static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(in)));
    }
    return get_f64(in);
}

void put_values(std::ostream& out, std::span<const double> values, FloatWidth width)
{
    for (double v : values) {
        put_value(out, v, width);
    }
}

void get_values(std::istream& in, std::span<double> values, FloatWidth width)
{
    for (double& v : values) {
        v = get_value(in, width);
    }
}

void expect_magic(std::istream& in, const Magic& magic, const char* name)
{
    Magic got{};
    if (!in.read(got.data(), got.size()) || got != magic) {
        throw FormatError(std::string("not a ") + name + " file");
    }
    const auto version = get_le<std::uint32_t>(in);
    if (version != kFormatVersion) {
        throw FormatError(std::string(name) + " version " + std::to_string(version) + " is not supported");
    }
}

FloatWidth get_width(std::istream& in)
{
    const auto w = get_le<std::uint32_t>(in);
    if (w != 4 && w != 8) {
        throw FormatError("float width must be 4 or 8, got " + std::to_string(w));
    }
    return static_cast<FloatWidth>(w);
}

constexpr std::size_t kMaxTensorElements = std::size_t{1} << 28;

/// Rejects zero or absurd tensor dims before anything is allocated from them.
void require_plausible(std::initializer_list<std::size_t> dims, const char* name)
{
    std::size_t total = 1;
    for (std::size_t d : dims) {
        if (d == 0 || d > kMaxTensorElements / total) {
            throw FormatError(std::string(name) + " header has implausible tensor dims");
        }
        total *= d;
    }
}

/// Shared by trajectories and masks: timesteps, dims, float width, guidance, seed, then the tensors.
struct TensorSeries {
    std::vector<Timestep> timesteps;
    Shape shape;
    double guidance = 1.0;
    std::uint64_t seed = 0;
    std::vector<std::vector<double>> tensors;  // timesteps..., then t = 0
};

void write_series(std::ostream& out, const Magic& magic, const TensorSeries& s, FloatWidth width)
{
    out.write(magic.data(), magic.size());
    put_u32(out, kFormatVersion);
    put_u32(out, s.timesteps.size());
    for (Timestep t : s.timesteps) {
        put_i32(out, t);
    }
    put_u32(out, s.shape.channels);
    put_u32(out, s.shape.height);
    put_u32(out, s.shape.width);
    put_u32(out, static_cast<std::uint32_t>(width));
    put_f64(out, s.guidance);
    put_le(out, s.seed);
    for (const auto& tensor : s.tensors) {
        if (tensor.size() != s.shape.size()) {
            throw FormatError("tensor size disagrees with header dims " + s.shape.to_string());
        }
        put_values(out, tensor, width);
    }
    if (!out) {
        throw FormatError("write failed");
    }
}

TensorSeries read_series(std::istream& in, const Magic& magic, const char* name)
{
    expect_magic(in, magic, name);
    TensorSeries s;
    const auto steps = get_le<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < steps; ++i) {
        s.timesteps.push_back(get_i32(in));
    }
    s.shape.channels = get_le<std::uint32_t>(in);
    s.shape.height = get_le<std::uint32_t>(in);
    s.shape.width = get_le<std::uint32_t>(in);
    const FloatWidth width = get_width(in);
    s.guidance = get_f64(in);
    s.seed = get_le<std::uint64_t>(in);
    require_plausible({s.shape.channels, s.shape.height, s.shape.width}, name);
    // Grow one tensor at a time so a corrupt step count fails on the short read, not on allocation.
    for (std::uint64_t i = 0; i <= steps; ++i) {
        std::vector<double> tensor(s.shape.size());
        get_values(in, tensor, width);
        s.tensors.push_back(std::move(tensor));
    }
    return s;
}

std::ofstream open_out(const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    return out;
}

std::ifstream open_in(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    return in;
}

}  // namespace

FloatWidth parse_precision(int bits)
{
    if (bits == 32) {
        return FloatWidth::f32;
    }
    if (bits == 64) {
        return FloatWidth::f64;
    }
    throw std::invalid_argument("precision must be 32 or 64, got " + std::to_string(bits));
}

void write_trajectory(std::ostream& out, const Trajectory& traj, FloatWidth width)
{
    TensorSeries s;
    s.timesteps = traj.timesteps;
    s.shape = traj.source().shape();
    s.guidance = traj.guidance;
    s.seed = traj.seed;
    for (Timestep t : traj.timesteps) {
        s.tensors.push_back(traj.at(t).raw());
    }
    s.tensors.push_back(traj.source().raw());
    write_series(out, kTrajMagic, s, width);
}

Trajectory read_trajectory(std::istream& in)
{
    TensorSeries s = read_series(in, kTrajMagic, "FECTRAJ1");
    Trajectory traj;
    traj.timesteps = s.timesteps;
    traj.guidance = s.guidance;
    traj.seed = s.seed;
    for (std::size_t i = 0; i < s.timesteps.size(); ++i) {
        if (!traj.latents.emplace(s.timesteps[i], Latent(s.shape, std::move(s.tensors[i]))).second) {
            throw FormatError("duplicate timestep " + std::to_string(s.timesteps[i]) + " in trajectory");
        }
    }
    if (!traj.latents.emplace(0, Latent(s.shape, std::move(s.tensors.back()))).second) {
        throw FormatError("trajectory lists timestep 0 among its steps");
    }
    TimestepPlan(traj.timesteps, std::numeric_limits<int>::max());
    return traj;
}

void save_trajectory(const std::filesystem::path& path, const Trajectory& traj, FloatWidth width)
{
    auto out = open_out(path);
    write_trajectory(out, traj, width);
}

Trajectory load_trajectory(const std::filesystem::path& path)
{
    auto in = open_in(path);
    return read_trajectory(in);
}

void write_kv_cache(std::ostream& out, const KVCache& cache, FloatWidth width)
{
    const auto timesteps = cache.timesteps();
    out.write(kKvMagic.data(), kKvMagic.size());
    put_u32(out, kFormatVersion);
    put_u32(out, timesteps.size());
    put_u32(out, static_cast<std::size_t>(cache.layer_count()));
    put_u32(out, kBranchCount);
    put_u32(out, cache.tokens());
    put_u32(out, cache.model_dim());
    put_u32(out, static_cast<std::uint32_t>(width));
    for (Timestep t : timesteps) {
        put_i32(out, t);
    }
    put_u32(out, cache.entry_count());
    for (const auto& [key, entry] : cache.entries()) {
        put_i32(out, key.t);
        put_i32(out, key.layer);
        std::uint8_t present = 0;
        for (std::size_t b = 0; b < kBranchCount; ++b) {
            if (entry.branches[b]) {
                present |= static_cast<std::uint8_t>(1U << b);
            }
        }
        out.put(static_cast<char>(present));
        for (const auto& slot : entry.branches) {
            if (slot) {
                put_values(out, slot->keys.data, width);
            }
        }
        for (const auto& slot : entry.branches) {
            if (slot) {
                put_values(out, slot->values.data, width);
            }
        }
    }
    if (!out) {
        throw FormatError("write failed");
    }
}

KVCache read_kv_cache(std::istream& in)
{
    expect_magic(in, kKvMagic, "FECKV1");
    const auto steps = get_le<std::uint32_t>(in);
    const auto layers = get_le<std::uint32_t>(in);
    const auto branches = get_le<std::uint32_t>(in);
    const auto tokens = get_le<std::uint32_t>(in);
    const auto dim = get_le<std::uint32_t>(in);
    const FloatWidth width = get_width(in);
    if (branches != kBranchCount) {
        throw FormatError("FECKV1 branch count must be 2");
    }
    require_plausible({tokens, dim}, "FECKV1");
    std::vector<Timestep> timesteps;
    for (std::uint32_t i = 0; i < steps; ++i) {
        timesteps.push_back(get_i32(in));
    }
    KVCache cache(static_cast<int>(layers), tokens, dim);
    const auto entries = get_le<std::uint32_t>(in);
    for (std::uint32_t e = 0; e < entries; ++e) {
        const Timestep t = get_i32(in);
        const int layer = get_i32(in);
        const int present = in.get();
        if (present == std::char_traits<char>::eof()) {
            throw FormatError("unexpected end of file");
        }
        std::array<Matrix, kBranchCount> keys;
        std::array<Matrix, kBranchCount> values;
        for (std::size_t b = 0; b < kBranchCount; ++b) {
            if (present & (1 << b)) {
                keys[b] = Matrix(tokens, dim);
                get_values(in, keys[b].data, width);
            }
        }
        for (std::size_t b = 0; b < kBranchCount; ++b) {
            if (present & (1 << b)) {
                values[b] = Matrix(tokens, dim);
                get_values(in, values[b].data, width);
            }
        }
        for (std::size_t b = 0; b < kBranchCount; ++b) {
            if (present & (1 << b)) {
                cache.store(t, layer, static_cast<Branch>(b), std::move(keys[b]), std::move(values[b]));
            }
        }
    }
    if (cache.timesteps() != timesteps) {
        throw FormatError("FECKV1 timestep list disagrees with its entries");
    }
    return cache;
}

void save_kv_cache(const std::filesystem::path& path, const KVCache& cache, FloatWidth width)
{
    auto out = open_out(path);
    write_kv_cache(out, cache, width);
}

KVCache load_kv_cache(const std::filesystem::path& path)
{
    auto in = open_in(path);
    return read_kv_cache(in);
}

std::unique_ptr<MaskProvider> MaskFile::provider() const
{
    if (scheduled.empty()) {
        return std::make_unique<FixedMaskProvider>(fallback);
    }
    return std::make_unique<ScheduledMaskProvider>(std::map<Timestep, EditMask>(scheduled.begin(), scheduled.end()),
                                                   fallback);
}

void write_mask_file(std::ostream& out, const MaskFile& masks, FloatWidth width)
{
    TensorSeries s;
    s.shape = Shape{1, masks.fallback.height, masks.fallback.width};
    for (const auto& [t, m] : masks.scheduled) {
        if (m.height != masks.fallback.height || m.width != masks.fallback.width) {
            throw FormatError("all masks in a file must share one grid");
        }
        s.timesteps.push_back(t);
        s.tensors.push_back(m.values);
    }
    s.tensors.push_back(masks.fallback.values);
    write_series(out, kMaskMagic, s, width);
}

MaskFile read_mask_file(std::istream& in)
{
    TensorSeries s = read_series(in, kMaskMagic, "FECMASK1");
    if (s.shape.channels != 1) {
        throw FormatError("FECMASK1 tensors must have one channel");
    }
    auto to_mask = [&](std::vector<double>&& v) {
        EditMask m = EditMask::filled(s.shape.height, s.shape.width, 0.0);
        m.values = std::move(v);
        for (double x : m.values) {
            if (!(x >= 0.0 && x <= 1.0)) {
                throw FormatError("mask values must lie in [0, 1]");
            }
        }
        return m;
    };
    MaskFile file;
    for (std::size_t i = 0; i < s.timesteps.size(); ++i) {
        file.scheduled.emplace(s.timesteps[i], to_mask(std::move(s.tensors[i])));
    }
    file.fallback = to_mask(std::move(s.tensors.back()));
    return file;
}

void save_mask(const std::filesystem::path& path, const EditMask& mask, FloatWidth width)
{
    save_mask_file(path, MaskFile{{}, mask}, width);
}

void save_mask_file(const std::filesystem::path& path, const MaskFile& masks, FloatWidth width)
{
    auto out = open_out(path);
    write_mask_file(out, masks, width);
}

MaskFile load_mask_file(const std::filesystem::path& path)
{
    auto in = open_in(path);
    return read_mask_file(in);
}

}  // namespace fec
