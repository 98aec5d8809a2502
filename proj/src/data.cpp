#include "downscale/data.hpp"

#include <algorithm>
#include <cmath>

#include "downscale/rng.hpp"
#include "downscale/serialize.hpp"

namespace downscale {

namespace {

// stream ids for derived seeds
constexpr std::uint64_t kElevationStream = 1;
constexpr std::uint64_t kTruthStreamBase = 10;  // +0 train, +1 val, +2 test
constexpr std::uint64_t kAuxStreamBase = 20;    // per split, then per sample, then per channel

constexpr double kTwoPi = 6.283185307179586476925287;

} // namespace

std::string variable_name(Variable v) {
    return v == Variable::PrecipitationLike ? "precipitation_like" : "temperature_like";
}

Variable variable_from_name(const std::string& name) {
    if (name == "precipitation_like" || name == "precipitation") return Variable::PrecipitationLike;
    if (name == "temperature_like" || name == "temperature") return Variable::TemperatureLike;
    throw ConfigError("unknown variable '" + name + "' (expected precipitation_like or temperature_like)");
}

void DatasetSpec::validate() const {
    if (n_train <= 0 || n_val <= 0 || n_test <= 0)
        throw ConfigError("DatasetSpec: split sizes must be positive");
    if (fine_h <= 0 || fine_w <= 0 || fine_h % 8 != 0 || fine_w % 8 != 0)
        throw ConfigError("DatasetSpec: fine grid must be positive and divisible by 8");
    if (coarsen_factor <= 0 || fine_h % coarsen_factor != 0 || fine_w % coarsen_factor != 0)
        throw ConfigError("DatasetSpec: coarsen_factor must divide the fine grid");
    if (fine_h / coarsen_factor < 2 || fine_w / coarsen_factor < 2)
        throw ConfigError("DatasetSpec: coarse grid needs at least 2 cells per axis");
    if (modes < 8) throw ConfigError("DatasetSpec: need at least 8 spectral modes");
    if (k_min <= 0 || k_max <= k_min) throw ConfigError("DatasetSpec: need 0 < k_min < k_max");
    if (temp_std <= 0) throw ConfigError("DatasetSpec: temp_std must be positive");
    if (precip_log_scale <= 0) throw ConfigError("DatasetSpec: precip_log_scale must be positive");
    if (rescale_mean.has_value() != rescale_std.has_value())
        throw ConfigError("DatasetSpec: rescale_mean and rescale_std must be set together");
    if (rescale_std && variable != Variable::TemperatureLike)
        throw ConfigError("DatasetSpec: predictand rescaling is a temperature-variant knob");
    if (rescale_std && *rescale_std <= 0) throw ConfigError("DatasetSpec: rescale_std must be positive");
}

namespace {

// Stationary Gaussian random field by randomized spectral sampling: a sum of
// `modes` cosines whose radial wavenumbers follow the power-law spectrum
// k^beta (2-D shell density ~ k^(beta+1)), directions and phases uniform.
// Unit variance by construction; near-Gaussian marginals by the CLT.
// Along each row the mode's phase advances by a constant, so the cosine is
// evaluated with an angle-addition recurrence instead of per-pixel trig.
void fill_smooth_field(Rng rng, const DatasetSpec& spec, int H, int W, double* out) {
    const int M = spec.modes;
    const double q = spec.spectral_exponent + 1.0; // radial density exponent
    const double amp = std::sqrt(2.0 / static_cast<double>(M));
    std::fill(out, out + static_cast<std::size_t>(H) * W, 0.0);
    for (int j = 0; j < M; ++j) {
        const double u = rng.uniform();
        double k;
        if (std::fabs(q + 1.0) < 1e-12) {
            k = spec.k_min * std::pow(spec.k_max / spec.k_min, u);
        } else {
            const double p = q + 1.0;
            const double lo = std::pow(spec.k_min, p), hi = std::pow(spec.k_max, p);
            k = std::pow(lo + u * (hi - lo), 1.0 / p);
        }
        const double theta = rng.uniform(0.0, kTwoPi);
        const double kx = k * std::cos(theta);
        const double ky = k * std::sin(theta);
        const double phase = rng.uniform(0.0, kTwoPi);
        const double dx = kTwoPi * kx / static_cast<double>(W);
        const double cd = std::cos(dx), sd = std::sin(dx);
        for (int y = 0; y < H; ++y) {
            const double a0 = kTwoPi * ky * static_cast<double>(y) / static_cast<double>(H) + phase;
            double c = amp * std::cos(a0), s = amp * std::sin(a0);
            double* row = out + static_cast<std::size_t>(y) * W;
            for (int x = 0; x < W; ++x) {
                row[x] += c;
                const double cn = c * cd - s * sd;
                s = c * sd + s * cd;
                c = cn;
            }
        }
    }
}

ClimateField make_field(int H, int W, FieldKind kind, std::string units) {
    ClimateField f;
    f.grid = Tensor::zeros({1, 1, H, W});
    f.kind = kind;
    f.units = std::move(units);
    return f;
}

} // namespace

std::vector<ClimateField> gen_smooth_fields(const DatasetSpec& spec, int count, std::uint64_t stream) {
    spec.validate();
    Rng base = Rng(spec.seed).split(stream);
    std::vector<ClimateField> fields;
    fields.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        ClimateField f = make_field(spec.fine_h, spec.fine_w, FieldKind::Auxiliary, "1");
        fill_smooth_field(base.split(static_cast<std::uint64_t>(i)), spec, spec.fine_h, spec.fine_w,
                          f.grid.data());
        fields.push_back(std::move(f));
    }
    return fields;
}

ClimateField gen_elevation(const DatasetSpec& spec) {
    spec.validate();
    ClimateField f = make_field(spec.fine_h, spec.fine_w, FieldKind::Auxiliary, "elevation_unit");
    fill_smooth_field(Rng(spec.seed).split(kElevationStream), spec, spec.fine_h, spec.fine_w, f.grid.data());
    // map min..max onto [0, elevation_scale]
    double lo = f.grid.values()[0], hi = f.grid.values()[0];
    for (double v : f.grid.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    for (double& v : f.grid.values()) v = (v - lo) / span * spec.elevation_scale;
    return f;
}

std::vector<ClimateField> gen_temperature_like(const DatasetSpec& spec, int count, std::uint64_t stream,
                                               const ClimateField& elevation) {
    std::vector<ClimateField> fields = gen_smooth_fields(spec, count, stream);
    for (ClimateField& f : fields) {
        f.kind = FieldKind::TemperatureLike;
        f.units = "temperature_unit";
        for (std::size_t i = 0; i < f.grid.values().size(); ++i)
            f.grid.values()[i] = spec.temp_mean + spec.temp_std * f.grid.values()[i] +
                                 spec.lapse_per_unit * elevation.grid.values()[i];
    }
    return fields;
}

std::vector<ClimateField> gen_precipitation_like(const DatasetSpec& spec, int count, std::uint64_t stream) {
    std::vector<ClimateField> fields = gen_smooth_fields(spec, count, stream);
    const double a = spec.precip_log_scale;
    const double b = -a * spec.precip_zero_z;
    std::int64_t zeros = 0, total = 0;
    for (ClimateField& f : fields) {
        f.kind = FieldKind::PrecipitationLike;
        f.units = "precip_unit";
        for (double& v : f.grid.values()) {
            v = std::max(0.0, std::exp(a * v + b) - 1.0);
            zeros += v == 0.0 ? 1 : 0;
            ++total;
        }
    }
    // Calibration gate: only meaningful on bulk sets (the smooth fields are
    // spatially correlated, so a handful of fields has a noisy zero fraction).
    if (count >= 16) {
        const double zero_fraction = static_cast<double>(zeros) / static_cast<double>(total);
        if (zero_fraction < 0.40 || zero_fraction > 0.70)
            throw DataError("gen_precipitation_like: calibration failed, zero fraction " +
                            std::to_string(zero_fraction) + " outside [0.40, 0.70]");
    }
    return fields;
}

ClimateField coarsen(const ClimateField& field, int factor) {
    const int H = field.grid.dim(2), W = field.grid.dim(3);
    if (factor <= 0 || H % factor != 0 || W % factor != 0)
        throw ShapeError("coarsen: factor " + std::to_string(factor) + " does not divide " +
                         shape_str(field.grid.shape()));
    const int CH = H / factor, CW = W / factor;
    ClimateField out = make_field(CH, CW, field.kind, field.units);
    const double inv = 1.0 / (static_cast<double>(factor) * factor);
    for (int ch = 0; ch < CH; ++ch)
        for (int cw = 0; cw < CW; ++cw) {
            double s = 0.0;
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx)
                    s += field.grid.values()[static_cast<std::size_t>(ch * factor + dy) * W + cw * factor + dx];
            out.grid.values()[static_cast<std::size_t>(ch) * CW + cw] = s * inv;
        }
    return out;
}

ClimateField regrid_bilinear(const ClimateField& field, int target_h, int target_w) {
    const int H = field.grid.dim(2), W = field.grid.dim(3);
    if (H < 2 || W < 2) throw ShapeError("regrid_bilinear: source grid must be at least 2x2");
    if (target_h < 1 || target_w < 1) throw ShapeError("regrid_bilinear: target dims must be positive");
    ClimateField out = make_field(target_h, target_w, field.kind, field.units);
    // Both grids span the same domain edges with samples at cell centers, so a
    // block-mean source stays spatially aligned. Near the borders the lerp
    // weights run outside [0,1] (linear extrapolation), which keeps the map
    // exact on affine fields.
    const double sy = static_cast<double>(H) / target_h;
    const double sx = static_cast<double>(W) / target_w;
    for (int y = 0; y < target_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, H - 2);
        const double wy = fy - y0;
        for (int x = 0; x < target_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, W - 2);
            const double wx = fx - x0;
            const double v00 = field.grid.values()[static_cast<std::size_t>(y0) * W + x0];
            const double v01 = field.grid.values()[static_cast<std::size_t>(y0) * W + x0 + 1];
            const double v10 = field.grid.values()[static_cast<std::size_t>(y0 + 1) * W + x0];
            const double v11 = field.grid.values()[static_cast<std::size_t>(y0 + 1) * W + x0 + 1];
            out.grid.values()[static_cast<std::size_t>(y) * target_w + x] =
                (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        }
    }
    return out;
}

namespace {

// channel 0 of the input: coarsened truth brought back to the fine grid
Tensor degraded_predictand(const ClimateField& truth, int factor) {
    ClimateField coarse = coarsen(truth, factor);
    ClimateField back = regrid_bilinear(coarse, truth.grid.dim(2), truth.grid.dim(3));
    return back.grid;
}

SamplePair assemble_one(const ClimateField& truth, const std::vector<Tensor>& aux_planes,
                        const DatasetSpec& spec) {
    const int H = spec.fine_h, W = spec.fine_w;
    const int C = spec.input_channels();
    Tensor input = Tensor::zeros({C, H, W});
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    Tensor pred = degraded_predictand(truth, spec.coarsen_factor);
    std::copy_n(pred.data(), plane, input.data());
    if (static_cast<int>(aux_planes.size()) != C - 1)
        throw ShapeError("assemble_pairs: expected " + std::to_string(C - 1) + " aux channels, got " +
                         std::to_string(aux_planes.size()));
    for (std::size_t a = 0; a < aux_planes.size(); ++a)
        std::copy_n(aux_planes[a].data(), plane, input.data() + (a + 1) * plane);

    SamplePair pair;
    pair.input = input;
    pair.target = Tensor::zeros({1, H, W});
    std::copy_n(truth.grid.data(), plane, pair.target.data());
    return pair;
}

std::vector<SamplePair> build_split(const DatasetSpec& spec, int count, int split_index,
                                    const Tensor& elev_fine, const Tensor& elev_coarse,
                                    std::vector<ClimateField>&& truths) {
    std::vector<SamplePair> pairs;
    pairs.reserve(static_cast<std::size_t>(count));
    Rng aux_base = Rng(spec.seed).split(kAuxStreamBase + static_cast<std::uint64_t>(split_index));
    for (int i = 0; i < count; ++i) {
        std::vector<Tensor> aux = {elev_fine, elev_coarse};
        if (spec.variable == Variable::PrecipitationLike) {
            // u, v, humidity: independent smooth fields from the coarse source,
            // regridded to the fine grid
            Rng sample_rng = aux_base.split(static_cast<std::uint64_t>(i));
            for (int ch = 0; ch < 3; ++ch) {
                ClimateField f = make_field(spec.fine_h, spec.fine_w, FieldKind::Auxiliary, "1");
                fill_smooth_field(sample_rng.split(static_cast<std::uint64_t>(ch)), spec, spec.fine_h,
                                  spec.fine_w, f.grid.data());
                ClimateField coarse_native = coarsen(f, spec.coarsen_factor);
                aux.push_back(regrid_bilinear(coarse_native, spec.fine_h, spec.fine_w).grid);
            }
        }
        pairs.push_back(assemble_one(truths[static_cast<std::size_t>(i)], aux, spec));
    }
    return pairs;
}

} // namespace

Dataset generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;

    ClimateField elevation = gen_elevation(spec);
    ClimateField elev_coarse_native = coarsen(elevation, spec.coarsen_factor);
    Tensor elev_coarse = regrid_bilinear(elev_coarse_native, spec.fine_h, spec.fine_w).grid;

    const int counts[3] = {spec.n_train, spec.n_val, spec.n_test};
    std::vector<std::vector<ClimateField>> truths(3);
    for (int s = 0; s < 3; ++s) {
        const std::uint64_t stream = kTruthStreamBase + static_cast<std::uint64_t>(s);
        truths[static_cast<std::size_t>(s)] =
            spec.variable == Variable::PrecipitationLike
                ? gen_precipitation_like(spec, counts[s], stream)
                : gen_temperature_like(spec, counts[s], stream, elevation);
    }

    if (spec.rescale_std) {
        // linear remap of the predictand to the requested moments, fitted on
        // the training split
        double sum = 0.0, count = 0.0;
        for (const ClimateField& f : truths[0])
            for (double v : f.grid.values()) {
                sum += v;
                count += 1.0;
            }
        const double m = sum / count;
        double sq = 0.0;
        for (const ClimateField& f : truths[0])
            for (double v : f.grid.values()) sq += (v - m) * (v - m);
        const double sd = std::sqrt(sq / count);
        if (sd <= 0.0) throw DataError("generate_dataset: degenerate predictand, cannot rescale");
        const double k = *spec.rescale_std / sd;
        for (auto& split : truths)
            for (ClimateField& f : split)
                for (double& v : f.grid.values()) v = (v - m) * k + *spec.rescale_mean;
    }

    ds.train = build_split(spec, counts[0], 0, elevation.grid, elev_coarse, std::move(truths[0]));
    ds.val = build_split(spec, counts[1], 1, elevation.grid, elev_coarse, std::move(truths[1]));
    ds.test = build_split(spec, counts[2], 2, elevation.grid, elev_coarse, std::move(truths[2]));
    return ds;
}

FieldStats predictand_stats(const std::vector<SamplePair>& pairs) {
    if (pairs.empty()) throw DataError("predictand_stats: empty set");
    std::vector<double> all;
    for (const SamplePair& p : pairs)
        all.insert(all.end(), p.target.values().begin(), p.target.values().end());
    FieldStats st;
    const double n = static_cast<double>(all.size());
    std::int64_t zeros = 0;
    double sum = 0.0, nonzero_sum = 0.0;
    std::int64_t nonzero_count = 0;
    for (double v : all) {
        sum += v;
        if (v == 0.0) {
            ++zeros;
        } else {
            nonzero_sum += v;
            ++nonzero_count;
        }
    }
    st.mean = sum / n;
    st.zero_fraction = static_cast<double>(zeros) / n;
    double m2 = 0.0, m3 = 0.0;
    for (double v : all) {
        const double d = v - st.mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    st.stddev = std::sqrt(m2);
    st.skewness = m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
    if (nonzero_count > 0) {
        std::vector<double> sorted = all;
        const std::size_t rank = static_cast<std::size_t>(0.999 * (n - 1.0));
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank), sorted.end());
        const double p999 = sorted[rank];
        st.tail_ratio = p999 / (nonzero_sum / static_cast<double>(nonzero_count));
    }
    return st;
}

// ---- dataset container ----

namespace {

constexpr char kDatasetMagic[4] = {'D', 'S', 'L', 'B'};
constexpr std::uint32_t kDatasetVersion = 1;

void write_spec(BinWriter& w, const DatasetSpec& s) {
    w.u32(s.variable == Variable::PrecipitationLike ? 0u : 1u);
    w.u32(static_cast<std::uint32_t>(s.n_train));
    w.u32(static_cast<std::uint32_t>(s.n_val));
    w.u32(static_cast<std::uint32_t>(s.n_test));
    w.u32(static_cast<std::uint32_t>(s.fine_h));
    w.u32(static_cast<std::uint32_t>(s.fine_w));
    w.u32(static_cast<std::uint32_t>(s.coarsen_factor));
    w.u64(s.seed);
    w.u32(static_cast<std::uint32_t>(s.modes));
    w.f64(s.spectral_exponent);
    w.f64(s.k_min);
    w.f64(s.k_max);
    w.f64(s.temp_mean);
    w.f64(s.temp_std);
    w.f64(s.lapse_per_unit);
    w.f64(s.elevation_scale);
    w.f64(s.precip_log_scale);
    w.f64(s.precip_zero_z);
    w.u32(s.rescale_std.has_value() ? 1u : 0u);
    w.f64(s.rescale_mean.value_or(0.0));
    w.f64(s.rescale_std.value_or(0.0));
}

DatasetSpec read_spec(BinReader& r) {
    DatasetSpec s;
    s.variable = r.u32() == 0 ? Variable::PrecipitationLike : Variable::TemperatureLike;
    s.n_train = static_cast<int>(r.u32());
    s.n_val = static_cast<int>(r.u32());
    s.n_test = static_cast<int>(r.u32());
    s.fine_h = static_cast<int>(r.u32());
    s.fine_w = static_cast<int>(r.u32());
    s.coarsen_factor = static_cast<int>(r.u32());
    s.seed = r.u64();
    s.modes = static_cast<int>(r.u32());
    s.spectral_exponent = r.f64();
    s.k_min = r.f64();
    s.k_max = r.f64();
    s.temp_mean = r.f64();
    s.temp_std = r.f64();
    s.lapse_per_unit = r.f64();
    s.elevation_scale = r.f64();
    s.precip_log_scale = r.f64();
    s.precip_zero_z = r.f64();
    const bool has_rescale = r.u32() != 0;
    const double rm = r.f64(), rs = r.f64();
    if (has_rescale) {
        s.rescale_mean = rm;
        s.rescale_std = rs;
    }
    return s;
}

void write_tensor3(BinWriter& w, const Tensor& t) {
    w.u32(static_cast<std::uint32_t>(t.dim(0)));
    w.u32(static_cast<std::uint32_t>(t.dim(1)));
    w.u32(static_cast<std::uint32_t>(t.dim(2)));
    w.f64_array(t.data(), t.values().size());
}

Tensor read_tensor3(BinReader& r) {
    const int c = static_cast<int>(r.u32());
    const int h = static_cast<int>(r.u32());
    const int w = static_cast<int>(r.u32());
    Tensor t = Tensor::zeros({c, h, w});
    r.f64_array(t.data(), t.values().size());
    return t;
}

} // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    BinWriter w;
    w.magic(kDatasetMagic);
    w.u32(kDatasetVersion);
    write_spec(w, ds.spec);
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        for (const SamplePair& p : *split) {
            write_tensor3(w, p.input);
            write_tensor3(w, p.target);
        }
    }
    w.write_file(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
    BinReader r = BinReader::from_file(path);
    r.expect_magic(kDatasetMagic, "dataset");
    const std::uint32_t version = r.u32();
    if (version != kDatasetVersion)
        throw FormatError("unsupported dataset version " + std::to_string(version));
    Dataset ds;
    ds.spec = read_spec(r);
    auto read_split = [&](int count) {
        std::vector<SamplePair> pairs;
        pairs.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            SamplePair p;
            p.input = read_tensor3(r);
            p.target = read_tensor3(r);
            pairs.push_back(std::move(p));
        }
        return pairs;
    };
    ds.train = read_split(ds.spec.n_train);
    ds.val = read_split(ds.spec.n_val);
    ds.test = read_split(ds.spec.n_test);
    if (!r.at_end()) throw FormatError("trailing bytes in dataset container");
    return ds;
}

} // namespace downscale
