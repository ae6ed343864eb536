#include "stormsplat/gaussians.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>

#include "stormsplat/binary_io.hpp"

namespace stormsplat {

namespace {

constexpr std::string_view kSequenceMagic = "GSEQ0001";

template <typename A, typename B>
bool same(const A& a, const B& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}

// Fills every array of one parameter block, in the documented order x, f, s, q.
template <typename Block>
void write_block(io::ByteWriter& out, const Block& block) {
  out.f32_array(std::span<const double>(block.positions.data(), static_cast<std::size_t>(block.positions.size())));
  out.f32_array(std::span<const double>(block.features.data(), static_cast<std::size_t>(block.features.size())));
  out.f32_array(std::span<const double>(block.log_scales.data(), static_cast<std::size_t>(block.log_scales.size())));
  out.f32_array(std::span<const double>(block.rotations.data(), static_cast<std::size_t>(block.rotations.size())));
}

template <typename Block>
void read_block(io::ByteReader& in, Block& block, const std::string& name) {
  in.f32_array(name + ".x", std::span<double>(block.positions.data(), static_cast<std::size_t>(block.positions.size())));
  in.f32_array(name + ".f_raw", std::span<double>(block.features.data(), static_cast<std::size_t>(block.features.size())));
  in.f32_array(name + ".s_raw", std::span<double>(block.log_scales.data(), static_cast<std::size_t>(block.log_scales.size())));
  in.f32_array(name + ".q", std::span<double>(block.rotations.data(), static_cast<std::size_t>(block.rotations.size())));
}

const char* activation_name(FeatureActivation a) {
  return a == FeatureActivation::softplus ? "softplus" : "identity";
}

}  // namespace

std::vector<FeatureActivation> default_activations(Eigen::Index feature_dim) {
  std::vector<FeatureActivation> out(static_cast<std::size_t>(feature_dim), FeatureActivation::identity);
  if (!out.empty()) out[0] = FeatureActivation::softplus;
  return out;
}

std::vector<FeatureActivation> activations_from_flags(const std::vector<bool>& nonnegative) {
  std::vector<FeatureActivation> out;
  out.reserve(nonnegative.size());
  for (bool f : nonnegative) out.push_back(f ? FeatureActivation::softplus : FeatureActivation::identity);
  return out;
}

GaussianGroup::GaussianGroup(Eigen::Index count, Eigen::Index feature_dim,
                             std::vector<FeatureActivation> channel_activations)
    : positions(Points3::Zero(count, 3)),
      features(FeatureMatrix::Zero(count, feature_dim)),
      log_scales(Points3::Zero(count, 3)),
      rotations(Quaternions::Zero(count, 4)),
      activations(std::move(channel_activations)) {
  rotations.col(0).setOnes();
  if (activations.empty()) activations = default_activations(feature_dim);
  if (static_cast<Eigen::Index>(activations.size()) != feature_dim) {
    throw ShapeError("activation count must equal the feature dimension");
  }
}

void GaussianGroup::validate() const {
  const auto m = size();
  if (features.rows() != m || log_scales.rows() != m || rotations.rows() != m) {
    throw ShapeError("Gaussian parameter arrays disagree on the count");
  }
  if (static_cast<Eigen::Index>(activations.size()) != feature_dim()) {
    throw ShapeError("activation count must equal the feature dimension");
  }
  if (!positions.allFinite() || !features.allFinite() || !log_scales.allFinite() || !rotations.allFinite()) {
    throw ValueError("Gaussian parameters must be finite");
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    if (rotations.row(i).norm() < 1e-12) throw ValueError("degenerate rotation for Gaussian " + std::to_string(i));
  }
}

void GaussianGroup::normalize_rotations() { rotations.rowwise().normalize(); }

FeatureMatrix GaussianGroup::packed() const {
  FeatureMatrix out(size(), param_dim());
  out << positions, features, log_scales, rotations;
  return out;
}

GaussianGroup GaussianGroup::unpack(const FeatureMatrix& packed, Eigen::Index feature_dim,
                                    std::vector<FeatureActivation> activations) {
  if (packed.cols() != 10 + feature_dim) throw ShapeError("packed width does not match 10 + N");
  GaussianGroup g(packed.rows(), feature_dim, std::move(activations));
  g.positions = packed.leftCols(3);
  g.features = packed.middleCols(3, feature_dim);
  g.log_scales = packed.middleCols(3 + feature_dim, 3);
  g.rotations = packed.rightCols(4);
  return g;
}

GaussianGroup GaussianGroup::select(std::span<const Eigen::Index> indices) const {
  GaussianGroup out(static_cast<Eigen::Index>(indices.size()), feature_dim(), activations);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto i = indices[k];
    const auto r = static_cast<Eigen::Index>(k);
    out.positions.row(r) = positions.row(i);
    out.features.row(r) = features.row(i);
    out.log_scales.row(r) = log_scales.row(i);
    out.rotations.row(r) = rotations.row(i);
  }
  return out;
}

GaussianGroup GaussianGroup::concat(const GaussianGroup& a, const GaussianGroup& b) {
  if (a.feature_dim() != b.feature_dim()) throw ShapeError("cannot concatenate groups with different N");
  GaussianGroup out(a.size() + b.size(), a.feature_dim(), a.activations);
  out.positions << a.positions, b.positions;
  out.features << a.features, b.features;
  out.log_scales << a.log_scales, b.log_scales;
  out.rotations << a.rotations, b.rotations;
  return out;
}

bool operator==(const GaussianGroup& a, const GaussianGroup& b) {
  return same(a.positions, b.positions) && same(a.features, b.features) && same(a.log_scales, b.log_scales) &&
         same(a.rotations, b.rotations) && a.activations == b.activations;
}

bool operator==(const DiffGaussians& a, const DiffGaussians& b) {
  return same(a.positions, b.positions) && same(a.features, b.features) && same(a.log_scales, b.log_scales) &&
         same(a.rotations, b.rotations);
}

DiffGaussians DiffGaussians::zeros(Eigen::Index count, Eigen::Index feature_dim) {
  DiffGaussians d;
  d.positions = Points3::Zero(count, 3);
  d.features = FeatureMatrix::Zero(count, feature_dim);
  d.log_scales = Points3::Zero(count, 3);
  d.rotations = Quaternions::Zero(count, 4);
  return d;
}

FeatureMatrix DiffGaussians::packed() const {
  FeatureMatrix out(size(), 10 + features.cols());
  out << positions, features, log_scales, rotations;
  return out;
}

DiffGaussians DiffGaussians::unpack(const FeatureMatrix& packed, Eigen::Index feature_dim) {
  if (packed.cols() != 10 + feature_dim) throw ShapeError("packed width does not match 10 + N");
  DiffGaussians d;
  d.positions = packed.leftCols(3);
  d.features = packed.middleCols(3, feature_dim);
  d.log_scales = packed.middleCols(3 + feature_dim, 3);
  d.rotations = packed.rightCols(4);
  return d;
}

GaussianGroup compose(const GaussianGroup& anchor, const DiffGaussians& delta) {
  if (delta.size() != anchor.size() || delta.features.cols() != anchor.feature_dim()) {
    throw ShapeError("compose: delta has " + std::to_string(delta.size()) + " Gaussians, anchor has " +
                     std::to_string(anchor.size()));
  }
  GaussianGroup out = anchor;
  out.positions += delta.positions;
  out.features += delta.features;
  out.log_scales += delta.log_scales;
  out.rotations += delta.rotations;
  out.normalize_rotations();
  return out;
}

DiffGaussians decompose(const GaussianGroup& current, const GaussianGroup& anchor) {
  if (current.size() != anchor.size() || current.feature_dim() != anchor.feature_dim()) {
    throw ShapeError("decompose: cardinality mismatch");
  }
  DiffGaussians d;
  d.positions = current.positions - anchor.positions;
  d.features = current.features - anchor.features;
  d.log_scales = current.log_scales - anchor.log_scales;
  d.rotations = current.rotations - anchor.rotations;
  return d;
}

std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, int bits_per_axis) {
  std::uint64_t code = 0;
  for (int i = 0; i < bits_per_axis; ++i) {
    code |= static_cast<std::uint64_t>((x >> i) & 1u) << (3 * i);
    code |= static_cast<std::uint64_t>((y >> i) & 1u) << (3 * i + 1);
    code |= static_cast<std::uint64_t>((z >> i) & 1u) << (3 * i + 2);
  }
  return code;
}

std::vector<std::uint64_t> morton_codes(const Points3& positions, int bits_per_axis) {
  if (bits_per_axis < 1 || bits_per_axis > 21) throw ValueError("bits_per_axis must lie in [1, 21]");
  if (!positions.allFinite()) throw ValueError("positions must be finite");
  const auto m = positions.rows();
  std::vector<std::uint64_t> codes(static_cast<std::size_t>(m), 0);
  if (m == 0) return codes;
  const Eigen::RowVector3d lo = positions.colwise().minCoeff();
  const Eigen::RowVector3d hi = positions.colwise().maxCoeff();
  const double levels = static_cast<double>((std::uint64_t{1} << bits_per_axis) - 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    std::uint32_t q[3];
    for (int a = 0; a < 3; ++a) {
      const double span = hi(a) - lo(a);
      q[a] = span > 0.0 ? static_cast<std::uint32_t>(std::lround((positions(i, a) - lo(a)) / span * levels)) : 0u;
    }
    codes[static_cast<std::size_t>(i)] = morton_encode(q[0], q[1], q[2], bits_per_axis);
  }
  return codes;
}

std::vector<Eigen::Index> morton_sort(const GaussianGroup& group, int bits_per_axis) {
  const auto codes = morton_codes(group.positions, bits_per_axis);
  std::vector<Eigen::Index> perm(codes.size());
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::stable_sort(perm.begin(), perm.end(), [&](Eigen::Index a, Eigen::Index b) {
    return codes[static_cast<std::size_t>(a)] < codes[static_cast<std::size_t>(b)];
  });
  return perm;
}

std::vector<Eigen::Index> invert_permutation(std::span<const Eigen::Index> permutation) {
  std::vector<Eigen::Index> inverse(permutation.size());
  for (std::size_t k = 0; k < permutation.size(); ++k) {
    inverse[static_cast<std::size_t>(permutation[k])] = static_cast<Eigen::Index>(k);
  }
  return inverse;
}

GaussianGroup GaussianSequence::frame(std::size_t t) const {
  if (t == 0) return anchor;
  return compose(anchor, deltas.at(t - 1));
}

DiffGaussians GaussianSequence::delta(std::size_t t) const {
  if (t == 0) return DiffGaussians::zeros(anchor.size(), anchor.feature_dim());
  return deltas.at(t - 1);
}

void GaussianSequence::validate() const {
  anchor.validate();
  for (std::size_t t = 0; t < deltas.size(); ++t) {
    const auto& d = deltas[t];
    if (d.size() != anchor.size() || d.features.cols() != anchor.feature_dim() || d.log_scales.rows() != anchor.size() ||
        d.rotations.rows() != anchor.size() || d.features.rows() != anchor.size()) {
      throw ShapeError("delta " + std::to_string(t + 1) + " does not match the anchor cardinality");
    }
    if (!d.positions.allFinite() || !d.features.allFinite() || !d.log_scales.allFinite() || !d.rotations.allFinite()) {
      throw ValueError("delta " + std::to_string(t + 1) + " has non-finite entries");
    }
  }
}

std::vector<std::uint8_t> encode_gseq(const GaussianSequence& sequence) {
  sequence.validate();
  io::ByteWriter out;
  out.magic(kSequenceMagic);
  out.u32(static_cast<std::uint32_t>(sequence.anchor.size()));
  out.u32(static_cast<std::uint32_t>(sequence.anchor.feature_dim()));
  out.u32(static_cast<std::uint32_t>(sequence.length()));
  write_block(out, sequence.anchor);
  for (const auto& d : sequence.deltas) write_block(out, d);
  return out.take();
}

GaussianSequence decode_gseq(std::span<const std::uint8_t> bytes) {
  io::ByteReader in(bytes);
  in.expect_magic(kSequenceMagic);
  const std::uint32_t m = in.u32("M");
  const std::uint32_t n = in.u32("N");
  const std::uint32_t t = in.u32("T");
  if (t == 0) throw FormatError("T", "sequence must contain at least one frame");
  const unsigned long long per_block = 4ull * m * (10ull + n);
  const unsigned long long expected = in.offset() + per_block * t;
  if (expected != bytes.size()) {
    throw FormatError("length", "expected " + std::to_string(expected) + " bytes for M=" + std::to_string(m) +
                                    ", N=" + std::to_string(n) + ", T=" + std::to_string(t) + ", actual " +
                                    std::to_string(bytes.size()));
  }
  GaussianSequence seq;
  seq.anchor = GaussianGroup(m, n);
  read_block(in, seq.anchor, "anchor");
  for (std::uint32_t k = 1; k < t; ++k) {
    auto d = DiffGaussians::zeros(m, n);
    read_block(in, d, "delta" + std::to_string(k));
    seq.deltas.push_back(std::move(d));
  }
  in.expect_end("length");
  seq.meta.activations = seq.anchor.activations;
  return seq;
}

void write_gseq(const GaussianSequence& sequence, const std::filesystem::path& path) {
  io::write_file(path, encode_gseq(sequence));
  nlohmann::ordered_json j;
  j["dims"] = {sequence.meta.dims.depth, sequence.meta.dims.height, sequence.meta.dims.width};
  j["channel_names"] = sequence.meta.channel_names;
  std::vector<std::string> acts;
  for (auto a : sequence.anchor.activations) acts.emplace_back(activation_name(a));
  j["activations"] = acts;
  io::write_text(meta_path_for(path), j.dump(2) + "\n");
}

GaussianSequence read_gseq(const std::filesystem::path& path) {
  auto seq = decode_gseq(io::read_file(path));
  const auto meta = meta_path_for(path);
  if (std::filesystem::exists(meta)) {
    const auto j = nlohmann::json::parse(io::read_text(meta));
    if (j.contains("dims")) {
      const auto& d = j.at("dims");
      seq.meta.dims = GridDims{d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
    }
    seq.meta.channel_names = j.value("channel_names", std::vector<std::string>{});
    if (j.contains("activations")) {
      std::vector<FeatureActivation> acts;
      for (const auto& a : j.at("activations")) {
        acts.push_back(a.get<std::string>() == "softplus" ? FeatureActivation::softplus : FeatureActivation::identity);
      }
      if (static_cast<Eigen::Index>(acts.size()) != seq.anchor.feature_dim()) {
        throw FormatError("activations", "sidecar lists " + std::to_string(acts.size()) + " channels, file has " +
                                             std::to_string(seq.anchor.feature_dim()));
      }
      seq.anchor.activations = acts;
      seq.meta.activations = acts;
    }
  }
  return seq;
}

}  // namespace stormsplat
