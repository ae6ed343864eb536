#include "stormsplat/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "stormsplat/errors.hpp"
#include "stormsplat/image.hpp"

namespace stormsplat {

namespace {

void require_same(const RadarVolume& a, const RadarVolume& b) {
  if (a.dims() != b.dims() || a.channels() != b.channels()) throw ShapeError("prediction and truth differ in shape");
}

double mse(const RadarVolume& pred, const RadarVolume& truth) {
  require_same(pred, truth);
  double s = 0.0;
  const auto p = pred.values();
  const auto t = truth.values();
  for (std::size_t k = 0; k < p.size(); ++k) s += std::pow(static_cast<double>(p[k]) - t[k], 2);
  return s / static_cast<double>(p.size());
}

}  // namespace

ErrorPair me_mae(const RadarVolume& pred, const RadarVolume& truth) {
  require_same(pred, truth);
  const auto p = pred.values();
  const auto t = truth.values();
  ErrorPair out;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double d = static_cast<double>(p[k]) - t[k];
    out.me += d;
    out.mae += std::abs(d);
  }
  out.me /= static_cast<double>(p.size());
  out.mae /= static_cast<double>(p.size());
  return out;
}

double psnr_from_mse(double mse_value, double data_range) {
  if (!(data_range > 0.0)) throw ValueError("psnr data range must be positive");
  if (mse_value <= 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(data_range * data_range / mse_value));
}

double psnr(const RadarVolume& pred, const RadarVolume& truth, double data_range) {
  return psnr_from_mse(mse(pred, truth), data_range);
}

double ssim(const RadarVolume& pred, const RadarVolume& truth, double data_range) {
  require_same(pred, truth);
  const auto& dims = truth.dims();
  double total = 0.0;
  Image x(dims.height, dims.width), y(dims.height, dims.width);
  for (int d = 0; d < dims.depth; ++d) {
    for (int c = 0; c < truth.channels(); ++c) {
      for (int h = 0; h < dims.height; ++h) {
        for (int w = 0; w < dims.width; ++w) {
          x(h, w) = pred.at(d, h, w, c);
          y(h, w) = truth.at(d, h, w, c);
        }
      }
      total += ssim_2d(x, y, data_range);
    }
  }
  return total / (dims.depth * truth.channels());
}

double Contingency::csi() const {
  const long denom = hits + misses + false_alarms;
  return denom == 0 ? 1.0 : static_cast<double>(hits) / static_cast<double>(denom);
}

Contingency& Contingency::operator+=(const Contingency& other) {
  hits += other.hits;
  misses += other.misses;
  false_alarms += other.false_alarms;
  return *this;
}

Contingency pooled_contingency(const RadarVolume& pred, const RadarVolume& truth, double threshold, int pool,
                               int channel) {
  require_same(pred, truth);
  if (pool < 1) throw ValueError("csi pool size must be positive");
  if (channel < 0 || channel >= truth.channels()) throw ValueError("csi channel out of range");
  const auto& dims = truth.dims();
  Contingency out;
  for (int d = 0; d < dims.depth; ++d) {
    for (int h0 = 0; h0 < dims.height; h0 += pool) {
      for (int w0 = 0; w0 < dims.width; w0 += pool) {
        bool p = false, t = false;
        for (int h = h0; h < std::min(dims.height, h0 + pool); ++h) {
          for (int w = w0; w < std::min(dims.width, w0 + pool); ++w) {
            p = p || pred.at(d, h, w, channel) >= threshold;
            t = t || truth.at(d, h, w, channel) >= threshold;
          }
        }
        if (p && t) ++out.hits;
        if (!p && t) ++out.misses;
        if (p && !t) ++out.false_alarms;
      }
    }
  }
  return out;
}

double csi_pooled(const RadarVolume& pred, const RadarVolume& truth, double threshold, int pool, int channel) {
  return pooled_contingency(pred, truth, threshold, pool, channel).csi();
}

EvalReport evaluate(const std::vector<RadarVolume>& pred, const std::vector<RadarVolume>& truth,
                    const EvalOptions& options) {
  if (pred.size() != truth.size()) {
    throw ShapeError("prediction has " + std::to_string(pred.size()) + " frames but truth has " +
                     std::to_string(truth.size()));
  }
  if (truth.empty()) throw ShapeError("nothing to evaluate: zero frames");
  EvalReport report;
  report.data_range = options.data_range;
  if (report.data_range <= 0.0) {
    for (const auto& v : truth) {
      for (float x : v.values()) report.data_range = std::max(report.data_range, static_cast<double>(x));
    }
    if (report.data_range <= 0.0) report.data_range = 1.0;
  }
  std::map<double, Contingency> pooled;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    FrameMetrics f;
    const auto e = me_mae(pred[t], truth[t]);
    f.me = e.me;
    f.mae = e.mae;
    f.psnr = psnr(pred[t], truth[t], report.data_range);
    f.ssim = ssim(pred[t], truth[t], report.data_range);
    for (double thr : options.csi_thresholds) {
      const auto c = pooled_contingency(pred[t], truth[t], thr, options.pool);
      f.csi[thr] = c.csi();
      pooled[thr] += c;
    }
    report.frames.push_back(f);
  }
  const double n = static_cast<double>(truth.size());
  for (const auto& f : report.frames) {
    report.aggregate.me += f.me / n;
    report.aggregate.mae += f.mae / n;
    report.aggregate.psnr += f.psnr / n;
    report.aggregate.ssim += f.ssim / n;
  }
  for (const auto& [thr, c] : pooled) report.aggregate.csi[thr] = c.csi();
  return report;
}

namespace {

std::string threshold_key(double thr) {
  std::ostringstream s;
  s << thr;
  return s.str();
}

nlohmann::ordered_json frame_json(const FrameMetrics& f) {
  nlohmann::ordered_json j;
  j["me"] = f.me;
  j["mae"] = f.mae;
  j["psnr"] = f.psnr;
  j["ssim"] = f.ssim;
  nlohmann::ordered_json csi;
  for (const auto& [thr, v] : f.csi) csi[threshold_key(thr)] = v;
  j["csi"] = csi;
  return j;
}

}  // namespace

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["data_range"] = data_range;
  j["aggregate"] = frame_json(aggregate);
  j["frames"] = nlohmann::ordered_json::array();
  for (const auto& f : frames) j["frames"].push_back(frame_json(f));
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::ostringstream s;
  s.precision(17);
  s << "frame,me,mae,psnr,ssim";
  for (const auto& [thr, v] : aggregate.csi) s << ",csi_" << threshold_key(thr);
  s << "\n";
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto& f = frames[t];
    s << t << "," << f.me << "," << f.mae << "," << f.psnr << "," << f.ssim;
    for (const auto& [thr, v] : f.csi) s << "," << v;
    s << "\n";
  }
  return s.str();
}

}  // namespace stormsplat
