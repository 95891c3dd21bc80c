#pragma once

// Bidirectional evaluation of trained pipelines on the synthetic test split.
//
// A pipeline is a (theta, psi) pair: "segis-net" takes both from one joint
// checkpoint, "cnn" takes theta from a seg-only and psi from a reg-only
// checkpoint. Every test pair is evaluated in the forward direction
// (source = baseline) and the reverse direction (roles swapped, inverse
// affine). Predictions are binarized at 0.5 and reduced to their two largest
// 26-connected components before any metric.

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "metrics.hpp"
#include "synth.hpp"
#include "trainer.hpp"

namespace segis {

struct Pipeline {
  std::string name;
  Stream<float> theta;
  Stream<float> psi;
};

inline Pipeline joint_pipeline(const Checkpoint& ck, const std::string& name = "segis-net") {
  if (!ck.theta || !ck.psi) throw DataError("joint checkpoint must hold both streams");
  return {name, *ck.theta, *ck.psi};
}

inline Pipeline independent_pipeline(const Checkpoint& seg, const Checkpoint& reg, const std::string& name = "cnn") {
  if (!seg.theta) throw DataError("seg checkpoint has no segmentation stream");
  if (!reg.psi) throw DataError("reg checkpoint has no registration stream");
  return {name, *seg.theta, *reg.psi};
}

struct EvalOptions {
  ScForm sc_form = ScForm::cosine;
};

/// Channel k semantics for post-processing: the first two label channels
/// are split left/right, the rest anterior/posterior.
inline SplitAxis split_axis_for(int k) { return k < 2 ? SplitAxis::left_right : SplitAxis::anterior_posterior; }

/// Binarized prediction restricted to the two largest components per channel.
inline SegmentationSet<float> postprocess_all(const SegmentationSet<float>& prob) {
  Volume<float> out(prob.dims(), 0.0f, prob.volume().spacing());
  for (int k = 0; k < prob.structures(); ++k) {
    const PostprocessResult r = postprocess_prediction(prob, k, split_axis_for(k));
    auto dst = out.channel(k);
    for (const auto& m : r.masks) {
      const auto src = m.mask.volume().channel(0);
      for (std::size_t i = 0; i < dst.size(); ++i)
        if (src[i] != 0.0f) dst[i] = 1.0f;
    }
  }
  return SegmentationSet<float>(std::move(out), SegKind::binary);
}

struct MetricRow {
  int structure = 0;
  std::string pipeline, direction;
  double dice = 0, sc = 0, stcs = 0, kappa = 0, eps_volume = 0, eps_fa = 0, eps_md = 0;
};

struct PairMeasures {
  // [structure][kind] for kinds volume-ml, median-FA, median-MD
  std::vector<std::array<double, 3>> m_s, m_t;
};

struct EvalReport {
  std::vector<MetricRow> rows;  // means over test pairs
  std::vector<std::string> structures;
  std::vector<std::string> pipelines;
  // pipeline -> per forward pair measures
  std::map<std::string, std::vector<PairMeasures>> measures;
  // pipeline -> (mean endpoint error, mean |u_gt|) over forward pairs
  std::map<std::string, std::pair<double, double>> registration;
};

inline const char* const kMeasureKinds[3] = {"volume-ml", "median-FA", "median-MD"};

namespace detail {

struct DirectionOutputs {
  SegmentationSet<float> bin_s, bin_t;
  SamplingMap<float> map;
  DisplacementField<float> u;
};

inline DirectionOutputs infer_direction(const Pipeline& p, const SynthPair& pair, bool reverse) {
  const TrainSample<float> s = to_train_sample(pair, reverse);
  DirectionOutputs o;
  o.bin_s = postprocess_all(seg_forward(p.theta, s.seg_img_s));
  o.bin_t = postprocess_all(seg_forward(p.theta, target_seg_input(pair, reverse)));
  o.u = reg_forward(p.psi, s.img_t, affine_align(s.img_s, s.affine));
  o.map = compose(s.affine, o.u);
  return o;
}

inline double safe_error(const std::function<double()>& f) {
  try {
    return f();
  } catch (const DataError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

/// Tract measures, NaN when the predicted mask is empty.
inline TractMeasures safe_measures(const SegmentationSet<float>& seg, const Volume<float>& fa, const Volume<float>& md, int k) {
  try {
    return tract_measures(seg, fa, md, k);
  } catch (const DataError&) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    return {nan, nan, nan};
  }
}

}  // namespace detail

/// Runs both directions of every test pair through every pipeline.
inline EvalReport evaluate(const SynthDataset& ds, const std::vector<Pipeline>& pipelines, const EvalOptions& opt = {}) {
  if (ds.test.empty()) throw DataError("evaluation needs a non-empty test split");
  EvalReport rep;
  const int K = ds.spec.synth.structures;
  for (int k = 0; k < K; ++k) rep.structures.push_back("s" + std::to_string(k));
  for (const auto& p : pipelines) {
    rep.pipelines.push_back(p.name);
    std::vector<MetricRow> sums[2];
    for (int d = 0; d < 2; ++d) {
      sums[d].resize(K);
      for (int k = 0; k < K; ++k) sums[d][k] = {k, p.name, d == 0 ? "forward" : "reverse"};
    }
    double epe = 0.0, unorm = 0.0;
    for (const auto& id : ds.test) {
      const SynthPair& pair = ds.pair(id);
      const detail::DirectionOutputs fwd = detail::infer_direction(p, pair, false);
      const detail::DirectionOutputs rev = detail::infer_direction(p, pair, true);
      epe += mean_endpoint_error(fwd.u, pair.u_gt);
      unorm += mean_norm(pair.u_gt);
      PairMeasures pm;
      for (int d = 0; d < 2; ++d) {
        const detail::DirectionOutputs& a = d == 0 ? fwd : rev;
        const detail::DirectionOutputs& b = d == 0 ? rev : fwd;
        const Phantom& src = d == 0 ? pair.source : pair.target;
        const Phantom& tgt = d == 0 ? pair.target : pair.source;
        for (int k = 0; k < K; ++k) {
          MetricRow& r = sums[d][k];
          r.dice += dice_coefficient(a.bin_s, src.seg, k);
          r.sc += spatial_correlation(tgt.density.channels_slice(k, 1), trilinear_warp(src.density.channels_slice(k, 1), a.map),
                                      opt.sc_form);
          r.stcs += stcs(a.bin_t, a.bin_s, a.map, std::optional<SamplingMap<float>>(b.map), k);
          const SegmentationSet<float> t_only(a.bin_t.volume().channels_slice(k, 1), SegKind::binary);
          r.kappa += detail::safe_error([&] { return cohens_kappa(t_only, warp_mask(a.bin_s, a.map, k), 0).kappa; });
          const TractMeasures ms = detail::safe_measures(a.bin_s, src.fa, src.md, k);
          const TractMeasures mt = detail::safe_measures(a.bin_t, tgt.fa, tgt.md, k);
          r.eps_volume += detail::safe_error([&] { return measurement_error(ms.volume_ml, mt.volume_ml); });
          r.eps_fa += detail::safe_error([&] { return measurement_error(ms.median_fa, mt.median_fa); });
          r.eps_md += detail::safe_error([&] { return measurement_error(ms.median_md, mt.median_md); });
          if (d == 0) {
            pm.m_s.push_back({ms.volume_ml, ms.median_fa, ms.median_md});
            pm.m_t.push_back({mt.volume_ml, mt.median_fa, mt.median_md});
          }
        }
      }
      rep.measures[p.name].push_back(std::move(pm));
    }
    const double n = static_cast<double>(ds.test.size());
    for (int d = 0; d < 2; ++d)
      for (auto r : sums[d]) {
        for (double* v : {&r.dice, &r.sc, &r.stcs, &r.kappa, &r.eps_volume, &r.eps_fa, &r.eps_md}) *v /= n;
        rep.rows.push_back(r);
      }
    rep.registration[p.name] = {epe / n, unorm / n};
  }
  return rep;
}

inline std::string metrics_csv(const EvalReport& rep) {
  std::ostringstream out;
  out << "structure,pipeline,direction,dice,sc,stcs,kappa,kappa_label,eps_volume_pct,eps_fa_pct,eps_md_pct\n";
  for (const auto& r : rep.rows)
    out << rep.structures[r.structure] << ',' << r.pipeline << ',' << r.direction << ',' << fmt_num(r.dice) << ','
        << fmt_num(r.sc) << ',' << fmt_num(r.stcs) << ',' << fmt_num(r.kappa) << ','
        << (std::isnan(r.kappa) ? "undefined" : kappa_label(r.kappa)) << ',' << fmt_num(r.eps_volume) << ','
        << fmt_num(r.eps_fa) << ',' << fmt_num(r.eps_md) << '\n';
  return out.str();
}

/// Relative sample size for every ordered pipeline pair; rho is the Pearson
/// correlation of the paired baseline/follow-up measures over test pairs and
/// sigma^2 the pooled variance of both sessions. Undefined cases print nan.
inline std::string samplesize_csv(const EvalReport& rep) {
  std::ostringstream out;
  out << "measure_kind,structure,pipeline_i,pipeline_j,P_pct\n";
  const auto stats = [&](const std::string& pipe, int k, int kind) {
    std::vector<double> a, b;
    for (const auto& pm : rep.measures.at(pipe)) {
      a.push_back(pm.m_s[k][kind]);
      b.push_back(pm.m_t[k][kind]);
    }
    return std::pair{detail::safe_error([&] { return pooled_variance(a, b); }), detail::safe_error([&] { return pearson(a, b); })};
  };
  for (int kind = 0; kind < 3; ++kind)
    for (std::size_t k = 0; k < rep.structures.size(); ++k)
      for (const auto& pi : rep.pipelines)
        for (const auto& pj : rep.pipelines) {
          const auto [vi, ri] = stats(pi, static_cast<int>(k), kind);
          const auto [vj, rj] = stats(pj, static_cast<int>(k), kind);
          const double P = detail::safe_error([&] { return sample_size_percentage({vi, vj, ri, rj}); });
          out << kMeasureKinds[kind] << ',' << rep.structures[k] << ',' << pi << ',' << pj << ','
              << (std::isnan(P) ? std::string("nan") : fmt_num(P)) << '\n';
        }
  return out.str();
}

/// Joint versus independent STCS and kappa per structure (both directions
/// averaged), with the winner of each metric.
inline std::string comparison_csv(const EvalReport& rep, const std::string& a, const std::string& b) {
  std::ostringstream out;
  out << "structure,stcs_" << a << ",stcs_" << b << ",stcs_winner,kappa_" << a << ",kappa_" << b << ",kappa_winner\n";
  const auto mean = [&](const std::string& pipe, std::size_t k, double MetricRow::*field) {
    double s = 0;
    int n = 0;
    for (const auto& r : rep.rows)
      if (r.pipeline == pipe && static_cast<std::size_t>(r.structure) == k) {
        s += r.*field;
        ++n;
      }
    if (n == 0) throw DataError("comparison: pipeline '" + pipe + "' not evaluated");
    return s / n;
  };
  const auto winner = [&](double x, double y) { return x > y ? a : y > x ? b : std::string("tie"); };
  for (std::size_t k = 0; k < rep.structures.size(); ++k) {
    const double sa = mean(a, k, &MetricRow::stcs), sb = mean(b, k, &MetricRow::stcs);
    const double ka = mean(a, k, &MetricRow::kappa), kb = mean(b, k, &MetricRow::kappa);
    out << rep.structures[k] << ',' << fmt_num(sa) << ',' << fmt_num(sb) << ',' << winner(sa, sb) << ',' << fmt_num(ka) << ','
        << fmt_num(kb) << ',' << winner(ka, kb) << '\n';
  }
  return out.str();
}

inline std::string registration_csv(const EvalReport& rep) {
  std::ostringstream out;
  out << "pipeline,mean_epe_vox,mean_u_gt_norm_vox,epe_ratio\n";
  for (const auto& p : rep.pipelines) {
    const auto [e, u] = rep.registration.at(p);
    out << p << ',' << fmt_num(e) << ',' << fmt_num(u) << ',' << fmt_num(u > 0 ? e / u : std::numeric_limits<double>::quiet_NaN())
        << '\n';
  }
  return out.str();
}

}  // namespace segis
