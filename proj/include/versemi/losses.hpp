#pragma once

// Training objectives. compute_losses() is the single engine used both for
// reporting (grads == nullptr) and for the optimizer step, so the reported
// numbers always match what is optimized.

#include <cmath>
#include <optional>
#include <vector>

#include "versemi/mixer.hpp"
#include "versemi/model.hpp"
#include "versemi/parallel.hpp"

namespace versemi {

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kCeClamp = 1e-7;

struct LossFlags {
  bool detach_aggregate = true;   // aggregated prediction acts as a fixed pseudo-target
  bool literal_aux_target = false;  // full y_k instead of the cut-restricted target
  double w_lab = 1.0, w_aux = 1.0, w_unsup = 1.0;
};

struct LossReport {
  double l_lab = 0.0, l_aux = 0.0, l_sup = 0.0, l_unsup = 0.0, l_total = 0.0;
  std::vector<std::pair<int, double>> per_task_lab;  // mean labeled-term loss by task index
};

// ---------------------------------------------------------------------------
// pure numeric layer

template <class S>
S soft_dice_loss(const nn::ArrX<S>& p_fg, const nn::ArrX<S>& target,
                 S smooth = S(kDiceSmooth)) {
  require(p_fg.size() == target.size(), ErrorCode::invalid_argument,
          "soft_dice_loss: size mismatch");
  const double num = 2.0 * (p_fg.template cast<double>() * target.template cast<double>()).sum() +
                     static_cast<double>(smooth);
  const double den = p_fg.template cast<double>().sum() + target.template cast<double>().sum() +
                     static_cast<double>(smooth);
  return static_cast<S>(1.0 - num / den);
}

template <class S>
S soft_dice_loss(const nn::ArrX<S>& p_fg, const BinaryMask& y, S smooth = S(kDiceSmooth)) {
  require(p_fg.size() == y.size(), ErrorCode::invalid_argument, "soft_dice_loss: size mismatch");
  nn::ArrX<S> t = y.data.template cast<S>();
  return soft_dice_loss(p_fg, t, smooth);
}

// mean over voxels of -log(p[class == y]), probabilities clamped from below
template <class S>
S cross_entropy_loss(const nn::Tensor4<S>& probs, const BinaryMask& y, S eps = S(kCeClamp)) {
  require(probs.c == 2, ErrorCode::invalid_argument, "cross_entropy_loss: need 2 channels");
  const std::int64_t n = probs.spatial();
  require(n == y.size(), ErrorCode::invalid_argument, "cross_entropy_loss: size mismatch");
  const S* p0 = probs.v.data();
  const S* p1 = probs.v.data() + n;
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const S p = y.data[i] ? p1[i] : p0[i];
    acc -= std::log(static_cast<double>(std::max(p, eps)));
  }
  return static_cast<S>(acc / static_cast<double>(n));
}

// voxel-wise maximum of foreground probability maps
template <class S>
nn::ArrX<S> aggregate_predictions(const std::vector<nn::ArrX<S>>& fg_maps) {
  require(!fg_maps.empty(), ErrorCode::invalid_argument, "aggregate_predictions: empty list");
  nn::ArrX<S> out = fg_maps[0];
  for (std::size_t k = 1; k < fg_maps.size(); ++k) {
    require(fg_maps[k].size() == out.size(), ErrorCode::invalid_argument,
            "aggregate_predictions: size mismatch");
    out = out.max(fg_maps[k]);
  }
  return out;
}

// soft Dice discrepancy against a fixed target (no gradient into the target)
template <class S>
S unsupervised_loss(const nn::ArrX<S>& p_agg, const nn::ArrX<S>& p_syn) {
  return soft_dice_loss(p_syn, p_agg);
}

// ---------------------------------------------------------------------------
// logit-level losses with gradients

namespace detail_loss {

// Returns dice+ce; when glogits != nullptr accumulates scale * d(dice+ce)/dlogits.
template <class S>
S dice_ce_on_logits(const nn::Tensor4<S>& logits, const BinaryMask& y, nn::Tensor4<S>* glogits,
                    S scale) {
  const std::int64_t n = logits.spatial();
  nn::Tensor4<S> probs;
  nn::softmax2(logits, probs);
  const S* p1 = probs.v.data() + n;
  // dice sums
  double sum_p = 0.0, sum_y = 0.0, sum_py = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    sum_p += p1[i];
    if (y.data[i]) {
      sum_y += 1.0;
      sum_py += p1[i];
    }
  }
  const double A = 2.0 * sum_py + kDiceSmooth;
  const double B = sum_p + sum_y + kDiceSmooth;
  const double dice = 1.0 - A / B;
  const S ce = cross_entropy_loss(probs, y);
  if (glogits != nullptr) {
    const S* p0 = probs.v.data();
    S* g0 = glogits->v.data();
    S* g1 = glogits->v.data() + n;
    const double invB2 = 1.0 / (B * B);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const double yv = y.data[i] ? 1.0 : 0.0;
      // d dice / d p1
      const double ddice_dp = -(2.0 * yv * B - A) * invB2;
      // d ce / d l1 = (p1 - y)/n ; dice routes through the softmax jacobian
      const double dl1 = ddice_dp * p1[i] * p0[i] + (p1[i] - yv) * inv_n;
      g1[i] += scale * static_cast<S>(dl1);
      g0[i] -= scale * static_cast<S>(dl1);
    }
  }
  return static_cast<S>(dice) + ce;
}

// Soft-Dice between the foreground softmax and a fixed soft target.
template <class S>
S soft_dice_on_logits(const nn::Tensor4<S>& logits, const nn::ArrX<S>& target,
                      nn::Tensor4<S>* glogits, S scale) {
  const std::int64_t n = logits.spatial();
  nn::Tensor4<S> probs;
  nn::softmax2(logits, probs);
  const S* p1 = probs.v.data() + n;
  const S* p0 = probs.v.data();
  double sum_p = 0.0, sum_t = 0.0, sum_pt = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    sum_p += p1[i];
    sum_t += target[i];
    sum_pt += static_cast<double>(p1[i]) * target[i];
  }
  const double A = 2.0 * sum_pt + kDiceSmooth;
  const double B = sum_p + sum_t + kDiceSmooth;
  if (glogits != nullptr) {
    S* g0 = glogits->v.data();
    S* g1 = glogits->v.data() + n;
    const double invB2 = 1.0 / (B * B);
    for (std::int64_t i = 0; i < n; ++i) {
      const double ddice_dp = -(2.0 * target[i] * B - A) * invB2;
      const double dl1 = ddice_dp * p1[i] * p0[i];
      g1[i] += scale * static_cast<S>(dl1);
      g0[i] -= scale * static_cast<S>(dl1);
    }
  }
  return static_cast<S>(1.0 - A / B);
}

}  // namespace detail_loss

// ---------------------------------------------------------------------------
// step batches

struct LabeledSample {
  Volume x;
  BinaryMask y;
  int task_index = 0;
};

struct SyntheticSample {
  Volume x;
  BinaryMask y_union;
  BinaryMask y_i, y_j;  // source labels, patch-aligned
  int task_i = 0, task_j = 0;
  CutMask cut;
};

struct UnlabeledSample {
  Volume x;
};

struct StepBatch {
  std::vector<LabeledSample> labeled;
  std::vector<SyntheticSample> synthetic;
  std::vector<UnlabeledSample> unlabeled;
};

// Per-thread workspaces and gradient buffers, reusable across steps.
template <class S>
struct LossContext {
  std::vector<typename SegNet<S>::Workspace> wss;
  std::vector<nn::ArrX<S>> tgrads;
};

// ---------------------------------------------------------------------------
// the engine

// unsup_weight multiplies the unsupervised term (ramp hook); grads may be null.
template <class S>
LossReport compute_losses(const ModelState<S>& st, const StepBatch& batch,
                          const LossFlags& flags, double unsup_weight, nn::ArrX<S>* grads,
                          int n_threads = 1, LossContext<S>* ctx = nullptr) {
  tune_allocator_once();
  const auto registry = st.registry();
  const int T = registry.pertinent_count();
  const int syn_slot = registry.synthetic_index();
  const SegNet<S> net(st.cfg);
  const auto hs = net.head_spec();

  const std::size_t n_lab = batch.labeled.size();
  const std::size_t n_syn = batch.synthetic.size();
  const std::size_t n_unl = batch.unlabeled.size();
  const std::size_t n_ls = n_lab + n_syn;
  require(n_ls > 0, ErrorCode::invalid_argument, "supervised batch is empty");
  const int n_units = static_cast<int>(n_lab + n_syn + n_unl);

  struct UnitOut {
    double lab = 0.0, aux = 0.0, unsup = 0.0;
    int lab_task = -1;
  };
  std::vector<UnitOut> outs(static_cast<std::size_t>(n_units));

  const bool with_grads = grads != nullptr;
  const int pool = std::max(1, n_threads);
  LossContext<S> local_ctx;
  LossContext<S>& C = ctx != nullptr ? *ctx : local_ctx;
  C.wss.resize(static_cast<std::size_t>(pool));
  auto& tgrads = C.tgrads;
  if (with_grads) {
    tgrads.resize(static_cast<std::size_t>(pool));
    for (auto& g : tgrads) {
      if (g.size() != st.params.size())
        g = nn::ArrX<S>::Zero(st.params.size());
      else
        g.setZero();
    }
  }
  auto& wss = C.wss;

  const S lab_scale = static_cast<S>(flags.w_lab / static_cast<double>(n_ls));
  const S aux_scale =
      n_syn > 0 ? static_cast<S>(0.5 * flags.w_aux / static_cast<double>(n_syn)) : S(0);
  const S unsup_scale =
      n_unl > 0 ? static_cast<S>(unsup_weight * flags.w_unsup / static_cast<double>(n_unl)) : S(0);

  parallel_for(n_units, pool, [&](int u, int tid) {
    auto& ws = wss[static_cast<std::size_t>(tid)];
    S* g = with_grads ? tgrads[static_cast<std::size_t>(tid)].data() : nullptr;
    const S* p = st.params.data();
    auto& out = outs[static_cast<std::size_t>(u)];

    const auto run_head = [&](int prompt_slot, nn::ArrX<S>& psi_in, nn::ArrX<S>& wk,
                              nn::Tensor4<S>& logits, nn::HeadCache<S>& hc) {
      net.psi_forward(p, ws.pooled, prompt_slot, psi_in, wk);
      nn::head_forward(hs, wk, net.features(ws), logits, hc);
    };
    const auto head_grad = [&](const nn::ArrX<S>& psi_in, const nn::ArrX<S>& wk,
                               const nn::Tensor4<S>& logits, const nn::HeadCache<S>& hc,
                               const nn::Tensor4<S>& glogits) {
      nn::ArrX<S> gwk = nn::ArrX<S>::Zero(hs.param_count());
      nn::head_backward(hs, wk, net.features(ws), hc, glogits, ws.gfD, gwk);
      net.psi_backward(p, psi_in, gwk, g, ws.gpooled);
    };

    if (u < static_cast<int>(n_lab)) {
      const auto& smp = batch.labeled[static_cast<std::size_t>(u)];
      net.forward_backbone(p, volume_to_tensor<S>(smp.x), ws);
      if (with_grads) net.begin_grad(ws);
      nn::ArrX<S> psi_in, wk;
      nn::Tensor4<S> logits;
      nn::HeadCache<S> hc;
      run_head(smp.task_index, psi_in, wk, logits, hc);
      nn::Tensor4<S> glog;
      if (with_grads) glog.zero(2, logits.d, logits.h, logits.w);
      out.lab = detail_loss::dice_ce_on_logits(logits, smp.y, with_grads ? &glog : nullptr,
                                               lab_scale);
      out.lab_task = smp.task_index;
      if (with_grads) {
        head_grad(psi_in, wk, logits, hc, glog);
        net.backbone_backward(p, ws, g);
      }
    } else if (u < static_cast<int>(n_lab + n_syn)) {
      const auto& smp = batch.synthetic[static_cast<std::size_t>(u) - n_lab];
      net.forward_backbone(p, volume_to_tensor<S>(smp.x), ws);
      if (with_grads) net.begin_grad(ws);
      // labeled term under the synthetic prompt
      {
        nn::ArrX<S> psi_in, wk;
        nn::Tensor4<S> logits;
        nn::HeadCache<S> hc;
        run_head(syn_slot, psi_in, wk, logits, hc);
        nn::Tensor4<S> glog;
        if (with_grads) glog.zero(2, logits.d, logits.h, logits.w);
        out.lab = detail_loss::dice_ce_on_logits(logits, smp.y_union,
                                                 with_grads ? &glog : nullptr, lab_scale);
        out.lab_task = syn_slot;
        if (with_grads) head_grad(psi_in, wk, logits, hc, glog);
      }
      // prompt-controllability terms under the two source prompts
      const BinaryMask ti = flags.literal_aux_target
                                ? smp.y_i
                                : restrict_label(smp.y_i, smp.cut, CutSide::kept);
      const BinaryMask tj = flags.literal_aux_target
                                ? smp.y_j
                                : restrict_label(smp.y_j, smp.cut, CutSide::complement);
      double aux_sum = 0.0;
      const std::pair<int, const BinaryMask*> sides[2] = {{smp.task_i, &ti}, {smp.task_j, &tj}};
      for (const auto& [task, target] : sides) {
        nn::ArrX<S> psi_in, wk;
        nn::Tensor4<S> logits;
        nn::HeadCache<S> hc;
        run_head(task, psi_in, wk, logits, hc);
        nn::Tensor4<S> glog;
        if (with_grads) glog.zero(2, logits.d, logits.h, logits.w);
        aux_sum += detail_loss::dice_ce_on_logits(logits, *target,
                                                  with_grads ? &glog : nullptr, aux_scale);
        if (with_grads) head_grad(psi_in, wk, logits, hc, glog);
      }
      out.aux = 0.5 * aux_sum;
      if (with_grads) net.backbone_backward(p, ws, g);
    } else {
      const auto& smp = batch.unlabeled[static_cast<std::size_t>(u) - n_lab - n_syn];
      net.forward_backbone(p, volume_to_tensor<S>(smp.x), ws);
      if (with_grads) net.begin_grad(ws);
      const std::int64_t n = net.features(ws).spatial();

      std::vector<nn::ArrX<S>> fg(static_cast<std::size_t>(T));
      std::vector<nn::ArrX<S>> psi_ins, wks;
      std::vector<nn::Tensor4<S>> logits_k;
      std::vector<nn::HeadCache<S>> hcs;
      const bool keep_task_caches = with_grads && !flags.detach_aggregate;
      if (keep_task_caches) {
        psi_ins.resize(static_cast<std::size_t>(T));
        wks.resize(static_cast<std::size_t>(T));
        logits_k.resize(static_cast<std::size_t>(T));
        hcs.resize(static_cast<std::size_t>(T));
      }
      for (int k = 1; k <= T; ++k) {
        nn::ArrX<S> psi_in, wk;
        nn::Tensor4<S> logits;
        nn::HeadCache<S> hc;
        run_head(k, psi_in, wk, logits, hc);
        nn::Tensor4<S> probs;
        nn::softmax2(logits, probs);
        fg[static_cast<std::size_t>(k - 1)] = probs.v.tail(n);
        if (keep_task_caches) {
          psi_ins[static_cast<std::size_t>(k - 1)] = std::move(psi_in);
          wks[static_cast<std::size_t>(k - 1)] = std::move(wk);
          logits_k[static_cast<std::size_t>(k - 1)] = std::move(logits);
          hcs[static_cast<std::size_t>(k - 1)] = std::move(hc);
        }
      }
      nn::ArrX<S> p_agg = aggregate_predictions(fg);

      nn::ArrX<S> psi_in, wk;
      nn::Tensor4<S> logits;
      nn::HeadCache<S> hc;
      run_head(syn_slot, psi_in, wk, logits, hc);
      nn::Tensor4<S> glog;
      if (with_grads) glog.zero(2, logits.d, logits.h, logits.w);
      out.unsup = detail_loss::soft_dice_on_logits(logits, p_agg, with_grads ? &glog : nullptr,
                                                   unsup_scale);
      if (with_grads) {
        head_grad(psi_in, wk, logits, hc, glog);
        if (!flags.detach_aggregate) {
          // symmetric flow: route d loss / d p_agg into the argmax branch
          nn::Tensor4<S> probs_syn;
          nn::softmax2(logits, probs_syn);
          const S* p1 = probs_syn.v.data() + n;
          double sum_p = 0.0, sum_t = 0.0, sum_pt = 0.0;
          for (std::int64_t i = 0; i < n; ++i) {
            sum_p += p1[i];
            sum_t += p_agg[i];
            sum_pt += static_cast<double>(p1[i]) * p_agg[i];
          }
          const double A = 2.0 * sum_pt + kDiceSmooth;
          const double B = sum_p + sum_t + kDiceSmooth;
          const double invB2 = 1.0 / (B * B);
          std::vector<nn::Tensor4<S>> glog_k(static_cast<std::size_t>(T));
          for (int k = 0; k < T; ++k)
            glog_k[static_cast<std::size_t>(k)].zero(2, logits.d, logits.h, logits.w);
          for (std::int64_t i = 0; i < n; ++i) {
            int arg = 0;
            for (int k = 1; k < T; ++k)
              if (fg[static_cast<std::size_t>(k)][i] > fg[static_cast<std::size_t>(arg)][i])
                arg = k;
            const double dloss_dt = -(2.0 * p1[i] * B - A) * invB2;
            const double pk = fg[static_cast<std::size_t>(arg)][i];
            const double dl1 = dloss_dt * pk * (1.0 - pk);
            auto& gk = glog_k[static_cast<std::size_t>(arg)];
            gk.v[n + i] += unsup_scale * static_cast<S>(dl1);
            gk.v[i] -= unsup_scale * static_cast<S>(dl1);
          }
          for (int k = 0; k < T; ++k)
            head_grad(psi_ins[static_cast<std::size_t>(k)], wks[static_cast<std::size_t>(k)],
                      logits_k[static_cast<std::size_t>(k)], hcs[static_cast<std::size_t>(k)],
                      glog_k[static_cast<std::size_t>(k)]);
        }
        net.backbone_backward(p, ws, g);
      }
    }
  });

  if (with_grads) {
    grads->setZero(st.params.size());
    for (const auto& tg : tgrads) *grads += tg;
  }

  LossReport rep;
  std::vector<std::pair<int, std::pair<double, int>>> per_task;
  double lab_sum = 0.0, aux_sum = 0.0, unsup_sum = 0.0;
  for (const auto& o : outs) {
    lab_sum += o.lab;
    aux_sum += o.aux;
    unsup_sum += o.unsup;
    if (o.lab_task > 0) {
      bool found = false;
      for (auto& [k, acc] : per_task)
        if (k == o.lab_task) {
          acc.first += o.lab;
          acc.second += 1;
          found = true;
        }
      if (!found) per_task.push_back({o.lab_task, {o.lab, 1}});
    }
  }
  rep.l_lab = lab_sum / static_cast<double>(n_ls);
  rep.l_aux = n_syn > 0 ? aux_sum / static_cast<double>(n_syn) : 0.0;
  rep.l_sup = rep.l_lab + rep.l_aux;
  rep.l_unsup = n_unl > 0
                    ? unsup_weight * flags.w_unsup * unsup_sum / static_cast<double>(n_unl)
                    : 0.0;
  rep.l_total = flags.w_lab * rep.l_lab + flags.w_aux * rep.l_aux + rep.l_unsup;
  std::sort(per_task.begin(), per_task.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [k, acc] : per_task)
    rep.per_task_lab.emplace_back(k, acc.first / acc.second);
  return rep;
}

// ---------------------------------------------------------------------------
// spec-level wrappers (value only)

template <class S>
double supervised_labeled_loss(const ModelState<S>& st,
                               const std::vector<LabeledSample>& samples) {
  require(!samples.empty(), ErrorCode::invalid_argument,
          "supervised loss over an empty batch is undefined");
  StepBatch b;
  b.labeled = samples;
  return compute_losses(st, b, LossFlags{}, 0.0, static_cast<nn::ArrX<S>*>(nullptr)).l_lab;
}

template <class S>
double auxiliary_loss(const ModelState<S>& st, const SyntheticSample& mixed,
                      bool literal_target = false) {
  StepBatch b;
  b.synthetic.push_back(mixed);
  LossFlags flags;
  flags.literal_aux_target = literal_target;
  return compute_losses(st, b, flags, 0.0, static_cast<nn::ArrX<S>*>(nullptr)).l_aux;
}

template <class S>
LossReport total_loss(const ModelState<S>& st, const StepBatch& batch, const LossFlags& flags,
                      double unsup_weight = 1.0, int n_threads = 1) {
  return compute_losses(st, batch, flags, unsup_weight, static_cast<nn::ArrX<S>*>(nullptr),
                        n_threads);
}

}  // namespace versemi
